//! Context-free slice embedding, artificial boundary slices and sinusoidal
//! positional encoding.

use rand::Rng;
use seqinsert_tensor::init::kaiming_uniform;
use seqinsert_tensor::{conv_out_dim, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::SampledSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Conv2dStack,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Slice size the network consumes; inputs are resampled to it at load.
    pub height: usize,
    pub width: usize,
    /// Channels of each stride-2, kernel-3 convolution.
    pub conv_channels: Vec<usize>,
    /// Hidden widths of the MLP variant.
    pub mlp_hidden: Vec<usize>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Conv2dStack,
            height: 32,
            width: 32,
            conv_channels: vec![8, 16, 32],
            mlp_hidden: vec![128],
        }
    }
}

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Per-slice encoder mapping `[B, 1, H, W]` to `[B, d]`.
#[derive(Clone, Debug)]
pub struct Embedder {
    cfg: EmbedderConfig,
    d: usize,
    prefix: String,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig, d: usize, prefix: &str) -> Result<Self> {
        if cfg.height == 0 || cfg.width == 0 || d == 0 {
            return Err(Error::Config("embedder dimensions must be positive".into()));
        }
        match cfg.kind {
            EmbedderKind::Conv2dStack => {
                if cfg.conv_channels.is_empty() {
                    return Err(Error::Config("embedder.conv_channels is empty".into()));
                }
                let (mut h, mut w) = (cfg.height, cfg.width);
                for _ in &cfg.conv_channels {
                    h = conv_out_dim(h, KERNEL, STRIDE, PAD).unwrap_or(0);
                    w = conv_out_dim(w, KERNEL, STRIDE, PAD).unwrap_or(0);
                    if h == 0 || w == 0 {
                        return Err(Error::Config("conv stack shrinks the slice to nothing".into()));
                    }
                }
            }
            EmbedderKind::Mlp => {
                if cfg.mlp_hidden.contains(&0) {
                    return Err(Error::Config("embedder.mlp_hidden has a zero width".into()));
                }
            }
        }
        Ok(Self {
            cfg,
            d,
            prefix: prefix.to_string(),
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore<f32>) {
        match self.cfg.kind {
            EmbedderKind::Conv2dStack => {
                let mut cin = 1;
                for (i, &cout) in self.cfg.conv_channels.iter().enumerate() {
                    let fan_in = cin * KERNEL * KERNEL;
                    store.insert(self.name(&format!("conv{i}.w")), kaiming_uniform(&[cout, cin, KERNEL, KERNEL], fan_in, rng));
                    store.insert(self.name(&format!("conv{i}.b")), Tensor::zeros(&[cout]));
                    cin = cout;
                }
                store.insert(self.name("out.w"), kaiming_uniform(&[cin, self.d], cin, rng));
                store.insert(self.name("out.b"), Tensor::zeros(&[self.d]));
            }
            EmbedderKind::Mlp => {
                let mut fan_in = self.cfg.height * self.cfg.width;
                for (i, &h) in self.cfg.mlp_hidden.iter().enumerate() {
                    store.insert(self.name(&format!("fc{i}.w")), kaiming_uniform(&[fan_in, h], fan_in, rng));
                    store.insert(self.name(&format!("fc{i}.b")), Tensor::zeros(&[h]));
                    fan_in = h;
                }
                store.insert(self.name("out.w"), kaiming_uniform(&[fan_in, self.d], fan_in, rng));
                store.insert(self.name("out.b"), Tensor::zeros(&[self.d]));
            }
        }
    }

    /// Embeds `slices` of shape `[B, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, slices: Var) -> Result<Var> {
        let shape = g.value(slices).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.cfg.height || shape[3] != self.cfg.width {
            return Err(Error::Contract(format!(
                "embedder expects [B, 1, {}, {}], got {shape:?}",
                self.cfg.height, self.cfg.width
            )));
        }
        let batch = shape[0];
        let mut x = slices;
        match self.cfg.kind {
            EmbedderKind::Conv2dStack => {
                for i in 0..self.cfg.conv_channels.len() {
                    let w = p.var(&self.name(&format!("conv{i}.w")))?;
                    let b = p.var(&self.name(&format!("conv{i}.b")))?;
                    x = g.conv2d(x, w, b, STRIDE, PAD)?;
                    x = g.relu(x);
                }
                x = g.avg_pool(x)?;
            }
            EmbedderKind::Mlp => {
                x = g.reshape(x, &[batch, self.cfg.height * self.cfg.width])?;
                for i in 0..self.cfg.mlp_hidden.len() {
                    let w = p.var(&self.name(&format!("fc{i}.w")))?;
                    let b = p.var(&self.name(&format!("fc{i}.b")))?;
                    x = g.linear(x, w, b)?;
                    x = g.relu(x);
                }
            }
        }
        let (w, b) = (p.var(&self.name("out.w"))?, p.var(&self.name("out.b"))?);
        Ok(g.linear(x, w, b)?)
    }

    /// Embeds every position of a sampled sequence, padding included:
    /// `[max_slices, d]`.
    pub fn embed_sampled<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, sampled: &SampledSequence) -> Result<Var> {
        if sampled.height != self.cfg.height || sampled.width != self.cfg.width {
            return Err(Error::Contract(format!(
                "slice size {}x{} does not match embedder {}x{}",
                sampled.height, sampled.width, self.cfg.height, self.cfg.width
            )));
        }
        let data: Vec<T> = sampled.slices.iter().map(|&v| T::from_f64c(v as f64)).collect();
        let t = Tensor::new(vec![sampled.max_slices(), 1, sampled.height, sampled.width], data)?;
        let x = g.constant(t);
        self.forward(g, p, x)
    }
}

/// The artificial start (all +1) and end (all −1) slices.
pub fn make_boundary_slices(height: usize, width: usize) -> (Vec<f32>, Vec<f32>) {
    (vec![1.0; height * width], vec![-1.0; height * width])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    /// Position is the natural slice index.
    #[default]
    Absolute,
    /// Position is the slice index scaled by the effective spacing in mm.
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PeConfig {
    pub mode: PeMode,
}

/// Sinusoidal encoding: `sin(pos / 10000^(k/d))` at even `k`,
/// `cos(pos / 10000^((k-1)/d))` at odd `k`.
pub fn positional_encoding(pos: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs an even dimension, got {d}")));
    }
    Ok((0..d)
        .map(|k| {
            let even = k - k % 2;
            let angle = pos / 10000f64.powf(even as f64 / d as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect())
}

/// Encoded positions for a sequence of index positions, `[len, d]`.
pub fn pe_table<T: Scalar>(positions: &[f64], mode: PeMode, spacing_mm: f64, d: usize) -> Result<Tensor<T>> {
    let scale = match mode {
        PeMode::Absolute => 1.0,
        PeMode::Relative => spacing_mm,
    };
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        data.extend(positional_encoding(p * scale, d)?.into_iter().map(T::from_f64c));
    }
    Ok(Tensor::new(vec![positions.len(), d], data)?)
}

/// Adds the encoding of positions `0..` to `embeddings` (`[len, d]`).
pub fn apply_pe<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    mode: PeMode,
    sampled: &SampledSequence,
) -> Result<Var> {
    let shape = g.value(embeddings).shape().to_vec();
    let positions: Vec<f64> = (0..shape[0]).map(|i| i as f64).collect();
    let pe = pe_table(&positions, mode, sampled.effective_spacing_mm, shape[1])?;
    let pe = g.constant(pe);
    Ok(g.add(embeddings, pe)?)
}
