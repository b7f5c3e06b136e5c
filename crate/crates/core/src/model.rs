//! The insertion network: shared slice embedder, self-attention encoder,
//! query-to-target cross-attention, final query/key projections and the
//! masked-softmax insertion head.

use std::fmt;

use rand::Rng;
use seqinsert_tensor::init::kaiming_uniform;
use seqinsert_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{make_boundary_slices, pe_table, Embedder, EmbedderConfig, PeMode};
use crate::error::{Error, Result};
use crate::sampling::{uniform_sample, SampledSequence};
use crate::volume::SliceSequence;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub self_layers: usize,
    pub cross_layers: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            self_layers: 2,
            cross_layers: 2,
            heads: 8,
            ffn_multiplier: 4,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d ({}) must be a positive multiple of model.heads ({})",
                self.d, self.heads
            )));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("model.d must be even, got {}", self.d)));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::Config("model.ffn_multiplier must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Where a query slice belongs in the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InsertionPosition {
    BeforeStart,
    /// Original slice index in the target volume.
    Slice(usize),
    AfterEnd,
}

impl fmt::Display for InsertionPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InsertionPosition::BeforeStart => f.write_str("BEFORE_START"),
            InsertionPosition::Slice(i) => write!(f, "{i}"),
            InsertionPosition::AfterEnd => f.write_str("AFTER_END"),
        }
    }
}

impl std::str::FromStr for InsertionPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BEFORE_START" => Ok(Self::BeforeStart),
            "AFTER_END" => Ok(Self::AfterEnd),
            _ => s
                .parse()
                .map(Self::Slice)
                .map_err(|_| Error::Malformed(format!("bad insertion position `{s}`"))),
        }
    }
}

/// Maps a column of the `N + 2` insertion grid to a position.
pub fn column_position(col: usize, target_index_map: &[usize]) -> InsertionPosition {
    let n = target_index_map.len();
    if col == 0 {
        InsertionPosition::BeforeStart
    } else if col > n {
        InsertionPosition::AfterEnd
    } else {
        InsertionPosition::Slice(target_index_map[col - 1])
    }
}

/// One sequence ready for the network.
#[derive(Clone, Debug)]
pub struct SequenceInput<T> {
    /// `[B, 1, H, W]`.
    pub slices: Tensor<T>,
    pub mask: Vec<bool>,
    /// Index positions fed to the positional encoding (before spacing scaling).
    pub positions: Vec<f64>,
    pub spacing_mm: f64,
}

fn to_input<T: Scalar>(rows: Vec<&[f32]>, mask: Vec<bool>, positions: Vec<f64>, h: usize, w: usize, spacing: f64) -> SequenceInput<T> {
    let b = rows.len();
    let data: Vec<T> = rows.into_iter().flatten().map(|&v| T::from_f64c(v as f64)).collect();
    SequenceInput {
        slices: Tensor::new(vec![b, 1, h, w], data).expect("slice rows match shape"),
        mask,
        positions,
        spacing_mm: spacing,
    }
}

impl<T: Scalar> SequenceInput<T> {
    /// Query side. With `keep_padding` all `max_slices` positions are kept
    /// (padding masked); otherwise only valid positions.
    pub fn query(s: &SampledSequence, keep_padding: bool) -> Self {
        let count = if keep_padding { s.max_slices() } else { s.n_valid() };
        let rows = (0..count).map(|i| s.slice(i)).collect();
        let mask = s.valid_mask[..count].to_vec();
        let positions = (0..count).map(|i| i as f64).collect();
        to_input(rows, mask, positions, s.height, s.width, s.effective_spacing_mm)
    }

    /// Target side, laid out as `[start, slice_0 .. slice_{N-1}, end, padding..]`.
    /// The boundaries sit at encoded positions −1 and N and are never masked.
    pub fn target(s: &SampledSequence, keep_padding: bool) -> Self {
        let n = s.n_valid();
        let (start, end) = make_boundary_slices(s.height, s.width);
        let mut rows: Vec<&[f32]> = vec![&start];
        rows.extend((0..n).map(|i| s.slice(i)));
        rows.push(&end);
        let mut mask = vec![true; n + 2];
        let mut positions: Vec<f64> = (-1..=n as i64).map(|p| p as f64).collect();
        if keep_padding {
            for i in n..s.max_slices() {
                rows.push(s.slice(i));
                mask.push(false);
                positions.push((i + 1) as f64);
            }
        }
        to_input(rows, mask, positions, s.height, s.width, s.effective_spacing_mm)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Row-stochastic insertion probabilities, one row per valid query slice,
/// columns laid out as the target input (`N + 2` live columns, then zeroed
/// padding columns).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub probs: Tensor<f32>,
    pub query_index_map: Vec<usize>,
    pub target_index_map: Vec<usize>,
}

impl AttentionMap {
    pub fn rows(&self) -> usize {
        self.probs.shape()[0]
    }

    /// `N + 2`.
    pub fn n_positions(&self) -> usize {
        self.target_index_map.len() + 2
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.probs.row(i)
    }

    /// The `N + 2` live columns of row `i`.
    pub fn live_row(&self, i: usize) -> &[f32] {
        &self.probs.row(i)[..self.n_positions()]
    }

    /// Column of the largest probability per row (lowest column on ties).
    pub fn argmax_columns(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.live_row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn positions(&self) -> Vec<InsertionPosition> {
        self.argmax_columns()
            .into_iter()
            .map(|c| column_position(c, &self.target_index_map))
            .collect()
    }
}

/// Architecture plus parameter naming; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct InsertionModel {
    cfg: ModelConfig,
    embedder: Embedder,
    pe: PeMode,
}

fn linear_params<R: Rng + ?Sized>(store: &mut ParamStore<f32>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert(format!("{name}.w"), kaiming_uniform(&[fan_in, fan_out], fan_in, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn norm_params(store: &mut ParamStore<f32>, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

/// Dropout masks for one forward pass; `None` disables dropout.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn rand::RngCore,
}

impl InsertionModel {
    pub fn new(cfg: ModelConfig, embedder: EmbedderConfig, pe: PeMode) -> Result<Self> {
        cfg.validate()?;
        let embedder = Embedder::new(embedder, cfg.d, "embed")?;
        Ok(Self { cfg, embedder, pe })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn pe_mode(&self) -> PeMode {
        self.pe
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let d = self.cfg.d;
        self.embedder.init_params(rng, &mut s);
        let blocks = (0..self.cfg.self_layers)
            .map(|l| format!("self.{l}"))
            .chain((0..self.cfg.cross_layers).map(|l| format!("cross.{l}")));
        for b in blocks {
            for proj in ["q", "k", "v", "o"] {
                linear_params(&mut s, &format!("{b}.attn.{proj}"), d, d, rng);
            }
            norm_params(&mut s, &format!("{b}.ln1"), d);
            linear_params(&mut s, &format!("{b}.ffn.1"), d, d * self.cfg.ffn_multiplier, rng);
            linear_params(&mut s, &format!("{b}.ffn.2"), d * self.cfg.ffn_multiplier, d, rng);
            norm_params(&mut s, &format!("{b}.ln2"), d);
        }
        linear_params(&mut s, "head.q", d, d, rng);
        linear_params(&mut s, "head.k", d, d, rng);
        s
    }

    fn linear<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.var(&format!("{name}.w"))?;
        let b = p.var(&format!("{name}.b"))?;
        Ok(g.linear(x, w, b)?)
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let gain = p.var(&format!("{name}.g"))?;
        let bias = p.var(&format!("{name}.b"))?;
        Ok(g.layer_norm(x, gain, bias, T::from_f64c(LAYER_NORM_EPS))?)
    }

    fn dropout<T: Scalar>(&self, g: &mut Graph<T>, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
        let Some(d) = drop.as_mut() else { return Ok(x) };
        if d.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64c(1.0 / (1.0 - d.rate));
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if d.rng.random_bool(d.rate) { T::zero() } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        Ok(g.mul(x, m)?)
    }

    /// Multi-head attention from `xq` rows to the unmasked rows of `xkv`.
    fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        block: &str,
        xq: Var,
        xkv: Var,
        key_mask: &[bool],
    ) -> Result<Var> {
        let q = self.linear(g, p, &format!("{block}.attn.q"), xq)?;
        let k = self.linear(g, p, &format!("{block}.attn.k"), xkv)?;
        let v = self.linear(g, p, &format!("{block}.attn.v"), xkv)?;
        let dh = self.cfg.d / self.cfg.heads;
        let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, Some(key_mask))?;
            heads.push(g.matmul(a, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.linear(g, p, &format!("{block}.attn.o"), cat)
    }

    /// Post-norm block: attention sublayer then feed-forward sublayer, each
    /// with a residual connection followed by layer normalization.
    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        block: &str,
        x: Var,
        ctx: Var,
        key_mask: &[bool],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let a = self.attention(g, p, block, x, ctx, key_mask)?;
        let a = self.dropout(g, a, drop)?;
        let x = g.add(x, a)?;
        let x = self.norm(g, p, &format!("{block}.ln1"), x)?;
        let f = self.linear(g, p, &format!("{block}.ffn.1"), x)?;
        let f = g.relu(f);
        let f = self.linear(g, p, &format!("{block}.ffn.2"), f)?;
        let f = self.dropout(g, f, drop)?;
        let x = g.add(x, f)?;
        self.norm(g, p, &format!("{block}.ln2"), x)
    }

    /// Self-attention encoder over one sequence. Masked positions are never
    /// attended to; their own outputs are meaningless.
    pub fn self_encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        embeddings: Var,
        mask: &[bool],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let mut x = embeddings;
        for l in 0..self.cfg.self_layers {
            x = self.block(g, p, &format!("self.{l}"), x, x, mask, drop)?;
        }
        Ok(x)
    }

    /// Cross-attention layers from query rows to the unmasked target rows.
    pub fn cross_attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query_ctx: Var,
        target_ctx: Var,
        target_mask: &[bool],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let mut x = query_ctx;
        for l in 0..self.cfg.cross_layers {
            x = self.block(g, p, &format!("cross.{l}"), x, target_ctx, target_mask, drop)?;
        }
        Ok(x)
    }

    /// Final query and key projections.
    pub fn project_qk<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, query: Var, target: Var) -> Result<(Var, Var)> {
        let q = self.linear(g, p, "head.q", query)?;
        let k = self.linear(g, p, "head.k", target)?;
        Ok((q, k))
    }

    /// `softmax(Q Kᵀ / sqrt(d))` over unmasked target columns.
    pub fn insertion_distribution<T: Scalar>(&self, g: &mut Graph<T>, q: Var, k: Var, target_mask: &[bool]) -> Result<Var> {
        if !target_mask.iter().any(|&m| m) {
            return Err(Error::Contract("every target position is masked".into()));
        }
        let logits = g.matmul_bt(q, k)?;
        let logits = g.scale(logits, T::from_f64c(1.0 / (self.cfg.d as f64).sqrt()));
        Ok(g.softmax(logits, Some(target_mask))?)
    }

    fn embed_with_pe<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, s: &SequenceInput<T>) -> Result<Var> {
        let x = g.constant(s.slices.clone());
        let e = self.embedder.forward(g, p, x)?;
        let pe = pe_table(&s.positions, self.pe, s.spacing_mm, self.cfg.d)?;
        let pe = g.constant(pe);
        Ok(g.add(e, pe)?)
    }

    /// Full forward pass; returns insertion probabilities `[Bq, Bt]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: &SequenceInput<T>,
        target: &SequenceInput<T>,
        mut drop: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let eq = self.embed_with_pe(g, p, query)?;
        let et = self.embed_with_pe(g, p, target)?;
        let hq = self.self_encode(g, p, eq, &query.mask, &mut drop)?;
        let ht = self.self_encode(g, p, et, &target.mask, &mut drop)?;
        let hq = self.cross_attend(g, p, hq, ht, &target.mask, &mut drop)?;
        let (q, k) = self.project_qk(g, p, hq, ht)?;
        self.insertion_distribution(g, q, k, &target.mask)
    }

    /// Inference over a sampled pair, returning the map over valid query rows
    /// and padded to `max_slices + 2` target columns.
    pub fn attention_map(
        &self,
        params: &ParamStore<f32>,
        query: &SampledSequence,
        target: &SampledSequence,
    ) -> Result<AttentionMap> {
        let mut g = Graph::<f32>::new();
        let p = params.bind_frozen(&mut g);
        let qi = SequenceInput::query(query, false);
        let ti = SequenceInput::target(target, false);
        let probs = self.forward(&mut g, &p, &qi, &ti, None)?;
        let live = g.value(probs);
        let cols = target.max_slices() + 2;
        let (m, n2) = (live.shape()[0], live.shape()[1]);
        let mut data = vec![0.0f32; m * cols];
        for i in 0..m {
            data[i * cols..i * cols + n2].copy_from_slice(live.row(i));
        }
        Ok(AttentionMap {
            probs: Tensor::new(vec![m, cols], data)?,
            query_index_map: query.index_map.clone(),
            target_index_map: target.index_map.clone(),
        })
    }
}

/// Insertion result for a query/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub map: AttentionMap,
    pub positions: Vec<InsertionPosition>,
}

/// Uniformly samples both volumes, resamples slices to the embedder size if
/// needed, and predicts an insertion position for every sampled query slice.
pub fn predict_insertion(
    query: &SliceSequence,
    target: &SliceSequence,
    model: &InsertionModel,
    params: &ParamStore<f32>,
    max_slices: usize,
) -> Result<Prediction> {
    let cfg = model.embedder().config();
    let query = query.resize_area(cfg.height, cfg.width)?;
    let target = target.resize_area(cfg.height, cfg.width)?;
    let qs = uniform_sample(&query, max_slices);
    let ts = uniform_sample(&target, max_slices);
    let map = model.attention_map(params, &qs, &ts)?;
    let positions = map.positions();
    Ok(Prediction { map, positions })
}
