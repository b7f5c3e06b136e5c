//! Body part regression baseline: a context-free per-slice score regressor
//! and nearest-score localization.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqinsert_tensor::{AdamConfig, AdamState, Bound, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{LabeledVolume, Split};
use crate::encoder::Embedder;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_pairs, mean_error_mm, partner_pairs, Placement, SliceLocalizer};
use crate::labels::KeySet;
use crate::sampling::uniform_sample;
use crate::training::{fit, prepare_volumes, Learner, PreparedVolume, TrainOutcome};
use crate::volume::SliceSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BprConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub steps_per_epoch: usize,
    /// Slices per optimization step, drawn across training volumes.
    pub batch_slices: usize,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            epochs: 30,
            lr: 1e-4,
            steps_per_epoch: 100,
            batch_slices: 32,
        }
    }
}

impl BprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_slices == 0 {
            return Err(Error::Config("bpr.epochs, bpr.steps_per_epoch and bpr.batch_slices must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("bpr.lr must be positive".into()));
        }
        Ok(())
    }
}

/// Shared embedder followed by an affine map to one scalar. Scores are
/// learned divided by `scale` (the largest absolute key score).
#[derive(Clone, Debug)]
pub struct BprModel {
    embedder: Embedder,
    scale: f64,
}

impl BprModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let keys = cfg.supervision.key_set()?;
        let scale = keys.scores().iter().fold(0f64, |m, s| m.max(s.abs())).max(1.0);
        Ok(Self {
            embedder: Embedder::new(cfg.embedder.clone(), cfg.model.d, "embed")?,
            scale,
        })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        self.embedder.init_params(rng, &mut s);
        let d = self.embedder.dim();
        s.insert("head.w", seqinsert_tensor::init::kaiming_uniform(&[d, 1], d, rng));
        s.insert("head.b", Tensor::zeros(&[1]));
        s
    }

    /// Normalized scores `[B, 1]` for slices `[B, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound, slices: Var) -> Result<Var> {
        let e = self.embedder.forward(g, p, slices)?;
        Ok(g.linear(e, p.var("head.w")?, p.var("head.b")?)?)
    }

    /// Score of every given slice (each `H * W` values at the embedder size).
    pub fn predict(&self, params: &ParamStore<f32>, slices: &[&[f32]]) -> Result<Vec<f64>> {
        let cfg = self.embedder.config();
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let data: Vec<f32> = slices.iter().flat_map(|s| s.iter().copied()).collect();
        let x = g.constant(Tensor::new(vec![slices.len(), 1, cfg.height, cfg.width], data)?);
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).data().iter().map(|&v| v as f64 * self.scale).collect())
    }
}

/// Insertion column for a query score among target slice scores: nearest
/// score (lowest index on ties) offset by one, or a boundary when the score
/// lies beyond the extreme target scores by more than the mean gap between
/// consecutive target scores.
pub fn bpr_localize(query_score: f64, target_scores: &[f64]) -> usize {
    let n = target_scores.len();
    let min = target_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = target_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap = if n > 1 {
        target_scores.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    if query_score > max + gap {
        return n + 1;
    }
    if query_score < min - gap {
        return 0;
    }
    let mut best = 0;
    for (i, s) in target_scores.iter().enumerate() {
        if (query_score - s).abs() < (query_score - target_scores[best]).abs() {
            best = i;
        }
    }
    best + 1
}

pub struct BprLocalizer<'a> {
    pub model: &'a BprModel,
    pub params: &'a ParamStore<f32>,
    pub max_slices: usize,
}

impl SliceLocalizer for BprLocalizer<'_> {
    fn place(&self, query: &SliceSequence, target: &SliceSequence) -> Result<Placement> {
        let cfg = self.model.embedder.config();
        let query = query.resize_area(cfg.height, cfg.width)?;
        let target = target.resize_area(cfg.height, cfg.width)?;
        let qs = uniform_sample(&query, self.max_slices);
        let ts = uniform_sample(&target, self.max_slices);
        let q_rows: Vec<&[f32]> = (0..qs.n_valid()).map(|i| qs.slice(i)).collect();
        let t_rows: Vec<&[f32]> = (0..ts.n_valid()).map(|i| ts.slice(i)).collect();
        let q_scores = self.model.predict(self.params, &q_rows)?;
        let t_scores = self.model.predict(self.params, &t_rows)?;
        Ok(Placement {
            columns: q_scores.iter().map(|&s| bpr_localize(s, &t_scores)).collect(),
            query_index_map: qs.index_map,
            target_index_map: ts.index_map,
            target_spacing_mm: ts.effective_spacing_mm,
        })
    }
}

struct BprLearner<'a> {
    model: BprModel,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    train: Vec<PreparedVolume>,
    val: &'a [LabeledVolume],
    cfg: &'a RunConfig,
    keys: KeySet,
}

impl Learner for BprLearner<'_> {
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn optimizer(&self) -> &AdamState<f32> {
        &self.adam
    }

    fn train_epoch(&mut self) -> Result<f64> {
        let bc = &self.cfg.bpr;
        let ec = self.model.embedder.config();
        let mut total = 0.0;
        for _ in 0..bc.steps_per_epoch {
            let mut data = Vec::with_capacity(bc.batch_slices * ec.height * ec.width);
            let mut targets = Vec::with_capacity(bc.batch_slices);
            for _ in 0..bc.batch_slices {
                let v = &self.train[self.rng.random_range(0..self.train.len())];
                let i = self.rng.random_range(0..v.volume.len());
                data.extend_from_slice(v.volume.slice(i));
                targets.push((v.scores.scores[i] / self.model.scale) as f32);
            }
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let x = g.constant(Tensor::new(vec![bc.batch_slices, 1, ec.height, ec.width], data)?);
            let y = self.model.forward(&mut g, &p, x)?;
            let t = g.constant(Tensor::new(vec![bc.batch_slices, 1], targets)?);
            let diff = g.sub(y, t)?;
            let abs = g.abs(diff);
            let loss = g.mean(abs);
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Ok(f64::NAN);
            }
            total += value;
            g.backward(loss)?;
            self.adam.step(&mut self.params, &p.grads(&g))?;
        }
        Ok(total / bc.steps_per_epoch as f64)
    }

    fn validation_error(&self) -> Result<f64> {
        let loc = BprLocalizer {
            model: &self.model,
            params: &self.params,
            max_slices: self.cfg.train.max_slices,
        };
        let pairs = partner_pairs(self.val.len(), self.cfg.train.val_partners, self.cfg.eval.seed);
        Ok(mean_error_mm(&evaluate_pairs(&loc, self.val, &pairs, &self.keys)?))
    }
}

/// L1 regression of normalized interpolated scores; epoch selection by
/// validation localization error as for the insertion network.
pub fn bpr_train(train: &[LabeledVolume], val: &[LabeledVolume], cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(v) = val.iter().find(|v| v.split == Split::Test) {
        return Err(Error::SplitViolation(format!(
            "test volume `{}` passed as validation data",
            v.volume.volume_id
        )));
    }
    let keys = cfg.supervision.key_set()?;
    let model = BprModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.bpr.seed);
    let params = model.init_params(&mut rng);
    let adam = AdamState::new(
        AdamConfig {
            lr: cfg.bpr.lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let emb = &cfg.embedder;
    let mut learner = BprLearner {
        train: prepare_volumes(train, &keys, emb.height, emb.width)?,
        model,
        params,
        adam,
        rng,
        val,
        cfg,
        keys,
    };
    fit(&mut learner, cfg.bpr.epochs, cfg, out)
}
