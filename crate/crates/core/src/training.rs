//! Supervised training of the insertion network, and the epoch loop shared
//! with the regression baseline.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqinsert_tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{LabeledVolume, Split};
use crate::encoder::PeMode;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_pairs, mean_error_mm, partner_pairs, InsertionLocalizer};
use crate::labels::KeySet;
use crate::losses::{emd_loss_graph, kl_loss_graph, LossKind};
use crate::model::{Dropout, InsertionModel, SequenceInput};
use crate::sampling::{choose_training_sample, SampledSequence};
use crate::supervision::{gaussian_target, gt_insertion_position, interpolate_scores, sigma_from_mm, InsertionTarget, PositionScoreMap};
use crate::volume::SliceSequence;

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.sqck";
pub const LAST_CHECKPOINT: &str = "last.sqck";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub pe: PeMode,
    pub max_slices: usize,
    pub pairs_per_epoch: usize,
    /// Probability that a pair is two samplings of the same volume.
    pub same_subject_prob: f64,
    /// Partners per validation volume when measuring validation error.
    pub val_partners: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            epochs: 100,
            lr: 1e-4,
            loss: LossKind::Kl,
            pe: PeMode::Absolute,
            max_slices: 256,
            pairs_per_epoch: 400,
            same_subject_prob: 0.2,
            val_partners: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.pairs_per_epoch == 0 {
            return Err(Error::Config("train.epochs and train.pairs_per_epoch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.max_slices < 2 {
            return Err(Error::Config("train.max_slices must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.same_subject_prob) {
            return Err(Error::Config("train.same_subject_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A training or validation volume resampled to the embedder size, with its
/// interpolated per-slice scores.
#[derive(Clone, Debug)]
pub struct PreparedVolume {
    pub volume: SliceSequence,
    pub labels: Vec<crate::labels::KeySliceLabel>,
    pub scores: PositionScoreMap,
}

/// Resamples and scores volumes for training. Test volumes are refused.
pub fn prepare_volumes(volumes: &[LabeledVolume], keys: &KeySet, height: usize, width: usize) -> Result<Vec<PreparedVolume>> {
    volumes
        .iter()
        .map(|v| {
            if v.split == Split::Test {
                return Err(Error::SplitViolation(format!(
                    "test volume `{}` passed to training",
                    v.volume.volume_id
                )));
            }
            Ok(PreparedVolume {
                volume: v.volume.resize_area(height, width)?,
                labels: v.labels.clone(),
                scores: interpolate_scores(&v.labels, v.volume.len(), keys)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub query: SampledSequence,
    pub target: SampledSequence,
    /// One target per valid query position, over the `N + 2` grid.
    pub targets: Vec<InsertionTarget>,
}

/// Supervision for an already sampled pair.
pub fn pair_targets(
    query: &SampledSequence,
    query_scores: &PositionScoreMap,
    target: &SampledSequence,
    target_scores: &PositionScoreMap,
    sigma_mm: f64,
) -> Result<Vec<InsertionTarget>> {
    let ts = target_scores.gather(&target.index_map);
    let sigma = sigma_from_mm(sigma_mm, target.effective_spacing_mm);
    query_scores
        .gather(&query.index_map)
        .into_iter()
        .map(|qs| gaussian_target(gt_insertion_position(qs, &ts), sigma, ts.len() + 2))
        .collect()
}

/// Draws a pair: two different volumes, or with probability
/// `same_subject_prob` (or when only one volume exists) two samplings of one.
pub fn make_training_pair<R: Rng + ?Sized>(
    volumes: &[PreparedVolume],
    cfg: &TrainConfig,
    sigma_mm: f64,
    rng: &mut R,
) -> Result<TrainingPair> {
    if volumes.is_empty() {
        return Err(Error::Contract("no training volumes".into()));
    }
    let qi = rng.random_range(0..volumes.len());
    let ti = if volumes.len() == 1 || rng.random_bool(cfg.same_subject_prob) {
        qi
    } else {
        let j = rng.random_range(0..volumes.len() - 1);
        if j >= qi {
            j + 1
        } else {
            j
        }
    };
    let (qv, tv) = (&volumes[qi], &volumes[ti]);
    let query = choose_training_sample(&qv.volume, cfg.max_slices, rng);
    let target = choose_training_sample(&tv.volume, cfg.max_slices, rng);
    let targets = pair_targets(&query, &qv.scores, &target, &tv.scores, sigma_mm)?;
    Ok(TrainingPair { query, target, targets })
}

/// Loss of one pair on a fresh graph; returns the graph, loss node and bound
/// parameters so the caller can differentiate.
pub fn pair_loss(
    model: &InsertionModel,
    params: &ParamStore<f32>,
    pair: &TrainingPair,
    loss: LossKind,
    dropout: Option<Dropout<'_>>,
) -> Result<(Graph<f32>, seqinsert_tensor::Var, seqinsert_tensor::Bound)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let qi = SequenceInput::query(&pair.query, false);
    let ti = SequenceInput::target(&pair.target, false);
    let probs = model.forward(&mut g, &p, &qi, &ti, dropout)?;
    let m = pair.targets.len();
    let cols = pair.target.n_valid() + 2;
    let data: Vec<f32> = pair.targets.iter().flat_map(|t| t.probs.iter().map(|&v| v as f32)).collect();
    let targets = Tensor::new(vec![m, cols], data)?;
    let l = match loss {
        LossKind::Kl => kl_loss_graph(&mut g, probs, &targets, m)?,
        LossKind::Emd => emd_loss_graph(&mut g, probs, &targets, &vec![1.0; m])?,
    };
    Ok((g, l, p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error_mm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// One model under training, as seen by [`fit`].
pub(crate) trait Learner {
    fn params(&self) -> &ParamStore<f32>;
    fn optimizer(&self) -> &AdamState<f32>;
    /// Runs one epoch and returns the mean training loss.
    fn train_epoch(&mut self) -> Result<f64>;
    fn validation_error(&self) -> Result<f64>;
}

fn metrics_line(m: &EpochMetrics) -> String {
    format!("{},{},{}\n", m.epoch, m.train_loss, m.val_error_mm)
}

/// Runs the epoch loop: logs metrics, keeps the checkpoint with the lowest
/// validation error (earliest on ties) and the last one. With `out`, files
/// are written as training progresses, so a numeric abort leaves the best
/// checkpoint so far on disk.
pub(crate) fn fit(learner: &mut impl Learner, epochs: usize, cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let fingerprint = cfg.fingerprint();
    let config_json = cfg.canonical_json();
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(b"epoch,train_loss,val_error_mm\n").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let snapshot = |learner: &dyn Learner, epoch: usize, val: f64| Checkpoint {
        fingerprint,
        epoch: epoch as u32,
        val_metric: val,
        config_json: config_json.clone(),
        params: learner.params().clone(),
        optimizer: Some(learner.optimizer().clone()),
    };
    let mut metrics = Vec::with_capacity(epochs);
    let mut best: Option<Checkpoint> = None;
    let mut last = None;
    for epoch in 1..=epochs {
        let train_loss = learner.train_epoch()?;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let val_error_mm = learner.validation_error()?;
        let m = EpochMetrics {
            epoch,
            train_loss,
            val_error_mm,
        };
        log::info!("epoch {epoch}: train_loss {train_loss:.6} val_error_mm {val_error_mm:.4}");
        if let Some((f, path)) = log.as_mut() {
            f.write_all(metrics_line(&m).as_bytes()).map_err(|e| Error::io(&*path, e))?;
            f.flush().map_err(|e| Error::io(&*path, e))?;
        }
        metrics.push(m);
        let ckpt = snapshot(learner, epoch, val_error_mm);
        let improved = match &best {
            None => true,
            Some(b) => val_error_mm < b.val_metric || (b.val_metric.is_nan() && !val_error_mm.is_nan()),
        };
        if let Some(dir) = out {
            if improved {
                save_checkpoint(&ckpt, &dir.join(BEST_CHECKPOINT))?;
            }
            save_checkpoint(&ckpt, &dir.join(LAST_CHECKPOINT))?;
        }
        if improved {
            best = Some(ckpt.clone());
        }
        last = Some(ckpt);
    }
    Ok(TrainOutcome {
        metrics,
        best: best.expect("at least one epoch"),
        last: last.expect("at least one epoch"),
    })
}

struct InsertionLearner<'a> {
    model: InsertionModel,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    train: Vec<PreparedVolume>,
    val: &'a [LabeledVolume],
    cfg: &'a RunConfig,
    keys: KeySet,
}

impl Learner for InsertionLearner<'_> {
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn optimizer(&self) -> &AdamState<f32> {
        &self.adam
    }

    fn train_epoch(&mut self) -> Result<f64> {
        let tc = &self.cfg.train;
        let mut total = 0.0;
        for _ in 0..tc.pairs_per_epoch {
            let pair = make_training_pair(&self.train, tc, self.cfg.supervision.sigma_mm, &mut self.rng)?;
            let dropout = (self.cfg.model.dropout > 0.0).then_some(Dropout {
                rate: self.cfg.model.dropout,
                rng: &mut self.rng,
            });
            let (mut g, loss, bound) = pair_loss(&self.model, &self.params, &pair, tc.loss, dropout)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Ok(f64::NAN);
            }
            total += value;
            g.backward(loss)?;
            self.adam.step(&mut self.params, &bound.grads(&g))?;
        }
        Ok(total / tc.pairs_per_epoch as f64)
    }

    fn validation_error(&self) -> Result<f64> {
        let loc = InsertionLocalizer {
            model: &self.model,
            params: &self.params,
            max_slices: self.cfg.train.max_slices,
        };
        let pairs = partner_pairs(self.val.len(), self.cfg.train.val_partners, self.cfg.eval.seed);
        let results = evaluate_pairs(&loc, self.val, &pairs, &self.keys)?;
        Ok(mean_error_mm(&results))
    }
}

pub fn build_model(cfg: &RunConfig) -> Result<InsertionModel> {
    InsertionModel::new(cfg.model.clone(), cfg.embedder.clone(), cfg.train.pe)
}

/// Trains the insertion network on `train`, selecting the epoch with the
/// lowest validation error on `val`. Test volumes in either set are refused.
pub fn train(train: &[LabeledVolume], val: &[LabeledVolume], cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(v) = val.iter().find(|v| v.split == Split::Test) {
        return Err(Error::SplitViolation(format!(
            "test volume `{}` passed as validation data",
            v.volume.volume_id
        )));
    }
    let keys = cfg.supervision.key_set()?;
    let model = build_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let params = model.init_params(&mut rng);
    let adam = AdamState::new(
        AdamConfig {
            lr: cfg.train.lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let emb = &cfg.embedder;
    let mut learner = InsertionLearner {
        train: prepare_volumes(train, &keys, emb.height, emb.width)?,
        model,
        params,
        adam,
        rng,
        val,
        cfg,
        keys,
    };
    fit(&mut learner, cfg.train.epochs, cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted {
        params: ParamStore<f32>,
        adam: AdamState<f32>,
        losses: Vec<f64>,
        vals: Vec<f64>,
        epoch: usize,
    }

    impl Scripted {
        fn new(losses: Vec<f64>, vals: Vec<f64>) -> Self {
            let mut params = ParamStore::new();
            params.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap());
            let adam = AdamState::new(AdamConfig::default(), &params);
            Self { params, adam, losses, vals, epoch: 0 }
        }
    }

    impl Learner for Scripted {
        fn params(&self) -> &ParamStore<f32> {
            &self.params
        }

        fn optimizer(&self) -> &AdamState<f32> {
            &self.adam
        }

        fn train_epoch(&mut self) -> Result<f64> {
            self.epoch += 1;
            self.params.insert("w", Tensor::new(vec![1], vec![self.epoch as f32]).unwrap());
            Ok(self.losses[self.epoch - 1])
        }

        fn validation_error(&self) -> Result<f64> {
            Ok(self.vals[self.epoch - 1])
        }
    }

    #[test]
    fn nan_loss_aborts_and_keeps_best_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = Scripted::new(vec![1.0, 0.5, f64::NAN], vec![3.0, 2.0, 1.0]);
        let err = fit(&mut l, 3, &RunConfig::default(), Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 3 }));
        let best = crate::checkpoint::load_checkpoint(&dir.path().join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(best.epoch, 2);
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn best_is_earliest_strict_minimum() {
        let mut l = Scripted::new(vec![1.0; 4], vec![3.0, 2.0, 2.0, 2.5]);
        let out = fit(&mut l, 4, &RunConfig::default(), None).unwrap();
        assert_eq!(out.best.epoch, 2);
        assert_eq!(out.best.params.get("w").unwrap().data(), &[2.0]);
        assert_eq!(out.last.epoch, 4);
    }
}
