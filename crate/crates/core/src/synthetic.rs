//! Synthetic slice sequences with exactly known anatomy.
//!
//! Each subject has a strictly increasing piecewise-linear warp from the
//! canonical score axis `[0, 100]` to physical position. A volume is a crop
//! of that axis sampled at a subject-specific spacing; each slice shows a
//! horizontal band whose vertical placement and thickness grow with the
//! slice's canonical score, over a per-subject texture, plus pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{KeySet, KeySliceLabel};
use crate::volume::{SliceSequence, Source};

pub const SCORE_MAX: f64 = 100.0;
const MAX_FOV_RETRIES: usize = 1000;
const BACKGROUND: f64 = -0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub height: usize,
    pub width: usize,
    /// Mean physical extent of one canonical score unit, mm.
    pub mm_per_score: f64,
    /// Relative spread of the per-segment warp slopes.
    pub warp_jitter: f64,
    pub spacing_mm: [f64; 2],
    /// Fraction of the canonical axis covered by one volume.
    pub fov_fraction: [f64; 2],
    /// Standard deviation of the per-slice rendering error, score units.
    pub score_jitter: f64,
    /// Amplitude of the per-subject texture.
    pub texture: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Train / validation / test proportions.
    pub split: [f64; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_subjects: 105,
            height: 32,
            width: 32,
            mm_per_score: 1.2,
            warp_jitter: 0.3,
            spacing_mm: [2.0, 3.0],
            fov_fraction: [0.5, 1.0],
            score_jitter: 1.5,
            texture: 0.15,
            noise: 0.05,
            split: [0.75, 0.06, 0.19],
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::Config(format!("{name} must satisfy {lo} <= low <= high <= {hi}, got {r:?}")));
    }
    Ok(())
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("synthetic slices must be at least 4x4".into()));
        }
        if !(self.mm_per_score > 0.0) {
            return Err(Error::Config("synth.mm_per_score must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warp_jitter) {
            return Err(Error::Config("synth.warp_jitter must be in [0, 1)".into()));
        }
        check_range("synth.spacing_mm", self.spacing_mm, f64::MIN_POSITIVE, f64::INFINITY)?;
        check_range("synth.fov_fraction", self.fov_fraction, f64::MIN_POSITIVE, 1.0)?;
        for (name, v) in [("score_jitter", self.score_jitter), ("texture", self.texture), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("synth.{name} must be non-negative")));
            }
        }
        if self.split.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || self.split.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("synth.split must be non-negative with a positive sum".into()));
        }
        Ok(())
    }
}

/// Strictly increasing piecewise-linear map from canonical score to mm.
/// The outer segments share the slope of their neighbours so that linear
/// continuation from the outermost keys is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    /// `(score, position_mm)` knots covering `[0, SCORE_MAX]`.
    knots: Vec<(f64, f64)>,
}

impl Warp {
    pub fn sample<R: Rng + ?Sized>(key_scores: &[f64], mm_per_score: f64, jitter: f64, rng: &mut R) -> Self {
        let inner: Vec<f64> = key_scores.windows(2).map(|_| mm_per_score * rng.random_range(1.0 - jitter..=1.0 + jitter)).collect();
        let first = key_scores[0];
        let last = *key_scores.last().unwrap();
        let mut knots = vec![(0.0, 0.0)];
        let mut pos = first * inner[0];
        knots.push((first, pos));
        for (w, slope) in key_scores.windows(2).zip(&inner) {
            pos += (w[1] - w[0]) * slope;
            knots.push((w[1], pos));
        }
        knots.push((SCORE_MAX, pos + (SCORE_MAX - last) * inner[inner.len() - 1]));
        knots.dedup_by(|b, a| a.0 == b.0);
        Self { knots }
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn length_mm(&self) -> f64 {
        self.knots.last().unwrap().1
    }

    pub fn position(&self, score: f64) -> f64 {
        interp(&self.knots, score, |k| k.0, |k| k.1)
    }

    pub fn score(&self, position_mm: f64) -> f64 {
        interp(&self.knots, position_mm, |k| k.1, |k| k.0)
    }
}

fn interp(knots: &[(f64, f64)], x: f64, fx: impl Fn(&(f64, f64)) -> f64, fy: impl Fn(&(f64, f64)) -> f64) -> f64 {
    let seg = knots.windows(2).position(|w| x <= fx(&w[1])).unwrap_or(knots.len() - 2);
    let (a, b) = (&knots[seg], &knots[seg + 1]);
    fy(a) + (fy(b) - fy(a)) * (x - fx(a)) / (fx(b) - fx(a))
}

/// Per-subject texture: a smooth product of sinusoids.
#[derive(Clone, Debug, PartialEq)]
struct Texture {
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
    amp: f64,
}

impl Texture {
    fn sample<R: Rng + ?Sized>(amp: f64, rng: &mut R) -> Self {
        use std::f64::consts::TAU;
        Self {
            fx: rng.random_range(0.5..2.5) * TAU,
            fy: rng.random_range(0.5..2.5) * TAU,
            px: rng.random_range(0.0..TAU),
            py: rng.random_range(0.0..TAU),
            amp,
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.amp * (self.fx * u + self.px).sin() * (self.fy * v + self.py).sin()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn render(score: f64, height: usize, width: usize, tex: &Texture) -> Vec<f32> {
    let t = (score / SCORE_MAX).clamp(-0.2, 1.2);
    let h = height as f64;
    let center = h * (0.2 + 0.6 * t);
    let half = h * (0.04 + 0.16 * t).max(0.01);
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let yc = y as f64 + 0.5;
        let band = sigmoid(2.0 * (half - (yc - center).abs()));
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = yc / h;
            let val = BACKGROUND + 1.3 * band + tex.at(u, v);
            out.push(val as f32);
        }
    }
    out
}

/// One generated subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSubject {
    pub volume: SliceSequence,
    pub labels: Vec<KeySliceLabel>,
    /// True canonical score of every slice.
    pub scores: Vec<f64>,
    pub warp: Warp,
    /// Physical position of slice 0 along the warp, mm.
    pub offset_mm: f64,
}

/// Draws one subject. Crops containing fewer than two key scores are redrawn
/// (bounded).
pub fn generate_subject<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    keys: &KeySet,
    volume_id: &str,
    rng: &mut R,
) -> Result<SyntheticSubject> {
    let warp = Warp::sample(keys.scores(), cfg.mm_per_score, cfg.warp_jitter, rng);
    let spacing = rng.random_range(cfg.spacing_mm[0]..=cfg.spacing_mm[1]);
    let tex = Texture::sample(cfg.texture, rng);
    let total = warp.length_mm();
    let key_pos: Vec<f64> = keys.scores().iter().map(|&s| warp.position(s)).collect();
    for _ in 0..MAX_FOV_RETRIES {
        let len = total * rng.random_range(cfg.fov_fraction[0]..=cfg.fov_fraction[1]);
        let offset = rng.random_range(0.0..=(total - len).max(0.0));
        let n = (len / spacing).floor() as usize + 1;
        let labels: Vec<KeySliceLabel> = keys
            .names()
            .iter()
            .zip(&key_pos)
            .filter_map(|(name, &p)| {
                let idx = ((p - offset) / spacing).round();
                (idx >= 0.0 && (idx as usize) < n).then(|| KeySliceLabel {
                    key_name: name.clone(),
                    slice_index: idx as usize,
                })
            })
            .collect();
        let distinct = labels.windows(2).all(|w| w[0].slice_index < w[1].slice_index);
        if labels.len() < 2 || n < 2 || !distinct {
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|i| warp.score(offset + i as f64 * spacing)).collect();
        let jitter = Normal::new(0.0, cfg.score_jitter.max(1e-300)).expect("valid normal");
        let noise = Normal::new(0.0, cfg.noise.max(1e-300)).expect("valid normal");
        let mut data = Vec::with_capacity(n * cfg.height * cfg.width);
        for &s in &scores {
            let shown = if cfg.score_jitter > 0.0 { s + jitter.sample(rng) } else { s };
            for v in render(shown, cfg.height, cfg.width, &tex) {
                let e = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push((v as f64 + e).clamp(-1.0, 1.0) as f32);
            }
        }
        let volume = SliceSequence::new(volume_id, cfg.height, cfg.width, data, spacing, Source::Synthetic)?;
        return Ok(SyntheticSubject {
            volume,
            labels,
            scores,
            warp,
            offset_mm: offset,
        });
    }
    Err(Error::Config(format!(
        "could not place a field of view with two key slices after {MAX_FOV_RETRIES} attempts"
    )))
}

/// Subject counts per split: test and validation are rounded from their
/// proportions (at least one each when the proportion is positive), train
/// takes the rest.
pub fn split_counts(n: usize, split: [f64; 3]) -> [usize; 3] {
    let total: f64 = split.iter().sum();
    let part = |p: f64| {
        if p <= 0.0 {
            0
        } else {
            ((p / total * n as f64).round() as usize).max(1)
        }
    };
    let test = part(split[2]).min(n);
    let val = part(split[1]).min(n - test);
    [n - test - val, val, test]
}

/// Generates every subject with an independent stream derived from the seed.
pub fn generate_subjects(cfg: &SyntheticConfig, keys: &KeySet) -> Result<Vec<SyntheticSubject>> {
    cfg.validate()?;
    (0..cfg.n_subjects)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            generate_subject(cfg, keys, &format!("subj{i:04}"), &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warp_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Warp::sample(KeySet::default().scores(), 1.5, 0.3, &mut rng);
        for s in [0.0, 5.0, 10.0, 33.3, 70.0, 99.0] {
            assert!((w.score(w.position(s)) - s).abs() < 1e-9);
        }
        assert!(w.knots().windows(2).all(|k| k[0].0 < k[1].0 && k[0].1 < k[1].1));
    }

    #[test]
    fn slices_differ_only_by_texture() {
        let t1 = Texture { fx: 3.0, fy: 5.0, px: 0.1, py: 0.4, amp: 0.2 };
        let t2 = Texture { fx: 7.0, fy: 2.0, px: 1.0, py: 2.0, amp: 0.1 };
        let (a, b) = (render(40.0, 16, 16, &t1), render(40.0, 16, 16, &t2));
        for y in 0..16 {
            for x in 0..16 {
                let (u, v) = ((x as f64 + 0.5) / 16.0, (y as f64 + 0.5) / 16.0);
                let da = a[y * 16 + x] as f64 - t1.at(u, v);
                let db = b[y * 16 + x] as f64 - t2.at(u, v);
                assert!((da - db).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn split_counts_default() {
        assert_eq!(split_counts(105, [0.75, 0.06, 0.19]), [79, 6, 20]);
        assert_eq!(split_counts(3, [0.75, 0.06, 0.19]), [1, 1, 1]);
    }

    #[test]
    fn subjects_have_two_keys_and_valid_values() {
        let cfg = SyntheticConfig { n_subjects: 12, ..Default::default() };
        let subjects = generate_subjects(&cfg, &KeySet::default()).unwrap();
        for s in &subjects {
            assert!(s.labels.len() >= 2);
            assert!(s.volume.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(s.scores.len(), s.volume.len());
        }
    }
}
