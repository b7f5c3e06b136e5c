//! Reduction of variable-length volumes to at most `max_slices` inputs.

use rand::Rng;

use crate::volume::SliceSequence;

/// A sampled, zero-padded view of a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSequence {
    pub volume_id: String,
    pub height: usize,
    pub width: usize,
    /// `max_slices * H * W` values; padded positions are zero.
    pub slices: Vec<f32>,
    pub valid_mask: Vec<bool>,
    /// Original slice index of each valid position.
    pub index_map: Vec<usize>,
    pub effective_spacing_mm: f64,
}

impl SampledSequence {
    pub fn max_slices(&self) -> usize {
        self.valid_mask.len()
    }

    /// Number of valid (non-padded) positions.
    pub fn n_valid(&self) -> usize {
        self.index_map.len()
    }

    pub fn slice(&self, pos: usize) -> &[f32] {
        let a = self.height * self.width;
        &self.slices[pos * a..(pos + 1) * a]
    }
}

/// Stride used by uniform sampling: `ceil(n / max_slices)`.
pub fn uniform_stride(n: usize, max_slices: usize) -> usize {
    n.div_ceil(max_slices).max(1)
}

fn build(seq: &SliceSequence, indices: Vec<usize>, stride: usize, max_slices: usize) -> SampledSequence {
    let area = seq.height() * seq.width();
    let mut slices = vec![0.0f32; max_slices * area];
    for (pos, &i) in indices.iter().enumerate() {
        slices[pos * area..(pos + 1) * area].copy_from_slice(seq.slice(i));
    }
    let mut valid_mask = vec![false; max_slices];
    valid_mask[..indices.len()].iter_mut().for_each(|v| *v = true);
    SampledSequence {
        volume_id: seq.volume_id.clone(),
        height: seq.height(),
        width: seq.width(),
        slices,
        valid_mask,
        index_map: indices,
        effective_spacing_mm: seq.spacing_mm() * stride as f64,
    }
}

fn window_indices(start: usize, len: usize, max_slices: usize) -> (Vec<usize>, usize) {
    let stride = uniform_stride(len, max_slices);
    ((start..start + len).step_by(stride).collect(), stride)
}

/// Every `ceil(n / max_slices)`-th slice starting from the first.
///
/// Panics if `max_slices < 2`.
pub fn uniform_sample(seq: &SliceSequence, max_slices: usize) -> SampledSequence {
    assert!(max_slices >= 2, "max_slices must be at least 2");
    let (idx, stride) = window_indices(0, seq.len(), max_slices);
    build(seq, idx, stride, max_slices)
}

/// Uniform sampling inside a random contiguous window whose length is drawn
/// uniformly from `[max(2, n / 4), n]`.
pub fn subvolume_sample<R: Rng + ?Sized>(seq: &SliceSequence, max_slices: usize, rng: &mut R) -> SampledSequence {
    assert!(max_slices >= 2, "max_slices must be at least 2");
    let n = seq.len();
    let min_len = (n / 4).max(2).min(n);
    let len = rng.random_range(min_len..=n);
    let start = rng.random_range(0..=n - len);
    let (idx, stride) = window_indices(start, len, max_slices);
    build(seq, idx, stride, max_slices)
}

/// Fair coin between [`uniform_sample`] and [`subvolume_sample`].
pub fn choose_training_sample<R: Rng + ?Sized>(
    seq: &SliceSequence,
    max_slices: usize,
    rng: &mut R,
) -> SampledSequence {
    if rng.random_bool(0.5) {
        uniform_sample(seq, max_slices)
    } else {
        subvolume_sample(seq, max_slices, rng)
    }
}
