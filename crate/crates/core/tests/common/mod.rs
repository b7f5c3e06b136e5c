#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqinsert::encoder::{EmbedderConfig, PeMode};
use seqinsert::model::{InsertionModel, ModelConfig};
use seqinsert::sampling::{uniform_sample, SampledSequence};
use seqinsert::volume::{SliceSequence, Source};

pub const SIDE: usize = 8;

pub fn tiny_model(pe: PeMode) -> InsertionModel {
    let model = ModelConfig {
        d: 8,
        self_layers: 1,
        cross_layers: 1,
        heads: 2,
        ffn_multiplier: 2,
        dropout: 0.0,
    };
    let embedder = EmbedderConfig {
        height: SIDE,
        width: SIDE,
        conv_channels: vec![2, 3],
        ..Default::default()
    };
    InsertionModel::new(model, embedder, pe).unwrap()
}

pub fn random_volume(rng: &mut ChaCha8Rng, id: &str, n: usize) -> SliceSequence {
    let data = (0..n * SIDE * SIDE).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    SliceSequence::new(id, SIDE, SIDE, data, rng.random_range(1.0..3.0), Source::Synthetic).unwrap()
}

pub fn random_sampled(rng: &mut ChaCha8Rng, id: &str, n: usize, max_slices: usize) -> SampledSequence {
    let v = random_volume(rng, id, n);
    uniform_sample(&v, max_slices)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
