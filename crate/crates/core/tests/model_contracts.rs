mod common;

use rand::Rng;
use seqinsert::checkpoint::Checkpoint;
use seqinsert::encoder::PeMode;
use seqinsert::model::{column_position, predict_insertion, InsertionPosition, SequenceInput};
use seqinsert::sampling::SampledSequence;
use seqinsert_tensor::{Graph, Tensor};

fn scribble_padding(s: &SampledSequence, rng: &mut impl Rng) -> SampledSequence {
    let mut out = s.clone();
    let area = s.height * s.width;
    for pos in s.n_valid()..s.max_slices() {
        for v in &mut out.slices[pos * area..(pos + 1) * area] {
            *v = rng.random_range(-5.0..5.0);
        }
    }
    out
}

#[test]
fn rows_are_stochastic_and_padding_is_empty() {
    for seed in 0..20 {
        let mut rng = common::rng(seed);
        let model = common::tiny_model(PeMode::Absolute);
        let params = model.init_params(&mut rng);
        let (nq, nt) = (rng.random_range(2..12), rng.random_range(2..12));
        let q = common::random_sampled(&mut rng, "q", nq, 12);
        let t = common::random_sampled(&mut rng, "t", nt, 12);
        let map = model.attention_map(&params, &q, &t).unwrap();
        assert_eq!(map.rows(), q.n_valid());
        assert_eq!(map.probs.shape()[1], 14);
        for r in 0..map.rows() {
            let sum: f64 = map.row(r).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            assert!(map.row(r)[t.n_valid() + 2..].iter().all(|&v| v == 0.0));
        }
    }
}

/// Runs the padded layout (every `max_slices` position present, padding
/// masked) and returns the valid query rows over the live target columns.
fn padded_forward(model: &seqinsert::model::InsertionModel, params: &seqinsert_tensor::ParamStore<f32>, q: &SampledSequence, t: &SampledSequence) -> Vec<Vec<f32>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let qi = SequenceInput::query(q, true);
    let ti = SequenceInput::target(t, true);
    let probs = model.forward(&mut g, &p, &qi, &ti, None).unwrap();
    let v = g.value(probs);
    assert_eq!(v.shape(), &[q.max_slices(), t.max_slices() + 2]);
    (0..q.n_valid())
        .map(|r| {
            assert!(v.row(r)[t.n_valid() + 2..].iter().all(|&x| x == 0.0));
            v.row(r)[..t.n_valid() + 2].to_vec()
        })
        .collect()
}

#[test]
fn padded_content_never_leaks() {
    for seed in 0..10 {
        let mut rng = common::rng(100 + seed);
        let pe = if seed % 2 == 0 { PeMode::Absolute } else { PeMode::Relative };
        let model = common::tiny_model(pe);
        let params = model.init_params(&mut rng);
        let q = common::random_sampled(&mut rng, "q", 5, 9);
        let t = common::random_sampled(&mut rng, "t", 4, 9);
        let clean = padded_forward(&model, &params, &q, &t);
        let noisy = padded_forward(&model, &params, &scribble_padding(&q, &mut rng), &scribble_padding(&t, &mut rng));
        let compact = model.attention_map(&params, &q, &t).unwrap();
        for r in 0..q.n_valid() {
            for c in 0..t.n_valid() + 2 {
                assert!((clean[r][c] - noisy[r][c]).abs() < 1e-5);
                assert!((clean[r][c] - compact.live_row(r)[c]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn single_live_target_column_takes_all_mass() {
    let mut rng = common::rng(5);
    let model = common::tiny_model(PeMode::Absolute);
    let params = model.init_params(&mut rng);
    let mut g = Graph::<f32>::new();
    let p = params.bind_frozen(&mut g);
    let q = g.constant(Tensor::new(vec![3, 8], (0..24).map(|i| (i as f32).sin()).collect()).unwrap());
    let k = g.constant(Tensor::new(vec![4, 8], (0..32).map(|i| (i as f32).cos()).collect()).unwrap());
    let mask = [false, false, true, false];
    let probs = model.insertion_distribution(&mut g, q, k, &mask).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(probs).row(r), &[0.0, 0.0, 1.0, 0.0]);
    }
    let cross = model.cross_attend(&mut g, &p, q, k, &mask, &mut None).unwrap();
    assert_eq!(g.value(cross).shape(), &[3, 8]);
    assert!(model.insertion_distribution(&mut g, q, k, &[false; 4]).is_err());
}

#[test]
fn identical_keys_give_uniform_rows() {
    let model = common::tiny_model(PeMode::Absolute);
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 * 0.3).collect()).unwrap());
    let k = g.constant(Tensor::new(vec![5, 8], (0..40).map(|i| (i % 8) as f64).collect()).unwrap());
    let probs = model.insertion_distribution(&mut g, q, k, &[true; 5]).unwrap();
    for &v in g.value(probs).data() {
        assert!((v - 0.2).abs() < 1e-12);
    }
}

#[test]
fn scaling_queries_keeps_row_argmax() {
    let model = common::tiny_model(PeMode::Absolute);
    for seed in 0..50 {
        let mut rng = common::rng(seed);
        let qd: Vec<f64> = (0..3 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kd: Vec<f64> = (0..6 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = rng.random_range(0.1..10.0);
        let argmax = |scale: f64| {
            let mut g = Graph::<f64>::new();
            let q = g.constant(Tensor::new(vec![3, 8], qd.iter().map(|v| v * scale).collect()).unwrap());
            let k = g.constant(Tensor::new(vec![6, 8], kd.clone()).unwrap());
            let p = model.insertion_distribution(&mut g, q, k, &[true; 6]).unwrap();
            let v = g.value(p).clone();
            (0..3)
                .map(|r| (0..6).max_by(|&a, &b| v.at2(r, a).total_cmp(&v.at2(r, b))).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(argmax(1.0), argmax(c));
    }
}

#[test]
fn both_sequences_receive_gradient() {
    let mut rng = common::rng(9);
    let model = common::tiny_model(PeMode::Absolute);
    let params = model.init_params(&mut rng);
    let q = common::random_sampled(&mut rng, "q", 4, 4);
    let t = common::random_sampled(&mut rng, "t", 5, 5);
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g);
    let qi = SequenceInput::query(&q, false);
    let ti = SequenceInput::target(&t, false);
    let probs = model.forward(&mut g, &p, &qi, &ti, None).unwrap();
    let w = g.constant(Tensor::new(vec![4, 7], (0..28).map(|i| ((i * 7) % 5) as f32).collect()).unwrap());
    let prod = g.mul(probs, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let grads = p.grads(&g);
    for name in ["cross.0.attn.q.w", "cross.0.attn.k.w", "head.q.w", "head.k.w", "self.0.attn.v.w", "embed.out.w"] {
        assert!(grads[name].data().iter().any(|&v| v != 0.0), "{name}");
    }
}

#[test]
fn prediction_is_deterministic_and_survives_checkpointing() {
    let mut rng = common::rng(21);
    let model = common::tiny_model(PeMode::Relative);
    let params = model.init_params(&mut rng);
    let a = common::random_volume(&mut rng, "a", 9);
    let b = common::random_volume(&mut rng, "b", 7);
    let first = predict_insertion(&a, &b, &model, &params, 8).unwrap();
    assert_eq!(first, predict_insertion(&a, &b, &model, &params, 8).unwrap());
    let ckpt = Checkpoint {
        fingerprint: [0; 32],
        epoch: 1,
        val_metric: 0.0,
        config_json: String::new(),
        params: params.clone(),
        optimizer: None,
    };
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(first, predict_insertion(&a, &b, &model, &back.params, 8).unwrap());
    let same = predict_insertion(&a, &a, &model, &params, 8).unwrap();
    assert_eq!(same.positions.len(), same.map.rows());
    // stride 2 on 9 slices: query rows are slices 0, 2, 4, 6, 8
    assert_eq!(first.map.query_index_map, vec![0, 2, 4, 6, 8]);
}

#[test]
fn columns_map_to_positions() {
    let idx = [0, 3, 6];
    assert_eq!(column_position(0, &idx), InsertionPosition::BeforeStart);
    assert_eq!(column_position(2, &idx), InsertionPosition::Slice(3));
    assert_eq!(column_position(4, &idx), InsertionPosition::AfterEnd);
    for p in [InsertionPosition::BeforeStart, InsertionPosition::Slice(12), InsertionPosition::AfterEnd] {
        assert_eq!(p.to_string().parse::<InsertionPosition>().unwrap(), p);
    }
}
