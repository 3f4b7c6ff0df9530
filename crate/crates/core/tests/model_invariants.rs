use lidsn::model::{
    block_grad_check, count_params_flops, random_tiny_config, saliency, Block, FusionMode, IntegrationMode, LiDsn,
    ModelConfig,
};
use lidsn::numeric::{RngStream, Tensor};
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = RngStream::new(seed, 5);
    Tensor::from_fn(shape, |_| r.normal(0.0, 1.0))
}

fn assert_prob_rows(t: &Tensor, what: &str) {
    let n = *t.shape().last().unwrap();
    for row in t.data().chunks(n) {
        assert!(row.iter().all(|&v| v >= 0.0), "{what}");
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-12, "{what}: {s}");
    }
}

#[test]
fn eval_logits_are_deterministic() {
    let model = LiDsn::new(ModelConfig::tiny(), 2).unwrap();
    let x = randn(&[3, 3, 64], 1);
    assert_eq!(model.logits(&x).unwrap(), model.logits(&x).unwrap());
}

#[test]
fn attention_rows_are_distributions() {
    for seed in 0..20 {
        let cfg = ModelConfig { temporal_depth: 2, spatial_depth: 2, ..random_tiny_config(seed) };
        let cfg = ModelConfig { integration_mode: IntegrationMode::St2t, fusion_mode: FusionMode::Adaptive, ..cfg };
        let model = LiDsn::new(cfg.clone(), seed).unwrap();
        let (_, trace) = model.logits_traced(&randn(&[2, cfg.n_channels, 64], seed), true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.layers.len(), 2);
        for l in &trace.layers {
            let (h, c, dh) = (cfg.n_heads, cfg.n_channels, cfg.head_dim());
            assert_eq!(l.sacm.as_ref().unwrap().shape(), &[2, h, c, c]);
            assert_eq!(l.tcam.as_ref().unwrap().shape(), &[2, h, dh, dh]);
            assert_prob_rows(l.sacm.as_ref().unwrap(), "A_s");
            assert_prob_rows(l.tcam.as_ref().unwrap(), "A_c");
            assert_prob_rows(l.omega.as_ref().unwrap(), "omega");
        }
        assert_prob_rows(trace.alpha.as_ref().unwrap(), "alpha");
    }
}

/// Moves channel `perm[i]` of the original to slot `i`.
fn permute_channels(model: &LiDsn, x: &Tensor, perm: &[usize]) -> (LiDsn, Tensor) {
    let cfg = &model.cfg;
    let (c, t) = (cfg.n_channels, cfg.n_samples);
    let b = x.shape()[0];
    let xp = Tensor::from_fn(&[b, c, t], |i| {
        let (bi, ci, ti) = (i / (c * t), (i / t) % c, i % t);
        x.at(&[bi, perm[ci], ti])
    });
    let mut m = model.clone();
    let pw = model.params.get("temporal_tok.pw.weight").unwrap();
    let d = pw.shape()[0];
    *m.params.get_mut("temporal_tok.pw.weight").unwrap() = Tensor::from_fn(&[d, c], |i| pw.at(&[i / c, perm[i % c]]));
    if let Some(sp) = model.params.get("spatial_pos") {
        *m.params.get_mut("spatial_pos").unwrap() = Tensor::from_fn(&[c, d], |i| sp.at(&[perm[i / d], i % d]));
    }
    if let Some(w) = model.params.get("fusion.cwlp") {
        *m.params.get_mut("fusion.cwlp").unwrap() = Tensor::from_fn(&[c], |i| w.data()[perm[i]]);
    }
    for l in 0..cfg.temporal_depth {
        let name = format!("layers.{l}.tsia.e_pos");
        if let Some(e) = model.params.get(&name) {
            let new = if e.rank() == 2 {
                let dh = e.shape()[1];
                Tensor::from_fn(e.shape(), |i| e.at(&[perm[i / dh], i % dh]))
            } else {
                let dh = e.shape()[2];
                Tensor::from_fn(e.shape(), |i| e.at(&[i / (c * dh), perm[(i / dh) % c], i % dh]))
            };
            *m.params.get_mut(&name).unwrap() = new;
        }
    }
    (m, xp)
}

#[test]
fn channel_permutation_equivariance() {
    for seed in 0..10u64 {
        let cfg = random_tiny_config(seed);
        let model = LiDsn::new(cfg.clone(), seed).unwrap();
        let x = randn(&[2, cfg.n_channels, cfg.n_samples], seed + 100);
        let mut perm: Vec<usize> = (0..cfg.n_channels).collect();
        RngStream::new(seed, 3).shuffle(&mut perm);
        let (m2, x2) = permute_channels(&model, &x, &perm);
        let a = model.logits(&x).unwrap();
        let b = m2.logits(&x2).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-12, "seed {seed}: {u} vs {v}");
        }
    }
}

#[test]
fn ablation_flags_equal_zeroed_weights() {
    for seed in 0..5u64 {
        let base_cfg = ModelConfig { temporal_depth: 2, spatial_depth: 2, integration_mode: IntegrationMode::Bidir, ..ModelConfig::tiny() };
        let x = randn(&[2, 3, 64], seed);

        let mut zeroed = LiDsn::new(base_cfg.clone(), seed).unwrap();
        for l in 0..2 {
            for b in ["tsia", "tsia_rev"] {
                zeroed.params.get_mut(&format!("layers.{l}.{b}.wphi")).unwrap().data_mut().fill(0.0);
            }
        }
        let flagged = LiDsn::new(ModelConfig { use_cosine_gate: false, ..base_cfg.clone() }, seed).unwrap();
        assert_eq!(zeroed.logits(&x).unwrap(), flagged.logits(&x).unwrap());

        let mut zeroed = LiDsn::new(base_cfg.clone(), seed).unwrap();
        for l in 0..2 {
            zeroed.params.get_mut(&format!("layers.{l}.tsia.e_pos")).unwrap().data_mut().fill(0.0);
        }
        let flagged = LiDsn::new(ModelConfig { use_electrode_pos_embedding: false, ..base_cfg }, seed).unwrap();
        assert_eq!(zeroed.logits(&x).unwrap(), flagged.logits(&x).unwrap());
    }
}

#[test]
fn block_gradients_on_random_tiny_configs() {
    for seed in 0..20u64 {
        let cfg = random_tiny_config(seed);
        for block in Block::ALL {
            let r = block_grad_check(block, &cfg, seed).unwrap();
            assert!(r.max_rel_err < 1e-4, "{} seed {seed}: {r:?}", block.name());
        }
    }
}

#[test]
fn default_cost_is_within_reported_budget() {
    let cost = count_params_flops(&ModelConfig::default()).unwrap();
    assert!((85_000..=158_000).contains(&cost.params), "{cost:?}");
    assert!(cost.flops as f64 <= 2.0 * 6.12e6 && cost.flops as f64 >= 6.12e6 / 2.0, "{cost:?}");
}

#[test]
fn flop_count_brackets_multiply_adds() {
    // Lower bound: the multiply-adds of the convolutions and projections.
    let cfg = ModelConfig::default();
    let (c, t, d, s, p) = (22u64, 1000u64, 40u64, 16u64, 20u64);
    let k = cfg.temporal_kernel as u64;
    let conv = 2 * (d * c * t + d * k * t + s * c * t);
    let proj = 2 * c * (s * p) * d;
    let ffn = 3 * 2 * 2 * (p + c) * d * 4 * d;
    let tsia = 3 * 2 * (3 * p * d * d + 2 * c * d * d + p * d * d);
    let lower = conv + proj + ffn + tsia;
    let cost = count_params_flops(&cfg).unwrap();
    assert!(cost.flops >= lower, "{} < {lower}", cost.flops);
    assert!(cost.flops <= lower + lower / 2, "{} vs {lower}", cost.flops);
}

#[test]
fn ablation_parameter_deltas_follow_shapes() {
    let cfg = ModelConfig::default();
    let full = count_params_flops(&cfg).unwrap().params;
    let (c, d, h, dh, p, n) = (22, 40, 4, 10, 20, 3);
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut x = cfg.clone();
        f(&mut x);
        count_params_flops(&x).unwrap().params
    };
    assert_eq!(full - with(&|x| x.fusion_mode = FusionMode::MeanConcat), c + (d * d / 2 + d / 2 + d / 2 + 1));
    assert_eq!(full - with(&|x| x.use_cosine_gate = false), n * d * d);
    assert_eq!(full - with(&|x| x.use_electrode_pos_embedding = false), n * h * c * dh);
    assert_eq!(full - with(&|x| x.shared_electrode_pos = true), n * (h - 1) * c * dh);
    assert_eq!(full - with(&|x| x.use_positional_embedding = false), p * d + c * d);
    assert_eq!(full - with(&|x| x.integration_mode = IntegrationMode::None), n * (5 * d * d + h * c * dh + d * d));
    assert_eq!(with(&|x| x.integration_mode = IntegrationMode::Bidir) - full, n * 6 * d * d);
    assert_eq!(full - with(&|x| x.use_tsia = false), n * (6 * d * d + h * c * dh - 2 * d * d));
}

#[test]
fn saliency_contract() {
    let model = LiDsn::new(ModelConfig::tiny(), 4).unwrap();
    let x = randn(&[3, 64], 9);
    let map = saliency(&model, &x, 1).unwrap();
    assert_eq!(map.shape(), &[3, 64]);
    assert!((map.max_abs() - 1.0).abs() < 1e-15);
    assert!(map.data().iter().all(|&v| v >= 0.0));
    assert!(saliency(&model, &x, 2).is_err());

    // Finite differences of the logit, normalized the same way.
    let mut raw = vec![0.0; 3 * 64];
    for (i, slot) in raw.iter_mut().enumerate() {
        let h = 1e-5 * x.data()[i].abs().max(1.0);
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut dn = x.clone();
        dn.data_mut()[i] -= h;
        let f = |t: &Tensor| model.logits(&t.clone().reshaped(&[1, 3, 64]).unwrap()).unwrap().data()[1];
        *slot = ((f(&up) - f(&dn)) / (2.0 * h)).abs();
    }
    let mx = raw.iter().copied().fold(0.0, f64::max);
    for (a, n) in map.data().iter().zip(&raw) {
        let n = n / mx;
        assert!((a - n).abs() / 1f64.max(a.abs()).max(n.abs()) < 1e-4, "{a} vs {n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn token_shapes_hold_for_any_config(seed in 0u64..10_000, b in 1usize..3) {
        let cfg = random_tiny_config(seed);
        let model = LiDsn::new(cfg.clone(), seed).unwrap();
        let (logits, trace) = model.logits_traced(&randn(&[b, cfg.n_channels, cfg.n_samples], seed), true).unwrap();
        prop_assert_eq!(logits.shape(), &[b, cfg.n_classes]);
        let trace = trace.unwrap();
        prop_assert_eq!(trace.layers.len(), cfg.temporal_depth);
        for l in &trace.layers {
            prop_assert_eq!(l.post_tsia.as_ref().unwrap().shape(), &[b, cfg.n_patches(), cfg.embed_dim]);
        }
    }
}
