use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny(norm_kind: NormKind) -> EncoderConfig {
    EncoderConfig {
        num_blocks: 1,
        d_model: 8,
        num_heads: 2,
        d_ff: 12,
        conv_kernel: 3,
        norm_kind,
        subsample_factor: 2,
        feature_dim: 3,
        vocab_size_with_blank: 4,
        dropout: 0.0,
        rel_pos_window: 2,
    }
}

fn features(t: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureSequence {
    FeatureSequence::new(Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0)))
}

/// Loss `sum(c * log_probs)` and its value for fixed coefficients.
fn weighted_loss(out: &ForwardOutput, coef: &[Array2<f64>]) -> f64 {
    out.posteriors.iter().zip(coef).map(|(p, c)| (p.log_probs() * c).sum()).sum()
}

fn perturb(params: &ParameterSet, entry: usize, flat: usize, delta: f64) -> ParameterSet {
    let mut p = params.clone();
    let v = p.value_mut(entry);
    let slot = v.iter_mut().nth(flat).expect("index in range");
    *slot += delta;
    p
}

/// Max over parameters of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
fn gradient_check(cfg: &EncoderConfig, frames: &[usize], seed: u64) -> f64 {
    let enc = Encoder::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = enc.init_params(seed);
    for e in 0..params.len() {
        if params.entries()[e].kind == ParamKind::Weight {
            params.value_mut(e).mapv_inplace(|v| v + 0.1 * (rng.random::<f64>() - 0.5));
        }
    }
    let batch: Vec<FeatureSequence> = frames.iter().map(|&t| features(t, cfg.feature_dim, &mut rng)).collect();
    let refs: Vec<&FeatureSequence> = batch.iter().collect();
    let coef: Vec<Array2<f64>> = frames
        .iter()
        .map(|&t| Array2::from_shape_fn((cfg.output_frames(t), cfg.vocab_size_with_blank), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let run = |p: &ParameterSet| {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 77);
        enc.forward_batch(p, &refs, Mode::Train, &mut r).unwrap()
    };
    let out = run(&params);
    let grads = enc.backward(&params, &out.tape, &coef).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for e in 0..params.len() {
        if params.entries()[e].kind == ParamKind::Statistic {
            assert!(grads.value(e).iter().all(|&g| g == 0.0));
            continue;
        }
        for (i, &analytic) in grads.value(e).iter().enumerate() {
            let up = weighted_loss(&run(&perturb(&params, e, i, h)), &coef);
            let down = weighted_loss(&run(&perturb(&params, e, i, -h)), &coef);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn finite_difference_gradient_all_norms() {
    for (i, kind) in [NormKind::Group { num_groups: 2 }, NormKind::Batch, NormKind::Instance, NormKind::Layer]
        .into_iter()
        .enumerate()
    {
        let err = gradient_check(&tiny(kind), &[4, 3], 10 + i as u64);
        assert!(err < 1e-5, "{kind:?}: relative error {err}");
    }
}

#[test]
fn finite_difference_gradient_with_dropout() {
    let cfg = EncoderConfig { dropout: 0.3, ..tiny(NormKind::Group { num_groups: 4 }) };
    let err = gradient_check(&cfg, &[5], 3);
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn zero_and_scaled_upstream_gradients() {
    let cfg = tiny(NormKind::Batch);
    let enc = Encoder::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = enc.init_params(2);
    let x = features(6, 3, &mut rng);
    let out = enc.forward(&p, &x, Mode::Train, &mut rng).unwrap();
    let zero = enc.backward(&p, &out.tape, &[Array2::zeros((3, 4))]).unwrap();
    assert!(zero.values().all(|g| g == 0.0));
    let g = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
    let base = enc.backward(&p, &out.tape, std::slice::from_ref(&g)).unwrap();
    let scaled = enc.backward(&p, &out.tape, &[g * 4.0]).unwrap();
    let mut expect = base.clone();
    expect.scale(4.0);
    assert_eq!(scaled, expect);
}

#[test]
fn stale_tape_is_rejected() {
    let enc = Encoder::new(tiny(NormKind::Layer)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = enc.init_params(0);
    let out = enc.forward(&p, &features(4, 3, &mut rng), Mode::Train, &mut rng).unwrap();
    p.value_mut(0).mapv_inplace(|v| v + 1.0);
    assert!(matches!(enc.backward(&p, &out.tape, &[Array2::zeros((2, 4))]), Err(EncoderError::StaleTape)));
}

#[test]
fn output_shapes_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for draw in 0..100 {
        let kind = [NormKind::Batch, NormKind::Group { num_groups: 4 }, NormKind::Instance, NormKind::Layer][draw % 4];
        let cfg = EncoderConfig { subsample_factor: 1 + draw % 3, ..tiny(kind) };
        let enc = Encoder::new(cfg.clone()).unwrap();
        let p = enc.init_params(draw as u64);
        let t = rng.random_range(0..12);
        let mode = if draw % 2 == 0 { Mode::Train } else { Mode::Eval };
        let out = enc.forward(&p, &features(t, 3, &mut rng), mode, &mut rng).unwrap();
        let post = &out.posteriors[0];
        assert_eq!(post.frames(), t.div_ceil(cfg.subsample_factor));
        for row in post.log_probs().rows() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((z.ln()).abs() < 1e-6);
        }
    }
}

#[test]
fn eval_mode_is_pure() {
    let enc = Encoder::new(EncoderConfig { dropout: 0.5, ..tiny(NormKind::Batch) }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = enc.init_params(1);
    let x = features(7, 3, &mut rng);
    let a = enc.forward(&p, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = enc.forward(&p, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(a.posteriors, b.posteriors);
    assert!(a.statistics.is_empty());
    assert_eq!(enc.infer(&p, &x).unwrap(), a.posteriors[0]);
}

#[test]
fn empty_input_gives_empty_output() {
    for kind in [NormKind::Batch, NormKind::Layer] {
        let enc = Encoder::new(tiny(kind)).unwrap();
        let p = enc.init_params(0);
        let x = FeatureSequence::new(Array2::zeros((0, 3)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = enc.forward(&p, &x, Mode::Train, &mut rng).unwrap();
        assert_eq!(out.posteriors[0].frames(), 0);
        let g = enc.backward(&p, &out.tape, &[Array2::zeros((0, 4))]).unwrap();
        assert!(g.values().all(|v| v == 0.0));
    }
}

#[test]
fn group_extremes_match_instance_and_layer_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs = [(NormKind::Group { num_groups: 8 }, NormKind::Instance), (NormKind::Group { num_groups: 1 }, NormKind::Layer)];
    for (g, other) in pairs {
        let a = Encoder::new(tiny(g)).unwrap();
        let b = Encoder::new(tiny(other)).unwrap();
        let p = a.init_params(3);
        for _ in 0..10 {
            let x = features(rng.random_range(1..10), 3, &mut rng);
            let pa = a.infer(&p, &x).unwrap();
            let pb = b.infer(&p, &x).unwrap();
            assert!((pa.log_probs() - pb.log_probs()).iter().all(|d| d.abs() < 1e-10));
        }
    }
}

#[test]
fn batch_norm_statistics_follow_momentum() {
    let enc = Encoder::new(tiny(NormKind::Batch)).unwrap();
    let mut p = enc.init_params(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = features(8, 3, &mut rng);
    let out = enc.forward(&p, &x, Mode::Train, &mut rng).unwrap();
    assert_eq!(out.statistics.len(), 2);
    let (mi, ref m) = out.statistics[0];
    assert!(p.entries()[mi].name.ends_with("running_mean"));
    assert!(m.iter().all(|v| v.is_finite()));
    apply_statistics(&mut p, &out.statistics);
    assert_eq!(p.vector(mi), m.view());
}

#[test]
fn config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    assert!(EncoderConfig { conv_kernel: 4, ..Default::default() }.validate().is_err());
    assert!(EncoderConfig { num_heads: 5, ..Default::default() }.validate().is_err());
    assert!(EncoderConfig { norm_kind: NormKind::Group { num_groups: 5 }, ..Default::default() }.validate().is_err());
    let text = toml::to_string(&EncoderConfig::default()).unwrap();
    assert_eq!(toml::from_str::<EncoderConfig>(&text).unwrap(), EncoderConfig::default());
}

#[test]
fn shape_errors() {
    let enc = Encoder::new(tiny(NormKind::Layer)).unwrap();
    let p = enc.init_params(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(enc.forward(&p, &features(4, 5, &mut rng), Mode::Eval, &mut rng).is_err());
    let other = Encoder::new(tiny(NormKind::Batch)).unwrap().init_params(0);
    assert!(enc.forward(&other, &features(4, 3, &mut rng), Mode::Eval, &mut rng).is_err());
}
