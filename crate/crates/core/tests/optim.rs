use proptest::prelude::*;
use sfl_core::optim::{
    adamw_step, build_groups, clip_global_norm, muon_step, newton_schulz, s_sweep, AdamConfig,
    AdamState, GroupPolicy, MatrixOptimizer, MuonConfig, MuonState, OptimConfig, Optimizer,
    OptimizerKind, ParamState, NS_COEFFS,
};
use sfl_core::{Error, Model, ModelConfig, ParamKind, PlacementMode, Rng, Tensor, Tensor64};

/// Root mean square over the entries of `NᵀN − I`.
fn orth_error(n: &Tensor<f64>) -> f64 {
    let (_, c) = n.dims2().unwrap();
    let mut acc = 0.0;
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for k in 0..n.shape()[0] {
                s += n.get2(k, i) * n.get2(k, j);
            }
            let e = s - if i == j { 1.0 } else { 0.0 };
            acc += e * e;
        }
    }
    (acc / (c * c) as f64).sqrt()
}

// Straight-line AdamW written from the update equations, kept separate from
// the library code on purpose.
fn oracle_adamw(p0: [f64; 2], steps: usize, lr: f64, wd: f64) -> Vec<[f64; 2]> {
    let grad = |p: [f64; 2]| [3.0 * p[0] + 0.5 * p[1] + 0.1, 0.5 * p[0] + p[1] - 0.2];
    let (b1, b2, eps) = (0.9f64, 0.95f64, 1e-8);
    let mut p = p0;
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = grad(p);
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            p[i] -= lr * mh / (vh.sqrt() + eps);
            p[i] -= lr * wd * p[i];
        }
        out.push(p);
    }
    out
}

#[test]
fn adamw_matches_oracle_on_quadratic() {
    let lr = 0.05;
    let wd = 0.1;
    let oracle = oracle_adamw([1.0, -2.0], 25, lr, wd);
    // Frozen from a numpy run of the same recurrence.
    let frozen = [
        (1, [0.9452500002369048, -1.940250000292647]),
        (2, [0.8908453241694957, -1.880813960565343]),
        (5, [0.7302781707451295, -1.704479219359882]),
        (10, [0.47617607078589497, -1.4177309721272549]),
        (25, [-0.02215876704916595, -0.6247078944442064]),
    ];
    let mut p = Tensor64::vector(vec![1.0, -2.0]);
    let mut st = AdamState::new(&[2]);
    let cfg = AdamConfig::default();
    for t in 1..=25 {
        let x = p.data();
        let g = Tensor64::vector(vec![3.0 * x[0] + 0.5 * x[1] + 0.1, 0.5 * x[0] + x[1] - 0.2]);
        adamw_step(&mut p, &g, &mut st, lr, wd, &cfg);
        let o = oracle[t - 1];
        assert!((p.data()[0] - o[0]).abs() < 1e-12 && (p.data()[1] - o[1]).abs() < 1e-12);
        if let Some((_, f)) = frozen.iter().find(|(s, _)| *s == t) {
            assert!((p.data()[0] - f[0]).abs() < 1e-12, "step {t}");
            assert!((p.data()[1] - f[1]).abs() < 1e-12, "step {t}");
        }
    }
}

#[test]
fn adam_first_step_is_unit_sized() {
    let mut p = Tensor64::vector(vec![0.0, 0.0, 0.0]);
    let g = Tensor64::vector(vec![3.0, -0.01, 40.0]);
    let mut st = AdamState::new(&[3]);
    adamw_step(&mut p, &g, &mut st, 1e-2, 0.0, &AdamConfig::default());
    // Off by eps/|g| relative, which is what the smallest entry sees.
    for (&x, &gv) in p.data().iter().zip(g.data()) {
        assert!((x + 1e-2 * gv.signum()).abs() < 1e-7, "{x}");
    }
}

#[test]
fn pure_decay_law_for_both_optimizers() {
    let (lr, wd, n) = (0.03, 0.2, 200);
    let mut rng = Rng::new(5);
    let p0 = Tensor64::randn([6, 4], 1.0, &mut rng);
    let expected = p0.l2() * (1.0f64 - lr * wd).powi(n);
    let zero = Tensor64::zeros([6, 4]);

    let mut p = p0.clone();
    let mut st = AdamState::new(&[6, 4]);
    for _ in 0..n {
        adamw_step(&mut p, &zero, &mut st, lr, wd, &AdamConfig::default());
    }
    assert!((p.l2() - expected).abs() < 1e-12, "adamw {} vs {}", p.l2(), expected);

    let mut p = p0.clone();
    let mut st = MuonState {
        momentum: Tensor64::zeros([6, 4]),
    };
    for _ in 0..n {
        muon_step(&mut p, &zero, &mut st, lr, wd, &MuonConfig::default()).unwrap();
    }
    assert!((p.l2() - expected).abs() < 1e-12, "muon {} vs {}", p.l2(), expected);
}

#[test]
fn muon_rejects_vectors() {
    let mut p = Tensor64::vector(vec![1.0, 2.0]);
    let g = Tensor64::vector(vec![1.0, 1.0]);
    let mut st = MuonState {
        momentum: Tensor64::zeros([2]),
    };
    let r = muon_step(&mut p, &g, &mut st, 0.1, 0.0, &MuonConfig::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn newton_schulz_diag_matches_frozen_oracle() {
    let n = newton_schulz(&Tensor64::from_rows(&[&[2.0, 0.0], &[0.0, 0.5]]), 5).unwrap();
    // Five quintic steps do not reach I from this start; these are the
    // numpy values of the same iteration.
    let frozen = [0.7373545696545691, 0.0, 0.0, 0.742864755301412];
    for (a, b) in n.data().iter().zip(frozen) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    // Both directions land at nearly the same scale despite a 4x input ratio.
    assert!((n.get2(0, 0) / n.get2(1, 1) - 1.0).abs() < 0.01);
}

fn scalar_ns(sigma: f64, steps: usize) -> f64 {
    let (a, b, c) = NS_COEFFS;
    let mut s = sigma;
    for _ in 0..steps {
        s = a * s + b * s.powi(3) + c * s.powi(5);
    }
    s
}

#[test]
fn newton_schulz_keeps_orthogonal_frame() {
    for &n in &[2usize, 4, 16, 64] {
        // Orthogonal Q from Gram-Schmidt of a random matrix.
        let mut rng = Rng::new(n as u64);
        let a = Tensor64::randn([n, n], 1.0, &mut rng);
        let mut q = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut col: Vec<f64> = (0..n).map(|i| a.get2(i, j)).collect();
            for prev in q.iter().take(j) {
                let d: f64 = col.iter().zip(prev).map(|(x, y)| x * y).sum();
                col.iter_mut().zip(prev).for_each(|(x, y)| *x -= d * y);
            }
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            q[j] = col.iter().map(|x| x / norm).collect();
        }
        let qm = Tensor64::new([n, n], (0..n * n).map(|k| q[k % n][k / n]).collect()).unwrap();
        let out = newton_schulz(&qm.scale(3.7), 5).unwrap();
        let phi = scalar_ns(1.0 / (n as f64).sqrt(), 5);
        assert!(out.max_abs_diff(&qm.scale(phi)) < 1e-12, "n={n}");
    }
}

#[test]
fn newton_schulz_random_square_is_near_orthogonal() {
    for seed in 0..5 {
        let mut rng = Rng::new(100 + seed);
        let g = Tensor64::randn([64, 64], 1.0, &mut rng);
        let e = orth_error(&newton_schulz(&g, 5).unwrap());
        assert!(e < 0.05, "seed {seed}: {e}");
    }
}

#[test]
fn newton_schulz_handles_tall_and_zero() {
    let mut rng = Rng::new(3);
    let g = Tensor64::randn([12, 5], 1.0, &mut rng);
    let tall = newton_schulz(&g, 5).unwrap();
    let wide = newton_schulz(&g.transpose().unwrap(), 5).unwrap();
    assert_eq!(tall.shape(), &[12, 5]);
    assert!(tall.max_abs_diff(&wide.transpose().unwrap()) < 1e-14);
    let z = newton_schulz(&Tensor64::zeros([3, 4]), 5).unwrap();
    assert_eq!(z.max_abs(), 0.0);
}

#[test]
fn clip_examples() {
    let mut g = vec![Tensor64::vector(vec![2.0, 0.0])];
    let s = clip_global_norm(&mut g, 1.0, &[false]);
    assert_eq!(s.scale, 0.5);
    assert_eq!(g[0].data(), &[1.0, 0.0]);

    let mut g = vec![Tensor64::vector(vec![0.3, 0.4]), Tensor64::vector(vec![60.0, 80.0])];
    let s = clip_global_norm(&mut g, 1.0, &[false, true]);
    assert_eq!(s.scale, 1.0);
    assert!((s.included_norm - 0.5).abs() < 1e-15);
    assert_eq!(g[1].data(), &[60.0, 80.0]);

    // Exclusion only changes the measurement; everything is still scaled.
    let mut g = vec![Tensor64::vector(vec![3.0, 4.0]), Tensor64::vector(vec![10.0])];
    let s = clip_global_norm(&mut g, 1.0, &[false, true]);
    assert!((s.scale - 0.2).abs() < 1e-15);
    assert!((g[1].data()[0] - 2.0).abs() < 1e-14);
}

proptest! {
    #[test]
    fn empty_exclusion_is_standard_clipping(v in prop::collection::vec(-5.0f64..5.0, 1..12), th in 0.1f64..4.0) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut g = vec![Tensor64::vector(v.clone())];
        let s = clip_global_norm(&mut g, th, &[false]);
        let expect = if norm > th { th / norm } else { 1.0 };
        prop_assert!((s.scale - expect).abs() < 1e-12);
    }

    #[test]
    fn exclusion_never_lowers_scale(
        vals in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 1..5), 2..6),
        mask in prop::collection::vec(any::<bool>(), 6),
        extra in 0usize..6,
        th in 0.05f64..3.0,
    ) {
        let n = vals.len();
        let base: Vec<bool> = mask[..n].to_vec();
        let mut more = base.clone();
        more[extra % n] = true;
        let mut g1: Vec<Tensor<f64>> = vals.iter().map(|v| Tensor64::vector(v.clone())).collect();
        let mut g2 = g1.clone();
        let s1 = clip_global_norm(&mut g1, th, &base);
        let s2 = clip_global_norm(&mut g2, th, &more);
        prop_assert!(s2.scale >= s1.scale);
    }

    #[test]
    fn sweep_pairs_hold_effective_lr(eta_eff in 1e-4f64..1e-1, grid in prop::collection::vec(0.1f64..30.0, 1..8)) {
        for ((eta, lambda), s) in s_sweep(eta_eff, &grid).into_iter().zip(&grid) {
            prop_assert!(((eta * lambda).sqrt() - eta_eff).abs() < 1e-12 * eta_eff.max(1.0));
            prop_assert!(((eta / lambda).sqrt() / s - 1.0).abs() < 1e-12);
        }
    }
}

fn mixed_model() -> Model<f64> {
    let cfg = ModelConfig {
        placement: PlacementMode::VectorFull,
        ..ModelConfig::tiny()
    };
    Model::new(cfg, 9).unwrap()
}

#[test]
fn routing_after_one_step() {
    for opt in [MatrixOptimizer::Adamw, MatrixOptimizer::Muon] {
        let mut model = mixed_model();
        let mut rng = Rng::new(2);
        let batch: Vec<Vec<usize>> = (0..2)
            .map(|_| (0..=model.cfg.seq_len).map(|_| rng.below(model.cfg.vocab)).collect())
            .collect();
        let policy = GroupPolicy {
            matrix_optimizer: opt,
            ..GroupPolicy::default()
        };
        let mut o = Optimizer::new(&model.store, &policy, OptimConfig::default(), 1e-3).unwrap();
        let (_, grads) = model.loss_and_grads(&batch, 1e-4, false).unwrap();
        o.step(&mut model.store, &grads, 1e-3).unwrap();
        assert!(model.store.multiplier_count() > 0);
        for ((p, st), g) in model.store.iter().zip(&o.states).zip(&o.groups) {
            match p.kind {
                ParamKind::Matrix => {
                    assert!(g.is_matrix);
                    match (opt, st) {
                        (MatrixOptimizer::Adamw, ParamState::Adam(a)) => assert_eq!(a.t, 1),
                        (MatrixOptimizer::Muon, ParamState::Muon(_)) => {}
                        _ => panic!("{} routed wrong", p.name),
                    }
                }
                _ => {
                    assert_eq!(g.optimizer, OptimizerKind::AdamwForVectors, "{}", p.name);
                    assert!(matches!(st, ParamState::Adam(_)), "{}", p.name);
                }
            }
        }
    }
}

#[test]
fn multiplier_groups_use_absolute_settings() {
    let model = mixed_model();
    let policy = GroupPolicy::default();
    let groups = build_groups(&model.store, &policy, 4e-3, 0.1);
    for (p, g) in model.store.iter().zip(&groups) {
        if p.kind == ParamKind::Multiplier {
            assert!((g.lr_mult * 4e-3 - 1e-2).abs() < 1e-15);
            assert!((g.wd_mult * 0.1 - 2e-3).abs() < 1e-15);
            assert!(g.clip_excluded);
        } else {
            assert!(!g.clip_excluded);
        }
    }
}

#[test]
fn muon_on_vector_group_is_config_error() {
    let model = mixed_model();
    let mut groups = build_groups(&model.store, &GroupPolicy::default(), 1e-3, 0.1);
    let vid = model.store.iter().position(|p| p.kind != ParamKind::Matrix).unwrap();
    groups[vid].optimizer = OptimizerKind::Muon;
    let r = Optimizer::with_groups(&model.store, groups, OptimConfig::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn optimizer_state_round_trips() {
    let mut model = mixed_model();
    let policy = GroupPolicy {
        matrix_optimizer: MatrixOptimizer::Muon,
        ..GroupPolicy::default()
    };
    let mut o = Optimizer::new(&model.store, &policy, OptimConfig::default(), 1e-3).unwrap();
    let batch = vec![(0..=model.cfg.seq_len).map(|i| i % model.cfg.vocab).collect::<Vec<_>>()];
    for _ in 0..3 {
        let (_, grads) = model.loss_and_grads(&batch, 0.0, false).unwrap();
        o.step(&mut model.store, &grads, 1e-3).unwrap();
    }
    let saved = o.state_tensors(&model.store);
    let mut fresh = Optimizer::new(&model.store, &policy, OptimConfig::default(), 1e-3).unwrap();
    fresh.load_state_tensors(&model.store, &saved).unwrap();
    assert_eq!(fresh.steps, 3);
    assert_eq!(fresh.states, o.states);
    assert!(matches!(
        fresh.load_state_tensors(&model.store, &saved[1..]),
        Err(Error::Checkpoint(_))
    ));
}
