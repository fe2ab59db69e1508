use proptest::prelude::*;
use sfl_core::dynamics::{
    abm_simulate, abm_simulate_from, alignment, coefficient_of_variation, equilibrium_scale,
    fit_equilibrium_slope, fit_loglog_slope, histogram, rms_norm_of, row_col_norm_distribution,
    symmetry_drift, AbmConfig,
};
use sfl_core::optim::Schedule;
use sfl_core::{Error, Rng, Tensor64};

fn abm(shape: &[usize], eta: f64, lambda: f64, steps: u64, seed: u64) -> AbmConfig {
    AbmConfig {
        shape: shape.to_vec(),
        schedule: Schedule::constant(eta, steps),
        lambda,
        steps,
        seed,
        record_every: 100,
        ..AbmConfig::default()
    }
}

#[test]
fn rms_examples() {
    assert_eq!(rms_norm_of(&Tensor64::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]])), 2.5);
    for d in [1usize, 3, 16] {
        let v = rms_norm_of(&Tensor64::eye(d));
        assert!((v - 1.0 / (d as f64).sqrt()).abs() < 1e-15);
    }
    assert_eq!(rms_norm_of(&Tensor64::ones([4, 7])), 1.0);
}

#[test]
fn abm_zero_lr_keeps_initial_norm() {
    let mut rng = Rng::new(1);
    let init = Tensor64::randn([256], 0.3, &mut rng);
    let n0 = rms_norm_of(&init);
    let t = abm_simulate_from(&abm(&[256], 0.0, 0.1, 500, 2), init).unwrap();
    assert!(t.norms.iter().all(|&n| n == n0));
}

#[test]
fn abm_without_decay_keeps_expanding() {
    let runs: Vec<_> = (0..5)
        .map(|s| abm_simulate(&abm(&[32, 32], 1e-3, 0.0, 3000, s)).unwrap())
        .collect();
    let k = runs[0].norms.len();
    let mean: Vec<f64> = (0..k)
        .map(|i| runs.iter().map(|r| r.norms[i]).sum::<f64>() / 5.0)
        .collect();
    for i in 1..k {
        if runs[0].steps[i] > 100 {
            assert!(mean[i] >= mean[i - 1], "step {}", runs[0].steps[i]);
        }
    }
}

#[test]
fn abm_is_deterministic_per_seed() {
    let c = abm(&[8, 8], 1e-2, 0.1, 300, 4);
    assert_eq!(abm_simulate(&c).unwrap(), abm_simulate(&c).unwrap());
    let other = abm_simulate(&abm(&[8, 8], 1e-2, 0.1, 300, 5)).unwrap();
    assert_ne!(abm_simulate(&c).unwrap(), other);
}

#[test]
fn abm_rejects_zero_steps() {
    assert!(matches!(
        abm_simulate(&abm(&[2], 1e-3, 0.1, 0, 0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn abm_terminal_norm_tracks_s() {
    let steps = 20_000;
    let terminal = |eta: f64, lambda: f64| {
        (0..5)
            .map(|s| abm_simulate(&abm(&[32, 32], eta, lambda, steps, s)).unwrap().terminal(steps))
            .sum::<f64>()
            / 5.0
    };
    let a = terminal(1e-3, 0.1);
    let b = terminal(4e-3, 0.025);
    assert!((b / a / 4.0 - 1.0).abs() < 0.15, "ratio {}", b / a);
}

#[test]
fn abm_seed_spread_is_small() {
    let steps = 20_000;
    for lambda in [1e-2, 1.0] {
        let t: Vec<f64> = (0..5)
            .map(|s| {
                abm_simulate(&abm(&[32, 32], 1e-3, lambda, steps, 10 + s))
                    .unwrap()
                    .terminal(steps)
            })
            .collect();
        assert!(coefficient_of_variation(&t) < 0.1, "lambda {lambda}: {t:?}");
    }
}

#[test]
fn equilibrium_scale_examples() {
    assert!((equilibrium_scale(1e-3, 0.1).unwrap() - 0.1).abs() < 1e-15);
    assert!((equilibrium_scale(1e-3, 1e-3).unwrap() - 1.0).abs() < 1e-15);
    let s = equilibrium_scale(2e-3, 0.3).unwrap();
    assert!((equilibrium_scale(8e-3, 0.3).unwrap() / s - 2.0).abs() < 1e-14);
    assert!(matches!(equilibrium_scale(1e-3, 0.0), Err(Error::UndefinedEquilibrium)));
}

#[test]
fn slope_fit_examples() {
    let s = fit_equilibrium_slope(&[(1.0, 1.0), (2.0, 2.0), (4.0, 4.0)]).unwrap();
    assert!((s - 1.0).abs() < 1e-14);
    let s = fit_equilibrium_slope(&[(1.0, 3.0), (2.0, 3.0), (4.0, 3.0)]).unwrap();
    assert!(s.abs() < 1e-14);
    assert!(matches!(
        fit_equilibrium_slope(&[(1.0, 1.0), (0.0, 2.0), (4.0, 4.0)]),
        Err(Error::Domain { .. })
    ));
    assert!(matches!(
        fit_equilibrium_slope(&[(1.0, 1.0), (1.0, 2.0), (4.0, 4.0)]),
        Err(Error::Domain { .. })
    ));
}

proptest! {
    #[test]
    fn slope_recovers_power_law(k in -2.0f64..2.0, c in 0.1f64..10.0) {
        let pairs: Vec<(f64, f64)> = [0.25, 0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&x| (x, c * f64::powf(x, k)))
            .collect();
        prop_assert!((fit_loglog_slope(&pairs).unwrap() - k).abs() < 1e-10);
    }

    #[test]
    fn rms_is_nonnegative_and_homogeneous(v in prop::collection::vec(-10.0f64..10.0, 1..40), t in -5.0f64..5.0) {
        let a = Tensor64::vector(v.clone());
        let n = rms_norm_of(&a);
        prop_assert!(n >= 0.0);
        prop_assert!((rms_norm_of(&a.scale(t)) - t.abs() * n).abs() < 1e-12 * (1.0 + n));
    }
}

#[test]
fn row_distribution_examples() {
    let same = Tensor64::from_rows(&[&[1.0, -2.0, 0.5], &[1.0, -2.0, 0.5]]);
    let d = row_col_norm_distribution(&[same.clone()]).unwrap();
    assert!(d.rows.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    let h = histogram(&d.rows, 40, 0.0, 2.0);
    assert_eq!(h[20], 2);

    let rows: Vec<Vec<f64>> = (1..=4).map(|r| vec![r as f64 * 0.7, r as f64 * -0.7]).collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let d = row_col_norm_distribution(&[Tensor64::from_rows(&refs)]).unwrap();
    for (v, e) in d.rows.iter().zip([0.4, 0.8, 1.2, 1.6]) {
        assert!((v - e).abs() < 1e-14, "{v} vs {e}");
    }
}

#[test]
fn symmetry_drift_constructed_cases() {
    let equal: Vec<_> = (0..4)
        .map(|k| (k, Tensor64::vector(vec![0.5, 1.5]), Tensor64::vector(vec![1.5, 0.5]), vec![1.0]))
        .collect();
    assert!(symmetry_drift(&equal).qk_ratio.iter().all(|&r| (r - 1.0).abs() < 1e-15));

    let mut q = Tensor64::vector(vec![0.3, 1.0, 2.0]);
    let mut k = Tensor64::vector(vec![1.1, 0.2, 0.7]);
    let mut trace = Vec::new();
    for step in 0..5 {
        trace.push((step, q.clone(), k.clone(), vec![]));
        q = q.scale(2.0);
        k = k.scale(0.5);
    }
    let m = symmetry_drift(&trace);
    for i in 1..5 {
        assert!((m.qk_product[i] / m.qk_product[0] - 1.0).abs() < 1e-14);
        assert!((m.qk_ratio[i] / m.qk_ratio[i - 1] - 4.0).abs() < 1e-12);
    }
}

#[test]
fn alignment_examples() {
    let w = Tensor64::eye(2);
    let x = Tensor64::from_rows(&[&[1.0, 1.0]]);
    let a = alignment(&w, 1.0, &x, &x).unwrap();
    assert!((a - 0.5f64.sqrt()).abs() < 1e-5);
    let a3 = alignment(&w, 1.0, &x, &x.scale(3.0)).unwrap();
    assert!((a3 / a - 3.0).abs() < 1e-14);
    assert!(matches!(
        alignment(&Tensor64::zeros([2, 2]), 1.0, &x, &x),
        Err(Error::UndefinedAlignment(_))
    ));
    assert!(matches!(
        alignment(&w, 1.0, &Tensor64::zeros([1, 2]), &x),
        Err(Error::UndefinedAlignment(_))
    ));
}

#[test]
fn random_alignment_follows_inverse_sqrt_width() {
    let mut pairs = Vec::new();
    for d in [16usize, 64, 256] {
        let mut acc = 0.0;
        for s in 0..20 {
            let mut rng = Rng::new(1000 * d as u64 + s);
            let w = Tensor64::randn([d, d], 0.7, &mut rng);
            let x = Tensor64::randn([1, d], 1.3, &mut rng);
            let y: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| w.get2(i, j) * x.data()[j]).sum())
                .collect();
            acc += alignment(&w, 1.0, &x, &Tensor64::vector(y)).unwrap();
        }
        let mean = acc / 20.0;
        assert!((mean * (d as f64).sqrt() - 1.0).abs() < 0.15, "d={d}: {mean}");
        pairs.push((d as f64, mean));
    }
    assert!((fit_loglog_slope(&pairs).unwrap() + 0.5).abs() < 0.05);
}
