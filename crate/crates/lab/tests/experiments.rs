use proptest::prelude::*;
use sfl_core::optim::{MatrixOptimizer, Schedule};
use sfl_core::BlockKind;
use sfl_lab::config::{expand_sweep, role_eta_lambda, TuningMode};
use sfl_lab::experiments::{
    self, geomean, spearman, spread, standin_tuning, Experiment, Scale, ScaleSettings,
};

/// A scale small enough to run every experiment in seconds.
fn toy() -> ScaleSettings {
    let mut s = Scale::Quick.settings();
    s.base.model.width = 8;
    s.base.model.seq_len = 8;
    s.base.model.n_heads = 2;
    s.base.model.n_kv_heads = 1;
    s.base.model.ssm_state_dim = 4;
    s.base.data.train_tokens = 4_000;
    s.base.data.eval_tokens = 600;
    s.base.train.batch_size = 2;
    s.base.train.eval_seqs = 2;
    s.base.train.telemetry_every = 5;
    s.base.schedule = Schedule {
        peak_lr: 1e-2,
        warmup_steps: 2,
        constant_steps: 12,
        decay_steps: 6,
        decay_factor: 8.0,
    };
    s.s_grid = vec![0.5, 1.0, 2.0];
    s.width_grid = vec![8, 16, 32];
    s
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    // Monotone but non-linear still ranks perfectly.
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]) - 1.0).abs() < 1e-12);
    // Ties take the average rank: ranks (0.5,0.5,2) against (0,1,2).
    let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
    assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12, "{r}");
}

#[test]
fn aggregate_helpers() {
    assert!((geomean(&[1.0, 4.0]) - 2.0).abs() < 1e-12);
    assert!(geomean(&[]).is_nan());
    assert_eq!(spread(&[2.0, 8.0, 4.0]), 4.0);
}

#[test]
fn names_parse() {
    for e in Experiment::ALL {
        assert_eq!(e.as_str().parse::<Experiment>().unwrap(), e);
    }
    assert_eq!("lr-sweep".parse::<Experiment>().unwrap(), Experiment::LrSweep);
    assert!("nope".parse::<Experiment>().is_err());
    assert_eq!("full".parse::<Scale>().unwrap(), Scale::Full);
    assert!("huge".parse::<Scale>().is_err());
}

#[test]
fn scale_settings_are_valid_configs() {
    for scale in [Scale::Quick, Scale::Full] {
        let s = scale.settings();
        s.base.validate().unwrap();
        assert_eq!(s.width_grid, vec![32, 64, 128, 256]);
        assert!(s.s_grid.contains(&1.0));
    }
}

#[test]
fn standin_tables_satisfy_every_mode() {
    for mode in TuningMode::ALL {
        let mut c = toy().base;
        c.tuning = Some(standin_tuning(mode));
        c.resolved().unwrap();
    }
}

#[test]
fn projector_sweep_holds_eta_eff() {
    let set = toy();
    let r = experiments::projector(&set, MatrixOptimizer::Adamw, None).unwrap();
    assert_eq!(r.points.len(), 9);
    let (eta0, lambda0) = set.sweep_baseline();
    let mut c = set.config("check", MatrixOptimizer::Adamw);
    c.sweep.s_grid = vec![0.3, 3.0];
    c.sweep.eta_eff = (eta0 * lambda0).sqrt();
    c.sweep.s_roles = vec!["projector".into()];
    for run in expand_sweep(&c).unwrap() {
        let (eta, lambda) = role_eta_lambda(&run, "projector");
        assert!(((eta * lambda).sqrt() - (eta0 * lambda0).sqrt()).abs() < 1e-12);
        // Other matrices keep the global settings.
        assert_eq!(role_eta_lambda(&run, "mlp.up"), (c.schedule.peak_lr, c.optim.weight_decay));
    }
    for p in &r.points {
        assert!(p.abm_norm > 0.0 && p.proj_norm > 0.0);
        assert_eq!(p.mult_norm.is_some(), p.mode != sfl_core::ProjectorMode::Fpn);
    }
}

#[test]
fn depth_table_has_one_row_per_block() {
    let set = toy();
    let r = experiments::depth(&set, MatrixOptimizer::Adamw, None).unwrap();
    let kinds: Vec<BlockKind> = r.rows.iter().map(|row| row.block).collect();
    assert_eq!(kinds, set.base.model.blocks);
    for row in &r.rows {
        assert!(row.ratio.is_finite() && row.ratio > 0.0);
        assert!(!row.multipliers.is_empty());
    }
    assert!(r.rows[1].multipliers.contains_key("dt"));
}

#[test]
fn width_sweep_reports_every_width() {
    let set = toy();
    let r = experiments::width(&set, MatrixOptimizer::Adamw, None).unwrap();
    let widths: Vec<usize> = r.points.iter().map(|p| p.width).collect();
    assert_eq!(widths, set.width_grid);
    assert!(r.exp_s_proj.is_finite() && r.exp_alignment.is_finite());
    assert!(r.points.iter().all(|p| p.alignment > 0.0));
}

#[test]
fn gradclip_pairs_align_step_by_step() {
    let set = toy();
    let r = experiments::gradclip(&set, MatrixOptimizer::Adamw, None).unwrap();
    assert_eq!(r.steps.len(), set.base.steps() as usize);
    assert_eq!(r.scale_excluded.len(), r.scale_included.len());
    for (a, b) in r.excl_run_included_norm.iter().zip(&r.excl_run_total_norm) {
        assert!(a <= b);
    }
}

#[test]
fn symmetry_traces_start_balanced() {
    let set = toy();
    let r = experiments::symmetry(&set, MatrixOptimizer::Adamw, None).unwrap();
    assert_eq!(r.runs.len(), 2);
    for run in &r.runs {
        let m = &run.metrics;
        assert_eq!(m.steps[0], 0);
        assert!((m.qk_ratio[0] - 1.0).abs() < 1e-12);
        assert!((m.qk_product[0] - 1.0).abs() < 1e-12);
        assert_eq!(m.residual_rms[0].len(), set.base.model.blocks.len());
    }
}

#[test]
fn tuning_runs_eight_configs() {
    let set = toy();
    let r = experiments::tuning(&set, MatrixOptimizer::Muon, None).unwrap();
    assert_eq!(r.rows.len(), 8);
    assert!(r.gap_slope.is_finite());
    assert_eq!(r.gap_trace[0].0, 0);
}

#[test]
fn tuning_search_is_greedy_and_consistent() {
    let r = experiments::search_tuning(&toy(), MatrixOptimizer::Adamw, None).unwrap();
    assert!(r.best_loss <= r.baseline_loss);
    let accepted: Vec<_> = r.steps.iter().filter(|s| s.accepted).collect();
    if let Some(last) = accepted.last() {
        assert_eq!(last.final_loss, r.best_loss);
    } else {
        assert_eq!(r.best_loss, r.baseline_loss);
    }
    for s in &accepted {
        assert!(s.final_loss < r.baseline_loss - experiments::TUNING_MIN_GAIN);
    }
}

#[test]
fn named_runner_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let v = experiments::run_named(Experiment::LrSweep, MatrixOptimizer::Adamw, &toy(), Some(dir.path()))
        .unwrap();
    assert!(v.get("best_lr").is_some());
    assert!(dir.path().join("lr_sweep.summary.json").exists());
}

proptest! {
    #[test]
    fn spearman_is_bounded_and_symmetric(a in prop::collection::vec(-5.0f64..5.0, 3..10)) {
        let b: Vec<f64> = a.iter().map(|x| x.sin()).collect();
        let r = spearman(&a, &b);
        prop_assume!(r.is_finite());
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((r - spearman(&b, &a)).abs() < 1e-12);
    }
}
