//! The named experiments. Each one builds its run configs from a
//! [`ScaleSettings`], runs them (concurrently, see [`crate::sweep`]) and
//! reduces the metric streams to a small result table.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sfl_core::dynamics::{
    abm_simulate, alignment, coefficient_of_variation, fit_equilibrium_slope, fit_loglog_slope,
    ols_slope, AbmConfig, SymmetryMetrics,
};
use sfl_core::model::{Block, ForwardOptions, Probes};
use sfl_core::optim::{MatrixOptimizer, Schedule};
use sfl_core::{BlockKind, Graph, ModelConfig, MultiplierSpec, PlacementMode, ProjectorMode, Tensor};

use crate::config::{expand_sweep, role_eta_lambda, LrGrid, RunConfig, TuningConfig, TuningMode};
use crate::data::{fixed_windows, generate_data};
use crate::error::{io_err, LabError, Result};
use crate::metrics::MetricSink;
use crate::sweep::{best_of, run_many, LrPoint, LrSweepReport};
use crate::train::RunResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Width 32, three blocks, 4000 steps: under a minute per run on one core.
    Quick,
    /// Width 128, six blocks, 5000 steps.
    Full,
}

impl FromStr for Scale {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Self::Quick),
            "full" => Ok(Self::Full),
            other => Err(LabError::Config(format!("unknown scale {other:?}"))),
        }
    }
}

/// Everything an experiment needs besides its own knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSettings {
    pub name: String,
    /// Model size, data, schedule and training settings shared by all runs.
    pub base: RunConfig,
    /// S values relative to the swept layers' baseline, `S / S₀`.
    pub s_grid: Vec<f64>,
    /// Baseline LR and WD of the swept layers, as multiples of the global
    /// peak LR and weight decay. `sqrt(η₀λ₀)` is held fixed along the sweep.
    pub sweep_lr_mult: f64,
    pub sweep_wd_mult: f64,
    pub width_grid: Vec<usize>,
    pub lr_grid: LrGrid,
}

impl Scale {
    pub fn settings(self) -> ScaleSettings {
        use BlockKind::*;
        let mut base = RunConfig::default();
        base.optim.weight_decay = 0.1;
        base.train.eval_seqs = 32;
        base.train.checkpoint = false;
        match self {
            Scale::Quick => {
                base.model = ModelConfig {
                    width: 32,
                    seq_len: 32,
                    blocks: vec![Attn, Ssm, Mlp],
                    n_heads: 4,
                    n_kv_heads: 2,
                    ssm_state_dim: 8,
                    vocab: base.data.vocab,
                    ..ModelConfig::default()
                };
                base.schedule = Schedule {
                    peak_lr: 1e-2,
                    warmup_steps: 200,
                    constant_steps: 3200,
                    decay_steps: 600,
                    decay_factor: 8.0,
                };
                base.train.telemetry_every = 100;
                base.data.train_tokens = 800_000;
            }
            Scale::Full => {
                base.model = ModelConfig {
                    width: 128,
                    seq_len: 128,
                    blocks: vec![Attn, Ssm, Mlp, Attn, Ssm, Mlp],
                    vocab: base.data.vocab,
                    ..ModelConfig::default()
                };
                base.schedule = Schedule {
                    peak_lr: 3e-3,
                    warmup_steps: 250,
                    constant_steps: 4000,
                    decay_steps: 750,
                    decay_factor: 8.0,
                };
                base.train.telemetry_every = 100;
                base.data.train_tokens = 2_000_000;
                base.data.eval_tokens = 32 * 129;
            }
        }
        ScaleSettings {
            name: match self {
                Scale::Quick => "quick",
                Scale::Full => "full",
            }
            .into(),
            sweep_lr_mult: 1.0,
            sweep_wd_mult: 1.0,
            // 7 points, 1/4 to 4.
            s_grid: (0..7).map(|k| 0.25 * 16f64.powf(k as f64 / 6.0)).collect(),
            width_grid: vec![32, 64, 128, 256],
            lr_grid: LrGrid {
                min: base.schedule.peak_lr / 8.0,
                max: base.schedule.peak_lr * 8.0,
            },
            base,
        }
    }
}

impl ScaleSettings {
    pub fn config(&self, run_id: &str, opt: MatrixOptimizer) -> RunConfig {
        let mut c = self.base.clone();
        c.run_id = format!("{run_id}-{}", opt.as_str());
        c.policy.matrix_optimizer = opt;
        c
    }

    /// `(η₀, λ₀)` of the swept layers.
    pub fn sweep_baseline(&self) -> (f64, f64) {
        (
            self.base.schedule.peak_lr * self.sweep_lr_mult,
            self.base.optim.weight_decay * self.sweep_wd_mult,
        )
    }

    /// Sets up an S sweep over `roles` on the relative grid.
    fn s_sweep(&self, c: &mut RunConfig, roles: &[&str]) {
        let (eta0, lambda0) = self.sweep_baseline();
        let s0 = (eta0 / lambda0).sqrt();
        c.sweep.s_grid = self.s_grid.iter().map(|s| s * s0).collect();
        c.sweep.eta_eff = (eta0 * lambda0).sqrt();
        c.sweep.s_roles = roles.iter().map(|r| r.to_string()).collect();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Projector,
    Mlp,
    Depth,
    Width,
    Tuning,
    Gradclip,
    Symmetry,
    LrSweep,
    TuningSearch,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Self::Projector,
        Self::Mlp,
        Self::Depth,
        Self::Width,
        Self::Tuning,
        Self::Gradclip,
        Self::Symmetry,
        Self::LrSweep,
        Self::TuningSearch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Projector => "projector",
            Self::Mlp => "mlp",
            Self::Depth => "depth",
            Self::Width => "width",
            Self::Tuning => "tuning",
            Self::Gradclip => "gradclip",
            Self::Symmetry => "symmetry",
            Self::LrSweep => "lr_sweep",
            Self::TuningSearch => "tuning_search",
        }
    }
}

impl FromStr for Experiment {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s || e.as_str().replace('_', "-") == s)
            .ok_or_else(|| LabError::Config(format!("unknown experiment {s:?}")))
    }
}

/// Runs one experiment and returns its result table as JSON. With
/// `out_dir`, the table is also written to `<out_dir>/<name>.summary.json`.
pub fn run_named(
    name: Experiment,
    opt: MatrixOptimizer,
    set: &ScaleSettings,
    out_dir: Option<&Path>,
) -> Result<serde_json::Value> {
    let v = match name {
        Experiment::Projector => serde_json::to_value(projector(set, opt, out_dir)?)?,
        Experiment::Mlp => serde_json::to_value(mlp(set, true, opt, out_dir)?)?,
        Experiment::Depth => serde_json::to_value(depth(set, opt, out_dir)?)?,
        Experiment::Width => serde_json::to_value(width(set, opt, out_dir)?)?,
        Experiment::Tuning => serde_json::to_value(tuning(set, opt, out_dir)?)?,
        Experiment::Gradclip => serde_json::to_value(gradclip(set, opt, out_dir)?)?,
        Experiment::Symmetry => serde_json::to_value(symmetry(set, opt, out_dir)?)?,
        Experiment::LrSweep => serde_json::to_value(lr_sweep(set, opt, out_dir)?)?,
        Experiment::TuningSearch => serde_json::to_value(search_tuning(set, opt, out_dir)?)?,
    };
    if let Some(dir) = out_dir {
        let path = dir.join(format!("{}.summary.json", name.as_str()));
        std::fs::write(&path, serde_json::to_string_pretty(&v)?).map_err(io_err(&path))?;
    }
    Ok(v)
}

pub fn geomean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

/// `max / min` of a set of positive values.
pub fn spread(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // Ties share their average rank.
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let (mut da, mut db) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    num / (da * db).sqrt()
}

fn last(r: &RunResult, metric: &str) -> f64 {
    r.last(metric).unwrap_or(f64::NAN)
}

fn block_prefixes(cfg: &ModelConfig, kind: BlockKind) -> Vec<(usize, String)> {
    cfg.blocks
        .iter()
        .enumerate()
        .filter(|(_, &k)| k == kind)
        .map(|(i, k)| (i, format!("blocks.{i}.{}", k.as_str())))
        .collect()
}

fn abm_for_role(c: &RunConfig, role: &str, shape: Vec<usize>) -> AbmConfig {
    let (eta, lambda) = role_eta_lambda(c, role);
    AbmConfig {
        shape,
        schedule: Schedule {
            peak_lr: eta,
            ..c.schedule
        },
        lambda,
        adam: c.optim.adam,
        steps: c.steps(),
        seed: c.seed,
        record_every: c.train.telemetry_every,
    }
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorPoint {
    pub mode: ProjectorMode,
    /// S relative to the swept layers' baseline.
    pub s: f64,
    pub final_loss: f64,
    pub diverged: bool,
    /// Terminal rms of the stored projector matrix.
    pub proj_norm: f64,
    /// Terminal rms of the effective projector weight.
    pub eff_norm: f64,
    pub logits_norm: f64,
    /// Terminal rms of the pre-projector multiplier, when there is one.
    pub mult_norm: Option<f64>,
    /// ABM terminal norm under the same η(t), λ and shape.
    pub abm_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorResult {
    pub points: Vec<ProjectorPoint>,
}

impl ProjectorResult {
    pub fn mode(&self, mode: ProjectorMode) -> Vec<&ProjectorPoint> {
        self.points.iter().filter(|p| p.mode == mode).collect()
    }

    pub fn at(&self, mode: ProjectorMode, s: f64) -> Option<&ProjectorPoint> {
        self.points.iter().find(|p| p.mode == mode && p.s == s)
    }

    pub fn logit_spread(&self, mode: ProjectorMode) -> f64 {
        spread(&self.mode(mode).iter().map(|p| p.logits_norm).collect::<Vec<_>>())
    }

    /// Log-log slope of the terminal projector norm against S.
    pub fn norm_slope(&self, mode: ProjectorMode) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self.mode(mode).iter().map(|p| (p.s, p.proj_norm)).collect();
        Ok(fit_equilibrium_slope(&pts)?)
    }
}

/// S sweep over the projector matrix for FPN, SPN and VPN, z-loss off.
pub fn projector(set: &ScaleSettings, opt: MatrixOptimizer, out: Option<&Path>) -> Result<ProjectorResult> {
    let modes = [ProjectorMode::Fpn, ProjectorMode::Spn, ProjectorMode::Vpn];
    let mut cfgs = Vec::new();
    let mut keys = Vec::new();
    for mode in modes {
        let mut c = set.config(&format!("projector-{}", mode.as_str()), opt);
        c.model.placement = PlacementMode::None;
        c.model.projector = mode;
        c.train.z_loss = 0.0;
        set.s_sweep(&mut c, &["projector"]);
        cfgs.extend(expand_sweep(&c)?);
        keys.extend(set.s_grid.iter().map(|&s| (mode, s)));
    }
    let runs = run_many(&cfgs, out)?;
    let mut points = Vec::new();
    for ((mode, s), r) in keys.into_iter().zip(&runs) {
        let m = &r.config.model;
        let abm_cfg = abm_for_role(&r.config, "projector", vec![m.vocab, m.width]);
        let trace = abm_simulate(&abm_cfg)?;
        if let Some(dir) = out {
            let mut sink = MetricSink::to_dir(&format!("{}-abm", r.run_id), dir)?;
            for (&t, &n) in trace.steps.iter().zip(&trace.norms) {
                sink.record(t, "abm/norm/projector.w", n)?;
            }
            sink.flush()?;
        }
        points.push(ProjectorPoint {
            mode,
            s,
            final_loss: r.final_loss,
            diverged: r.diverged(),
            proj_norm: last(r, "norm/projector.w"),
            eff_norm: last(r, "norm_eff/projector"),
            logits_norm: last(r, "act/logits"),
            mult_norm: r
                .last("mult/projector.scalar")
                .or_else(|| r.last("mult/projector.col")),
            abm_norm: trace.terminal(abm_cfg.steps),
        });
    }
    Ok(ProjectorResult { points })
}


pub const MLP_ROLES: [&str; 3] = ["mlp.gate", "mlp.up", "mlp.down"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpPoint {
    /// S relative to the swept layers' baseline.
    pub s: f64,
    pub final_loss: f64,
    pub diverged: bool,
    /// Geometric mean over MLP blocks of the block-output rms.
    pub block_out_norm: f64,
    /// Geometric mean of the stored MLP matrix norms.
    pub matrix_norm: f64,
    /// Geometric mean of the learned MLP scalars (1 without multipliers).
    pub scalar: f64,
    /// Geometric mean of the effective MLP weight norms.
    pub eff_norm: f64,
    pub ssm_conv_norm: f64,
    pub ssm_d_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpResult {
    pub optimizer: MatrixOptimizer,
    pub with_multipliers: bool,
    pub points: Vec<MlpPoint>,
}

impl MlpResult {
    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.final_loss).collect()
    }

    pub fn block_out_spread(&self) -> f64 {
        spread(&self.points.iter().map(|p| p.block_out_norm).collect::<Vec<_>>())
    }

    pub fn matrix_slope(&self) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.s, p.matrix_norm)).collect();
        Ok(fit_equilibrium_slope(&pts)?)
    }

    /// Spread of `scalar × matrix norm`, which stays flat when the scalar
    /// learns `1/S`.
    pub fn product_spread(&self) -> f64 {
        spread(&self.points.iter().map(|p| p.scalar * p.matrix_norm).collect::<Vec<_>>())
    }
}

/// S sweep over the three MLP matrices with frozen backbone norms.
pub fn mlp(
    set: &ScaleSettings,
    with_multipliers: bool,
    opt: MatrixOptimizer,
    out: Option<&Path>,
) -> Result<MlpResult> {
    let tag = if with_multipliers { "lrm" } else { "plain" };
    let mut c = set.config(&format!("mlp-{tag}"), opt);
    c.model.placement = PlacementMode::None;
    c.model.projector = ProjectorMode::Fpn;
    c.model.backbone_norm_learnable = false;
    if with_multipliers {
        for r in MLP_ROLES {
            c.model.placement_overrides.insert(r.into(), MultiplierSpec::SCALAR);
        }
    }
    // Fixed-LR multipliers without decay.
    c.policy.multiplier_wd = 0.0;
    set.s_sweep(&mut c, &MLP_ROLES);
    let runs = run_many(&expand_sweep(&c)?, out)?;
    let mlps = block_prefixes(&c.model, BlockKind::Mlp);
    let ssms = block_prefixes(&c.model, BlockKind::Ssm);
    let layer_metric = |r: &RunResult, f: &dyn Fn(&str) -> String| -> f64 {
        let v: Vec<f64> = mlps
            .iter()
            .flat_map(|(_, p)| ["gate", "up", "down"].map(|l| last(r, &f(&format!("{p}.{l}")))))
            .collect();
        geomean(&v)
    };
    let points = set
        .s_grid
        .iter()
        .zip(&runs)
        .map(|(&s, r)| MlpPoint {
            s,
            final_loss: r.final_loss,
            diverged: r.diverged(),
            block_out_norm: geomean(
                &mlps
                    .iter()
                    .map(|(i, _)| last(r, &format!("act/blocks.{i}.mlp.out")))
                    .collect::<Vec<_>>(),
            ),
            matrix_norm: layer_metric(r, &|p| format!("norm/{p}.w")),
            scalar: if with_multipliers {
                layer_metric(r, &|p| format!("mult/{p}.scalar"))
            } else {
                1.0
            },
            eff_norm: layer_metric(r, &|p| format!("norm_eff/{p}")),
            ssm_conv_norm: geomean(
                &ssms.iter().map(|(_, p)| last(r, &format!("norm/{p}.conv"))).collect::<Vec<_>>(),
            ),
            ssm_d_norm: geomean(
                &ssms.iter().map(|(_, p)| last(r, &format!("norm/{p}.d_skip"))).collect::<Vec<_>>(),
            ),
        })
        .collect();
    Ok(MlpResult {
        optimizer: opt,
        with_multipliers,
        points,
    })
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub layer: usize,
    pub block: BlockKind,
    /// Block-output rms with scalar multipliers over the rms without.
    pub ratio: f64,
    /// Terminal scalar multipliers of the block's matrices, by local name.
    pub multipliers: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthResult {
    pub rows: Vec<DepthRow>,
    pub final_loss_with: f64,
    pub final_loss_without: f64,
    /// Across-layer coefficient of variation of the dt scalars.
    pub dt_cv: f64,
    /// Across-layer coefficient of variation of the per-block mean scalar.
    pub block_mean_cv: f64,
}

impl DepthResult {
    /// True when every learned scalar ended within 5% of its init.
    pub fn all_near_one(&self) -> bool {
        self.rows
            .iter()
            .flat_map(|r| r.multipliers.values())
            .all(|&v| (v - 1.0).abs() < 0.05)
    }
}

/// Paired runs with and without scalar multipliers on every matrix.
pub fn depth(set: &ScaleSettings, opt: MatrixOptimizer, out: Option<&Path>) -> Result<DepthResult> {
    let mut with = set.config("depth-scalar", opt);
    with.model.placement = PlacementMode::ScalarAll;
    with.model.projector = ProjectorMode::Spn;
    let mut without = set.config("depth-plain", opt);
    without.model.placement = PlacementMode::None;
    without.model.projector = ProjectorMode::Fpn;
    let runs = run_many(&[with, without], out)?;
    let (rw, ro) = (&runs[0], &runs[1]);
    let model = &rw.model;
    let mut rows = Vec::new();
    let mut dt = Vec::new();
    let mut block_means = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        let kind = block.kind();
        let metric = format!("act/blocks.{i}.{}.out", kind.as_str());
        let mut multipliers = BTreeMap::new();
        for layer in block.layers() {
            if let (Some(s), _, _) = layer.factors(&model.store) {
                let local = layer.prefix.rsplit('.').next().unwrap_or_default().to_string();
                multipliers.insert(local, s);
            }
        }
        if let Some(&v) = multipliers.get("dt").filter(|_| kind == BlockKind::Ssm) {
            dt.push(v);
        }
        if !multipliers.is_empty() {
            block_means.push(multipliers.values().sum::<f64>() / multipliers.len() as f64);
        }
        rows.push(DepthRow {
            layer: i,
            block: kind,
            ratio: last(rw, &metric) / last(ro, &metric),
            multipliers,
        });
    }
    Ok(DepthResult {
        rows,
        final_loss_with: rw.final_loss,
        final_loss_without: ro.final_loss,
        dt_cv: coefficient_of_variation(&dt),
        block_mean_cv: coefficient_of_variation(&block_means),
    })
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthPoint {
    pub width: usize,
    pub final_loss: f64,
    pub diverged: bool,
    /// Geometric mean of all stored matrix norms.
    pub matrix_norm: f64,
    pub logits_norm: f64,
    pub qk_norm: f64,
    pub dt_norm: f64,
    pub gate_norm: f64,
    pub block_out_norm: f64,
    pub embed_norm: f64,
    pub s_proj: f64,
    pub s_dt: f64,
    /// Product of the query and key scalars.
    pub s_qk: f64,
    /// Projector alignment on one held-out sequence.
    pub alignment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthResult {
    pub points: Vec<WidthPoint>,
    pub exp_s_proj: f64,
    pub exp_s_dt: f64,
    pub exp_s_qk: f64,
    pub exp_alignment: f64,
}

impl WidthResult {
    fn col(&self, f: impl Fn(&WidthPoint) -> f64) -> Vec<f64> {
        self.points.iter().map(f).collect()
    }

    /// `max/min − 1` of the geometric-mean matrix norm across widths.
    pub fn matrix_norm_variation(&self) -> f64 {
        spread(&self.col(|p| p.matrix_norm)) - 1.0
    }

    pub fn logits_spread(&self) -> f64 {
        spread(&self.col(|p| p.logits_norm))
    }

    pub fn qk_spread(&self) -> f64 {
        spread(&self.col(|p| p.qk_norm))
    }

    pub fn dt_spread(&self) -> f64 {
        spread(&self.col(|p| p.dt_norm))
    }
}

fn rmsnorm_rows(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (rows, cols) = x.dims2()?;
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Alignment of the projector on one held-out sequence.
fn projector_alignment(r: &RunResult) -> Result<f64> {
    let cfg = &r.config;
    let corpus = generate_data(&cfg.data)?;
    let seq = fixed_windows(&corpus.eval, cfg.model.seq_len, 1).remove(0);
    let model = &r.model;
    let mut g = Graph::new();
    let b = model.bind(&mut g, false)?;
    let mut probes = Probes::new();
    let logits = model.forward(&mut g, &b, &seq, &ForwardOptions::default(), Some(&mut probes))?;
    let last_resid = format!("blocks.{}.resid", model.blocks.len() - 1);
    let resid = probes
        .iter()
        .find(|(n, _)| *n == last_resid)
        .map(|(_, v)| *v)
        .ok_or_else(|| LabError::Config("missing residual probe".into()))?;
    let x = rmsnorm_rows(g.value(resid))?;
    let (s, _, _) = model.projector.factors(&model.store);
    let w = model.store.value(model.projector.w);
    Ok(alignment(w, s.unwrap_or(1.0), &x, g.value(logits))?)
}

/// Widths at fixed η and λ with scalar multipliers everywhere and frozen
/// backbone norms.
pub fn width(set: &ScaleSettings, opt: MatrixOptimizer, out: Option<&Path>) -> Result<WidthResult> {
    let mut c = set.config("width", opt);
    c.model.placement = PlacementMode::ScalarAll;
    c.model.projector = ProjectorMode::Spn;
    c.model.backbone_norm_learnable = false;
    c.sweep.width_grid = set.width_grid.clone();
    let runs = run_many(&expand_sweep(&c)?, out)?;
    let attn = block_prefixes(&c.model, BlockKind::Attn);
    let ssm = block_prefixes(&c.model, BlockKind::Ssm);
    let mlp = block_prefixes(&c.model, BlockKind::Mlp);
    let mut points = Vec::new();
    for r in &runs {
        let gm = |names: Vec<String>| geomean(&names.iter().map(|n| last(r, n)).collect::<Vec<_>>());
        let matrices: Vec<String> = r
            .model
            .layers()
            .iter()
            .map(|l| format!("norm/{}.w", l.prefix))
            .collect();
        let block_outs: Vec<String> = r
            .config
            .model
            .blocks
            .iter()
            .enumerate()
            .map(|(i, k)| format!("act/blocks.{i}.{}.out", k.as_str()))
            .collect();
        let s_qk: Vec<f64> = attn
            .iter()
            .map(|(_, p)| {
                (last(r, &format!("mult/{p}.q.scalar")) * last(r, &format!("mult/{p}.k.scalar"))).abs()
            })
            .collect();
        points.push(WidthPoint {
            width: r.config.model.width,
            final_loss: r.final_loss,
            diverged: r.diverged(),
            matrix_norm: gm(matrices),
            logits_norm: last(r, "act/logits"),
            qk_norm: gm(attn.iter().map(|(i, _)| format!("act/blocks.{i}.attn.qk")).collect()),
            dt_norm: gm(ssm.iter().map(|(i, _)| format!("act/blocks.{i}.ssm.dt")).collect()),
            gate_norm: gm(mlp.iter().map(|(i, _)| format!("act/blocks.{i}.mlp.gate_pre")).collect()),
            block_out_norm: gm(block_outs),
            embed_norm: last(r, "act/embed.out"),
            // Scalars may cross zero; the fit is over their magnitude.
            s_proj: last(r, "mult/projector.scalar").abs(),
            s_dt: geomean(
                &ssm.iter()
                    .map(|(_, p)| last(r, &format!("mult/{p}.dt.scalar")).abs())
                    .collect::<Vec<_>>(),
            ),
            s_qk: geomean(&s_qk),
            alignment: projector_alignment(r)?,
        });
    }
    let exp = |f: &dyn Fn(&WidthPoint) -> f64| -> Result<f64> {
        let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.width as f64, f(p))).collect();
        Ok(fit_loglog_slope(&pts)?)
    };
    Ok(WidthResult {
        exp_s_proj: exp(&|p| p.s_proj)?,
        exp_s_dt: exp(&|p| p.s_dt)?,
        exp_s_qk: exp(&|p| p.s_qk)?,
        exp_alignment: exp(&|p| p.alignment)?,
        points,
    })
}

/// Tuned multiplier tables, frozen from `search_tuning` at the quick scale
/// with AdamW. Only halving the SSM and MLP learning rates cleared the noise
/// threshold; the wd and forward tables stay at identity.
pub fn standin_tuning(mode: TuningMode) -> TuningConfig {
    let table = |pairs: &[(&str, f64)]| -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    };
    let mut lr = Vec::new();
    for (group, roles) in TUNING_GROUPS {
        if group == "ssm" || group == "mlp" {
            lr.extend(roles.iter().map(|&r| (r, 0.5)));
        }
    }
    TuningConfig {
        mode,
        lr_table: table(&lr),
        wd_table: table(&[("embed", 1.0)]),
        forward_table: table(&[("embed", 1.0)]),
    }
}

/// Role groups the tuning search moves together.
pub const TUNING_GROUPS: [(&str, &[&str]); 5] = [
    ("embed", &["embed"]),
    ("projector", &["projector"]),
    ("attn", &["attn.q", "attn.k", "attn.v", "attn.out"]),
    ("ssm", &["ssm.x", "ssm.z", "ssm.b", "ssm.c", "ssm.dt", "ssm.out"]),
    ("mlp", &["mlp.gate", "mlp.up", "mlp.down"]),
];

/// Loss improvements below this are treated as seed noise by the search.
pub const TUNING_MIN_GAIN: f64 = 5e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningStep {
    pub table: String,
    pub group: String,
    pub factor: f64,
    pub final_loss: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningSearch {
    pub baseline_loss: f64,
    pub best_loss: f64,
    pub tables: TuningConfig,
    pub steps: Vec<TuningStep>,
}

/// Greedy one-pass coordinate search for the tuned tables: LR, then WD,
/// then forward multipliers, each group tried at ×½ and ×2 on the untuned
/// baseline (no learnable multipliers, VPN projector).
pub fn search_tuning(set: &ScaleSettings, opt: MatrixOptimizer, out: Option<&Path>) -> Result<TuningSearch> {
    let mut c = set.config("tune", opt);
    c.model.placement = PlacementMode::None;
    c.model.projector = ProjectorMode::Vpn;
    let mut tables = TuningConfig {
        mode: TuningMode::Full,
        ..Default::default()
    };
    let run = |tables: &TuningConfig, id: String| -> Result<f64> {
        let mut c = c.clone();
        c.run_id = id;
        // FULL validation wants every table present; empty ones are neutral.
        let mut t = tables.clone();
        for map in [&mut t.lr_table, &mut t.wd_table, &mut t.forward_table] {
            map.entry("embed".into()).or_insert(1.0);
        }
        c.tuning = Some(t);
        Ok(run_many(std::slice::from_ref(&c), out)?.remove(0).final_loss)
    };
    let baseline_loss = run(&tables, format!("tune-{}-base", opt.as_str()))?;
    let mut best = baseline_loss;
    let mut steps = Vec::new();
    for table in ["lr", "wd", "forward"] {
        for (group, roles) in TUNING_GROUPS {
            for factor in [0.5, 2.0] {
                let mut cand = tables.clone();
                let map = match table {
                    "lr" => &mut cand.lr_table,
                    "wd" => &mut cand.wd_table,
                    _ => &mut cand.forward_table,
                };
                for r in roles {
                    map.insert(r.to_string(), factor);
                }
                let id = format!("tune-{}-{table}-{group}-x{factor}", opt.as_str());
                let loss = run(&cand, id)?;
                let accepted = loss < best - TUNING_MIN_GAIN;
                steps.push(TuningStep {
                    table: table.into(),
                    group: group.into(),
                    factor,
                    final_loss: loss,
                    accepted,
                });
                if accepted {
                    best = loss;
                    tables = cand;
                    break;
                }
            }
        }
    }
    Ok(TuningSearch {
        baseline_loss,
        best_loss: best,
        tables,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub mode: TuningMode,
    pub lrm: bool,
    pub final_loss: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub optimizer: MatrixOptimizer,
    pub rows: Vec<TuningRow>,
    /// Mean over the four parent configs of `loss(−LRM) − loss(+LRM)` on
    /// the held-out loss, per telemetry step.
    pub gap_trace: Vec<(u64, f64)>,
    /// OLS slope of the gap from 25% of training to the end of the
    /// constant-LR phase.
    pub gap_slope: f64,
}

impl TuningResult {
    pub fn loss(&self, mode: TuningMode, lrm: bool) -> f64 {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.lrm == lrm)
            .map_or(f64::NAN, |r| r.final_loss)
    }
}

/// The four tuning configurations, each with and without learnable
/// multipliers (vector, symmetry-aware placement).
pub fn tuning(set: &ScaleSettings, opt: MatrixOptimizer, out: Option<&Path>) -> Result<TuningResult> {
    let mut cfgs = Vec::new();
    let mut keys = Vec::new();
    for mode in TuningMode::ALL {
        for lrm in [false, true] {
            let tag = if lrm { "lrm" } else { "base" };
            let mut c = set.config(&format!("tuning-{}-{tag}", mode.as_str()), opt);
            c.tuning = Some(standin_tuning(mode));
            c.model.placement = if lrm {
                PlacementMode::VectorSymmetryAware
            } else {
                PlacementMode::None
            };
            c.model.projector = ProjectorMode::Vpn;
            cfgs.push(c);
            keys.push((mode, lrm));
        }
    }
    let runs = run_many(&cfgs, out)?;
    let rows: Vec<TuningRow> = keys
        .iter()
        .zip(&runs)
        .map(|(&(mode, lrm), r)| TuningRow {
            mode,
            lrm,
            final_loss: r.final_loss,
            diverged: r.diverged(),
        })
        .collect();

    let eval: Vec<Vec<(u64, f64)>> = runs.iter().map(|r| r.series("loss/eval")).collect();
    let n = eval.iter().map(Vec::len).min().unwrap_or(0);
    let gap_trace: Vec<(u64, f64)> = (0..n)
        .map(|k| {
            let gap = (0..TuningMode::ALL.len())
                .map(|m| eval[2 * m][k].1 - eval[2 * m + 1][k].1)
                .sum::<f64>()
                / TuningMode::ALL.len() as f64;
            (eval[0][k].0, gap)
        })
        .collect();
    let total = set.base.steps() as f64;
    let end = set.base.schedule.constant_end() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = gap_trace
        .iter()
        .filter(|(t, _)| *t as f64 >= 0.25 * total && *t as f64 <= end)
        .map(|&(t, g)| (t as f64, g))
        .unzip();
    Ok(TuningResult {
        optimizer: opt,
        rows,
        gap_slope: ols_slope(&xs, &ys),
        gap_trace,
    })
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradclipResult {
    pub steps: Vec<u64>,
    pub scale_excluded: Vec<f64>,
    pub scale_included: Vec<f64>,
    /// Gradient norms of the exclusion run without / with multipliers.
    pub excl_run_included_norm: Vec<f64>,
    pub excl_run_total_norm: Vec<f64>,
    pub final_loss_excluded: f64,
    pub final_loss_included: f64,
}

impl GradclipResult {
    /// Smallest `scale_excluded − scale_included` over the paired steps.
    pub fn min_scale_margin(&self) -> f64 {
        self.scale_excluded
            .iter()
            .zip(&self.scale_included)
            .map(|(a, b)| a - b)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Paired runs with clip threshold 1 that differ only in whether
/// multiplier gradients count towards the clipped norm.
pub fn gradclip(set: &ScaleSettings, opt: MatrixOptimizer, out: Option<&Path>) -> Result<GradclipResult> {
    let mk = |exclude: bool| {
        let tag = if exclude { "excluded" } else { "included" };
        let mut c = set.config(&format!("gradclip-{tag}"), opt);
        c.model.placement = PlacementMode::VectorFull;
        c.model.projector = ProjectorMode::Vpn;
        c.optim.clip = Some(1.0);
        c.policy.exclude_multipliers_from_clip = exclude;
        c
    };
    let runs = run_many(&[mk(true), mk(false)], out)?;
    let (ex, inc) = (&runs[0], &runs[1]);
    let values = |r: &RunResult, m: &str| r.series(m).into_iter().map(|(_, v)| v).collect::<Vec<_>>();
    let n = ex.series("clip/scale").len().min(inc.series("clip/scale").len());
    let mut res = GradclipResult {
        steps: ex.series("clip/scale").iter().map(|p| p.0).collect(),
        scale_excluded: values(ex, "clip/scale"),
        scale_included: values(inc, "clip/scale"),
        excl_run_included_norm: values(ex, "grad_norm/included"),
        excl_run_total_norm: values(ex, "grad_norm/total"),
        final_loss_excluded: ex.final_loss,
        final_loss_included: inc.final_loss,
    };
    res.steps.truncate(n);
    res.scale_excluded.truncate(n);
    res.scale_included.truncate(n);
    Ok(res)
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryRun {
    pub lambda_lrm: f64,
    pub final_loss: f64,
    pub metrics: SymmetryMetrics,
}

impl SymmetryRun {
    pub fn qk_ratio_growth(&self) -> f64 {
        let r = &self.metrics.qk_ratio;
        r[r.len() - 1] / r[0]
    }

    /// Largest factor by which the QK product moved away from its start.
    pub fn qk_product_change(&self) -> f64 {
        let p = &self.metrics.qk_product;
        p.iter().map(|&v| (v / p[0]).max(p[0] / v)).fold(1.0, f64::max)
    }

    /// Final-block residual rms at the end over its value at 25% of training.
    pub fn residual_growth(&self) -> f64 {
        let m = &self.metrics;
        let total = *m.steps.last().unwrap_or(&0) as f64;
        let k = m
            .steps
            .iter()
            .position(|&s| s as f64 >= 0.25 * total)
            .unwrap_or(0);
        let last_block = |row: &Vec<f64>| *row.last().unwrap_or(&f64::NAN);
        last_block(&m.residual_rms[m.residual_rms.len() - 1]) / last_block(&m.residual_rms[k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryResult {
    pub runs: Vec<SymmetryRun>,
}

impl SymmetryResult {
    pub fn run(&self, lambda_lrm: f64) -> Option<&SymmetryRun> {
        self.runs.iter().find(|r| r.lambda_lrm == lambda_lrm)
    }
}

pub const SYMMETRY_LAMBDAS: [f64; 2] = [0.0, 2e-3];

/// Vector multipliers everywhere, with and without light multiplier decay.
pub fn symmetry(set: &ScaleSettings, opt: MatrixOptimizer, out: Option<&Path>) -> Result<SymmetryResult> {
    let cfgs: Vec<RunConfig> = SYMMETRY_LAMBDAS
        .iter()
        .map(|&l| {
            let mut c = set.config(&format!("symmetry-wd{l}"), opt);
            c.model.placement = PlacementMode::VectorFull;
            c.model.projector = ProjectorMode::Vpn;
            c.policy.multiplier_wd = l;
            c
        })
        .collect();
    let runs = run_many(&cfgs, out)?;
    let mut res = Vec::new();
    for (&l, r) in SYMMETRY_LAMBDAS.iter().zip(&runs) {
        let attn: Vec<usize> = r
            .model
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b, Block::Attn { .. }))
            .map(|(i, _)| i)
            .collect();
        let nb = r.config.model.blocks.len();
        let product: Vec<Vec<(u64, f64)>> = attn
            .iter()
            .map(|i| r.series(&format!("sym/blocks.{i}.qk_product")))
            .collect();
        let ratio: Vec<Vec<(u64, f64)>> = attn
            .iter()
            .map(|i| r.series(&format!("sym/blocks.{i}.qk_ratio")))
            .collect();
        let resid: Vec<Vec<(u64, f64)>> = (0..nb)
            .map(|i| r.series(&format!("act/blocks.{i}.resid")))
            .collect();
        let n = product.iter().chain(&ratio).chain(&resid).map(Vec::len).min().unwrap_or(0);
        let mut m = SymmetryMetrics::default();
        for k in 0..n {
            m.steps.push(resid[0][k].0);
            m.qk_product.push(geomean(&product.iter().map(|s| s[k].1).collect::<Vec<_>>()));
            m.qk_ratio.push(geomean(&ratio.iter().map(|s| s[k].1).collect::<Vec<_>>()));
            m.residual_rms.push(resid.iter().map(|s| s[k].1).collect());
        }
        res.push(SymmetryRun {
            lambda_lrm: l,
            final_loss: r.final_loss,
            metrics: m,
        });
    }
    Ok(SymmetryResult { runs: res })
}


/// Multiplier-free baseline over the scale's sqrt(2) LR grid.
pub fn lr_sweep(set: &ScaleSettings, opt: MatrixOptimizer, out: Option<&Path>) -> Result<LrSweepReport> {
    let mut c = set.config("lr-sweep", opt);
    c.model.placement = PlacementMode::None;
    c.model.projector = ProjectorMode::Fpn;
    c.sweep.lr_grid = Some(set.lr_grid.clone());
    let runs = run_many(&expand_sweep(&c)?, out)?;
    best_of(
        runs.iter()
            .map(|r| LrPoint {
                lr: r.config.schedule.peak_lr,
                final_loss: r.final_loss,
                diverged: r.diverged(),
            })
            .collect(),
    )
}
