//! Run configuration, read from TOML. Unknown keys are rejected at every level.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sfl_core::optim::{effective_lr, GroupPolicy, OptimConfig, Schedule};
use sfl_core::ModelConfig;

use crate::data::DataSpec;
use crate::error::{io_err, LabError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TuningMode {
    /// No tuned multipliers: every table is forced to 1.
    #[default]
    #[serde(rename = "NONE")]
    None,
    /// Per-role LR multipliers.
    #[serde(rename = "LR")]
    Lr,
    /// Per-role LR and WD multipliers.
    #[serde(rename = "LRWD")]
    LrWd,
    /// LR, WD and fixed forward multipliers.
    #[serde(rename = "FULL")]
    Full,
}

impl TuningMode {
    pub const ALL: [TuningMode; 4] = [Self::None, Self::Lr, Self::LrWd, Self::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "NONE",
            Self::Lr => "LR",
            Self::LrWd => "LRWD",
            Self::Full => "FULL",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub mode: TuningMode,
    pub lr_table: BTreeMap<String, f64>,
    pub wd_table: BTreeMap<String, f64>,
    pub forward_table: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub z_loss: f64,
    /// Telemetry cadence in steps; per-step scalars (loss, lr, clip) are
    /// always recorded.
    pub telemetry_every: u64,
    pub eval_seqs: usize,
    /// Route multiplier gradients through the closed-form mapping instead
    /// of autodiff.
    pub manual_grads: bool,
    pub checkpoint: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 8,
            z_loss: 1e-4,
            telemetry_every: 50,
            eval_seqs: 8,
            manual_grads: false,
            checkpoint: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrGrid {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    /// Equilibrium scales `S = sqrt(η/λ)` at fixed `eta_eff = sqrt(ηλ)`.
    pub s_grid: Vec<f64>,
    /// Zero means "take `sqrt(peak_lr · weight_decay)` of the base config".
    pub eta_eff: f64,
    /// Matrix roles the S sweep applies to; empty means every parameter.
    pub s_roles: Vec<String>,
    /// Widths at fixed η and λ.
    pub width_grid: Vec<usize>,
    /// Peak LR grid with a sqrt(2) step.
    pub lr_grid: Option<LrGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub policy: GroupPolicy,
    pub schedule: Schedule,
    pub tuning: Option<TuningConfig>,
    pub data: DataSpec,
    pub train: TrainSettings,
    pub sweep: SweepAxes,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataSpec::default();
        Self {
            run_id: "run".into(),
            seed: 0,
            model: ModelConfig {
                vocab: data.vocab,
                ..ModelConfig::default()
            },
            optim: OptimConfig::default(),
            policy: GroupPolicy::default(),
            schedule: Schedule::default(),
            tuning: None,
            data,
            train: TrainSettings::default(),
            sweep: SweepAxes::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|source| LabError::Toml {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn steps(&self) -> u64 {
        self.schedule.total_steps()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.vocab != self.data.vocab {
            return Err(LabError::Config(format!(
                "model vocab {} differs from data vocab {}",
                self.model.vocab, self.data.vocab
            )));
        }
        if self.data.train_tokens <= self.model.seq_len || self.data.eval_tokens <= self.model.seq_len
        {
            return Err(LabError::Config("data streams shorter than one window".into()));
        }
        if self.steps() == 0 {
            return Err(LabError::Config("schedule has zero steps".into()));
        }
        if self.train.batch_size == 0 || self.train.eval_seqs == 0 {
            return Err(LabError::Config("batch_size and eval_seqs must be positive".into()));
        }
        if let Some(c) = self.optim.clip {
            if !(c > 0.0) {
                return Err(LabError::Config("clip threshold must be positive".into()));
            }
        }
        if let Some(t) = &self.tuning {
            check_tuning(t)?;
        }
        Ok(())
    }

    /// The config with tuning tables folded into the optimizer policy and
    /// forward multipliers.
    pub fn resolved(&self) -> Result<RunConfig> {
        self.validate()?;
        let mut c = self.clone();
        if let Some(t) = &self.tuning {
            let (lr, wd, fwd) = match t.mode {
                TuningMode::None => Default::default(),
                TuningMode::Lr => (t.lr_table.clone(), BTreeMap::new(), BTreeMap::new()),
                TuningMode::LrWd => (t.lr_table.clone(), t.wd_table.clone(), BTreeMap::new()),
                TuningMode::Full => (t.lr_table.clone(), t.wd_table.clone(), t.forward_table.clone()),
            };
            c.policy.role_lr_mult = lr;
            c.policy.role_wd_mult = wd;
            // A tuned forward value initializes the layer's learnable
            // multiplier when it has one and stays a fixed factor otherwise.
            c.model.forward_multipliers.clear();
            for (role, v) in fwd {
                if c.model.role_spec(&role).map_err(LabError::from)?.is_empty() {
                    c.model.forward_multipliers.insert(role, v);
                } else {
                    c.model.multiplier_init.insert(role, v);
                }
            }
        }
        Ok(c)
    }
}

fn check_tuning(t: &TuningConfig) -> Result<()> {
    let need = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!(
                "tuning mode {} needs a non-empty {what}",
                t.mode.as_str()
            )))
        }
    };
    match t.mode {
        TuningMode::None => Ok(()),
        TuningMode::Lr => need(!t.lr_table.is_empty(), "lr_table"),
        TuningMode::LrWd => {
            need(!t.lr_table.is_empty(), "lr_table")?;
            need(!t.wd_table.is_empty(), "wd_table")
        }
        TuningMode::Full => {
            need(!t.lr_table.is_empty(), "lr_table")?;
            need(!t.wd_table.is_empty(), "wd_table")?;
            need(!t.forward_table.is_empty(), "forward_table")
        }
    }
}

/// `min, min·√2, min·2, …` up to `max` inclusive (with float slack).
pub fn sqrt2_grid(min: f64, max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if !(min > 0.0) || max < min {
        return out;
    }
    let mut k = 0;
    loop {
        let v = min * std::f64::consts::SQRT_2.powi(k);
        if v > max * (1.0 + 1e-9) {
            break;
        }
        out.push(v);
        k += 1;
    }
    out
}

/// Set `(η, λ)` so that `sqrt(η/λ) = s` and `sqrt(ηλ) = eta_eff` for the
/// parameters named by `roles` (all matrices and vectors if empty).
pub fn apply_s_point(cfg: &mut RunConfig, s: f64, eta_eff: f64, roles: &[String]) {
    let (eta, lambda) = (eta_eff * s, eta_eff / s);
    if roles.is_empty() {
        cfg.schedule.peak_lr = eta;
        cfg.optim.weight_decay = lambda;
    } else {
        for r in roles {
            cfg.policy
                .role_lr_mult
                .insert(r.clone(), eta / cfg.schedule.peak_lr);
            cfg.policy
                .role_wd_mult
                .insert(r.clone(), lambda / cfg.optim.weight_decay);
        }
    }
}

/// `(η, λ)` a matrix with `role` actually gets under `cfg`.
pub fn role_eta_lambda(cfg: &RunConfig, role: &str) -> (f64, f64) {
    let lm = cfg.policy.role_lr_mult.get(role).copied().unwrap_or(1.0);
    let wm = cfg.policy.role_wd_mult.get(role).copied().unwrap_or(1.0);
    (cfg.schedule.peak_lr * lm, cfg.optim.weight_decay * wm)
}

/// Expand the sweep axes of `base` into concrete run configs, checking each
/// axis's constraint before anything runs.
pub fn expand_sweep(base: &RunConfig) -> Result<Vec<RunConfig>> {
    let mut out = vec![base.clone()];
    let ax = &base.sweep;
    if !ax.s_grid.is_empty() {
        let eta_eff = if ax.eta_eff > 0.0 {
            ax.eta_eff
        } else {
            effective_lr(base.schedule.peak_lr, base.optim.weight_decay)
        };
        if !(eta_eff > 0.0) {
            return Err(LabError::Config("S sweep needs a positive eta_eff".into()));
        }
        out = out
            .into_iter()
            .flat_map(|c| {
                ax.s_grid.iter().map(move |&s| {
                    let mut c = c.clone();
                    apply_s_point(&mut c, s, eta_eff, &ax.s_roles);
                    c.run_id = format!("{}-S{}", c.run_id, fmt_num(s));
                    c
                })
            })
            .collect();
        for c in &out {
            let roles: Vec<String> = if ax.s_roles.is_empty() {
                vec![String::new()]
            } else {
                ax.s_roles.clone()
            };
            for r in roles {
                let (eta, lambda) = role_eta_lambda(c, &r);
                if ((eta * lambda).sqrt() - eta_eff).abs() > 1e-12 * eta_eff.max(1.0) {
                    return Err(LabError::Config(format!(
                        "{}: sqrt(eta*lambda) = {} != {eta_eff}",
                        c.run_id,
                        (eta * lambda).sqrt()
                    )));
                }
            }
        }
    }
    if !ax.width_grid.is_empty() {
        out = out
            .into_iter()
            .flat_map(|c| {
                ax.width_grid.iter().map(move |&w| {
                    let mut c = c.clone();
                    c.model.width = w;
                    c.run_id = format!("{}-d{w}", c.run_id);
                    c
                })
            })
            .collect();
        let first = (out[0].schedule.peak_lr, out[0].optim.weight_decay);
        if out
            .iter()
            .any(|c| (c.schedule.peak_lr, c.optim.weight_decay) != first)
        {
            return Err(LabError::Config("width sweep must keep eta and lambda fixed".into()));
        }
    }
    if let Some(g) = &ax.lr_grid {
        let grid = sqrt2_grid(g.min, g.max);
        if grid.is_empty() {
            return Err(LabError::Config("empty LR grid".into()));
        }
        out = out
            .into_iter()
            .flat_map(|c| {
                grid.iter().map(move |&lr| {
                    let mut c = c.clone();
                    c.schedule.peak_lr = lr;
                    c.run_id = format!("{}-lr{}", c.run_id, fmt_num(lr));
                    c
                })
            })
            .collect();
    }
    for c in &mut out {
        c.sweep = SweepAxes::default();
        c.validate()?;
    }
    Ok(out)
}

/// Compact, filename-safe number formatting for run ids.
pub fn fmt_num(v: f64) -> String {
    let s = format!("{v:.4e}");
    let (mant, exp) = s.split_once('e').unwrap_or((&s, "0"));
    let mant = mant.trim_end_matches('0').trim_end_matches('.');
    if exp == "0" {
        mant.to_string()
    } else {
        format!("{mant}e{exp}")
    }
}
