//! Optimizers, per-tensor policies, clipping, schedules and width recipes.

pub mod adamw;
pub mod clip;
pub mod muon;
pub mod mup;
pub mod schedule;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use adamw::{adamw_step, AdamConfig, AdamState};
pub use clip::{clip_global_norm, clip_norms, ClipStats};
pub use muon::{muon_step, newton_schulz, MuonConfig, MuonState, NS_COEFFS};
pub use mup::{effective_lr, mup_recipe, s_sweep, MupRecipe};
pub use schedule::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Muon,
    AdamwForVectors,
}

/// Optimizer used for matrix parameters. Everything else always gets AdamW.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixOptimizer {
    #[default]
    Adamw,
    Muon,
}

impl MatrixOptimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adamw => "adamw",
            Self::Muon => "muon",
        }
    }
}

impl std::str::FromStr for MatrixOptimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Self::Adamw),
            "muon" => Ok(Self::Muon),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub id: usize,
    pub lr_mult: f64,
    pub wd_mult: f64,
    pub clip_excluded: bool,
    pub optimizer: OptimizerKind,
    pub is_matrix: bool,
}

/// How parameters are sorted into groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupPolicy {
    pub matrix_optimizer: MatrixOptimizer,
    /// Absolute peak LR for multipliers; it follows the schedule's shape.
    pub multiplier_lr: f64,
    /// Absolute decay for multipliers (λ_lrm). Zero disables it.
    pub multiplier_wd: f64,
    pub vector_lr_mult: f64,
    pub vector_wd_mult: f64,
    pub exclude_multipliers_from_clip: bool,
    /// Extra LR/WD factors for matrices keyed by role, e.g. `"mlp.down"`.
    /// Multipliers sharing the role are not affected.
    pub role_lr_mult: BTreeMap<String, f64>,
    pub role_wd_mult: BTreeMap<String, f64>,
}

impl Default for GroupPolicy {
    fn default() -> Self {
        Self {
            matrix_optimizer: MatrixOptimizer::Adamw,
            multiplier_lr: 1e-2,
            multiplier_wd: 2e-3,
            vector_lr_mult: 1.0,
            vector_wd_mult: 0.0,
            exclude_multipliers_from_clip: true,
            role_lr_mult: BTreeMap::new(),
            role_wd_mult: BTreeMap::new(),
        }
    }
}

/// One group per parameter. `peak_lr` and `weight_decay` are the global
/// values the multipliers' absolute settings are expressed against.
pub fn build_groups<T: Scalar>(
    store: &ParamStore<T>,
    policy: &GroupPolicy,
    peak_lr: f64,
    weight_decay: f64,
) -> Vec<ParamGroup> {
    let rel = |abs: f64, base: f64| if base > 0.0 { abs / base } else { 0.0 };
    store
        .iter()
        .enumerate()
        .map(|(id, p)| {
            match p.kind {
                ParamKind::Matrix => ParamGroup {
                    id,
                    lr_mult: policy.role_lr_mult.get(&p.role).copied().unwrap_or(1.0),
                    wd_mult: policy.role_wd_mult.get(&p.role).copied().unwrap_or(1.0),
                    clip_excluded: false,
                    optimizer: match policy.matrix_optimizer {
                        MatrixOptimizer::Adamw => OptimizerKind::Adamw,
                        MatrixOptimizer::Muon => OptimizerKind::Muon,
                    },
                    is_matrix: true,
                },
                ParamKind::Multiplier => ParamGroup {
                    id,
                    lr_mult: rel(policy.multiplier_lr, peak_lr),
                    wd_mult: rel(policy.multiplier_wd, weight_decay),
                    clip_excluded: policy.exclude_multipliers_from_clip,
                    optimizer: OptimizerKind::AdamwForVectors,
                    is_matrix: false,
                },
                ParamKind::Vector => ParamGroup {
                    id,
                    lr_mult: policy.vector_lr_mult,
                    wd_mult: policy.vector_wd_mult,
                    clip_excluded: false,
                    optimizer: OptimizerKind::AdamwForVectors,
                    is_matrix: false,
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamState<T> {
    Adam(AdamState<T>),
    Muon(MuonState<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub weight_decay: f64,
    pub adam: AdamConfig,
    pub muon: MuonConfig,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.1,
            adam: AdamConfig::default(),
            muon: MuonConfig::default(),
            clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub groups: Vec<ParamGroup>,
    pub states: Vec<ParamState<T>>,
    pub cfg: OptimConfig,
    pub steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(
        store: &ParamStore<T>,
        policy: &GroupPolicy,
        cfg: OptimConfig,
        peak_lr: f64,
    ) -> Result<Self> {
        let groups = build_groups(store, policy, peak_lr, cfg.weight_decay);
        Self::with_groups(store, groups, cfg)
    }

    pub fn with_groups(
        store: &ParamStore<T>,
        groups: Vec<ParamGroup>,
        cfg: OptimConfig,
    ) -> Result<Self> {
        if groups.len() != store.len() {
            return Err(Error::Config(format!(
                "{} groups for {} parameters",
                groups.len(),
                store.len()
            )));
        }
        let mut states = Vec::with_capacity(groups.len());
        for (g, p) in groups.iter().zip(store.iter()) {
            let shape = p.value.shape();
            states.push(match g.optimizer {
                OptimizerKind::Muon => {
                    if !g.is_matrix || shape.len() != 2 {
                        return Err(Error::Config(format!(
                            "Muon assigned to non-matrix parameter {}",
                            p.name
                        )));
                    }
                    ParamState::Muon(MuonState {
                        momentum: Tensor::zeros(shape.to_vec()),
                    })
                }
                OptimizerKind::Adamw | OptimizerKind::AdamwForVectors => {
                    ParamState::Adam(AdamState::new(shape))
                }
            });
        }
        Ok(Self {
            groups,
            states,
            cfg,
            steps: 0,
        })
    }

    pub fn clip_exclusion(&self) -> Vec<bool> {
        self.groups.iter().map(|g| g.clip_excluded).collect()
    }

    /// Apply one update with scheduled rate `lr` to every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let wd = self.cfg.weight_decay;
        for ((group, state), (param, grad)) in self
            .groups
            .iter()
            .zip(self.states.iter_mut())
            .zip(store.iter_mut().zip(grads))
        {
            if !param.trainable {
                continue;
            }
            let eta = lr * group.lr_mult;
            let lambda = wd * group.wd_mult;
            match state {
                ParamState::Adam(s) => {
                    adamw_step(&mut param.value, grad, s, eta, lambda, &self.cfg.adam)
                }
                ParamState::Muon(s) => {
                    muon_step(&mut param.value, grad, s, eta, lambda, &self.cfg.muon)?
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Optimizer state as named tensors for the checkpoint container.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "opt.steps".to_string(),
            Tensor::scalar(T::lit(self.steps as f64)),
        )];
        for (p, s) in store.iter().zip(&self.states) {
            match s {
                ParamState::Adam(a) => {
                    out.push((format!("opt.{}.m", p.name), a.m.clone()));
                    out.push((format!("opt.{}.v", p.name), a.v.clone()));
                    out.push((
                        format!("opt.{}.t", p.name),
                        Tensor::scalar(T::lit(a.t as f64)),
                    ));
                }
                ParamState::Muon(m) => {
                    out.push((format!("opt.{}.momentum", p.name), m.momentum.clone()));
                }
            }
        }
        out
    }

    /// Inverse of [`Optimizer::state_tensors`]; missing entries are an error.
    pub fn load_state_tensors(
        &mut self,
        store: &ParamStore<T>,
        tensors: &[(String, Tensor<T>)],
    ) -> Result<()> {
        let map: BTreeMap<&str, &Tensor<T>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: String, shape: &[usize]| -> Result<Tensor<T>> {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok((*t).clone())
        };
        let as_count = |t: Tensor<T>| t.data()[0].as_f64().round() as u64;
        self.steps = as_count(fetch("opt.steps".into(), &[1])?);
        for (p, s) in store.iter().zip(self.states.iter_mut()) {
            let shape = p.value.shape();
            match s {
                ParamState::Adam(a) => {
                    a.m = fetch(format!("opt.{}.m", p.name), shape)?;
                    a.v = fetch(format!("opt.{}.v", p.name), shape)?;
                    a.t = as_count(fetch(format!("opt.{}.t", p.name), &[1])?);
                }
                ParamState::Muon(m) => {
                    m.momentum = fetch(format!("opt.{}.momentum", p.name), shape)?;
                }
            }
        }
        Ok(())
    }
}
