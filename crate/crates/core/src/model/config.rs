use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reparam::{MultiplierSpec, PlacementMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Attn,
    Ssm,
    Mlp,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attn => "attn",
            Self::Ssm => "ssm",
            Self::Mlp => "mlp",
        }
    }
}

/// Multipliers in front of the output projector, which reads the final
/// RMSNorm output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectorMode {
    /// Frozen norm weights: no multiplier at all.
    #[serde(rename = "FPN", alias = "fpn")]
    Fpn,
    /// One learnable scalar.
    #[serde(rename = "SPN", alias = "spn")]
    Spn,
    /// Learnable column vector, i.e. ordinary final RMSNorm weights.
    #[default]
    #[serde(rename = "VPN", alias = "vpn")]
    Vpn,
    /// Column vector plus a per-logit row vector.
    #[serde(rename = "VPN_row", alias = "vpn_row")]
    VpnRow,
}

impl ProjectorMode {
    pub fn spec(self) -> MultiplierSpec {
        match self {
            Self::Fpn => MultiplierSpec::NONE,
            Self::Spn => MultiplierSpec::SCALAR,
            Self::Vpn => MultiplierSpec {
                scalar: false,
                row: false,
                col: true,
            },
            Self::VpnRow => MultiplierSpec::ROW_COL,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fpn => "FPN",
            Self::Spn => "SPN",
            Self::Vpn => "VPN",
            Self::VpnRow => "VPN_row",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: Vec<BlockKind>,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub mlp_expansion: usize,
    pub ssm_state_dim: usize,
    pub ssm_conv_width: usize,
    pub ssm_internal_rmsnorm: bool,
    pub vocab: usize,
    pub seq_len: usize,
    /// Whether the per-block RMSNorm weights train; frozen ones stay at 1.
    pub backbone_norm_learnable: bool,
    pub placement: PlacementMode,
    pub projector: ProjectorMode,
    pub log_scale: bool,
    /// Matrix init std is `init_scale / sqrt(d_in)`; the embedding uses
    /// `init_scale` directly.
    pub init_scale: f64,
    /// Fixed forward multipliers per role (`attn.q`, `projector`, ...).
    pub forward_multipliers: BTreeMap<String, f64>,
    /// Initial factor for learnable multipliers per role; default 1.
    pub multiplier_init: BTreeMap<String, f64>,
    /// Per-role multiplier overrides that replace the placement result.
    pub placement_overrides: BTreeMap<String, MultiplierSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use BlockKind::*;
        Self {
            width: 128,
            blocks: vec![Attn, Ssm, Mlp, Attn, Ssm, Mlp],
            n_heads: 4,
            n_kv_heads: 2,
            mlp_expansion: 2,
            ssm_state_dim: 16,
            ssm_conv_width: 4,
            ssm_internal_rmsnorm: false,
            vocab: 256,
            seq_len: 128,
            backbone_norm_learnable: true,
            placement: PlacementMode::None,
            projector: ProjectorMode::Vpn,
            log_scale: false,
            init_scale: 1.0,
            forward_multipliers: BTreeMap::new(),
            multiplier_init: BTreeMap::new(),
            placement_overrides: BTreeMap::new(),
        }
    }
}

impl ModelConfig {
    /// A few-hundred-parameter model for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        use BlockKind::*;
        Self {
            width: 8,
            blocks: vec![Attn, Ssm, Mlp],
            n_heads: 2,
            n_kv_heads: 1,
            mlp_expansion: 2,
            ssm_state_dim: 3,
            ssm_conv_width: 3,
            vocab: 11,
            seq_len: 6,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.vocab < 2 || self.seq_len == 0 {
            return bad("width, vocab (>= 2) and seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.width % self.n_heads != 0 {
            return bad(format!("width {} not divisible by n_heads {}", self.width, self.n_heads));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.mlp_expansion == 0 || self.ssm_state_dim == 0 || self.ssm_conv_width == 0 {
            return bad("mlp_expansion, ssm_state_dim and ssm_conv_width must be positive".into());
        }
        if !(self.init_scale > 0.0) {
            return bad("init_scale must be positive".into());
        }
        for (role, v) in self.forward_multipliers.iter().chain(&self.multiplier_init) {
            if !(v.is_finite() && *v > 0.0) {
                return bad(format!("multiplier value for {role} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}
