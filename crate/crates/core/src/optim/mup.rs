use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ways to keep a layer's output scale fixed as width `d` grows from `d_base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MupRecipe {
    LrOnly,
    LrAndWd,
    Multiplier,
}

impl FromStr for MupRecipe {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr_only" => Ok(Self::LrOnly),
            "lr_and_wd" => Ok(Self::LrAndWd),
            "multiplier" => Ok(Self::Multiplier),
            other => Err(Error::Config(format!("unknown width recipe {other:?}"))),
        }
    }
}

/// `(lr_factor, wd_factor, s_factor)` for a width change.
pub fn mup_recipe(recipe: MupRecipe, d: usize, d_base: usize) -> Result<(f64, f64, f64)> {
    if d == 0 || d_base == 0 {
        return Err(Error::Config("widths must be positive".into()));
    }
    let r = d_base as f64 / d as f64;
    Ok(match recipe {
        MupRecipe::LrOnly => (r, 1.0, 1.0),
        MupRecipe::LrAndWd => (r, 1.0 / r, 1.0),
        MupRecipe::Multiplier => (1.0, 1.0, r),
    })
}

/// `sqrt(η·λ)`, the rate at which decay and updates exchange norm.
pub fn effective_lr(eta: f64, lambda: f64) -> f64 {
    (eta * lambda).sqrt()
}

/// `(η, λ)` pairs with `sqrt(ηλ) = eta_eff` and `sqrt(η/λ) = s` for each `s`.
pub fn s_sweep(eta_eff: f64, grid: &[f64]) -> Vec<(f64, f64)> {
    grid.iter().map(|&s| (eta_eff * s, eta_eff / s)).collect()
}
