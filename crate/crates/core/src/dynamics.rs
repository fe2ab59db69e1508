//! Noise-equilibrium analysis: Adam Brownian motion, equilibrium fits, norm
//! telemetry, symmetry drift and alignment.
//!
//! All norms use the relative mean square convention `‖W‖ = sqrt(mean(W²))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamConfig, AdamState, Schedule};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn rms_norm_of<T: Scalar>(t: &Tensor<T>) -> f64 {
    rms(t.data())
}

pub fn rms<T: Scalar>(v: &[T]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbmConfig {
    pub shape: Vec<usize>,
    pub schedule: Schedule,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub steps: u64,
    pub seed: u64,
    pub record_every: u64,
}

impl Default for AbmConfig {
    fn default() -> Self {
        Self {
            shape: vec![64, 64],
            schedule: Schedule::constant(1e-3, 20_000),
            lambda: 0.1,
            adam: AdamConfig::default(),
            steps: 20_000,
            seed: 0,
            record_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    pub steps: Vec<u64>,
    pub norms: Vec<f64>,
}

impl NormTrace {
    pub fn push(&mut self, step: u64, norm: f64) {
        self.steps.push(step);
        self.norms.push(norm);
    }

    pub fn last(&self) -> Option<f64> {
        self.norms.last().copied()
    }

    /// Mean over the records whose step lies in the final `frac` of
    /// `[0, total]`. Falls back to the last record if none qualify.
    pub fn tail_mean(&self, total: u64, frac: f64) -> f64 {
        let cut = total as f64 * (1.0 - frac);
        let tail: Vec<f64> = self
            .steps
            .iter()
            .zip(&self.norms)
            .filter(|(&s, _)| s as f64 > cut)
            .map(|(_, &n)| n)
            .collect();
        if tail.is_empty() {
            self.last().unwrap_or(0.0)
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }

    /// Terminal norm: mean over the last 5% of steps.
    pub fn terminal(&self, total: u64) -> f64 {
        self.tail_mean(total, 0.05)
    }
}

/// AdamW driven by i.i.d. standard normal gradients, starting from zero.
pub fn abm_simulate(cfg: &AbmConfig) -> Result<NormTrace> {
    let n: usize = cfg.shape.iter().product();
    abm_simulate_from(cfg, Tensor::zeros(cfg.shape.clone()).reshape(vec![n])?)
}

/// Same as [`abm_simulate`] from a given initial tensor.
pub fn abm_simulate_from(cfg: &AbmConfig, init: Tensor<f64>) -> Result<NormTrace> {
    if cfg.steps == 0 {
        return Err(Error::Config("ABM needs at least one step".into()));
    }
    let every = cfg.record_every.max(1);
    let mut rng = Rng::fork(cfg.seed, "abm");
    let mut p = init;
    let mut g = Tensor::zeros(p.shape().to_vec());
    let mut st = AdamState::new(p.shape());
    let mut trace = NormTrace::default();
    trace.push(0, rms_norm_of(&p));
    for t in 1..=cfg.steps {
        for v in g.data_mut() {
            *v = rng.normal();
        }
        adamw_step(&mut p, &g, &mut st, cfg.schedule.lr(t), cfg.lambda, &cfg.adam);
        if t % every == 0 || t == cfg.steps {
            trace.push(t, rms_norm_of(&p));
        }
    }
    Ok(trace)
}

/// `S = sqrt(η/λ)`, the scale that equilibrium norms are proportional to.
pub fn equilibrium_scale(eta: f64, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::UndefinedEquilibrium);
    }
    Ok((eta / lambda).sqrt())
}

/// Ordinary least squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Slope of `log‖W‖` against `log S`.
pub fn fit_equilibrium_slope(pairs: &[(f64, f64)]) -> Result<f64> {
    fit_loglog_slope(pairs)
}

/// Least-squares exponent of a power law through positive `(x, y)` points.
pub fn fit_loglog_slope(pairs: &[(f64, f64)]) -> Result<f64> {
    if let Some(bad) = pairs.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::Domain {
            op: "fit_loglog_slope",
            detail: format!("needs positive values, got {bad:?}"),
        });
    }
    let mut xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(Error::Domain {
            op: "fit_loglog_slope",
            detail: format!("needs 3 distinct x values, got {}", xs.len()),
        });
    }
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    Ok(ols_slope(&lx, &ly))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowColDistribution {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
}

/// Row and column norms of each effective weight, divided by that layer's
/// mean row (column) norm, pooled across layers.
pub fn row_col_norm_distribution<T: Scalar>(layers: &[Tensor<T>]) -> Result<RowColDistribution> {
    let mut out = RowColDistribution::default();
    for w in layers {
        let (r, c) = w.dims2()?;
        let rows: Vec<f64> = (0..r).map(|i| rms(w.row(i))).collect();
        let cols: Vec<f64> = (0..c)
            .map(|j| {
                let s: f64 = (0..r).map(|i| w.get2(i, j).as_f64().powi(2)).sum();
                (s / r as f64).sqrt()
            })
            .collect();
        for (src, dst) in [(rows, &mut out.rows), (cols, &mut out.cols)] {
            let m = src.iter().sum::<f64>() / src.len() as f64;
            if m > 0.0 {
                dst.extend(src.iter().map(|v| v / m));
            }
        }
    }
    Ok(out)
}

/// Standard deviation over mean (population form).
pub fn coefficient_of_variation(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    var.sqrt() / m.abs()
}

/// Counts in `bins` equal-width buckets over `[lo, hi]`; values outside are
/// clamped into the end buckets.
pub fn histogram(v: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    if bins == 0 || hi <= lo {
        return h;
    }
    for &x in v {
        let k = ((x - lo) / (hi - lo) * bins as f64).floor();
        let k = k.clamp(0.0, (bins - 1) as f64) as usize;
        h[k] += 1;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub product: f64,
    pub ratio: f64,
}

/// Product and ratio of the norms of two paired multipliers.
pub fn pair_metrics<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> PairMetrics {
    let (na, nb) = (rms_norm_of(a), rms_norm_of(b));
    PairMetrics {
        product: na * nb,
        ratio: na / nb,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SymmetryMetrics {
    pub steps: Vec<u64>,
    pub qk_product: Vec<f64>,
    pub qk_ratio: Vec<f64>,
    /// `residual_rms[k][b]`: residual stream RMS after block `b` at probe `k`.
    pub residual_rms: Vec<Vec<f64>>,
}

/// Turn a trace of paired multipliers (one entry per probe) into per-probe
/// product/ratio series.
pub fn symmetry_drift<T: Scalar>(
    trace: &[(u64, Tensor<T>, Tensor<T>, Vec<f64>)],
) -> SymmetryMetrics {
    let mut m = SymmetryMetrics::default();
    for (step, a, b, resid) in trace {
        let pm = pair_metrics(a, b);
        m.steps.push(*step);
        m.qk_product.push(pm.product);
        m.qk_ratio.push(pm.ratio);
        m.residual_rms.push(resid.clone());
    }
    m
}

/// `α = ‖y‖ / (s·d·‖W‖·‖x‖)` with `d` the input width (columns of `w`).
pub fn alignment<T: Scalar>(w: &Tensor<T>, s: f64, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (_, d) = w.dims2()?;
    let nw = rms_norm_of(w);
    let nx = rms_norm_of(x);
    if nw == 0.0 || nx == 0.0 || s == 0.0 {
        return Err(Error::UndefinedAlignment("zero weight, input or scalar norm"));
    }
    Ok(rms_norm_of(y) / (s.abs() * d as f64 * nw * nx))
}
