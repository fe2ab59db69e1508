use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{matmul, matmul_bt};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Quintic Newton–Schulz coefficients `(a, b, c)` for
/// `X ← aX + (b·XXᵀ + c·(XXᵀ)²)X`.
pub const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuonConfig {
    pub momentum: f64,
    pub nesterov: bool,
    pub ns_steps: usize,
    /// Multiply the orthogonalized update by `sqrt(d_out / d_in)`.
    pub shape_scale: bool,
}

impl Default for MuonConfig {
    fn default() -> Self {
        Self {
            momentum: 0.95,
            nesterov: true,
            ns_steps: 5,
            shape_scale: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MuonState<T> {
    pub momentum: Tensor<T>,
}

/// Approximate orthogonalization of a matrix.
///
/// The input is scaled by its Frobenius norm so every singular value is at
/// most 1, then iterated on the wide orientation (`rows ≤ cols`) so the Gram
/// matrix is the smaller one. A zero matrix stays zero.
pub fn newton_schulz<T: Scalar>(g: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    let (r0, c0) = g.dims2()?;
    let tall = r0 > c0;
    let x0 = if tall { g.transpose()? } else { g.clone() };
    let (m, n) = if tall { (c0, r0) } else { (r0, c0) };
    let norm = x0.l2();
    if norm == T::zero() {
        return Ok(Tensor::zeros(vec![r0, c0]));
    }
    let mut x: Vec<T> = x0.data().iter().map(|&v| v / norm).collect();
    let (a, b, c) = (T::lit(NS_COEFFS.0), T::lit(NS_COEFFS.1), T::lit(NS_COEFFS.2));
    for _ in 0..steps {
        let gram = matmul_bt(&x, &x, m, n, m);
        let gram2 = matmul(&gram, &gram, m, m, m);
        let poly: Vec<T> = gram.iter().zip(&gram2).map(|(&g1, &g2)| b * g1 + c * g2).collect();
        let px = matmul(&poly, &x, m, m, n);
        for (xv, pv) in x.iter_mut().zip(px) {
            *xv = a * *xv + pv;
        }
    }
    let out = Tensor::new([m, n], x)?;
    if tall {
        out.transpose()
    } else {
        Ok(out)
    }
}

/// One Muon step: momentum, Newton–Schulz, shape scale, decoupled decay.
pub fn muon_step<T: Scalar>(
    p: &mut Tensor<T>,
    g: &Tensor<T>,
    state: &mut MuonState<T>,
    lr: f64,
    wd: f64,
    cfg: &MuonConfig,
) -> Result<()> {
    let (d_out, d_in) = p
        .dims2()
        .map_err(|_| Error::Config(format!("Muon needs a matrix, got shape {:?}", p.shape())))?;
    let mu = T::lit(cfg.momentum);
    for (b, &gv) in state.momentum.data_mut().iter_mut().zip(g.data()) {
        *b = mu * *b + gv;
    }
    let update = if cfg.nesterov {
        let data = g
            .data()
            .iter()
            .zip(state.momentum.data())
            .map(|(&gv, &b)| gv + mu * b)
            .collect();
        Tensor::new([d_out, d_in], data)?
    } else {
        state.momentum.clone()
    };
    let o = newton_schulz(&update, cfg.ns_steps)?;
    let scale = if cfg.shape_scale {
        (d_out as f64 / d_in as f64).sqrt()
    } else {
        1.0
    };
    let step = T::lit(lr * scale);
    let decay = T::lit(lr * wd);
    for (pv, &ov) in p.data_mut().iter_mut().zip(o.data()) {
        *pv -= step * ov;
        *pv -= decay * *pv;
    }
    Ok(())
}
