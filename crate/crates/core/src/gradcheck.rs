//! Central finite-difference checks for graph-built losses.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Per-input error, `max|ad − fd| / max(max|fd|, max|ad|, 1e-12)`.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of `build` with central differences.
///
/// `build` receives a fresh graph and one leaf per input and must return a
/// single-element loss. Every input entry is perturbed by `±h`.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let l = build(&mut g, &vars)?;
        Ok(g.value(l).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let ad = grads.take(v).expect("leaf gradient");
        let mut fd = vec![0.0; inputs[i].len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let fd = Tensor::new(inputs[i].shape().to_vec(), fd)?;
        let denom = fd.max_abs().max(ad.max_abs()).max(1e-12);
        per_input.push(ad.max_abs_diff(&fd) / denom);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        per_input,
        max_rel_error,
    })
}

/// Finite-difference check of every trainable model parameter.
///
/// With `manual`, analytic gradients come from the closed-form multiplier
/// path instead of autodiff through the effective weights.
pub fn check_model(
    model: &mut Model<f64>,
    batch: &[Vec<usize>],
    z_coeff: f64,
    manual: bool,
    h: f64,
) -> Result<ModelGradcheck> {
    let (_, grads) = model.loss_and_grads(batch, z_coeff, manual)?;
    let mut worst = Vec::new();
    for id in 0..model.store.len() {
        if !model.store.get(id).trainable {
            continue;
        }
        let n = model.store.value(id).len();
        let mut fd = vec![0.0; n];
        for (k, slot) in fd.iter_mut().enumerate() {
            let orig = model.store.value(id).data()[k];
            model.store.get_mut(id).value.data_mut()[k] = orig + h;
            let up = model.loss_value(batch, z_coeff)?;
            model.store.get_mut(id).value.data_mut()[k] = orig - h;
            let down = model.loss_value(batch, z_coeff)?;
            model.store.get_mut(id).value.data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let fd = Tensor::new(model.store.value(id).shape().to_vec(), fd)?;
        let denom = fd.max_abs().max(grads[id].max_abs()).max(1e-12);
        worst.push((
            model.store.get(id).name.clone(),
            grads[id].max_abs_diff(&fd) / denom,
        ));
    }
    let max_rel_error = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(ModelGradcheck {
        per_param: worst,
        max_rel_error,
    })
}

#[derive(Clone, Debug)]
pub struct ModelGradcheck {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
}
