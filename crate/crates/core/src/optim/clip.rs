use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipStats {
    /// Factor applied to every gradient (1 when no clipping happened).
    pub scale: f64,
    /// Global ℓ2 norm over the tensors that count toward clipping.
    pub included_norm: f64,
    /// Global ℓ2 norm over all tensors, before scaling.
    pub total_norm: f64,
}

/// Norms that clipping would see, without modifying anything.
pub fn clip_norms<T: Scalar>(grads: &[Tensor<T>], excluded: &[bool]) -> (f64, f64) {
    let mut inc = 0.0;
    let mut tot = 0.0;
    for (g, &ex) in grads.iter().zip(excluded) {
        let s = g.sum_sq().as_f64();
        tot += s;
        if !ex {
            inc += s;
        }
    }
    (inc.sqrt(), tot.sqrt())
}

/// Global-norm clipping where `excluded` tensors do not count toward the
/// norm but are still rescaled along with everything else.
pub fn clip_global_norm<T: Scalar>(
    grads: &mut [Tensor<T>],
    threshold: f64,
    excluded: &[bool],
) -> ClipStats {
    assert_eq!(grads.len(), excluded.len(), "one exclusion flag per gradient");
    let (included_norm, total_norm) = clip_norms(grads, excluded);
    let scale = if included_norm > threshold {
        threshold / included_norm
    } else {
        1.0
    };
    if scale < 1.0 {
        let s = T::lit(scale);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    ClipStats {
        scale,
        included_norm,
        total_norm,
    }
}
