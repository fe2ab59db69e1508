//! Learnable multipliers on matrix layers.
//!
//! A layer applies the effective weight `W̄_ij = s · r_i · W_ij · c_j`, where
//! any of the scalar `s`, row vector `r` (length `d_out`) and column vector
//! `c` (length `d_in`) may be absent and then count as exactly 1. With
//! `log_scale` the stored values are logarithms: the factor is
//! `exp(clamp(u, -20, 20))`.
//!
//! Parameters are found by name: a layer with prefix `blocks.0.attn.q` owns
//! `blocks.0.attn.q.w` plus any of `.scalar`, `.row`, `.col` (or their
//! `.log_scalar`, `.log_row`, `.log_col` forms). [`merge_store`] uses the same
//! convention to fold every multiplier into its matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Unary, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bound applied to log-scale multipliers before exponentiation.
pub const LOG_SCALE_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiplierSpec {
    pub scalar: bool,
    pub row: bool,
    pub col: bool,
}

impl MultiplierSpec {
    pub const NONE: Self = Self {
        scalar: false,
        row: false,
        col: false,
    };
    pub const SCALAR: Self = Self {
        scalar: true,
        row: false,
        col: false,
    };
    pub const ROW: Self = Self {
        scalar: false,
        row: true,
        col: false,
    };
    pub const ROW_COL: Self = Self {
        scalar: false,
        row: true,
        col: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.scalar || self.row || self.col)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    #[default]
    None,
    ScalarAll,
    VectorFull,
    VectorSymmetryAware,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockType {
    GatedMlp,
    Attention,
    Ssm,
    Embedding,
    Projector,
}

impl FromStr for BlockType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gated_mlp" | "mlp" => Self::GatedMlp,
            "attention" | "attn" => Self::Attention,
            "ssm" => Self::Ssm,
            "embedding" | "embed" => Self::Embedding,
            "projector" => Self::Projector,
            other => return Err(Error::Config(format!("unknown block type {other:?}"))),
        })
    }
}

impl fmt::Display for BlockType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GatedMlp => "gated_mlp",
            Self::Attention => "attention",
            Self::Ssm => "ssm",
            Self::Embedding => "embedding",
            Self::Projector => "projector",
        })
    }
}

/// Matrix roles inside a block, in a fixed order.
pub fn block_roles(block: BlockType) -> &'static [&'static str] {
    match block {
        BlockType::GatedMlp => &["gate", "up", "down"],
        BlockType::Attention => &["q", "k", "v", "out"],
        BlockType::Ssm => &["x", "z", "b", "c", "dt", "out"],
        BlockType::Embedding => &["embed"],
        BlockType::Projector => &["projector"],
    }
}

/// Which multipliers each matrix of a block receives.
///
/// The symmetry-aware mode places only multipliers that do not create a
/// continuous symmetry with a neighbouring one: a row multiplier on a matrix
/// followed by a column multiplier on the next would be redundant, as would
/// anything directly before an RMSNorm.
pub fn placement(
    block: BlockType,
    mode: PlacementMode,
    has_internal_rmsnorm: bool,
) -> BTreeMap<&'static str, MultiplierSpec> {
    let roles = block_roles(block);
    let uniform = |spec: MultiplierSpec| roles.iter().map(|&r| (r, spec)).collect();
    match mode {
        PlacementMode::None => uniform(MultiplierSpec::NONE),
        PlacementMode::ScalarAll => uniform(MultiplierSpec::SCALAR),
        PlacementMode::VectorFull => uniform(MultiplierSpec::ROW_COL),
        PlacementMode::VectorSymmetryAware => {
            use MultiplierSpec as M;
            let pairs: Vec<(&'static str, MultiplierSpec)> = match block {
                BlockType::GatedMlp => vec![("gate", M::ROW), ("up", M::NONE), ("down", M::ROW_COL)],
                BlockType::Attention => vec![
                    ("q", M::ROW),
                    ("k", M::NONE),
                    ("v", M::NONE),
                    ("out", M::ROW_COL),
                ],
                BlockType::Ssm => vec![
                    ("x", M::NONE),
                    ("z", M::ROW),
                    ("b", M::NONE),
                    ("c", M::NONE),
                    ("dt", M::ROW),
                    ("out", if has_internal_rmsnorm { M::ROW } else { M::ROW_COL }),
                ],
                BlockType::Embedding => vec![("embed", M::ROW_COL)],
                BlockType::Projector => vec![("projector", M::NONE)],
            };
            pairs.into_iter().collect()
        }
    }
}

/// Initial values (effective factors, not log-space) for new multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiplierInit {
    pub scalar: f64,
    pub row: f64,
    pub col: f64,
}

impl Default for MultiplierInit {
    fn default() -> Self {
        Self {
            scalar: 1.0,
            row: 1.0,
            col: 1.0,
        }
    }
}

/// A matrix and its multipliers, as ids into a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamLayer {
    pub prefix: String,
    pub role: String,
    pub w: usize,
    pub scalar: Option<usize>,
    pub row: Option<usize>,
    pub col: Option<usize>,
    pub log_scale: bool,
}

/// Gradients in storage space for each part of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub w: Tensor<T>,
    pub scalar: Option<Tensor<T>>,
    pub row: Option<Tensor<T>>,
    pub col: Option<Tensor<T>>,
}

fn mult_name(prefix: &str, part: &str, log: bool) -> String {
    if log {
        format!("{prefix}.log_{part}")
    } else {
        format!("{prefix}.{part}")
    }
}

fn encode<T: Scalar>(v: f64, log: bool) -> T {
    T::lit(if log { v.ln() } else { v })
}

fn decode<T: Scalar>(u: T, log: bool) -> T {
    if log {
        let c = T::lit(LOG_SCALE_CLAMP);
        u.max(-c).min(c).exp()
    } else {
        u
    }
}

/// `d factor / d stored` for one stored value.
fn decode_grad<T: Scalar>(u: T, log: bool) -> T {
    if !log {
        return T::one();
    }
    let c = T::lit(LOG_SCALE_CLAMP);
    if u < -c || u > c {
        T::zero()
    } else {
        u.exp()
    }
}

impl ReparamLayer {
    /// Registers `w` and the multipliers requested by `spec` in `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        role: &str,
        w: Tensor<T>,
        spec: MultiplierSpec,
        log_scale: bool,
        init: MultiplierInit,
        train_w: bool,
    ) -> Result<Self> {
        let (d_out, d_in) = w.dims2()?;
        let wid = store.add(format!("{prefix}.w"), w, ParamKind::Matrix, role, train_w)?;
        let mut add = |part: &str, len: usize, v: f64| {
            store.add(
                mult_name(prefix, part, log_scale),
                Tensor::full([len], encode::<T>(v, log_scale)),
                ParamKind::Multiplier,
                role,
                true,
            )
        };
        let scalar = spec.scalar.then(|| add("scalar", 1, init.scalar)).transpose()?;
        let row = spec.row.then(|| add("row", d_out, init.row)).transpose()?;
        let col = spec.col.then(|| add("col", d_in, init.col)).transpose()?;
        Ok(Self {
            prefix: prefix.to_string(),
            role: role.to_string(),
            w: wid,
            scalar,
            row,
            col,
            log_scale,
        })
    }

    /// Finds an existing layer by its name prefix.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let w = store
            .id(&format!("{prefix}.w"))
            .ok_or_else(|| Error::Config(format!("missing matrix {prefix}.w")))?;
        let find = |part: &str| -> (Option<usize>, Option<usize>) {
            (
                store.id(&mult_name(prefix, part, false)),
                store.id(&mult_name(prefix, part, true)),
            )
        };
        let parts = [find("scalar"), find("row"), find("col")];
        let any_lin = parts.iter().any(|p| p.0.is_some());
        let any_log = parts.iter().any(|p| p.1.is_some());
        if any_lin && any_log {
            return Err(Error::Config(format!(
                "layer {prefix} mixes linear and log-scale multipliers"
            )));
        }
        let pick = |p: (Option<usize>, Option<usize>)| p.0.or(p.1);
        let layer = Self {
            prefix: prefix.to_string(),
            role: store.get(w).role.clone(),
            w,
            scalar: pick(parts[0]),
            row: pick(parts[1]),
            col: pick(parts[2]),
            log_scale: any_log,
        };
        layer.check_shapes(store)?;
        Ok(layer)
    }

    pub fn spec(&self) -> MultiplierSpec {
        MultiplierSpec {
            scalar: self.scalar.is_some(),
            row: self.row.is_some(),
            col: self.col.is_some(),
        }
    }

    pub fn dims<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(usize, usize)> {
        store.value(self.w).dims2()
    }

    pub fn check_shapes<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let (d_out, d_in) = self.dims(store)?;
        for (id, want, what) in [
            (self.scalar, 1, "scalar"),
            (self.row, d_out, "row"),
            (self.col, d_in, "col"),
        ] {
            if let Some(id) = id {
                let got = store.value(id).len();
                if got != want {
                    return dim_err(
                        "effective_weight",
                        format!("{} {what} multiplier has {got} entries, expected {want}", self.prefix),
                    );
                }
            }
        }
        Ok(())
    }

    /// Effective factors `(s, r, c)` with absent parts as `None`.
    pub fn factors<T: Scalar>(
        &self,
        store: &ParamStore<T>,
    ) -> (Option<T>, Option<Vec<T>>, Option<Vec<T>>) {
        let dec = |id: Option<usize>| {
            id.map(|i| {
                store
                    .value(i)
                    .data()
                    .iter()
                    .map(|&u| decode(u, self.log_scale))
                    .collect::<Vec<T>>()
            })
        };
        (dec(self.scalar).map(|v| v[0]), dec(self.row), dec(self.col))
    }

    /// Builds `W̄` inside a graph so gradients reach `W` and every multiplier.
    pub fn effective_weight<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        store: &ParamStore<T>,
    ) -> Result<Var> {
        self.check_shapes(store)?;
        let lift = |g: &mut Graph<T>, id: usize| -> Result<Var> {
            if self.log_scale {
                let c = g.unary(vars[id], Unary::Clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))?;
                g.exp(c)
            } else {
                Ok(vars[id])
            }
        };
        let mut w = vars[self.w];
        if let Some(id) = self.scalar {
            let s = lift(g, id)?;
            w = g.mul(w, s)?;
        }
        if let Some(id) = self.row {
            let r = lift(g, id)?;
            w = g.scale_rows(w, r)?;
        }
        if let Some(id) = self.col {
            let c = lift(g, id)?;
            w = g.mul(w, c)?;
        }
        Ok(w)
    }

    /// `W̄` as a plain tensor: the merged, multiplier-free matrix.
    pub fn merged_weight<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        self.check_shapes(store)?;
        let w = store.value(self.w);
        let (s, r, c) = self.factors(store);
        Ok(apply_factors(w, s, r.as_deref(), c.as_deref()))
    }

    /// Chain-rule gradients for every part, given `Ḡ = ∂L/∂W̄`.
    pub fn manual_gradients<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        gbar: &Tensor<T>,
    ) -> Result<LayerGrads<T>> {
        self.check_shapes(store)?;
        let w = store.value(self.w);
        let (s, r, c) = self.factors(store);
        let mut out = manual_gradients(w, s, r.as_deref(), c.as_deref(), gbar)?;
        if self.log_scale {
            let chain = |grad: &mut Option<Tensor<T>>, id: Option<usize>| {
                if let (Some(gt), Some(id)) = (grad.as_mut(), id) {
                    for (gv, &u) in gt.data_mut().iter_mut().zip(store.value(id).data()) {
                        *gv *= decode_grad(u, true);
                    }
                }
            };
            chain(&mut out.scalar, self.scalar);
            chain(&mut out.row, self.row);
            chain(&mut out.col, self.col);
        }
        Ok(out)
    }
}

/// `s · r_i · W_ij · c_j` with missing factors treated as 1.
pub fn apply_factors<T: Scalar>(
    w: &Tensor<T>,
    s: Option<T>,
    r: Option<&[T]>,
    c: Option<&[T]>,
) -> Tensor<T> {
    let n = w.last_dim();
    let mut out = w.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let (i, j) = (k / n, k % n);
        if let Some(s) = s {
            *v *= s;
        }
        if let Some(r) = r {
            *v *= r[i];
        }
        if let Some(c) = c {
            *v *= c[j];
        }
    }
    out
}

/// Closed-form gradients of `W̄ = s · r_i · W_ij · c_j` (effective factors):
///
/// ```text
/// gW_ij = s r_i c_j Ḡ_ij      gr_i = Σ_j s W_ij c_j Ḡ_ij
/// gc_j  = Σ_i s r_i W_ij Ḡ_ij  gs  = Σ_ij r_i W_ij c_j Ḡ_ij
/// ```
pub fn manual_gradients<T: Scalar>(
    w: &Tensor<T>,
    s: Option<T>,
    r: Option<&[T]>,
    c: Option<&[T]>,
    gbar: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let (m, n) = w.dims2()?;
    if gbar.shape() != w.shape() {
        return dim_err(
            "manual_gradients",
            format!("Ḡ shape {:?} vs W shape {:?}", gbar.shape(), w.shape()),
        );
    }
    if r.is_some_and(|r| r.len() != m) || c.is_some_and(|c| c.len() != n) {
        return dim_err("manual_gradients", "multiplier length does not match W");
    }
    let sv = s.unwrap_or(T::one());
    let ri = |i: usize| r.map_or(T::one(), |r| r[i]);
    let cj = |j: usize| c.map_or(T::one(), |c| c[j]);
    let wd = w.data();
    let gd = gbar.data();
    let mut gw = vec![T::zero(); m * n];
    let mut gr = vec![T::zero(); m];
    let mut gc = vec![T::zero(); n];
    let mut gs = T::zero();
    for i in 0..m {
        for j in 0..n {
            let k = i * n + j;
            let (wv, gv) = (wd[k], gd[k]);
            gw[k] = sv * ri(i) * cj(j) * gv;
            gr[i] += sv * wv * cj(j) * gv;
            gc[j] += sv * ri(i) * wv * gv;
            gs += ri(i) * wv * cj(j) * gv;
        }
    }
    Ok(LayerGrads {
        w: Tensor::new([m, n], gw)?,
        scalar: s.map(|_| Tensor::scalar(gs)),
        row: r.map(|_| Tensor::vector(gr)),
        col: c.map(|_| Tensor::vector(gc)),
    })
}

/// Folds every multiplier into its matrix, dropping the multiplier tensors.
///
/// Layers are discovered by the `.w` suffix; everything else is copied as is.
pub fn merge_store<T: Scalar>(store: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut merged = ParamStore::new();
    let mut skip = vec![false; store.len()];
    let mut replacement: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
    for p in store.iter() {
        if let Some(prefix) = p.name.strip_suffix(".w") {
            let layer = ReparamLayer::from_store(store, prefix)?;
            for id in [layer.scalar, layer.row, layer.col].into_iter().flatten() {
                skip[id] = true;
            }
            replacement.insert(layer.w, layer.merged_weight(store)?);
        }
    }
    for (id, p) in store.iter().enumerate() {
        if skip[id] {
            continue;
        }
        let value = replacement.remove(&id).unwrap_or_else(|| p.value.clone());
        merged.add(p.name.clone(), value, p.kind, p.role.clone(), p.trainable)?;
    }
    Ok(merged)
}
