//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it executes; node ids are handed out
//! in execution order, so the node list is already topologically sorted and a
//! single reverse sweep in [`Graph::backward`] computes all gradients. A graph
//! is meant to live for one training step: build it, call `backward` once,
//! drop it.
//!
//! Broadcasting for the binary elementwise ops is limited to three cases,
//! resolved from the operand shapes: identical shapes, a single-element right
//! operand, and a right operand whose shape equals the trailing dimensions of
//! the left one. Leading-axis scaling (per-row factors of a matrix) has its own
//! op, [`Graph::scale_rows`].

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, axpy, dot, logsumexp, sigmoid, silu, silu_grad, softplus};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    Scalar,
    Trailing,
}

/// Pointwise unary functions with registered derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Silu,
    Softplus,
    Sigmoid,
    Square,
    Sqrt,
    Exp,
    Log,
    Neg,
    /// Clamp to `[lo, hi]`; zero derivative outside.
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Largest `A·dt` used inside the scan before exponentiation.
pub const SSM_DECAY_CLAMP: f64 = 50.0;

enum Op<T> {
    Leaf,
    MatMul(Var, Var, [usize; 3]),
    MatMulBt(Var, Var, [usize; 3]),
    Binary(Binary, Var, Var, Broadcast),
    ScaleRows(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    RmsNorm {
        x: Var,
        denom: Vec<T>,
        guarded: Vec<bool>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        z_coeff: T,
        probs: Vec<T>,
        log_z: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Conv1d {
        x: Var,
        w: Var,
    },
    SsmScan(Box<ScanSaved<T>>),
}

struct ScanSaved<T> {
    x: Var,
    b: Var,
    c: Var,
    dt: Var,
    log_a: Var,
    d_skip: Var,
    heads: usize,
    /// Hidden states after each step, `[T][H][P][N]` flattened.
    states: Vec<T>,
    /// Per-step, per-head decay factor `exp(-min(A·dt, clamp))`.
    decay: Vec<T>,
    clamped: Vec<bool>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one step's forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf. Leaves that require grad but did not influence the
    /// loss get zeros; constants and interior nodes get `None`.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        match (&self.grads[v.0], &self.shapes[v.0]) {
            (Some(g), _) => Some(g.clone()),
            (None, Some(shape)) => Some(Tensor::zeros(shape.clone())),
            (None, None) => None,
        }
    }

    /// Moves the gradient out, with the same zero-filling rule as [`get`](Self::get).
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        match (self.grads[v.0].take(), &self.shapes[v.0]) {
            (Some(g), _) => Some(g),
            (None, Some(shape)) => Some(Tensor::zeros(shape.clone())),
            (None, None) => None,
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn slot_mut<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copies a node's value into a fresh constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]"));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b, [m, k, n]), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout used for `x · Wᵀ` with `W[d_out×d_in]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err("matmul_bt", format!("[{m}x{k}] · [{n}x{k2}]ᵀ"));
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulBt(a, b, [m, k, n]), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).len() == 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(Broadcast::Trailing)
        } else {
            dim_err(op, format!("cannot broadcast {sb:?} onto {sa:?}"))
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        // Commutative ops accept the broadcast operand on either side.
        let (a, b) = if kind != Binary::Sub
            && self.value(a).len() < self.value(b).len()
            && self.broadcast_kind(name, b, a).is_ok()
        {
            (b, a)
        } else {
            (a, b)
        };
        let bc = self.broadcast_kind(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let blen = bv.len();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = match bc {
            Broadcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Trailing => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % blen]))
                .collect(),
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `out[i, j] = a[i, j] · r[i]` for a matrix `a` and vector `r`.
    pub fn scale_rows(&mut self, a: Var, r: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(r).len() != m {
            return dim_err(
                "scale_rows",
                format!("{} factors for {m} rows", self.value(r).len()),
            );
        }
        let av = self.value(a).data();
        let rv = self.value(r).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(av[i * n..(i + 1) * n].iter().map(|&x| x * rv[i]));
        }
        let rg = self.rg(a) || self.rg(r);
        Ok(self.push(Tensor::new([m, n], out)?, Op::ScaleRows(a, r), rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let x = self.value(a);
        match f {
            Unary::Log | Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|v| **v < T::zero()) {
                    return Err(Error::Domain {
                        op: if f == Unary::Log { "log" } else { "sqrt" },
                        detail: format!("negative input {bad}"),
                    });
                }
            }
            _ => {}
        }
        let out = match f {
            Unary::Silu => x.map(silu),
            Unary::Softplus => x.map(softplus),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Square => x.map(|v| v * v),
            Unary::Sqrt => x.map(|v| v.sqrt()),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Log => x.map(|v| v.ln()),
            Unary::Neg => x.map(|v| -v),
            Unary::Clamp(lo, hi) => x.map(|v| v.max(T::lit(lo)).min(T::lit(hi))),
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Unary(a, f), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / T::lit(v.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    // ---- normalization and attention -----------------------------------

    /// Weightless RMS normalization over the last axis:
    /// `out_j = z_j / max(sqrt(mean_k z_k²), eps)`.
    ///
    /// Above the guard the op is exactly scale invariant; a zero row maps to
    /// zero instead of NaN.
    pub fn rmsnorm(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let rows = v.len() / d;
        let mut out = Vec::with_capacity(v.len());
        let mut denom = Vec::with_capacity(rows);
        let mut guarded = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let rms = (dot(row, row) / T::lit(d as f64)).sqrt();
            let (den, g) = if rms < eps { (eps, true) } else { (rms, false) };
            out.extend(row.iter().map(|&z| z / den));
            denom.push(den);
            guarded.push(g);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, denom, guarded }, rg))
    }

    /// Row softmax over the last axis, stabilized by max subtraction.
    ///
    /// With `causal`, the input must be `[R×L]` with `R ≤ L`, and row `i` may
    /// attend to columns `j ≤ i + (L − R)`; masked entries get probability 0.
    /// A row whose allowed logits are all `-inf` becomes uniform over the
    /// allowed columns.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let v = self.value(x);
        let l = v.last_dim();
        let rows = v.len() / l;
        if causal {
            let (r, _) = v.dims2()?;
            if r > l {
                return Err(Error::Config(format!(
                    "causal softmax over [{r}x{l}] leaves rows with no allowed position"
                )));
            }
        }
        let offset = l.saturating_sub(rows);
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let allowed = if causal { r + offset + 1 } else { l };
            let row = &v.data()[r * l..r * l + allowed];
            let dst = &mut out[r * l..r * l + allowed];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            if m == T::neg_infinity() {
                let u = T::one() / T::lit(allowed as f64);
                dst.iter_mut().for_each(|p| *p = u);
                continue;
            }
            let mut s = T::zero();
            for (p, &z) in dst.iter_mut().zip(row) {
                *p = (z - m).exp();
                s += *p;
            }
            dst.iter_mut().for_each(|p| *p /= s);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Mean token cross-entropy plus `z_coeff · mean((log Z)²)`.
    pub fn cross_entropy_with_zloss(
        &mut self,
        logits: Var,
        targets: &[usize],
        z_coeff: T,
    ) -> Result<Var> {
        let v = self.value(logits);
        let (t, vocab) = v.dims2()?;
        if targets.len() != t {
            return dim_err(
                "cross_entropy",
                format!("{} targets for {t} positions", targets.len()),
            );
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                size: vocab,
            });
        }
        let mut probs = Vec::with_capacity(t * vocab);
        let mut log_z = Vec::with_capacity(t);
        let mut ce = T::zero();
        let mut zz = T::zero();
        for (i, &y) in targets.iter().enumerate() {
            let row = v.row(i);
            let lz = logsumexp(row);
            probs.extend(row.iter().map(|&z| (z - lz).exp()));
            ce += lz - row[y];
            zz += lz * lz;
            log_z.push(lz);
        }
        let n = T::lit(t as f64);
        let loss = ce / n + z_coeff * zz / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                z_coeff,
                probs,
                log_z,
            },
            rg,
        ))
    }

    /// Row lookup: `out[t] = table[ids[t]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table);
        let (rows, d) = v.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(v.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if len == 0 || start + len > n {
            return dim_err("slice_cols", format!("[{start}, {}) of {n} columns", start + len));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return dim_err("concat_cols", format!("row counts {m} and {pm}"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new([m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    // ---- sequence mixers -----------------------------------------------

    /// Causal depthwise convolution along time.
    ///
    /// `x[T×C]`, `w[C×K]`: `out[t, c] = Σ_k w[c, k] · x[t − (K−1) + k, c]`,
    /// zero-padded on the left, so `w[c, K−1]` is the current-step tap.
    pub fn conv1d_causal(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.value(x).dims2()?;
        let (wc, k) = self.value(w).dims2()?;
        if wc != c {
            return dim_err("conv1d", format!("{wc} kernels for {c} channels"));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); t * c];
        for ti in 0..t {
            for tap in 0..k {
                let Some(src) = (ti + tap).checked_sub(k - 1) else {
                    continue;
                };
                for ch in 0..c {
                    out[ti * c + ch] += wv[ch * k + tap] * xv[src * c + ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new([t, c], out)?, Op::Conv1d { x, w }, rg))
    }

    /// Selective state-space scan with per-head scalar decay.
    ///
    /// Shapes: `x[T×(H·P)]`, `b[T×N]`, `c[T×N]`, `dt[T×H]`, `log_a[H]`,
    /// `d_skip[H]`. With `A_h = exp(log_a_h)` and
    /// `decay_{t,h} = exp(−min(A_h·dt_{t,h}, 50))`:
    ///
    /// ```text
    /// h_t[h,p,n] = decay_{t,h} · h_{t−1}[h,p,n] + dt_{t,h} · x_t[h,p] · b_t[n]
    /// y_t[h,p]   = Σ_n c_t[n] · h_t[h,p,n] + d_skip_h · x_t[h,p]
    /// ```
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(
        &mut self,
        x: Var,
        b: Var,
        c: Var,
        dt: Var,
        log_a: Var,
        d_skip: Var,
        heads: usize,
    ) -> Result<Var> {
        let (t, width) = self.value(x).dims2()?;
        let (tb, n) = self.value(b).dims2()?;
        let (tc, nc) = self.value(c).dims2()?;
        let (tdt, hdt) = self.value(dt).dims2()?;
        if heads == 0 || width % heads != 0 {
            return dim_err("ssm_scan", format!("width {width} not divisible by {heads} heads"));
        }
        if tb != t || tc != t || tdt != t || nc != n || hdt != heads {
            return dim_err("ssm_scan", "inconsistent x/b/c/dt shapes");
        }
        if self.value(log_a).len() != heads || self.value(d_skip).len() != heads {
            return dim_err("ssm_scan", "log_a and d_skip need one entry per head");
        }
        let p = width / heads;
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let cv = self.value(c).data();
        let dtv = self.value(dt).data();
        let a: Vec<T> = self.value(log_a).data().iter().map(|v| v.exp()).collect();
        let dsk = self.value(d_skip).data();
        let state_len = heads * p * n;
        let mut states = vec![T::zero(); t * state_len];
        let mut decay = vec![T::zero(); t * heads];
        let mut clamped = vec![false; t * heads];
        let mut out = vec![T::zero(); t * width];
        let clamp = T::lit(SSM_DECAY_CLAMP);
        for ti in 0..t {
            let (prev, cur) = states.split_at_mut(ti * state_len);
            let cur = &mut cur[..state_len];
            let prev = if ti == 0 {
                None
            } else {
                Some(&prev[(ti - 1) * state_len..])
            };
            let brow = &bv[ti * n..(ti + 1) * n];
            let crow = &cv[ti * n..(ti + 1) * n];
            for h in 0..heads {
                let dth = dtv[ti * heads + h];
                let mut ad = a[h] * dth;
                if ad > clamp {
                    ad = clamp;
                    clamped[ti * heads + h] = true;
                }
                let dec = (-ad).exp();
                decay[ti * heads + h] = dec;
                for pi in 0..p {
                    let xi = xv[ti * width + h * p + pi];
                    let base = (h * p + pi) * n;
                    let hs = &mut cur[base..base + n];
                    match prev {
                        Some(pv) => {
                            for (k, s) in hs.iter_mut().enumerate() {
                                *s = dec * pv[base + k] + dth * xi * brow[k];
                            }
                        }
                        None => {
                            for (k, s) in hs.iter_mut().enumerate() {
                                *s = dth * xi * brow[k];
                            }
                        }
                    }
                    out[ti * width + h * p + pi] = dot(crow, hs) + dsk[h] * xi;
                }
            }
        }
        let rg = [x, b, c, dt, log_a, d_skip].iter().any(|&v| self.rg(v));
        let saved = ScanSaved {
            x,
            b,
            c,
            dt,
            log_a,
            d_skip,
            heads,
            states,
            decay,
            clamped,
        };
        Ok(self.push(Tensor::new([t, width], out)?, Op::SsmScan(Box::new(saved)), rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    ///
    /// May run once per graph; a second call returns
    /// [`Error::DoubleBackward`] rather than double-accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut leaf_grads)?;
        }
        let shapes = self
            .nodes
            .iter()
            .map(|nd| match (&nd.op, nd.requires_grad) {
                (Op::Leaf, true) => Some(nd.value.shape().to_vec()),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
            &Op::MatMul(a, b, [m, k, n]) => {
                if self.rg(a) {
                    let da = kernels::matmul_bt(&g, self.value(b).data(), m, n, k);
                    accumulate(&mut grads[a.0], da);
                }
                if self.rg(b) {
                    let db = kernels::matmul_at(self.value(a).data(), &g, m, k, n);
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::MatMulBt(a, b, [m, k, n]) => {
                if self.rg(a) {
                    let da = kernels::matmul(&g, self.value(b).data(), m, n, k);
                    accumulate(&mut grads[a.0], da);
                }
                if self.rg(b) {
                    let db = kernels::matmul_at(&g, self.value(a).data(), m, n, k);
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::Binary(kind, a, b, bc) => self.backprop_binary(kind, a, b, bc, &g, grads),
            &Op::ScaleRows(a, r) => {
                let (m, n) = self.value(a).dims2()?;
                if self.rg(a) {
                    let rv = self.value(r).data();
                    let mut da = g.clone();
                    for ri in 0..m {
                        da[ri * n..(ri + 1) * n].iter_mut().for_each(|v| *v *= rv[ri]);
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if self.rg(r) {
                    let av = self.value(a).data();
                    let dr = (0..m)
                        .map(|ri| dot(&g[ri * n..(ri + 1) * n], &av[ri * n..(ri + 1) * n]))
                        .collect();
                    accumulate(&mut grads[r.0], dr);
                }
            }
            &Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.iter().map(|&v| v * c).collect());
            }
            &Op::Unary(a, f) => {
                let x = self.value(a).data();
                let y = node.value.data();
                let two = T::lit(2.0);
                let da: Vec<T> = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| {
                        gv * match f {
                            Unary::Silu => silu_grad(xv),
                            Unary::Softplus => sigmoid(xv),
                            Unary::Sigmoid => yv * (T::one() - yv),
                            Unary::Square => two * xv,
                            Unary::Sqrt => T::one() / (two * yv),
                            Unary::Exp => yv,
                            Unary::Log => T::one() / xv,
                            Unary::Neg => -T::one(),
                            Unary::Clamp(lo, hi) => {
                                if xv < T::lit(lo) || xv > T::lit(hi) {
                                    T::zero()
                                } else {
                                    T::one()
                                }
                            }
                        }
                    })
                    .collect();
                accumulate(&mut grads[a.0], da);
            }
            &Op::Sum(a) => {
                let len = self.value(a).len();
                accumulate(&mut grads[a.0], vec![g[0]; len]);
            }
            &Op::Mean(a) => {
                let len = self.value(a).len();
                accumulate(&mut grads[a.0], vec![g[0] / T::lit(len as f64); len]);
            }
            Op::RmsNorm { x, denom, guarded } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for (r, (&den, &gd)) in denom.iter().zip(guarded).enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let proj = if gd {
                        T::zero()
                    } else {
                        dot(gr, yr) / T::lit(d as f64)
                    };
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * proj) / den;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let l = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / l {
                    let yr = &y[r * l..(r + 1) * l];
                    let gr = &g[r * l..(r + 1) * l];
                    let s = dot(gr, yr);
                    for j in 0..l {
                        dx[r * l + j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                z_coeff,
                probs,
                log_z,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / T::lit(targets.len() as f64);
                let two = T::lit(2.0);
                let mut dx = probs.clone();
                for (t, &y) in targets.iter().enumerate() {
                    let zfac = T::one() + two * *z_coeff * log_z[t];
                    let row = &mut dx[t * vocab..(t + 1) * vocab];
                    row.iter_mut().for_each(|p| *p = *p * zfac * scale);
                    row[y] -= scale;
                }
                accumulate(&mut grads[logits.0], dx);
            }
            Op::Gather { table, ids } => {
                let (rows, d) = self.value(*table).dims2()?;
                let dt = slot_mut(&mut grads[table.0], rows * d);
                for (t, &id) in ids.iter().enumerate() {
                    axpy(T::one(), &g[t * d..(t + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = self.value(x).dims2()?;
                let len = node.value.last_dim();
                let dx = slot_mut(&mut grads[x.0], m * n);
                for r in 0..m {
                    axpy(
                        T::one(),
                        &g[r * len..(r + 1) * len],
                        &mut dx[r * n + start..r * n + start + len],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.last_dim();
                let m = node.value.len() / n;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * n + off..r * n + off + w]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    off += w;
                }
            }
            &Op::Conv1d { x, w } => {
                let (t, c) = self.value(x).dims2()?;
                let (_, k) = self.value(w).dims2()?;
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut dx = vec![T::zero(); t * c];
                let mut dw = vec![T::zero(); c * k];
                for ti in 0..t {
                    for tap in 0..k {
                        let Some(src) = (ti + tap).checked_sub(k - 1) else {
                            continue;
                        };
                        for ch in 0..c {
                            let gv = g[ti * c + ch];
                            dx[src * c + ch] += wv[ch * k + tap] * gv;
                            dw[ch * k + tap] += xv[src * c + ch] * gv;
                        }
                    }
                }
                if self.rg(x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if self.rg(w) {
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::SsmScan(saved) => self.backprop_scan(saved, &g, grads)?,
        }
        Ok(())
    }

    fn backprop_binary(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        bc: Broadcast,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let blen = bv.len();
        let bidx = |i: usize| match bc {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Trailing => i % blen,
        };
        if self.rg(a) {
            let da: Vec<T> = match kind {
                Binary::Add | Binary::Sub => g.to_vec(),
                Binary::Mul => g.iter().enumerate().map(|(i, &gv)| gv * bv[bidx(i)]).collect(),
            };
            accumulate(&mut grads[a.0], da);
        }
        if self.rg(b) {
            let mut db = vec![T::zero(); blen];
            for (i, &gv) in g.iter().enumerate() {
                let contrib = match kind {
                    Binary::Add => gv,
                    Binary::Sub => -gv,
                    Binary::Mul => gv * av[i],
                };
                db[bidx(i)] += contrib;
            }
            accumulate(&mut grads[b.0], db);
        }
    }

    fn backprop_scan(
        &self,
        s: &ScanSaved<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (t, width) = self.value(s.x).dims2()?;
        let (_, n) = self.value(s.b).dims2()?;
        let heads = s.heads;
        let p = width / heads;
        let xv = self.value(s.x).data();
        let bv = self.value(s.b).data();
        let cv = self.value(s.c).data();
        let dtv = self.value(s.dt).data();
        let a: Vec<T> = self.value(s.log_a).data().iter().map(|v| v.exp()).collect();
        let dsk = self.value(s.d_skip).data();
        let state_len = heads * p * n;

        let mut dx = vec![T::zero(); t * width];
        let mut db = vec![T::zero(); t * n];
        let mut dc = vec![T::zero(); t * n];
        let mut ddt = vec![T::zero(); t * heads];
        let mut da = vec![T::zero(); heads];
        let mut dd = vec![T::zero(); heads];
        // Adjoint of h_t flowing back from later steps.
        let mut carry = vec![T::zero(); state_len];

        for ti in (0..t).rev() {
            let hs = &s.states[ti * state_len..(ti + 1) * state_len];
            let prev = (ti > 0).then(|| &s.states[(ti - 1) * state_len..ti * state_len]);
            let brow = &bv[ti * n..(ti + 1) * n];
            let crow = &cv[ti * n..(ti + 1) * n];
            for h in 0..heads {
                let dth = dtv[ti * heads + h];
                let dec = s.decay[ti * heads + h];
                let mut dt_acc = T::zero();
                let mut dec_acc = T::zero();
                for pi in 0..p {
                    let col = h * p + pi;
                    let gy = g[ti * width + col];
                    let xi = xv[ti * width + col];
                    dd[h] += gy * xi;
                    let mut dxi = dsk[h] * gy;
                    let base = col * n;
                    for k in 0..n {
                        // Total adjoint of h_t[h,p,k].
                        let dh = carry[base + k] + crow[k] * gy;
                        dc[ti * n + k] += gy * hs[base + k];
                        dxi += dh * dth * brow[k];
                        db[ti * n + k] += dh * dth * xi;
                        dt_acc += dh * xi * brow[k];
                        if let Some(pv) = prev {
                            dec_acc += dh * pv[base + k];
                        }
                        carry[base + k] = dh * dec;
                    }
                    dx[ti * width + col] += dxi;
                }
                if !s.clamped[ti * heads + h] {
                    // d(decay)/d(dt) = −A·decay, d(decay)/dA = −dt·decay
                    dt_acc -= dec_acc * a[h] * dec;
                    da[h] -= dec_acc * dth * dec;
                }
                ddt[ti * heads + h] += dt_acc;
            }
        }
        let dlog_a: Vec<T> = da.iter().zip(&a).map(|(&g, &av)| g * av).collect();
        for (v, d) in [
            (s.x, dx),
            (s.b, db),
            (s.c, dc),
            (s.dt, ddt),
            (s.log_a, dlog_a),
            (s.d_skip, dd),
        ] {
            if self.rg(v) {
                accumulate(&mut grads[v.0], d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_projection() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(y), &t(&[&[1.0, 2.0], &[3.0, 4.0]]));

        let p = g.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let v = g.constant(t(&[&[5.0], &[7.0]]));
        let y = g.matmul(p, v).unwrap();
        assert_eq!(g.value(y), &t(&[&[5.0], &[0.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(vec![1.0, -1.0]));
        assert!(matches!(g.unary(a, Unary::Log), Err(Error::Domain { .. })));
        assert!(matches!(g.unary(a, Unary::Sqrt), Err(Error::Domain { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[&[0.0, 0.0]]));
        let s = g.softmax_rows(a, false).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.constant(t(&[&[1000.0, 0.0]]));
        let s = g.softmax_rows(b, false).unwrap();
        assert_eq!(g.value(s).data()[0], 1.0);
        assert_eq!(g.value(s).data()[1], 0.0);

        let c = g.constant(t(&[&[3.0, 9.0], &[1.0, 2.0]]));
        let s = g.softmax_rows(c, true).unwrap();
        assert_eq!(g.value(s).row(0), &[1.0, 0.0]);

        // Row 0 may only see column 0, whose logit is -inf.
        let d = g.constant(t(&[&[f64::NEG_INFINITY, 7.0], &[f64::NEG_INFINITY, f64::NEG_INFINITY]]));
        let s = g.softmax_rows(d, true).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.5, 0.5]);

        let e = g.constant(Tensor::zeros([3, 2]));
        assert!(matches!(g.softmax_rows(e, true), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_margin() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([1, 4]));
        let l = g.cross_entropy_with_zloss(z, &[2], 0.0).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let z = g.constant(t(&[&[margin, 0.0, 0.0]]));
            let l = g.cross_entropy_with_zloss(z, &[0], 0.0).unwrap();
            let v = g.value(l).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);

        let z = g.constant(Tensor::zeros([1, 4]));
        assert!(matches!(
            g.cross_entropy_with_zloss(z, &[4], 0.0),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn zloss_adds_exact_term() {
        let rows: [&[f64]; 2] = [&[0.3, -1.2, 2.0], &[1.5, 0.1, -0.4]];
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&rows));
        let plain = g.cross_entropy_with_zloss(z, &[1, 0], 0.0).unwrap();
        let with = g.cross_entropy_with_zloss(z, &[1, 0], 1e-4).unwrap();
        // log Z by direct summation, no max shift.
        let lz: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().map(|v| v.exp()).sum::<f64>().ln())
            .collect();
        let extra = 1e-4 * (lz[0] * lz[0] + lz[1] * lz[1]) / 2.0;
        let diff = g.value(with).data()[0] - g.value(plain).data()[0];
        assert!((diff - extra).abs() < 1e-15, "{diff} vs {extra}");
    }

    #[test]
    fn backward_linearity_in_scalar() {
        let mut g = Graph::<f64>::new();
        let s = g.param(Tensor::scalar(1.7));
        let w = g.constant(t(&[&[1.0, -2.0], &[0.5, 4.0]]));
        let sw = g.mul(w, s).unwrap();
        let loss = g.sum(sw).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[3.5]);
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(2.0));
        let l = g.sum(a).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::DoubleBackward)));
    }

    #[test]
    fn detached_and_unused_leaves() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![3.0]));
        let d = g.detach(a);
        let prod = g.mul(a, d).unwrap();
        let l = g.sum(prod).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(d).is_none());
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0]);
        // d(a·const)/da = const
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn rmsnorm_reference_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[&[3.0, 4.0]]));
        let y = g.rmsnorm(z, 1e-8).unwrap();
        let rms = 12.5f64.sqrt();
        assert!((g.value(y).data()[0] - 3.0 / rms).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 4.0 / rms).abs() < 1e-15);

        let zero = g.constant(Tensor::zeros([1, 3]));
        let y = g.rmsnorm(zero, 1e-8).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn conv1d_current_tap_only_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let w = g.constant(t(&[&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]]));
        let y = g.conv1d_causal(x, w).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let w = g.constant(t(&[&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]]));
        let y = g.conv1d_causal(x, w).unwrap();
        assert_eq!(g.value(y), &t(&[&[0.0, 0.0], &[1.0, 2.0], &[3.0, 4.0]]));
    }
}
