//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value computed during a forward pass. Operations
//! are methods on the tape and return [`Var`] handles; [`Tape::backward`]
//! walks the recorded nodes once, in reverse order, and returns the
//! accumulated gradients. The tape is rebuilt for every training step.

use std::f64::consts::PI;

use crate::tensor::{
    broadcast_index_map, broadcast_shape, gemm, reduce_to_shape, split_axis, strides_of, Float,
    MatRef, Result, Tensor, TensorError,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Sin,
    Cos,
    Exp,
    Neg,
    Scale(f64),
}

type CustomBackward<F> = Box<dyn Fn(&[&Tensor<F>], &Tensor<F>, &[F]) -> Vec<Option<Vec<F>>>>;

enum Op<F: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, F),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Identity(Var),
    StraightThrough(Var),
    MatMul(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Cumsum {
        x: Var,
        axis: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        index: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    WindowAttention(Box<AttnSaved<F>>),
    Rope {
        x: Var,
        n_heads: usize,
        cos: Vec<F>,
        sin: Vec<F>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<F>,
    },
}

struct AttnSaved<F> {
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    window: usize,
    // banded attention weights, [B, H, Sq, window]
    probs: Vec<F>,
}

struct Node<F: Float> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Recorded forward computation.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::BadAxis { op, axis, rank });
    }
    Ok(())
}

/// Values of `t` laid out over `out_shape` (which `t` broadcasts to).
fn expand<F: Float>(t: &Tensor<F>, out_shape: &[usize]) -> Vec<F> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    broadcast_index_map(t.shape(), out_shape)
        .into_iter()
        .map(|j| t.data()[j])
        .collect()
}

/// Wraps a phase into `[0, 2pi)`.
pub fn wrap_phase<F: Float>(x: F) -> F {
    let two_pi = F::of(2.0 * PI);
    let r = x - two_pi * (x / two_pi).floor();
    if r >= two_pi || r < F::zero() {
        F::zero()
    } else {
        r
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------

    /// Dispatches one of the elementwise operations. Binary kinds require `b`.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b =
            || b.ok_or_else(|| TensorError::Invalid(format!("{kind:?} needs two operands")));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Div => self.div(a, need_b()?),
            Elementwise::Tanh => Ok(self.tanh(a)),
            Elementwise::Sin => Ok(self.sin(a)),
            Elementwise::Cos => Ok(self.cos(a)),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Neg => Ok(self.neg(a)),
            Elementwise::Scale(c) => Ok(self.scale(a, F::of(c))),
        }
    }

    fn binary_values(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let ta = self.value(a);
        let tb = self.value(b);
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| mismatch(op, ta.shape(), tb.shape()))?;
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<F> = if ta.shape() == tb.shape() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if ta.shape() == out_shape.as_slice() && out_shape.ends_with(tb.shape()) {
            let nb = db.len();
            da.iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[i % nb]))
                .collect()
        } else if tb.shape() == out_shape.as_slice() && out_shape.ends_with(ta.shape()) {
            let na = da.len();
            db.iter()
                .enumerate()
                .map(|(i, &y)| f(da[i % na], y))
                .collect()
        } else {
            let ma = broadcast_index_map(ta.shape(), &out_shape);
            let mb = broadcast_index_map(tb.shape(), &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Tensor::new(&out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("div", a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::Div(a, b)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(v, rg, op)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sin(), Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.cos(), Op::Cos(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        fn parts<F: Float>(u: F) -> (F, F) {
            let c = F::of(0.797_884_560_802_865_4);
            let k = F::of(0.044715);
            let t = (c * (u + k * u * u * u)).tanh();
            let du = F::of(0.5) * (F::one() + t)
                + F::of(0.5) * u * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * u * u);
            (F::of(0.5) * u * (F::one() + t), du)
        }
        let value = self.value(x).map(|u| parts(u).0);
        self.custom(&[x], value, |ins, _, g| {
            vec![Some(
                ins[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&u, &gg)| parts(u).1 * gg)
                    .collect(),
            )]
        })
    }

    /// Forward identity, zero backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Straight-through composition `surrogate + sg(forward - surrogate)` with
    /// the forward value taken verbatim from `forward`, so it is bit-exact.
    /// Gradients flow to `surrogate` only.
    pub fn straight_through(&mut self, forward: Var, surrogate: Var) -> Result<Var> {
        if self.shape(forward) != self.shape(surrogate) {
            return Err(mismatch(
                "straight_through",
                self.shape(forward),
                self.shape(surrogate),
            ));
        }
        let v = self.value(forward).clone();
        let rg = self.rg(&[surrogate]);
        Ok(self.push(v, rg, Op::StraightThrough(surrogate)))
    }

    /// `x mod 2pi` into `[0, 2pi)`; the backward rule is the identity.
    pub fn wrap_mod_2pi(&mut self, x: Var) -> Var {
        self.unary(x, wrap_phase, Op::Identity(x))
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[..., m, k] @ b[k, n]` or `a[..., m, k] @ b[..., k, n]` with equal batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != k2 || (!batch_b.is_empty() && batch_a != batch_b) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = batch_a.iter().product();
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![F::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if batch_b.is_empty() {
            gemm(
                MatRef::new(da, batch * m, k),
                MatRef::new(db, k, n),
                &mut out,
                F::zero(),
            );
        } else {
            for i in 0..batch {
                gemm(
                    MatRef::new(&da[i * m * k..], m, k),
                    MatRef::new(&db[i * k * n..], k, n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    F::zero(),
                );
            }
        }
        let v = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::MatMul(a, b)))
    }

    /// `x @ w + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- normalisation -------------------------------------------------

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", axis, t.ndim())?;
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut total = F::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / total;
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::Softmax { x, axis }))
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let g = self.value(gain);
        let d = *t.shape().last().unwrap_or(&0);
        if g.shape() != [d] {
            return Err(mismatch("rmsnorm", t.shape(), g.shape()));
        }
        let eps = F::of(eps);
        let dn = F::of(d as f64);
        let mut out = Vec::with_capacity(t.numel());
        let mut inv = Vec::with_capacity(t.numel() / d.max(1));
        for row in t.data().chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / dn;
            let r = F::one() / (ms + eps).sqrt();
            inv.push(r);
            out.extend(row.iter().zip(g.data()).map(|(&v, &gg)| v * r * gg));
        }
        let v = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(
            v,
            rg,
            Op::RmsNorm {
                x,
                gain,
                inv_rms: inv,
            },
        ))
    }

    /// Mean negative log-likelihood (nats) over rows selected by `mask`.
    /// `logits` is `[..., V]`; `targets` and `mask` have one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid("cross_entropy: empty mask".into()));
        }
        if mask.len() != targets.len() {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {} targets but {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let w = F::one() / F::of(count as f64);
        let weights: Vec<F> = mask
            .iter()
            .map(|&m| if m { w } else { F::zero() })
            .collect();
        self.weighted_nll(logits, targets, &weights)
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]`.
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let t = self.value(logits);
        let v = *t.shape().last().unwrap_or(&0);
        let rows = t.numel() / v.max(1);
        if rows != targets.len() || rows != weights.len() {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {} rows but {} targets / {} weights",
                rows,
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = vec![F::zero(); t.numel()];
        let mut loss = F::zero();
        for (r, row) in t.data().chunks(v).enumerate() {
            let tgt = targets[r];
            if tgt >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: tgt,
                    extent: v,
                });
            }
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - mx).exp();
                total += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / total;
            }
            if weights[r] != F::zero() {
                loss += weights[r] * (total.ln() + mx - row[tgt]);
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    // ---- reductions and data movement ---------------------------------

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("sum", axis, t.ndim())?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::Sum { x, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, rg, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).ok_or(TensorError::BadAxis {
            op: "mean",
            axis,
            rank: self.shape(x).len(),
        })?;
        let s = self.sum(x, axis)?;
        Ok(self.scale(s, F::one() / F::of(n as f64)))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Inclusive cumulative sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("cumsum", axis, t.ndim())?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for j in 1..len {
                let (prev, cur) = out[o * len * inner..].split_at_mut(j * inner);
                let prev = &prev[(j - 1) * inner..];
                for (c, &p) in cur[..inner].iter_mut().zip(prev) {
                    *c += p;
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::Cumsum { x, axis }))
    }

    /// Selects rows (entries along axis 0): `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 {
            return Err(TensorError::BadAxis {
                op: "gather",
                axis: 0,
                rank: 0,
            });
        }
        let rows = t.shape()[0];
        let width = t.numel() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            rg,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// `out[index[i]] += x[i]` into a zero tensor with `rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 || t.shape()[0] != index.len() {
            return Err(mismatch("scatter_add", t.shape(), &[index.len()]));
        }
        let width = t.numel() / index.len().max(1);
        let mut out = vec![F::zero(); rows * width];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_add",
                    index: i,
                    extent: rows,
                });
            }
            for (d, &s) in out[i * width..(i + 1) * width]
                .iter_mut()
                .zip(&t.data()[r * width..(r + 1) * width])
            {
                *d += s;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows;
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            rg,
            Op::ScatterAddRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *xs.first()
                    .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?,
            )
            .to_vec();
        check_axis("concat", axis, first.len())?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(
            v,
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("narrow", axis, t.ndim())?;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent: n,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(
                &t.data()[(o * n + start) * inner..(o * n + start + len) * inner],
            );
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::Identity(x)))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(mismatch("permute", t.shape(), perm));
        }
        let v = permute_values(t, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        check_axis("transpose", a.max(b), rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    /// Index of the maximum along the last axis, lowest index on ties.
    /// Not differentiable; records nothing.
    pub fn argmax(&self, x: Var) -> Vec<usize> {
        argmax_rows(self.value(x))
    }

    // ---- attention ------------------------------------------------------

    /// Causal sliding-window attention over `[B, S, D]` projections split into
    /// `n_heads` heads. Query `i` sits at key position `Skv - Sq + i` and sees
    /// the `window` most recent keys up to and including itself.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        window: usize,
    ) -> Result<Var> {
        if window < 1 {
            return Err(TensorError::Invalid(
                "window attention: window must be >= 1".into(),
            ));
        }
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3
            || sk != sv
            || sk.len() != 3
            || sq[0] != sk[0]
            || sq[2] != sk[2]
            || sk[1] < sq[1]
        {
            return Err(mismatch("window_attention", &sq, &sk));
        }
        let (b, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if n_heads == 0 || d % n_heads != 0 {
            return Err(TensorError::Invalid(format!(
                "window attention: {d} not divisible into {n_heads} heads"
            )));
        }
        let dh = d / n_heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let off = lk - lq;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![F::zero(); b * lq * d];
        let mut probs = vec![F::zero(); b * n_heads * lq * window];
        let mut scores = vec![F::zero(); window];
        for bi in 0..b {
            for h in 0..n_heads {
                for i in 0..lq {
                    let pos = off + i;
                    let lo = (pos + 1).saturating_sub(window);
                    let qrow = &qd[(bi * lq + i) * d + h * dh..][..dh];
                    let mut mx = F::neg_infinity();
                    for (r, j) in (lo..=pos).enumerate() {
                        let krow = &kd[(bi * lk + j) * d + h * dh..][..dh];
                        let s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<F>() * scale;
                        scores[r] = s;
                        mx = mx.max(s);
                    }
                    let cnt = pos + 1 - lo;
                    let mut total = F::zero();
                    for s in &mut scores[..cnt] {
                        *s = (*s - mx).exp();
                        total += *s;
                    }
                    let pbase = ((bi * n_heads + h) * lq + i) * window;
                    let orow = &mut out[(bi * lq + i) * d + h * dh..][..dh];
                    for (r, j) in (lo..=pos).enumerate() {
                        let p = scores[r] / total;
                        probs[pbase + window - cnt + r] = p;
                        let vrow = &vd[(bi * lk + j) * d + h * dh..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let val = Tensor::new(&sq, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            val,
            rg,
            Op::WindowAttention(Box::new(AttnSaved {
                q,
                k,
                v,
                n_heads,
                window,
                probs,
            })),
        ))
    }

    /// Rotary position rotation of `[B, S, D]` inputs, heads of `D / n_heads`
    /// dims, positions `start..start + S`.
    pub fn rope(&mut self, x: Var, n_heads: usize, start: usize, base: f64) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        if s.len() != 3
            || n_heads == 0
            || !s[2].is_multiple_of(n_heads)
            || !(s[2] / n_heads).is_multiple_of(2)
        {
            return Err(TensorError::Invalid(format!(
                "rope: bad shape {s:?} for {n_heads} heads"
            )));
        }
        let (seq, d) = (s[1], s[2]);
        let dh = d / n_heads;
        let half = dh / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for p in 0..seq {
            for c in 0..half {
                let theta = (start + p) as f64 * base.powf(-((2 * c) as f64) / dh as f64);
                cos.push(F::of(theta.cos()));
                sin.push(F::of(theta.sin()));
            }
        }
        let mut out = t.data().to_vec();
        rotate_pairs(&mut out, &s, n_heads, &cos, &sin, false);
        let v = Tensor::new(&s, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            rg,
            Op::Rope {
                x,
                n_heads,
                cos,
                sin,
            },
        ))
    }

    /// Records an externally defined operation. `backward` receives the input
    /// values, the output value and the upstream gradient and returns one
    /// optional gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<F>,
        backward: impl Fn(&[&Tensor<F>], &Tensor<F>, &[F]) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        )
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let shape = self.shape(root).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward from non-scalar of shape {shape:?}"
            )));
        }
        self.backward_with(root, Tensor::ones(&shape))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `root`).
    pub fn backward_with(&self, root: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.shape() != self.shape(root) {
            return Err(mismatch("backward", self.shape(root), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.into_data());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.propagate(i, g, lower);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..=root.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Identity(x) | Op::StraightThrough(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, out_shape, val(*a).shape()));
                self.accumulate(grads, *b, reduce_to_shape(g, out_shape, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, out_shape, val(*a).shape()));
                let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                self.accumulate(grads, *b, reduce_to_shape(&neg, out_shape, val(*b).shape()));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let eb = expand(val(*b), out_shape);
                    let ga: Vec<F> = g.iter().zip(&eb).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, reduce_to_shape(&ga, out_shape, val(*a).shape()));
                }
                if self.nodes[b.0].requires_grad {
                    let ea = expand(val(*a), out_shape);
                    let gb: Vec<F> = g.iter().zip(&ea).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, reduce_to_shape(&gb, out_shape, val(*b).shape()));
                }
            }
            Op::Div(a, b) => {
                let eb = expand(val(*b), out_shape);
                if self.nodes[a.0].requires_grad {
                    let ga: Vec<F> = g.iter().zip(&eb).map(|(&x, &y)| x / y).collect();
                    self.accumulate(grads, *a, reduce_to_shape(&ga, out_shape, val(*a).shape()));
                }
                if self.nodes[b.0].requires_grad {
                    let ea = expand(val(*a), out_shape);
                    let gb: Vec<F> = g
                        .iter()
                        .zip(ea.iter().zip(&eb))
                        .map(|(&x, (&p, &q))| -x * p / (q * q))
                        .collect();
                    self.accumulate(grads, *b, reduce_to_shape(&gb, out_shape, val(*b).shape()));
                }
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.iter().map(|&v| -v).collect()),
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::Tanh(x) => {
                let y = node.value.data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(&gg, &yy)| gg * (F::one() - yy * yy))
                        .collect(),
                )
            }
            Op::Sin(x) => {
                let xs = val(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xs).map(|(&gg, &v)| gg * v.cos()).collect(),
                )
            }
            Op::Cos(x) => {
                let xs = val(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xs).map(|(&gg, &v)| -gg * v.sin()).collect(),
                )
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(y).map(|(&gg, &yy)| gg * yy).collect(),
                )
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let dot: F = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let k = base + j * inner;
                            gx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum { x, axis } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => self.accumulate(grads, *x, vec![g[0]; val(*x).numel()]),
            Op::Cumsum { x, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut gx = g.to_vec();
                for o in 0..outer {
                    for j in (0..len.saturating_sub(1)).rev() {
                        let (cur, next) = gx[o * len * inner..].split_at_mut((j + 1) * inner);
                        for (c, &n) in cur[j * inner..].iter_mut().zip(&next[..inner]) {
                            *c += n;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, index } => {
                let rows = val(*x).shape()[0];
                let width = val(*x).numel() / rows.max(1);
                let mut gx = vec![F::zero(); rows * width];
                for (r, &src) in index.iter().enumerate() {
                    for (d, &s) in gx[src * width..(src + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                    {
                        *d += s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterAddRows { x, index } => {
                let width = val(*x).numel() / index.len().max(1);
                let mut gx = Vec::with_capacity(index.len() * width);
                for &dst in index {
                    gx.extend_from_slice(&g[dst * width..(dst + 1) * width]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut start = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    if self.nodes[x.0].requires_grad {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            gx.extend_from_slice(
                                &g[(o * total + start) * inner..(o * total + start + len) * inner],
                            );
                        }
                        self.accumulate(grads, x, gx);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let len = out_shape[*axis];
                let mut gx = vec![F::zero(); outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(out_shape, g.to_vec()).expect("grad shape");
                self.accumulate(grads, *x, permute_values(&gt, &inv).into_data());
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xs = val(*x).data();
                let gain_v = val(*gain).data();
                let d = gain_v.len();
                let dn = F::of(d as f64);
                let mut gx = vec![F::zero(); xs.len()];
                let mut gg = vec![F::zero(); d];
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let xr = &xs[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: F = (0..d).map(|j| gr[j] * gain_v[j] * xr[j]).sum();
                    let c = ir * ir * ir * dot / dn;
                    for j in 0..d {
                        gx[r * d + j] = ir * gain_v[j] * gr[j] - c * xr[j];
                        gg[j] += gr[j] * xr[j] * ir;
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, gg);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = *val(*logits).shape().last().unwrap_or(&1);
                let mut gx = vec![F::zero(); probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == F::zero() {
                        continue;
                    }
                    let s = g[0] * w;
                    for j in 0..v {
                        gx[r * v + j] = s * probs[r * v + j];
                    }
                    gx[r * v + t] -= s;
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::WindowAttention(saved) => self.attention_backward(saved, g, grads),
            Op::Rope {
                x,
                n_heads,
                cos,
                sin,
            } => {
                let mut gx = g.to_vec();
                rotate_pairs(&mut gx, out_shape, *n_heads, cos, sin, true);
                self.accumulate(grads, *x, gx);
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|&v| val(v)).collect();
                let outs = backward(&ins, &node.value, g);
                for (&v, gx) in inputs.iter().zip(outs) {
                    if let Some(gx) = gx {
                        self.accumulate(grads, v, gx);
                    }
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let sa = ta.shape();
        let sb = tb.shape();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batched = sb.len() > 2;
        if self.nodes[a.0].requires_grad {
            let mut ga = vec![F::zero(); ta.numel()];
            if b_batched {
                for i in 0..batch {
                    gemm(
                        MatRef::new(&g[i * m * n..], m, n),
                        MatRef::new(&tb.data()[i * k * n..], k, n).t(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        F::zero(),
                    );
                }
            } else {
                gemm(
                    MatRef::new(g, batch * m, n),
                    MatRef::new(tb.data(), k, n).t(),
                    &mut ga,
                    F::zero(),
                );
            }
            self.accumulate(grads, a, ga);
        }
        if self.nodes[b.0].requires_grad {
            let mut gb = vec![F::zero(); tb.numel()];
            if b_batched {
                for i in 0..batch {
                    gemm(
                        MatRef::new(&ta.data()[i * m * k..], m, k).t(),
                        MatRef::new(&g[i * m * n..], m, n),
                        &mut gb[i * k * n..(i + 1) * k * n],
                        F::zero(),
                    );
                }
            } else {
                gemm(
                    MatRef::new(ta.data(), batch * m, k).t(),
                    MatRef::new(g, batch * m, n),
                    &mut gb,
                    F::zero(),
                );
            }
            self.accumulate(grads, b, gb);
        }
    }

    fn attention_backward(&self, s: &AttnSaved<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let (qt, kt, vt) = (
            &self.nodes[s.q.0].value,
            &self.nodes[s.k.0].value,
            &self.nodes[s.v.0].value,
        );
        let (b, lq, d) = (qt.shape()[0], qt.shape()[1], qt.shape()[2]);
        let lk = kt.shape()[1];
        let (nh, w) = (s.n_heads, s.window);
        let dh = d / nh;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let off = lk - lq;
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut gq = vec![F::zero(); qd.len()];
        let mut gk = vec![F::zero(); kd.len()];
        let mut gv = vec![F::zero(); vd.len()];
        let mut dp = vec![F::zero(); w];
        for bi in 0..b {
            for h in 0..nh {
                for i in 0..lq {
                    let pos = off + i;
                    let lo = (pos + 1).saturating_sub(w);
                    let cnt = pos + 1 - lo;
                    let pbase = ((bi * nh + h) * lq + i) * w + w - cnt;
                    let grow = &g[(bi * lq + i) * d + h * dh..][..dh];
                    let mut dot = F::zero();
                    for (r, j) in (lo..=pos).enumerate() {
                        let vrow = &vd[(bi * lk + j) * d + h * dh..][..dh];
                        dp[r] = grow.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                        dot += s.probs[pbase + r] * dp[r];
                    }
                    let qoff = (bi * lq + i) * d + h * dh;
                    for (r, j) in (lo..=pos).enumerate() {
                        let p = s.probs[pbase + r];
                        let ds = p * (dp[r] - dot) * scale;
                        let koff = (bi * lk + j) * d + h * dh;
                        for c in 0..dh {
                            gq[qoff + c] += ds * kd[koff + c];
                            gk[koff + c] += ds * qd[qoff + c];
                            gv[koff + c] += p * grow[c];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, s.q, gq);
        self.accumulate(grads, s.k, gk);
        self.accumulate(grads, s.v, gv);
    }
}

fn rotate_pairs<F: Float>(
    data: &mut [F],
    shape: &[usize],
    n_heads: usize,
    cos: &[F],
    sin: &[F],
    inverse: bool,
) {
    let (b, seq, d) = (shape[0], shape[1], shape[2]);
    let dh = d / n_heads;
    let half = dh / 2;
    for bi in 0..b {
        for p in 0..seq {
            let row = &mut data[(bi * seq + p) * d..][..d];
            for h in 0..n_heads {
                for c in 0..half {
                    let (cs, mut sn) = (cos[p * half + c], sin[p * half + c]);
                    if inverse {
                        sn = -sn;
                    }
                    let i0 = h * dh + 2 * c;
                    let (x0, x1) = (row[i0], row[i0 + 1]);
                    row[i0] = x0 * cs - x1 * sn;
                    row[i0 + 1] = x0 * sn + x1 * cs;
                }
            }
        }
    }
}

fn permute_values<F: Float>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(t.numel());
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..t.numel() {
        out.push(t.data()[off]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += eff[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves size")
}

/// Row-wise argmax over the last axis; ties resolve to the lowest index.
pub fn argmax_rows<F: Float>(t: &Tensor<F>) -> Vec<usize> {
    let n = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(n.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Result of a backward pass.
pub struct Gradients<F: Float> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient for `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<F> {
        self.get(v).unwrap_or_else(|| {
            let shape = self.shapes.get(v.0).cloned().unwrap_or_default();
            Tensor::zeros(&shape)
        })
    }

    pub fn raw(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get_mut(v.0)?.take()?;
        Some(Tensor::new(&self.shapes[v.0], g).expect("gradient shape"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn tanh_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0f64));
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn sin_at_half_pi() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(PI / 2.0));
        let y = tape.sin(x);
        assert_eq!(tape.value(y).item(), 1.0);
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn mul_values_and_grads() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[2.0, 3.0]));
        let b = tape.param(t(&[2], &[4.0, 5.0]));
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[8.0, 15.0]);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn elementwise_dispatch_and_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0; 6]));
        let b = tape.constant(t(&[2], &[1.0; 2]));
        let err = tape.elementwise(Elementwise::Add, a, Some(b)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
        assert!(tape.elementwise(Elementwise::Mul, a, None).is_err());
        let y = tape.elementwise(Elementwise::Scale(2.0), a, None).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0; 6]);
    }

    #[test]
    fn matmul_identity_and_small() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert!(tape.value(y).data()[1] < 1e-300);
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(
            tape.softmax(x, 0),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.1, -2.5, 7.0]));
        let y = tape.stop_gradient(x);
        assert_eq!(tape.value(y), tape.value(x));
        let z = tape.add(x, y).unwrap();
        let s = tape.sum_all(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 3]);
        assert!(g.get(y).is_none());
    }

    #[test]
    fn straight_through_half() {
        // y = x/2 + sg(x - x/2): forward x, backward 1/2
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.3, 1.7, -4.0]));
        let half = tape.scale(x, 0.5);
        let diff = tape.sub(x, half).unwrap();
        let sg = tape.stop_gradient(diff);
        let y = tape.add(half, sg).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5; 3]);
    }

    #[test]
    fn wrap_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[PI + 1.5 * PI, -PI / 4.0]));
        let y = tape.wrap_mod_2pi(x);
        let v = tape.value(y).data();
        assert!((v[0] - PI / 2.0).abs() < 1e-12);
        assert!((v[1] - 7.0 * PI / 4.0).abs() < 1e-12);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(wrap_phase(-1e-20f64), 0.0);
        assert_eq!(wrap_phase(-1e-9f32), 0.0);
        assert!(wrap_phase(2.0 * PI) < 1e-12);
    }

    #[test]
    fn reductions_and_movement() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.cumsum(x, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 6.0]);
        let a = tape.constant(t(&[4], &[0.2, 0.5, 0.5, 0.1]));
        assert_eq!(tape.argmax(a), vec![1]);
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s0 = tape.sum(m, 0).unwrap();
        assert_eq!(tape.value(s0).data(), &[5.0, 7.0, 9.0]);
        let s1 = tape.mean(m, 1).unwrap();
        assert_eq!(tape.value(s1).data(), &[2.0, 5.0]);
        let tr = tape.transpose(m, 0, 1).unwrap();
        assert_eq!(tape.shape(tr), &[3, 2]);
        assert_eq!(tape.value(tr).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let cat = tape.concat(&[m, m], 1).unwrap();
        assert_eq!(
            tape.value(cat).data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 4.0, 5.0, 6.0]
        );
        let nr = tape.narrow(cat, 1, 2, 2).unwrap();
        assert_eq!(tape.value(nr).data(), &[3.0, 1.0, 6.0, 4.0]);
        let gth = tape.gather_rows(m, &[1, 1, 0]).unwrap();
        assert_eq!(
            tape.value(gth).data(),
            &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0, 1.0, 2.0, 3.0]
        );
        assert!(matches!(
            tape.gather_rows(m, &[2]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
        let sc = tape.scatter_add_rows(m, &[1, 1], 3).unwrap();
        assert_eq!(
            tape.value(sc).data(),
            &[0.0, 0.0, 0.0, 5.0, 7.0, 9.0, 0.0, 0.0, 0.0]
        );
        assert!(tape.scatter_add_rows(m, &[0, 3], 3).is_err());
    }

    #[test]
    fn rmsnorm_cases() {
        let mut tape = Tape::new();
        let ones = tape.constant(t(&[4], &[1.0; 4]));
        let gain = tape.constant(t(&[4], &[1.0; 4]));
        let y = tape.rmsnorm(ones, gain, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 4]);
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let g2 = tape.constant(t(&[2], &[1.0, 1.0]));
        let y = tape.rmsnorm(x, g2, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((tape.value(y).data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 4.0 / r).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[1, 2, 256]));
        let l = tape
            .cross_entropy(logits, &[3, 200], &[true, true])
            .unwrap();
        assert!((tape.value(l).item() - 256f64.ln()).abs() < 1e-12);
        let mut one_hot = vec![0.0; 256];
        one_hot[7] = 100.0;
        let logits = tape.constant(t(&[1, 256], &one_hot));
        let l = tape.cross_entropy(logits, &[7], &[true]).unwrap();
        assert!(tape.value(l).item() < 1e-40);
        assert!(tape.cross_entropy(logits, &[7], &[false]).is_err());
        assert!(tape.cross_entropy(logits, &[256], &[true]).is_err());
    }

    #[test]
    fn window_one_attends_self() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_fn(&[1, 5, 4], |i| (i as f64 * 0.37).sin()));
        let k = tape.constant(Tensor::from_fn(&[1, 5, 4], |i| (i as f64 * 0.11).cos()));
        let v = tape.constant(Tensor::from_fn(&[1, 5, 4], |i| i as f64));
        let y = tape.window_attention(q, k, v, 2, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(v).data());
        assert!(tape.window_attention(q, k, v, 2, 0).is_err());
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
        let w = tape.param(Tensor::from_fn(&[4, 2], |i| (i as f64).cos()));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.tanh(y);
        let s = tape.sum_all(y);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
        assert_eq!(g1.get(w), g2.get(w));
    }

    #[test]
    fn no_grad_for_constants() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(c, p).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().shape(), &[2]);
    }
}
