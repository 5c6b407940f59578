use std::collections::HashMap;
use std::sync::Arc;

use super::gemm::{gemm, MatMut, MatRef};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMask {
    Full,
    /// Only keys `0..len` are visible to every query.
    KeyPrefix(usize),
    /// Row-major `rows x cols` permission matrix shared by all batches and heads.
    Dense {
        rows: usize,
        cols: usize,
        allowed: Arc<Vec<bool>>,
    },
}

impl AttentionMask {
    pub fn dense(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::InvalidMask(format!(
                "dense mask needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(AttentionMask::Dense {
            rows,
            cols,
            allowed: Arc::new(allowed),
        })
    }

    /// Number of leading keys that can be visible at all.
    fn key_extent(&self, lq: usize, lk: usize) -> Result<usize> {
        match self {
            AttentionMask::Full => {
                if lk == 0 {
                    return Err(Error::InvalidMask("no keys".into()));
                }
                Ok(lk)
            }
            AttentionMask::KeyPrefix(p) => {
                if *p == 0 || *p > lk {
                    return Err(Error::InvalidMask(format!(
                        "key prefix {p} outside 1..={lk}"
                    )));
                }
                Ok(*p)
            }
            AttentionMask::Dense {
                rows,
                cols,
                allowed,
            } => {
                if *rows != lq || *cols != lk {
                    return Err(Error::InvalidMask(format!(
                        "dense mask is {rows}x{cols}, attention is {lq}x{lk}"
                    )));
                }
                if let Some(r) = allowed.chunks_exact(*cols).position(|row| !row.contains(&true)) {
                    return Err(Error::InvalidMask(format!("query {r} has no permitted key")));
                }
                Ok(lk)
            }
        }
    }
}

/// Rotary position embedding applied along axis 1 of a `[B, L, D]` tensor,
/// independently inside each head of width `D / heads`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeSpec {
    pub heads: usize,
    pub base: f64,
}

/// Rotation angles θ_i = p / base^(2i / head_dim) for one position.
pub(crate) fn rope_angles(head_dim: usize, base: f64, p: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| p / base.powf(2.0 * i as f64 / head_dim as f64))
        .collect()
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: usize,
        probs: Vec<T>,
    },
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Expand {
        x: Var,
    },
    Concat1 {
        a: Var,
        b: Var,
    },
    Slice1 {
        x: Var,
        start: usize,
    },
    SwapAxes01 {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    AddPrefixRows {
        x: Var,
        y: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
    Sum {
        x: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::Rope { .. } => "rope",
            Op::Expand { .. } => "expand",
            Op::Concat1 { .. } => "concat",
            Op::Slice1 { .. } => "slice",
            Op::SwapAxes01 { .. } => "swap_axes",
            Op::Reshape { .. } => "reshape",
            Op::AddPrefixRows { .. } => "add_prefix_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid topological order for backprop.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    non_finite: Option<&'static str>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to leaves and parameters.
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.leaves.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Vec<T>)> {
        self.params
    }
}

fn zeros_like<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::zero(); n]
}

/// Tanh-approximated GELU and its derivative; tanh goes through `exp`, which is
/// much cheaper than libm's tanh in the hot loop.
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let (c, a, half, one, two) = (T::of(0.797_884_560_802_865_4), T::of(0.044_715), T::of(0.5), T::one(), T::of(2.0));
    let u = c * (x + a * x * x * x);
    let t = one - two / ((two * u).exp() + one);
    let y = half * x * (one + t);
    let du = c * (one + T::of(3.0) * a * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * du;
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    /// Tape that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            non_finite: None,
            params: HashMap::new(),
        }
    }

    /// Forward-only tape: parameters are constants and no backward state is kept.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Clones a node's value out of the tape.
    pub fn take(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    /// Error if any operation so far produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = self.grad_enabled;
        v
    }

    /// Parameter leaf. Each parameter is materialized at most once per tape;
    /// frozen parameters (and all parameters in inference mode) are constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = self.grad_enabled && store.is_trainable(id);
        let value = store.get(id).clone();
        self.nodes.push(Node {
            value,
            op: if trainable { Op::Param(id) } else { Op::Leaf },
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `x · wᵀ + b` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let (out, inp) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape("linear", format!("bias {:?}, out {out}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / inp.max(1);
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in y.chunks_exact_mut(out) {
                r.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::rm(self.value(x).data(), 0, rows, inp),
            MatRef::rm(self.value(w).data(), 0, out, inp).t(),
            beta,
            MatMut::rm(&mut y, 0, rows, out),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b }, &parents))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let bv = self.value(b).data();
        let block = bv.len().max(1);
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(block) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o = *o + v;
            }
        }
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * v;
        }
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Multiplies every trailing-axis vector of `x` by the matching scalar of `s`,
    /// where `s` has the shape of `x` without its last axis.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || xs[..xs.len() - 1] != *self.shape(s) {
            return Err(Error::shape("scale_rows", format!("{:?} by {:?}", xs, self.shape(s))));
        }
        let d = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        for (row, &f) in out.data_mut().chunks_exact_mut(d).zip(self.value(s).data()) {
            for o in row {
                *o = *o * f;
            }
        }
        Ok(self.push(out, Op::ScaleRows { x, s }, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = *o * c;
        }
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = gelu_parts(*o).0;
        }
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, shift {:?}", self.shape(x), self.shape(gain), self.shape(shift)),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        let inv_d = T::of(1.0 / d as f64);
        for row in xv.rows() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = (var + T::of(eps)).sqrt().recip();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + s[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            shift,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, &[x, gain, shift]))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Scaled dot-product attention over `[B, L, D]` inputs split into `heads`
    /// heads of width `D / heads`. Returns the concatenated head outputs,
    /// `[B, Lq, D]`; projections are the caller's business.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttentionMask) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 3 || ks.len() != 3 || vs != ks || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let (bsz, lq, dim) = (qs[0], qs[1], qs[2]);
        let lk = ks[1];
        if heads == 0 || dim % heads != 0 {
            return Err(Error::shape("attention", format!("dim {dim} not divisible by {heads} heads")));
        }
        let keys = mask.key_extent(lq, lk)?;
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![T::zero(); bsz * lq * dim];
        let plen = lq * keys;
        let mut probs = vec![T::zero(); bsz * heads * plen];
        for b in 0..bsz {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * plen..][..plen];
                gemm(
                    scale,
                    MatRef::strided(qd, b * lq * dim + h * dh, lq, dh, dim),
                    MatRef::strided(kd, b * lk * dim + h * dh, keys, dh, dim).t(),
                    T::zero(),
                    MatMut::rm(p, 0, lq, keys),
                );
                if let AttentionMask::Dense { allowed, .. } = mask {
                    for (pv, &ok) in p.iter_mut().zip(allowed.iter()) {
                        if !ok {
                            *pv = T::neg_infinity();
                        }
                    }
                }
                for row in p.chunks_exact_mut(keys) {
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    MatRef::rm(p, 0, lq, keys),
                    MatRef::strided(vd, b * lk * dim + h * dh, keys, dh, dim),
                    T::zero(),
                    MatMut::strided(&mut out, b * lq * dim + h * dh, lq, dh, dim),
                );
            }
        }
        let out = Tensor::new(vec![bsz, lq, dim], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            keys,
            probs,
        };
        Ok(self.push(out, op, &[q, k, v]))
    }

    /// Rotates each head's coordinate pairs by position along axis 1.
    pub fn rope(&mut self, x: Var, spec: RopeSpec) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || spec.heads == 0 || xs[2] % spec.heads != 0 || (xs[2] / spec.heads) % 2 != 0 {
            return Err(Error::shape("rope", format!("{xs:?} with {} heads needs even head dim", spec.heads)));
        }
        let (bsz, len, dim) = (xs[0], xs[1], xs[2]);
        let dh = dim / spec.heads;
        let half = dh / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for p in 0..len {
            for th in rope_angles(dh, spec.base, p as f64) {
                cos.push(T::of(th.cos()));
                sin.push(T::of(th.sin()));
            }
        }
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for b in 0..bsz {
            for p in 0..len {
                let row = &mut data[(b * len + p) * dim..][..dim];
                for h in 0..spec.heads {
                    for i in 0..half {
                        let (c, s) = (cos[p * half + i], sin[p * half + i]);
                        let j = h * dh + 2 * i;
                        let (x0, x1) = (row[j], row[j + 1]);
                        row[j] = x0 * c - x1 * s;
                        row[j + 1] = x0 * s + x1 * c;
                    }
                }
            }
        }
        let op = Op::Rope {
            x,
            heads: spec.heads,
            cos,
            sin,
        };
        Ok(self.push(out, op, &[x]))
    }

    /// Repeats `x` along a new leading axis.
    pub fn expand(&mut self, x: Var, reps: usize) -> Var {
        let xv = self.value(x);
        let mut shape = vec![reps];
        shape.extend_from_slice(xv.shape());
        let mut data = Vec::with_capacity(reps * xv.numel());
        for _ in 0..reps {
            data.extend_from_slice(xv.data());
        }
        let t = Tensor::new(shape, data).expect("expand shape");
        self.push(t, Op::Expand { x }, &[x])
    }

    /// Concatenates `[B, La, D]` and `[B, Lb, D]` along axis 1.
    pub fn concat1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape("concat", format!("{sa:?} ++ {sb:?}")));
        }
        let (bsz, la, lb, d) = (sa[0], sa[1], sb[1], sa[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(bsz * (la + lb) * d);
        for i in 0..bsz {
            data.extend_from_slice(&av[i * la * d..(i + 1) * la * d]);
            data.extend_from_slice(&bv[i * lb * d..(i + 1) * lb * d]);
        }
        let t = Tensor::new(vec![bsz, la + lb, d], data)?;
        Ok(self.push(t, Op::Concat1 { a, b }, &[a, b]))
    }

    /// `x[:, start..start + len, :]` for a 3-d tensor.
    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || start + len > xs[1] {
            return Err(Error::shape("slice", format!("{xs:?}[{start}..{}]", start + len)));
        }
        let (bsz, l, d) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(bsz * len * d);
        for i in 0..bsz {
            data.extend_from_slice(&xv[(i * l + start) * d..(i * l + start + len) * d]);
        }
        let t = Tensor::new(vec![bsz, len, d], data)?;
        Ok(self.push(t, Op::Slice1 { x, start }, &[x]))
    }

    /// `[A, B, D] -> [B, A, D]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::shape("swap_axes", format!("{xs:?}")));
        }
        let (a, b, d) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        for i in 0..a {
            for j in 0..b {
                data[(j * a + i) * d..][..d].copy_from_slice(&xv[(i * b + j) * d..][..d]);
            }
        }
        let t = Tensor::new(vec![b, a, d], data)?;
        Ok(self.push(t, Op::SwapAxes01 { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Adds the rows of `y` (`[p, D]`) to the first `p` rows of `x` (`[.., D]`);
    /// the remaining rows of `x` are copied through untouched.
    pub fn add_prefix_rows(&mut self, x: Var, y: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let ys = self.shape(y);
        let rows = self.value(x).numel() / d.max(1);
        if ys.len() != 2 || ys[1] != d || ys[0] > rows {
            return Err(Error::shape("add_prefix_rows", format!("{:?} += {ys:?}", self.shape(x))));
        }
        let mut out = self.value(x).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(y).data()) {
            *o = *o + v;
        }
        Ok(self.push(out, Op::AddPrefixRows { x, y }, &[x, y]))
    }

    /// Mean negative log-likelihood of `targets` under a softmax restricted to
    /// the first `classes` columns of `logits` (`[R, K]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], classes: usize) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != targets.len() || classes == 0 || classes > ls[1] {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {ls:?}, {} targets, {classes} classes", targets.len()),
            ));
        }
        if targets.is_empty() {
            return Err(Error::Input("cross entropy over zero rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let k = ls[1];
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(targets.len() * classes);
        let mut total = 0.0f64;
        for (row, &t) in lv.chunks_exact(k).zip(targets) {
            let start = probs.len();
            probs.extend_from_slice(&row[..classes]);
            let p = &mut probs[start..];
            softmax_in_place(p);
            let m = row[..classes].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row[..classes].iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += (lse - row[t]).as_f64();
        }
        let loss = Tensor::scalar(T::of(total / targets.len() as f64));
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            classes,
        };
        Ok(self.push(loss, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward", format!("root is {:?}, not scalar", self.shape(root))));
        }
        self.check_finite()?;
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        let mut leaves: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<(ParamId, Vec<T>)> = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => params.push((*id, g)),
                op => self.backprop(op, i, &g, &mut grads),
            }
        }
        params.sort_by_key(|(id, _)| *id);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            leaves,
            shapes,
            params,
        })
    }

    fn backprop(&self, op: &Op<T>, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        // Accumulator for a parent's gradient, allocated on first use.
        fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| zeros_like(len))
        }
        let len_of = |v: Var| self.nodes[v.0].value.numel();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (out, inp) = (ws[0], ws[1]);
                let rows = g.len() / out;
                if wants(*x) {
                    let gx = slot(grads, *x, len_of(*x));
                    gemm(
                        T::one(),
                        MatRef::rm(g, 0, rows, out),
                        MatRef::rm(val(*w), 0, out, inp),
                        T::one(),
                        MatMut::rm(gx, 0, rows, inp),
                    );
                }
                if wants(*w) {
                    let gw = slot(grads, *w, out * inp);
                    gemm(
                        T::one(),
                        MatRef::rm(g, 0, rows, out).t(),
                        MatRef::rm(val(*x), 0, rows, inp),
                        T::one(),
                        MatMut::rm(gw, 0, out, inp),
                    );
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let gb = slot(grads, *b, out);
                        for row in g.chunks_exact(out) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o = *o + v;
                    }
                }
                if wants(*b) {
                    let lb = len_of(*b);
                    let gb = slot(grads, *b, lb);
                    for chunk in g.chunks_exact(lb.max(1)) {
                        for (o, &v) in gb.iter_mut().zip(chunk) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gv * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = slot(grads, *b, g.len());
                    for ((o, &gv), &y) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gv * y;
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let d = self.nodes[x.0].value.last_dim();
                if wants(*x) {
                    let sv = val(*s);
                    let gx = slot(grads, *x, g.len());
                    for ((grow, orow), &f) in g.chunks_exact(d).zip(gx.chunks_exact_mut(d)).zip(sv) {
                        for (o, &gv) in orow.iter_mut().zip(grow) {
                            *o = *o + gv * f;
                        }
                    }
                }
                if wants(*s) {
                    let xv = val(*x);
                    let gs = slot(grads, *s, len_of(*s));
                    for ((grow, xrow), o) in g.chunks_exact(d).zip(xv.chunks_exact(d)).zip(gs.iter_mut()) {
                        *o = *o + grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = slot(grads, *x, g.len());
                for (o, &gv) in gx.iter_mut().zip(g) {
                    *o = *o + gv * *c;
                }
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                let gx = slot(grads, *x, g.len());
                for ((o, &gv), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *o = *o + gv * gelu_parts(xi).1;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let d = self.nodes[x.0].value.last_dim();
                let gv = val(*gain);
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    let inv_d = T::of(1.0 / d as f64);
                    for (((grow, hrow), orow), &r) in g
                        .chunks_exact(d)
                        .zip(xhat.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .zip(rstd)
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hrow[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            orow[j] = orow[j] + r * (dh - m1 - hrow[j] * m2);
                        }
                    }
                }
                if wants(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*shift) {
                    let gs = slot(grads, *shift, d);
                    for grow in g.chunks_exact(d) {
                        for j in 0..d {
                            gs[j] = gs[j] + grow[j];
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = self.nodes[idx].value.data();
                let d = self.nodes[idx].value.last_dim();
                let gx = slot(grads, *x, g.len());
                for ((grow, yrow), orow) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..d {
                        orow[j] = orow[j] + yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, *keys, probs, g, grads),
            Op::Rope { x, heads, cos, sin } => {
                let xs = self.shape(*x);
                let (bsz, len, dim) = (xs[0], xs[1], xs[2]);
                let dh = dim / heads;
                let half = dh / 2;
                let gx = slot(grads, *x, g.len());
                for b in 0..bsz {
                    for p in 0..len {
                        let off = (b * len + p) * dim;
                        for h in 0..*heads {
                            for i in 0..half {
                                let (c, s) = (cos[p * half + i], sin[p * half + i]);
                                let j = off + h * dh + 2 * i;
                                let (g0, g1) = (g[j], g[j + 1]);
                                gx[j] = gx[j] + g0 * c + g1 * s;
                                gx[j + 1] = gx[j + 1] - g0 * s + g1 * c;
                            }
                        }
                    }
                }
            }
            Op::Expand { x } => {
                let lx = len_of(*x);
                let gx = slot(grads, *x, lx);
                for chunk in g.chunks_exact(lx.max(1)) {
                    for (o, &v) in gx.iter_mut().zip(chunk) {
                        *o = *o + v;
                    }
                }
            }
            Op::Concat1 { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bsz, la, lb, d) = (sa[0], sa[1], sb[1], sa[2]);
                let row = (la + lb) * d;
                if wants(*a) {
                    let ga = slot(grads, *a, bsz * la * d);
                    for i in 0..bsz {
                        for (o, &v) in ga[i * la * d..][..la * d].iter_mut().zip(&g[i * row..][..la * d]) {
                            *o = *o + v;
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bsz * lb * d);
                    for i in 0..bsz {
                        for (o, &v) in gb[i * lb * d..][..lb * d].iter_mut().zip(&g[i * row + la * d..][..lb * d]) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Slice1 { x, start } => {
                let xs = self.shape(*x).to_vec();
                let (bsz, l, d) = (xs[0], xs[1], xs[2]);
                let len = self.shape(Var(idx))[1];
                let gx = slot(grads, *x, bsz * l * d);
                for i in 0..bsz {
                    let dst = &mut gx[(i * l + start) * d..][..len * d];
                    for (o, &v) in dst.iter_mut().zip(&g[i * len * d..][..len * d]) {
                        *o = *o + v;
                    }
                }
            }
            Op::SwapAxes01 { x } => {
                let xs = self.shape(*x).to_vec();
                let (a, b, d) = (xs[0], xs[1], xs[2]);
                let gx = slot(grads, *x, g.len());
                for i in 0..a {
                    for j in 0..b {
                        let src = &g[(j * a + i) * d..][..d];
                        for (o, &v) in gx[(i * b + j) * d..][..d].iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                let gx = slot(grads, *x, g.len());
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o = *o + v;
                }
            }
            Op::AddPrefixRows { x, y } => {
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v;
                    }
                }
                if wants(*y) {
                    let ly = len_of(*y);
                    let gy = slot(grads, *y, ly);
                    for (o, &v) in gy.iter_mut().zip(&g[..ly]) {
                        *o = *o + v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                classes,
            } => {
                let k = self.shape(*logits)[1];
                let rows = targets.len();
                let coef = g[0] * T::of(1.0 / rows as f64);
                let gl = slot(grads, *logits, rows * k);
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..*classes {
                        let mut d = probs[r * classes + c];
                        if c == t {
                            d = d - T::one();
                        }
                        gl[r * k + c] = gl[r * k + c] + coef * d;
                    }
                }
            }
            Op::Sum { x } => {
                let gx = slot(grads, *x, len_of(*x));
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let qs = self.shape(q);
        let (bsz, lq, dim) = (qs[0], qs[1], qs[2]);
        let lk = self.shape(k)[1];
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let plen = lq * keys;
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let (wq, wk, wv) = (
            self.nodes[q.0].needs_grad,
            self.nodes[k.0].needs_grad,
            self.nodes[v.0].needs_grad,
        );
        let mut gq = if wq { grads[q.0].take().unwrap_or_else(|| zeros_like(bsz * lq * dim)) } else { Vec::new() };
        let mut gk = if wk { grads[k.0].take().unwrap_or_else(|| zeros_like(bsz * lk * dim)) } else { Vec::new() };
        let mut gv = if wv { grads[v.0].take().unwrap_or_else(|| zeros_like(bsz * lk * dim)) } else { Vec::new() };
        let mut ds = vec![T::zero(); plen];
        for b in 0..bsz {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * plen..][..plen];
                let go = MatRef::strided(g, b * lq * dim + h * dh, lq, dh, dim);
                if wv {
                    gemm(
                        T::one(),
                        MatRef::rm(p, 0, lq, keys).t(),
                        go,
                        T::one(),
                        MatMut::strided(&mut gv, b * lk * dim + h * dh, keys, dh, dim),
                    );
                }
                if !(wq || wk) {
                    continue;
                }
                gemm(
                    T::one(),
                    go,
                    MatRef::strided(vd, b * lk * dim + h * dh, keys, dh, dim).t(),
                    T::zero(),
                    MatMut::rm(&mut ds, 0, lq, keys),
                );
                for (drow, prow) in ds.chunks_exact_mut(keys).zip(p.chunks_exact(keys)) {
                    let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                if wq {
                    gemm(
                        T::one(),
                        MatRef::rm(&ds, 0, lq, keys),
                        MatRef::strided(kd, b * lk * dim + h * dh, keys, dh, dim),
                        T::one(),
                        MatMut::strided(&mut gq, b * lq * dim + h * dh, lq, dh, dim),
                    );
                }
                if wk {
                    gemm(
                        T::one(),
                        MatRef::rm(&ds, 0, lq, keys).t(),
                        MatRef::strided(qd, b * lq * dim + h * dh, lq, dh, dim),
                        T::one(),
                        MatMut::strided(&mut gk, b * lk * dim + h * dh, keys, dh, dim),
                    );
                }
            }
        }
        // q, k and v may alias the same node (self-attention without projections).
        for (var, want, buf) in [(q, wq, gq), (k, wk, gk), (v, wv, gv)] {
            if !want {
                continue;
            }
            match &mut grads[var.0] {
                Some(existing) => {
                    for (o, x) in existing.iter_mut().zip(buf) {
                        *o = *o + x;
                    }
                }
                slot @ None => *slot = Some(buf),
            }
        }
    }
}

/// Numerically stable in-place softmax; `-inf` entries get exactly zero mass.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total = total + *v;
    }
    let inv = total.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}
