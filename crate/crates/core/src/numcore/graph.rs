//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so node indices are
//! already a topological order and `backward` is a single reverse sweep.
//! Parameters are copied into the tape on first use; their gradients are read
//! back with [`Graph::param_grads`] and folded into a [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::param::{ParamId, ParamStore};
use crate::numcore::tensor::{numel, shape_str, Tensor};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Sum(Var),
    SumLastDim(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::Shape(format!(
            "{what}: expected a matrix, got {}",
            shape_str(shape)
        ))),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// Plain matrix product on raw buffers, shared by forward passes and oracles.
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a, b, &mut out, m, k, n);
    out
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].tensor.requires_grad());
        let t = Tensor::new(shape, data)
            .expect("op produced consistent shape")
            .with_requires_grad(rg);
        self.push(t, op)
    }

    /// Records a leaf; gradients are tracked iff the tensor requests them.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    /// Loads a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let mut t = store.get(id).tensor.clone();
        t.clear_grad();
        let v = self.push(t.with_requires_grad(true), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.shape(a), "matmul lhs")?;
        let (k2, n) = matrix_dims(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions differ, {} x {}",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.derived(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.ensure_same_shape(tb, what)?;
        Ok(ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, &[a, b], Op::Mul(a, b)))
    }

    /// Adds a vector along the last dimension (the only broadcasting op).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "add_bias: bias {} does not match last dim of {}",
                shape_str(self.shape(bias)),
                shape_str(self.shape(x))
            )));
        }
        let b = self.data(bias);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, &[x, bias], Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.data(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, &[x], Op::Scale(x, s))
    }

    /// Elementwise product with a constant tensor; no gradient flows to the constant.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        self.value(x).ensure_same_shape(c, "mul_const")?;
        let out = self
            .data(x)
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, &[x], Op::MulConst(x, c.data().to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.derived(Vec::new(), vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of_usize(self.value(x).len());
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "sum_lastdim: need at least 2 dims, got {}",
                shape_str(&shape)
            )));
        }
        let n = last_dim(&shape);
        let out: Vec<T> = self
            .data(x)
            .chunks(n)
            .map(|c| c.iter().copied().sum())
            .collect();
        Ok(self.derived(
            shape[..shape.len() - 1].to_vec(),
            out,
            &[x],
            Op::SumLastDim(x),
        ))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let n = last_dim(self.shape(x));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, &[x], Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        for (p, what) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(p) != [n] {
                return Err(Error::Shape(format!(
                    "layer_norm: {what} {} does not match last dim of {}",
                    shape_str(self.shape(p)),
                    shape_str(self.shape(x))
                )));
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let nf = T::of_usize(n);
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = xs.len() / n;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.derived(
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, &[x], Op::Gelu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "reshape: cannot view {} as {}",
                shape_str(self.shape(x)),
                shape_str(shape)
            )));
        }
        let data = self.data(x).to_vec();
        Ok(self.derived(shape.to_vec(), data, &[x], Op::Reshape(x)))
    }

    /// Flat gather: `out[i] = x[index[i]]`, viewed with `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if numel(shape) != index.len() {
            return Err(Error::Shape(format!(
                "gather: {} indices cannot fill {}",
                index.len(),
                shape_str(shape)
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(Error::Shape(format!(
                "gather: index {bad} out of range for {len} elements"
            )));
        }
        let src = self.data(x);
        let out = index.iter().map(|&i| src[i]).collect();
        Ok(self.derived(shape.to_vec(), out, &[x], Op::Gather { x, index }))
    }

    /// Selects whole rows of a matrix; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = matrix_dims(self.shape(x), "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!(
                "gather_rows: row {bad} out of range for {m} rows"
            )));
        }
        let index = rows
            .iter()
            .flat_map(|&r| (r * d)..(r * d + d))
            .collect::<Vec<_>>();
        self.gather(x, index, &[rows.len(), d])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(x), "transpose")?;
        let index = (0..n)
            .flat_map(|j| (0..m).map(move |i| i * n + j))
            .collect::<Vec<_>>();
        self.gather(x, index, &[n, m])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = matrix_dims(self.shape(a), "concat_rows lhs")?;
        let (n, d2) = matrix_dims(self.shape(b), "concat_rows rhs")?;
        if d != d2 {
            return Err(Error::Shape(format!(
                "concat_rows: widths differ, {} vs {}",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        Ok(self.derived(vec![m + n, d], out, &[a, b], Op::ConcatRows(a, b)))
    }

    /// Multi-head scaled dot-product attention over consecutive row groups.
    ///
    /// Rows `[g*group, (g+1)*group)` attend only to each other; columns are
    /// split into `heads` equal slices.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = matrix_dims(self.shape(q), "attention query")?;
        for (t, what) in [(k, "key"), (v, "value")] {
            if self.shape(t) != [n, d] {
                return Err(Error::Shape(format!(
                    "attention: {what} {} does not match query {}",
                    shape_str(self.shape(t)),
                    shape_str(&[n, d])
                )));
            }
        }
        if group == 0 || n % group != 0 {
            return Err(Error::Shape(format!(
                "attention: {n} tokens do not split into groups of {group}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let groups = n / group;
        let mut probs = vec![T::zero(); groups * heads * group * group];
        let mut out = vec![T::zero(); n * d];
        for g in 0..groups {
            let base = g * group;
            for h in 0..heads {
                let col = h * dh;
                let pbase = (g * heads + h) * group * group;
                for i in 0..group {
                    let qrow = &qd[(base + i) * d + col..(base + i) * d + col + dh];
                    let prow = &mut probs[pbase + i * group..pbase + (i + 1) * group];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(base + j) * d + col..(base + j) * d + col + dh];
                        let mut s = T::zero();
                        for (&a, &b) in qrow.iter().zip(krow) {
                            s += a * b;
                        }
                        *p = s * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(base + i) * d + col..(base + i) * d + col + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(base + j) * d + col..(base + j) * d + col + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("attention produced non-finite values".into()));
        }
        Ok(self.derived(
            vec![n, d],
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// tracked node, so repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        if !self.value(loss).requires_grad() {
            return Err(Error::Contract(
                "loss does not depend on any tracked tensor".into(),
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            self.nodes[i].tensor.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let tracked = |v: Var| self.nodes[v.0].tensor.requires_grad();
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !tracked(v) {
                return;
            }
            let len = self.nodes[v.0].tensor.len();
            let buf = adj[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, &mut |buf| gemm_nt(g, bd, buf, m, k, n));
                send(*b, &mut |buf| gemm_tn(ad, g, buf, m, k, n));
            }
            Op::Add(a, b) => {
                send(*a, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                });
                send(*b, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                send(*x, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| {
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                send(*x, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *s)
                });
            }
            Op::MulConst(x, c) => {
                send(*x, &mut |buf| {
                    for ((o, &v), &cv) in buf.iter_mut().zip(g).zip(c) {
                        *o += v * cv;
                    }
                });
            }
            Op::Sum(x) => {
                send(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::SumLastDim(x) => {
                let n = last_dim(self.shape(*x));
                send(*x, &mut |buf| {
                    for (row, &gv) in buf.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|o| *o += gv);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.tensor.data();
                let n = last_dim(node.tensor.shape());
                send(*x, &mut |buf| {
                    for ((brow, yrow), grow) in
                        buf.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n))
                    {
                        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in brow.iter_mut().zip(yrow).zip(grow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let nf = T::of_usize(n);
                let gd = self.data(*gain);
                send(*x, &mut |buf| {
                    for (r, ((brow, hrow), grow)) in buf
                        .chunks_mut(n)
                        .zip(xhat.chunks(n))
                        .zip(g.chunks(n))
                        .enumerate()
                    {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..n {
                            let d = grow[j] * gd[j];
                            sum_d += d;
                            sum_dh += d * hrow[j];
                        }
                        for j in 0..n {
                            let d = grow[j] * gd[j];
                            brow[j] += rstd[r] / nf * (nf * d - sum_d - hrow[j] * sum_dh);
                        }
                    }
                });
                send(*gain, &mut |buf| {
                    for (hrow, grow) in xhat.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                });
                send(*bias, &mut |buf| {
                    for grow in g.chunks(n) {
                        add_into(buf, grow);
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                send(*x, &mut |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        *o += gv * gelu_parts(xv).1;
                    }
                });
            }
            Op::Reshape(x) => {
                send(*x, &mut |buf| add_into(buf, g));
            }
            Op::Gather { x, index } => {
                send(*x, &mut |buf| {
                    for (&ix, &gv) in index.iter().zip(g) {
                        buf[ix] += gv;
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                send(*a, &mut |buf| add_into(buf, &g[..split]));
                send(*b, &mut |buf| add_into(buf, &g[split..]));
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            } => {
                let (group, heads) = (*group, *heads);
                let (n, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let dh = d / heads;
                let scale = T::one() / T::of_usize(dh).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let mut ds = vec![T::zero(); group];
                for gi in 0..n / group {
                    let base = gi * group;
                    for h in 0..heads {
                        let col = h * dh;
                        let pbase = (gi * heads + h) * group * group;
                        for i in 0..group {
                            let prow = &probs[pbase + i * group..pbase + (i + 1) * group];
                            let gout = &g[(base + i) * d + col..(base + i) * d + col + dh];
                            // dP = dO · Vᵀ ; dV += Pᵀ · dO
                            let mut dot = T::zero();
                            for j in 0..group {
                                let voff = (base + j) * d + col;
                                let vrow = &vd[voff..voff + dh];
                                let mut dp = T::zero();
                                for (&a, &b) in gout.iter().zip(vrow) {
                                    dp += a * b;
                                }
                                ds[j] = dp;
                                dot += dp * prow[j];
                                let dvrow = &mut dv[voff..voff + dh];
                                for (o, &gv) in dvrow.iter_mut().zip(gout) {
                                    *o += prow[j] * gv;
                                }
                            }
                            let qoff = (base + i) * d + col;
                            for j in 0..group {
                                let s = prow[j] * (ds[j] - dot) * scale;
                                if s == T::zero() {
                                    continue;
                                }
                                let koff = (base + j) * d + col;
                                for c in 0..dh {
                                    dq[qoff + c] += s * kd[koff + c];
                                    dk[koff + c] += s * qd[qoff + c];
                                }
                            }
                        }
                    }
                }
                send(*q, &mut |buf| add_into(buf, &dq));
                send(*k, &mut |buf| add_into(buf, &dk));
                send(*v, &mut |buf| add_into(buf, &dv));
            }
        }
    }

    /// Gradients of every parameter loaded on this tape, in load order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().filter_map(|n| match (&n.op, n.tensor.grad()) {
            (Op::Param(id), Some(g)) => Some((*id, g)),
            _ => None,
        })
    }

    /// Folds parameter gradients into the store, multiplied by `scale`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, scale: T) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g, scale);
        }
    }
}

fn add_into<T: Scalar>(buf: &mut [T], g: &[T]) {
    buf.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
}

/// Max-subtracted softmax of one slice.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
