use std::sync::Arc;

use super::kernels::{self, PatchGrid};
use super::{numel_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Transpose(Var),
    Reshape(Var),
    LayerNorm { x: Var, rstd: Vec<S> },
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Conv3d { x: Var, k: Var, grid: PatchGrid, cols: Vec<S> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { x: Var, index: Arc<Vec<usize>> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Values are computed eagerly. Only nodes that depend on a leaf created with
/// `requires_grad` receive gradients, so an inference pass on a tape built with
/// [`Tape::inference`] does no extra bookkeeping beyond keeping intermediates.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-6;

impl<S: Scalar> Tape<S> {
    /// Tape on which parameters bound with [`Tape::param`] are differentiable.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape on which nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel_of(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes are well-formed")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Records a leaf. Gradients flow to it only if `requires_grad` is set and
    /// this tape has gradients enabled.
    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        let g = requires_grad && self.grad_enabled;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, g)
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    /// Binds a parameter; honours the tensor's own `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, t.requires_grad())
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn last_dim(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let c = *s.last().expect("non-empty shape");
        (self.node(v).value.len() / c, c)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), g))
    }

    /// `[m,k] · [n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt inner dims {k} vs {k2}")));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), g))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<Vec<S>> {
        self.same_shape(a, b, what)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let g = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let g = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let g = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), g))
    }

    fn row_check(&self, a: Var, r: Var, what: &str) -> Result<usize> {
        let (_, c) = self.last_dim(a);
        if self.node(r).value.len() != c {
            return Err(Error::shape(format!(
                "{what}: row of {} elements against last dim {c}",
                self.node(r).value.len()
            )));
        }
        Ok(c)
    }

    /// Adds a length-`C` row to every position of `[..., C]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let c = self.row_check(a, r, "add_row")?;
        let row = self.value(r);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + row[i % c])
            .collect();
        let g = self.ng(&[a, r]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, r), g))
    }

    /// Multiplies every position of `[..., C]` by a length-`C` row.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let c = self.row_check(a, r, "mul_row")?;
        let row = self.value(r);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * row[i % c])
            .collect();
        let g = self.ng(&[a, r]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulRow(a, r), g))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * k).collect();
        let g = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, k), g)
    }

    pub fn add_scalar(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).iter().map(|&x| x + k).collect();
        let g = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), g)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = kernels::transpose(self.value(a), r, c);
        let g = self.ng(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel_of(shape) != self.value(a).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        let g = self.ng(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), g))
    }

    /// Normalizes each position over the last dimension to zero mean and unit
    /// variance (population variance, eps = 1e-6). No affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (rows, c) = self.last_dim(a);
        if c < 2 {
            return Err(Error::shape("layer_norm needs a last dimension of at least 2"));
        }
        let x = self.value(a);
        let mut out = vec![S::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        let inv_c = S::one() / S::of(c as f64);
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = kernels::sum(row) * inv_c;
            let mut var = S::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_c;
            let rs = S::one() / (var + S::of(LN_EPS)).sqrt();
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let g = self.ng(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LayerNorm { x: a, rstd }, g))
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, c) = self.last_dim(a);
        let x = self.value(a);
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let o = &mut out[r * c..(r + 1) * c];
            let mut z = S::zero();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - m).exp();
                z += *oi;
            }
            let inv = S::one() / z;
            for oi in o.iter_mut() {
                *oi *= inv;
            }
        }
        let g = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), g)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let g = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let g = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Silu(a), g)
    }

    /// Non-overlapping 3D convolution: `x[C,T,H,W]` with `k[Co,C,ts,ss,ss]`,
    /// stride equal to the kernel extent, no padding, no bias.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: (usize, usize, usize)) -> Result<Var> {
        let (c, t, h, w) = match self.shape(x) {
            [c, t, h, w] => (*c, *t, *h, *w),
            s => return Err(Error::shape(format!("conv3d input must be [C,T,H,W], got {s:?}"))),
        };
        let (co, kc, kt, kh, kw) = match self.shape(k) {
            [co, kc, kt, kh, kw] => (*co, *kc, *kt, *kh, *kw),
            s => {
                return Err(Error::shape(format!(
                    "conv3d kernels must be [Co,C,ts,ss,ss], got {s:?}"
                )))
            }
        };
        if kc != c || kh != kw || stride != (kt, kh, kw) {
            return Err(Error::shape(format!(
                "conv3d kernel {:?} incompatible with input {:?} and stride {stride:?}",
                self.shape(k),
                self.shape(x)
            )));
        }
        let grid = PatchGrid {
            channels: c,
            frames: t,
            height: h,
            width: w,
            ts: kt,
            ss: kh,
        };
        if !grid.divides() {
            return Err(Error::shape(format!(
                "conv3d: ({t},{h},{w}) not divisible by ({kt},{kh},{kw})"
            )));
        }
        let cols = kernels::im2col(self.value(x), &grid);
        let p = grid.patches();
        let kl = grid.patch_len();
        // out[co, p] = Σ_j k[co, j] · cols[p, j]
        let mut out = vec![S::zero(); co * p];
        kernels::gemm_nt(self.value(k), &cols, &mut out, co, kl, p);
        let (gt, gh, gw) = grid.grid();
        let g = self.ng(&[x, k]);
        let cols = if g { cols } else { Vec::new() };
        Ok(self.push(vec![co, gt, gh, gw], out, Op::Conv3d { x, k, grid, cols }, g))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let g = self.ng(&[a]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x: a, start }, g))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape(format!("concat_cols rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let g = self.ng(parts);
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), g))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        if numel_of(shape) != index.len() {
            return Err(Error::shape(format!(
                "gather of {} indices into {shape:?}",
                index.len()
            )));
        }
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape(format!("gather index {bad} out of {}", x.len())));
        }
        let out = index.iter().map(|&i| x[i]).collect();
        let g = self.ng(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Gather { x: a, index }, g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::sum(self.value(a));
        let g = self.ng(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), g)
    }

    /// Reverse pass from a scalar. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Grads<S>> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.node(loss).value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            } else if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("gradient".into()));
                }
            }
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, i: usize, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                acc(*a, &mut |g| kernels::gemm_nt(dy, &nodes[b.0].value, g, m, n, k));
                acc(*b, &mut |g| kernels::gemm_tn(&nodes[a.0].value, dy, g, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                acc(*a, &mut |g| kernels::gemm_nn(dy, &nodes[b.0].value, g, m, n, k));
                acc(*b, &mut |g| kernels::gemm_tn(dy, &nodes[a.0].value, g, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| kernels::axpy(S::one(), dy, g));
                acc(*b, &mut |g| kernels::axpy(S::one(), dy, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| kernels::axpy(S::one(), dy, g));
                acc(*b, &mut |g| kernels::axpy(-S::one(), dy, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |g| {
                    for ((gi, &d), &y) in g.iter_mut().zip(dy).zip(vb) {
                        *gi += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, &d), &x) in g.iter_mut().zip(dy).zip(va) {
                        *gi += d * x;
                    }
                });
            }
            Op::AddRow(a, r) => {
                let c = nodes[r.0].value.len();
                acc(*a, &mut |g| kernels::axpy(S::one(), dy, g));
                acc(*r, &mut |g| {
                    for row in dy.chunks_exact(c) {
                        kernels::axpy(S::one(), row, g);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let c = nodes[r.0].value.len();
                let (va, vr) = (&nodes[a.0].value, &nodes[r.0].value);
                acc(*a, &mut |g| {
                    for (i, (gi, &d)) in g.iter_mut().zip(dy).enumerate() {
                        *gi += d * vr[i % c];
                    }
                });
                acc(*r, &mut |g| {
                    for (drow, xrow) in dy.chunks_exact(c).zip(va.chunks_exact(c)) {
                        for j in 0..c {
                            g[j] += drow[j] * xrow[j];
                        }
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |g| kernels::axpy(*k, dy, g)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |g| kernels::axpy(S::one(), dy, g)),
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let dt = kernels::transpose(dy, c, r);
                acc(*a, &mut |g| kernels::axpy(S::one(), &dt, g));
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let c = *node.shape.last().expect("shape");
                let inv_c = S::one() / S::of(c as f64);
                acc(*x, &mut |g| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let d = &dy[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let mean_d = kernels::sum(d) * inv_c;
                        let mean_dy = kernels::dot(d, yr) * inv_c;
                        for j in 0..c {
                            g[r * c + j] += rs * (d[j] - mean_d - yr[j] * mean_dy);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = *node.shape.last().expect("shape");
                acc(*a, &mut |g| {
                    for r in 0..y.len() / c {
                        let d = &dy[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let s = kernels::dot(d, yr);
                        for j in 0..c {
                            g[r * c + j] += yr[j] * (d[j] - s);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &mut |g| {
                    for ((gi, &d), &xi) in g.iter_mut().zip(dy).zip(x) {
                        *gi += d * gelu_grad(xi);
                    }
                });
            }
            Op::Silu(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &mut |g| {
                    for ((gi, &d), &xi) in g.iter_mut().zip(dy).zip(x) {
                        let s = sigmoid(xi);
                        *gi += d * s * (S::one() + xi * (S::one() - s));
                    }
                });
            }
            Op::Conv3d { x, k, grid, cols } => {
                let co = nodes[k.0].shape[0];
                let p = grid.patches();
                let kl = grid.patch_len();
                // dk[co, j] = Σ_p dy[co, p] · cols[p, j]
                acc(*k, &mut |g| kernels::gemm_nn(dy, cols, g, co, p, kl));
                acc(*x, &mut |g| {
                    let mut dcols = vec![S::zero(); p * kl];
                    kernels::gemm_tn(dy, &nodes[k.0].value, &mut dcols, co, p, kl);
                    let dx = kernels::col2im(&dcols, grid);
                    kernels::axpy(S::one(), &dx, g);
                });
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].shape[1];
                let len = node.shape[1];
                acc(*x, &mut |g| {
                    for (r, d) in dy.chunks_exact(len).enumerate() {
                        kernels::axpy(S::one(), d, &mut g[r * c + start..r * c + start + len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    acc(p, &mut |g| {
                        for (r, grow) in g.chunks_exact_mut(w).enumerate() {
                            kernels::axpy(
                                S::one(),
                                &dy[r * total + offset..r * total + offset + w],
                                grow,
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { x, index } => acc(*x, &mut |g| {
                for (&i, &d) in index.iter().zip(dy) {
                    g[i] += d;
                }
            }),
            Op::Sum(a) => {
                let d = dy[0];
                acc(*a, &mut |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    half * x * (S::one() + u.tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    half * (S::one() + th) + half * x * (S::one() - th * th) * du
}
