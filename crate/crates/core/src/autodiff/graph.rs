use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::scalar::Scalar;

use super::tensor::{axis_extents, Tensor};
use super::TensorError;

/// Epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Gelu(Var, Vec<T>),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    StopGradient,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Every operation appends a node whose inputs were recorded earlier, so the
/// node list is always in topological order. A graph is rebuilt for every
/// forward pass; leaf gradients accumulate across [`Graph::backward`] calls
/// until [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
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
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if any was produced.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shapes("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            n,
            k,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            T::zero(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product over the leading axis: `a[B×m×k] · b[B×k×n]`, or
    /// `a · bᵀ` with `b[B×n×k]` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(TensorError::shapes("batch_matmul", sa, sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bt * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm(
                m,
                n,
                k,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[bt, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sb.is_empty() {
            Ok(sa.to_vec())
        } else if sa.is_empty() {
            Ok(sb.to_vec())
        } else {
            Err(TensorError::shapes(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let shape = self.binary_shape(name, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let out: Vec<T> = (0..n)
            .map(|i| f(va[bidx(va.len(), i)], vb[bidx(vb.len(), i)]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// Elementwise sum. Shapes must match unless one side is a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t: Vec<T> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let out = xv.data().iter().zip(&t).map(|(&v, &tv)| T::of(0.5) * v * (T::one() + tv)).collect();
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x, t), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Adds `bias[D]` to every length-`D` row along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(TensorError::shapes("add_bias", sx, sb));
        }
        let d = sb[0];
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Multiplies each slice `x[i, ..]` by `s[i]`; `s` has `x.shape[0]` elements.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.is_empty() || self.value(s).len() != sx[0] {
            return Err(TensorError::shapes("scale_rows", sx, ss));
        }
        let rows = sx[0];
        let width = self.value(x).len() / rows.max(1);
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_mut(width.max(1)).enumerate().take(rows) {
            for o in row {
                *o *= sv[r];
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(x, s), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::shapes("layer_norm", &sx, self.shape(p)));
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut normed = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let df = T::of_usize(d);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let nv = (row[j] - mean) * rs;
                normed[r * d + j] = nv;
                out[r * d + j] = nv * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- normalizers

    fn check_axis(&self, x: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let value = softmax_values(self.value(x), axis, false);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    /// `x − max − log Σ exp(x − max)` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let value = softmax_values(self.value(x), axis, true);
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x, axis), rg))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::of_usize(v.len().max(1));
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Permutation {
                shape,
                perm: perm.to_vec(),
            });
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Slice `x[start..start + len]` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: shape.first().copied().unwrap_or(0),
            });
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Narrow(x, start), rg))
    }

    /// Selects rows along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::InvalidAxis { axis: 0, rank: 0 });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                len: shape[0],
            });
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(*xs.first().ok_or(TensorError::Contract("concat of nothing".into()))?).to_vec();
        if first.is_empty() {
            return Err(TensorError::InvalidAxis { axis: 0, rank: 0 });
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(TensorError::shapes("concat_rows", &first, s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut out_shape = first;
        out_shape[0] = rows;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    // ---------------------------------------------------------------- convolution

    /// 2-D cross-correlation. `x` is `[C×H×W]` or `[B×C×H×W]`, `w` is
    /// `[O×C×k×k]`, optional `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let geom = ConvGeom::new(&sx, &sw, stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_c] {
                return Err(TensorError::shapes("conv2d bias", &sw, self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); geom.batch * geom.out_c * geom.out_len()];
        let mut cols = vec![T::zero(); geom.col_rows() * geom.out_len()];
        for b in 0..geom.batch {
            geom.im2col(&xv[b * geom.in_len()..(b + 1) * geom.in_len()], &mut cols);
            let ob = &mut out[b * geom.out_c * geom.out_len()..(b + 1) * geom.out_c * geom.out_len()];
            gemm(geom.out_c, geom.out_len(), geom.col_rows(), wv, false, &cols, false, ob, T::zero());
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (o, chunk) in ob.chunks_mut(geom.out_len()).enumerate() {
                    for v in chunk {
                        *v += bd[o];
                    }
                }
            }
        }
        let out_shape = if sx.len() == 4 {
            vec![geom.batch, geom.out_c, geom.out_h, geom.out_w]
        } else {
            vec![geom.out_c, geom.out_h, geom.out_w]
        };
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient,
    /// accumulating into previously stored leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut adj);
            if matches!(node.op, Op::Leaf) {
                let slot = &mut self.leaf_grads[id];
                let grad = Tensor::new(self.nodes[id].value.shape(), g).expect("grad shape");
                match slot {
                    Some(acc) => acc.add_assign(&grad),
                    None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.len();
                let buf = adj[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(buf);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |da| gemm(m, k, n, g, false, val(*b), true, da, T::one()));
                acc(*b, &mut |db| gemm(k, n, m, val(*a), true, g, false, db, T::one()));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for i in 0..bt {
                        gemm(
                            m,
                            k,
                            n,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            T::one(),
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, k, m, gi, true, ai, false, dbi, T::one());
                        } else {
                            gemm(k, n, m, ai, true, gi, false, dbi, T::one());
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                acc(*a, &mut |da| reduce_into(da, g, |x| x));
                acc(*b, &mut |db| reduce_into(db, g, |x| x * sign));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    reduce_into_indexed(da, g, |i, gi| gi * vb[bidx(vb.len(), i)])
                });
                acc(*b, &mut |db| {
                    reduce_into_indexed(db, g, |i, gi| gi * va[bidx(va.len(), i)])
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |dx| axpy(dx, g, |_, gi| gi * *f)),
            Op::AddScalar(x) => acc(*x, &mut |dx| axpy(dx, g, |_, gi| gi)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |dx| axpy(dx, g, |_, gi| gi));
                acc(*b, &mut |db| {
                    let d = db.len();
                    for row in g.chunks(d) {
                        for (o, &gi) in db.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let width = vx.len() / vs.len().max(1);
                acc(*x, &mut |dx| axpy(dx, g, |i, gi| gi * vs[i / width]));
                acc(*s, &mut |ds| {
                    for (r, o) in ds.iter_mut().enumerate() {
                        let span = r * width..(r + 1) * width;
                        *o += g[span.clone()].iter().zip(&vx[span]).map(|(&a, &b)| a * b).sum();
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |dx| {
                    axpy(dx, g, |i, gi| if vx[i] > T::zero() { gi } else { T::zero() })
                });
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                acc(*x, &mut |dx| {
                    axpy(dx, g, |i, gi| if vx[i] > T::zero() { gi } else { gi * *slope })
                });
            }
            Op::Gelu(x, t) => {
                let vx = val(*x);
                acc(*x, &mut |dx| axpy(dx, g, |i, gi| gi * gelu_grad(vx[i], t[i])));
            }
            Op::Square(x) => {
                let vx = val(*x);
                acc(*x, &mut |dx| axpy(dx, g, |i, gi| gi * (vx[i] + vx[i])));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let gv = val(*gamma);
                let df = T::of_usize(d);
                acc(*x, &mut |dx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, nr) = (&g[span.clone()], &normed[span.clone()]);
                        let mut sum_dn = T::zero();
                        let mut sum_dn_n = T::zero();
                        for j in 0..d {
                            let dn = gr[j] * gv[j];
                            sum_dn += dn;
                            sum_dn_n += dn * nr[j];
                        }
                        for j in 0..d {
                            let dn = gr[j] * gv[j];
                            dx[r * d + j] += rs / df * (df * dn - sum_dn - nr[j] * sum_dn_n);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (gr, nr) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * nr[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                acc(*x, &mut |dx| {
                    if inner == 1 {
                        for ((dxr, gr), yr) in dx.chunks_mut(len).zip(g.chunks(len)).zip(y.chunks(len)) {
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((d, &gi), &yi) in dxr.iter_mut().zip(gr).zip(yr) {
                                *d += yi * (gi - dot);
                            }
                        }
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                dx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let total: T = (0..len).map(|k| g[at(k)]).sum();
                            for k in 0..len {
                                dx[at(k)] += g[at(k)] - y[at(k)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = T::of_usize(nodes[x.0].value.len().max(1));
                acc(*x, &mut |dx| dx.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::Reshape(x) => acc(*x, &mut |dx| axpy(dx, g, |_, gi| gi)),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inv);
                acc(*x, &mut |dx| axpy(dx, &back, |_, gi| gi));
            }
            Op::Narrow(x, start) => {
                let row: usize = node.value.shape()[1..].iter().product();
                acc(*x, &mut |dx| {
                    let off = start * row;
                    axpy(&mut dx[off..off + g.len()], g, |_, gi| gi)
                });
            }
            Op::GatherRows(x, idx) => {
                let row: usize = node.value.shape()[1..].iter().product();
                acc(*x, &mut |dx| {
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(&mut dx[i * row..(i + 1) * row], &g[k * row..(k + 1) * row], |_, gi| gi);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = nodes[x.0].value.len();
                    acc(x, &mut |dx| axpy(dx, &g[off..off + n], |_, gi| gi));
                    off += n;
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let geom = ConvGeom::new(nodes[x.0].value.shape(), nodes[w.0].value.shape(), *stride, *pad)
                    .expect("validated in forward");
                let (vx, vw) = (val(*x), val(*w));
                let ol = geom.out_len();
                let gsz = geom.out_c * ol;
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        for gb in g.chunks(gsz) {
                            for (o, chunk) in gb.chunks(ol).enumerate() {
                                db[o] += chunk.iter().copied().sum();
                            }
                        }
                    });
                }
                let mut cols = vec![T::zero(); geom.col_rows() * ol];
                acc(*w, &mut |dw| {
                    for b in 0..geom.batch {
                        geom.im2col(&vx[b * geom.in_len()..(b + 1) * geom.in_len()], &mut cols);
                        gemm(
                            geom.out_c,
                            geom.col_rows(),
                            ol,
                            &g[b * gsz..(b + 1) * gsz],
                            false,
                            &cols,
                            true,
                            dw,
                            T::one(),
                        );
                    }
                });
                acc(*x, &mut |dx| {
                    for b in 0..geom.batch {
                        gemm(
                            geom.col_rows(),
                            ol,
                            geom.out_c,
                            vw,
                            true,
                            &g[b * gsz..(b + 1) * gsz],
                            false,
                            &mut cols,
                            T::zero(),
                        );
                        geom.col2im(&cols, &mut dx[b * geom.in_len()..(b + 1) * geom.in_len()]);
                    }
                });
            }
        }
    }
}

#[inline]
fn bidx(len: usize, i: usize) -> usize {
    if len == 1 {
        0
    } else {
        i
    }
}

fn axpy<T: Scalar>(dst: &mut [T], g: &[T], f: impl Fn(usize, T) -> T) {
    for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *d += f(i, gi);
    }
}

/// Accumulates `g` into `dst`, summing when `dst` is a broadcast scalar.
fn reduce_into<T: Scalar>(dst: &mut [T], g: &[T], f: impl Fn(T) -> T) {
    reduce_into_indexed(dst, g, |_, gi| f(gi))
}

fn reduce_into_indexed<T: Scalar>(dst: &mut [T], g: &[T], f: impl Fn(usize, T) -> T) {
    if dst.len() == g.len() {
        axpy(dst, g, f);
    } else {
        dst[0] += g.iter().enumerate().map(|(i, &gi)| f(i, gi)).sum();
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` of the GELU inner argument, via one `exp`.
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() - T::of(2.0) / ((inner + inner).exp() + T::one())
}

fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

pub(crate) fn softmax_values<T: Scalar>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let xv = x.data();
    let mut out = vec![T::zero(); xv.len()];
    if inner == 1 {
        for (row, dst) in xv.chunks(len).zip(out.chunks_mut(len)) {
            softmax_row(row, dst, log);
        }
        return Tensor::new(x.shape(), out).expect("same shape");
    }
    let mut row = vec![T::zero(); len];
    let mut dst = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for (k, r) in row.iter_mut().enumerate() {
                *r = xv[(o * len + k) * inner + i];
            }
            softmax_row(&row, &mut dst, log);
            for (k, &d) in dst.iter().enumerate() {
                out[(o * len + k) * inner + i] = d;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

fn softmax_row<T: Scalar>(row: &[T], dst: &mut [T], log: bool) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &v) in dst.iter_mut().zip(row) {
        *d = (v - max).exp();
        total += *d;
    }
    if log {
        let lse = total.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - max - lse;
        }
    } else {
        let inv = T::one() / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // Trailing axes left in place are copied as contiguous runs.
    let mut fixed = rank;
    while fixed > 0 && perm[fixed - 1] == fixed - 1 {
        fixed -= 1;
    }
    let run: usize = shape[fixed..].iter().product();
    let outer_shape = &out_shape[..fixed];
    let strides: Vec<usize> = perm[..fixed].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; fixed];
    let mut offset = 0usize;
    for _ in 0..src.len() / run.max(1) {
        out.extend_from_slice(&src[offset..offset + run]);
        for d in (0..fixed).rev() {
            index[d] += 1;
            offset += strides[d];
            if index[d] < outer_shape[d] {
                break;
            }
            offset -= strides[d] * outer_shape[d];
            index[d] = 0;
        }
    }
    (out, out_shape)
}

/// `c[m×n] = op(a) · op(b) + beta·c`, where `op(a)` is `m×k` and `op(b)` is
/// `k×n`; a transposed operand is stored with its dimensions swapped.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    beta: T,
) {
    let av = if trans_a {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let bv = if trans_b {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let (batch, in_c, in_h, in_w) = match *sx {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(TensorError::shapes("conv2d", sx, sw)),
        };
        let [out_c, wc, k, k2] = *sw else {
            return Err(TensorError::shapes("conv2d", sx, sw));
        };
        if wc != in_c || k != k2 || stride == 0 || k > in_h + 2 * pad || k > in_w + 2 * pad {
            return Err(TensorError::shapes("conv2d", sx, sw));
        }
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Visits `(col index, input index)` pairs for in-bounds taps.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let ol = self.out_len();
        for c in 0..self.in_c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kj) as isize - self.pad as isize;
                            if x < 0 || x >= self.in_w as isize {
                                continue;
                            }
                            let src = (c * self.in_h + y as usize) * self.in_w + x as usize;
                            f(row * ol + oy * self.out_w + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        self.for_each_tap(|ci, xi| dx[xi] += cols[ci]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_and_batched_forms() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[3, 2], &[1., 0., 0., 1., 1., 1.]));
        let c = g.matmul(a, b).unwrap();
        close(g.value(c).data(), &[4., 5., 10., 11.]);

        let a3 = g.reshape(a, &[1, 2, 3]).unwrap();
        let aa = g.batch_matmul(a3, a3, true).unwrap();
        close(g.value(aa).data(), &[14., 32., 32., 77.]);
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn elementwise_forward_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[-2., -0.5, 0., 3.]));
        let r = g.relu(x);
        close(g.value(r).data(), &[0., 0., 0., 3.]);
        let l = g.leaky_relu(x, 0.1);
        close(g.value(l).data(), &[-0.2, -0.05, 0., 3.]);
        let s = g.square(x);
        close(g.value(s).data(), &[4., 0.25, 0., 9.]);
        let y = g.add_scalar(x, 1.0);
        let y = g.scale(y, 2.0);
        close(g.value(y).data(), &[-2., 1., 2., 8.]);
        let ge = g.gelu(x);
        assert_eq!(g.value(ge).data()[2], 0.0);
        assert!((g.value(ge).data()[3] - 2.99636).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_and_log_softmax_agree() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[0., 0., 0., 1000., 1001., 1002.]));
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s).data().to_vec();
        close(&v[..3], &[1. / 3.; 3]);
        assert!((v[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ls = g.log_softmax(x, 1).unwrap();
        let lv: Vec<f64> = g.value(ls).data().iter().map(|x| x.exp()).collect();
        close(&lv, &v);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[1., 2., 3., 4., -1., -1., 1., 1.]));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for row in g.value(y).data().chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layout_ops() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let p = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(p), &[2, 3]);
        close(g.value(p).data(), &[1., 3., 5., 2., 4., 6.]);
        let n = g.narrow(x, 1, 2).unwrap();
        close(g.value(n).data(), &[3., 4., 5., 6.]);
        let gr = g.gather_rows(x, &[2, 0, 2]).unwrap();
        close(g.value(gr).data(), &[5., 6., 1., 2., 5., 6.]);
        let c = g.concat_rows(&[n, x]).unwrap();
        assert_eq!(g.shape(c), &[5, 2]);
        assert!(g.gather_rows(x, &[3]).is_err());
        assert!(g.narrow(x, 2, 2).is_err());
        assert!(g.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn conv_single_tap() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
        let w = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        close(g.value(y).data(), &[4.5, 6.5, 10.5, 12.5]);
        let padded = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(padded), &[1, 2, 2]);
        close(g.value(padded).data(), &[0., 2., 6., 12.]);
    }

    #[test]
    fn gradients_accumulate_until_cleared() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., -2.]));
        let sq = g.square(x);
        let l = g.sum(sq);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        close(g.grad(x).unwrap().data(), &[4., -8.]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn stop_gradient_and_constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let c = g.constant(t(&[2], &[3., 4.]));
        let s = g.stop_gradient(x);
        let y = g.mul(s, c).unwrap();
        let z = g.mul(x, c).unwrap();
        let both = g.add(y, z).unwrap();
        let l = g.sum(both);
        g.backward(l).unwrap();
        close(g.grad(x).unwrap().data(), &[3., 4.]);
        assert!(g.grad(c).is_none());
    }
}
