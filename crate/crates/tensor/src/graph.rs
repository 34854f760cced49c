use crate::kernels::{self, ConvGeom};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a node of one [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Relu,
    Sigmoid,
    Tanh,
    Square,
    Sin,
    Cos,
}

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    offset: usize,
    weight: T,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: NodeId, b: NodeId },
    Unary { kind: UnaryKind, a: NodeId },
    Scale { a: NodeId, factor: T },
    Offset { a: NodeId },
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom, batch: usize, out_c: usize },
    Upsample { x: NodeId, factor: usize },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Reshape { a: NodeId },
    Slice { a: NodeId, axis: usize, start: usize },
    Gather { a: NodeId, axis: usize, indices: Vec<usize> },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    Softmax { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, scale: T },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    L1Loss { a: NodeId, b: NodeId },
    MseLoss { a: NodeId, b: NodeId },
    Bilinear { fm: NodeId, taps: Vec<[Tap<T>; 4]>, channels: usize, plane: usize },
    AxisAngle { a: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of recorded operations. Nodes are appended in evaluation order,
/// which is a topological order of the computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out`, the linear index of the element of `input`
/// it reads under broadcasting.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        let oi = i + rank - input.len();
        strides[oi] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut lin = 0usize;
    for _ in 0..n {
        map.push(lin);
        for d in (0..rank).rev() {
            idx[d] += 1;
            lin += strides[d];
            if idx[d] < out[d] {
                break;
            }
            lin -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / d, d)
}

/// Rodrigues terms `a = sin t / t`, `b = (1 - cos t) / t²` and their
/// derivatives divided by `t`, with Taylor expansions near zero.
fn rodrigues_coeffs(t2: f64) -> (f64, f64, f64, f64) {
    if t2 < 1e-8 {
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let da = -1.0 / 3.0 + t2 / 30.0;
        let db = -1.0 / 12.0 + t2 / 180.0;
        (a, b, da, db)
    } else {
        let t = t2.sqrt();
        let (s, c) = t.sin_cos();
        let a = s / t;
        let b = (1.0 - c) / t2;
        let da = (t * c - s) / (t2 * t);
        let db = (t * s - 2.0 * (1.0 - c)) / (t2 * t2);
        (a, b, da, db)
    }
}

fn skew(w: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `id`, if any
    /// gradient reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId, name: &'static str) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| mismatch(name, &sa, &sb))?;
        let da = self.data(a);
        let db = self.data(b);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = (sa != out_shape).then(|| broadcast_map(&out_shape, &sa));
            let mb = (sb != out_shape).then(|| broadcast_map(&out_shape, &sb));
            let n: usize = out_shape.iter().product();
            (0..n)
                .map(|i| {
                    let x = da[ma.as_ref().map_or(i, |m| m[i])];
                    let y = db[mb.as_ref().map_or(i, |m| m[i])];
                    f(x, y)
                })
                .collect()
        };
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    fn unary(&mut self, kind: UnaryKind, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let out: Vec<T> = src
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Abs => x.abs(),
                UnaryKind::Relu => x.max(T::zero()),
                UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Square => x * x,
                UnaryKind::Sin => x.sin(),
                UnaryKind::Cos => x.cos(),
            })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Unary { kind, a }, &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Log, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Square, a)
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sin, a)
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Cos, a)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let f = T::from_f64(factor);
        let src = &self.nodes[a.0].value;
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x * f).collect())
            .expect("same shape");
        self.push(value, Op::Scale { a, factor: f }, &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        let o = T::from_f64(offset);
        let src = &self.nodes[a.0].value;
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x + o).collect())
            .expect("same shape");
        self.push(value, Op::Offset { a }, &[a])
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        let da = self.data(a);
        let db = self.data(b);
        match (ta, tb) {
            (false, false) => kernels::gemm_nn(m, k, n, da, db, &mut out),
            (false, true) => kernels::gemm_nt(m, k, n, da, db, &mut out),
            (true, false) => kernels::gemm_tn(m, k, n, da, db, &mut out),
            (true, true) => {
                let at = kernels::transpose(k, m, da);
                kernels::gemm_nt(m, k, n, &at, db, &mut out);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// 2-D convolution of `x: N×C×H×W` with `w: O×C×k×k` and optional bias `O`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(invalid("conv2d", &sx, "stride must be positive"));
        }
        let (batch, channels, height, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_c, kernel) = (sw[0], sw[2]);
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(invalid("conv2d", &sx, format!("kernel {kernel} larger than padded input")));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return Err(mismatch("conv2d bias", self.shape(b), &[out_c]));
            }
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        };
        let plane = geom.col_cols();
        let mut out = vec![T::zero(); batch * out_c * plane];
        let mut col = vec![T::zero(); geom.col_rows() * plane];
        let dx = self.data(x);
        let dw = self.data(w);
        let in_len = channels * height * width;
        for n in 0..batch {
            kernels::im2col(&geom, &dx[n * in_len..(n + 1) * in_len], &mut col);
            let dst = &mut out[n * out_c * plane..(n + 1) * out_c * plane];
            kernels::gemm_nn(out_c, geom.col_rows(), plane, dw, &col, dst);
            if let Some(b) = b {
                let db = self.data(b);
                for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += db[o]);
                }
            }
        }
        let value = Tensor::new(vec![batch, out_c, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, batch, out_c }, &inputs))
    }

    /// Nearest-neighbour upsampling of the two trailing axes of `N×C×H×W`.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(invalid("upsample", &s, "expected N×C×H×W and factor ≥ 1"));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.data(x);
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in src.chunks(h * w) {
            for y in 0..oh {
                let row = &plane[(y / factor) * w..][..w];
                for xx in 0..ow {
                    out.push(row[xx / factor]);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    // ---- shape manipulation ------------------------------------------

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", &base, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let len = self.shape(id)[axis] * inner;
                out.extend_from_slice(&self.data(id)[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid("slice", &s, format!("range {start}..{} on axis {axis}", start + len)));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { a, axis, start }, &[a]))
    }

    /// Selects (possibly repeated) entries along `axis`.
    pub fn gather(&mut self, a: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || indices.is_empty() {
            return Err(invalid("gather", &s, format!("axis {axis} with {} indices", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[axis]) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: s[axis],
            });
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&src[(o * dim + i) * inner..(o * dim + i + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[axis] = indices.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                a,
                axis,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(v), Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let d = self.data(a);
        let v = d.iter().copied().sum::<T>() / T::from_usize(d.len());
        self.push(Tensor::scalar(v), Op::MeanAll { a }, &[a])
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("sum_axis", &s, format!("axis {axis} out of range")));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..][..inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumAxis { a, axis }, &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let (_, d) = last_dim(src.shape());
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax { a }, &[a])
    }

    /// Cross-entropy of `logits: N×C` against integer class targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], reduction: Reduction) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(mismatch("cross_entropy", &s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                len: c,
            });
        }
        let src = self.data(logits);
        let mut total = T::zero();
        for (row, &t) in src.chunks(c).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            total += lse - row[t];
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / T::from_usize(targets.len()),
        };
        let value = Tensor::scalar(total * scale);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
            },
            &[logits],
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let (rows, d) = last_dim(&s);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &s, self.shape(gamma)));
        }
        let eps = T::from_f64(eps);
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let inv_d = T::one() / T::from_usize(d);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean absolute difference of two same-shape tensors.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("l1_loss", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let v = da.iter().zip(db).map(|(&x, &y)| (x - y).abs()).sum::<T>() / T::from_usize(da.len());
        Ok(self.push(Tensor::scalar(v), Op::L1Loss { a, b }, &[a, b]))
    }

    /// Mean squared difference of two same-shape tensors.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mse_loss", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let v = da.iter().zip(db).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / T::from_usize(da.len());
        Ok(self.push(Tensor::scalar(v), Op::MseLoss { a, b }, &[a, b]))
    }

    /// Bilinearly samples `fm: N×C×H×W` at normalized `(batch, [u, v])`
    /// sites, returning `K×C`. Pixel `(x, y)` has its center at
    /// `((x + 0.5) / W, (y + 0.5) / H)`; coordinates beyond the outermost
    /// centers are clamped. Gradients reach `fm` only.
    pub fn bilinear_sample(&mut self, fm: NodeId, sites: &[(usize, [f64; 2])]) -> Result<NodeId> {
        let s = self.shape(fm).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(invalid("bilinear_sample", &s, "expected N×C×H×W with H, W ≥ 2"));
        }
        if sites.is_empty() {
            return Err(invalid("bilinear_sample", &s, "no sample sites"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let mut taps = Vec::with_capacity(sites.len());
        for &(bi, [u, v]) in sites {
            if bi >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "bilinear_sample",
                    index: bi,
                    len: n,
                });
            }
            let px = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let py = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let x0 = (px.floor() as usize).min(w - 2);
            let y0 = (py.floor() as usize).min(h - 2);
            let fx = px - x0 as f64;
            let fy = py - y0 as f64;
            let base = bi * c * plane;
            let at = |y: usize, x: usize, wt: f64| Tap {
                offset: base + y * w + x,
                weight: T::from_f64(wt),
            };
            taps.push([
                at(y0, x0, (1.0 - fx) * (1.0 - fy)),
                at(y0, x0 + 1, fx * (1.0 - fy)),
                at(y0 + 1, x0, (1.0 - fx) * fy),
                at(y0 + 1, x0 + 1, fx * fy),
            ]);
        }
        let src = self.data(fm);
        let mut out = Vec::with_capacity(sites.len() * c);
        for t in &taps {
            for ch in 0..c {
                let off = ch * plane;
                out.push(t.iter().map(|tap| tap.weight * src[tap.offset + off]).sum());
            }
        }
        let value = Tensor::new(vec![sites.len(), c], out)?;
        Ok(self.push(
            value,
            Op::Bilinear {
                fm,
                taps,
                channels: c,
                plane,
            },
            &[fm],
        ))
    }

    /// Rodrigues map from axis-angle rows `N×3` to rotation matrices `N×3×3`.
    pub fn axis_angle_to_matrix(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] != 3 {
            return Err(invalid("axis_angle_to_matrix", &s, "expected N×3"));
        }
        let mut out = Vec::with_capacity(s[0] * 9);
        for row in self.data(a).chunks(3) {
            let w = [row[0].as_f64(), row[1].as_f64(), row[2].as_f64()];
            let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
            let (ca, cb, _, _) = rodrigues_coeffs(t2);
            let k = skew(w);
            let k2 = mat3_mul(&k, &k);
            for i in 0..3 {
                for j in 0..3 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    out.push(T::from_f64(id + ca * k[i][j] + cb * k2[i][j]));
                }
            }
        }
        let value = Tensor::new(vec![s[0], 3, 3], out)?;
        Ok(self.push(value, Op::AxisAngle { a }, &[a]))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaves that require gradients
    /// receive dLoss/dLeaf; previously stored gradients are replaced.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_op(i, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |id: NodeId| nodes[id.0].value.data();
        let needs = |id: NodeId| nodes[id.0].requires_grad;
        fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: NodeId) -> &'a mut Vec<T> {
            grads[id.0].get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.numel()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = node.value.shape();
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let ma = (sa != out_shape).then(|| broadcast_map(out_shape, sa));
                let mb = (sb != out_shape).then(|| broadcast_map(out_shape, sb));
                let ia = |k: usize| ma.as_ref().map_or(k, |m| m[k]);
                let ib = |k: usize| mb.as_ref().map_or(k, |m| m[k]);
                let (da, db) = (val(a), val(b));
                if needs(a) {
                    let ga = acc(grads, nodes, a);
                    for (k, &g) in gout.iter().enumerate() {
                        ga[ia(k)] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g,
                            BinaryKind::Mul => g * db[ib(k)],
                            BinaryKind::Div => g / db[ib(k)],
                        };
                    }
                }
                if needs(b) {
                    let gb = acc(grads, nodes, b);
                    for (k, &g) in gout.iter().enumerate() {
                        gb[ib(k)] += match kind {
                            BinaryKind::Add => g,
                            BinaryKind::Sub => -g,
                            BinaryKind::Mul => g * da[ia(k)],
                            BinaryKind::Div => {
                                let y = db[ib(k)];
                                -g * da[ia(k)] / (y * y)
                            }
                        };
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = val(*a);
                let y = node.value.data();
                let ga = acc(grads, nodes, *a);
                for k in 0..gout.len() {
                    let g = gout[k];
                    ga[k] += match kind {
                        UnaryKind::Neg => -g,
                        UnaryKind::Exp => g * y[k],
                        UnaryKind::Log => g / x[k],
                        UnaryKind::Sqrt => g / (y[k] + y[k]),
                        UnaryKind::Abs => {
                            if x[k] > T::zero() {
                                g
                            } else if x[k] < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Relu => {
                            if x[k] > T::zero() {
                                g
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Sigmoid => g * y[k] * (T::one() - y[k]),
                        UnaryKind::Tanh => g * (T::one() - y[k] * y[k]),
                        UnaryKind::Square => g * (x[k] + x[k]),
                        UnaryKind::Sin => g * x[k].cos(),
                        UnaryKind::Cos => -g * x[k].sin(),
                    };
                }
            }
            Op::Scale { a, factor } => {
                let ga = acc(grads, nodes, *a);
                for (d, &g) in ga.iter_mut().zip(gout) {
                    *d += g * *factor;
                }
            }
            Op::Offset { a } | Op::Reshape { a } => {
                let ga = acc(grads, nodes, *a);
                for (d, &g) in ga.iter_mut().zip(gout) {
                    *d += g;
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                if needs(a) {
                    // d op(a) = g · op(b)ᵀ
                    let mut d = vec![T::zero(); m * k];
                    if *tb {
                        kernels::gemm_nn(m, n, k, gout, val(b), &mut d);
                    } else {
                        kernels::gemm_nt(m, n, k, gout, val(b), &mut d);
                    }
                    let d = if *ta { kernels::transpose(m, k, &d) } else { d };
                    let ga = acc(grads, nodes, a);
                    ga.iter_mut().zip(&d).for_each(|(x, &y)| *x += y);
                }
                if needs(b) {
                    // d op(b) = op(a)ᵀ · g
                    let mut d = vec![T::zero(); k * n];
                    if *ta {
                        kernels::gemm_nn(k, m, n, val(a), gout, &mut d);
                    } else {
                        kernels::gemm_tn(k, m, n, val(a), gout, &mut d);
                    }
                    let d = if *tb { kernels::transpose(k, n, &d) } else { d };
                    let gb = acc(grads, nodes, b);
                    gb.iter_mut().zip(&d).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_c,
            } => {
                let plane = geom.col_cols();
                let rows = geom.col_rows();
                let in_len = geom.channels * geom.height * geom.width;
                let dx = val(*x);
                let dw = val(*w);
                let mut col = vec![T::zero(); rows * plane];
                let mut gw = needs(*w).then(|| vec![T::zero(); out_c * rows]);
                let mut gx = needs(*x).then(|| vec![T::zero(); batch * in_len]);
                for n in 0..*batch {
                    let g = &gout[n * out_c * plane..(n + 1) * out_c * plane];
                    if let Some(gw) = gw.as_mut() {
                        kernels::im2col(geom, &dx[n * in_len..(n + 1) * in_len], &mut col);
                        kernels::gemm_nt(*out_c, plane, rows, g, &col, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        col.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(rows, *out_c, plane, dw, g, &mut col);
                        kernels::col2im(geom, &col, &mut gx[n * in_len..(n + 1) * in_len]);
                    }
                }
                if let Some(gw) = gw {
                    acc(grads, nodes, *w).iter_mut().zip(&gw).for_each(|(d, &v)| *d += v);
                }
                if let Some(gx) = gx {
                    acc(grads, nodes, *x).iter_mut().zip(&gx).for_each(|(d, &v)| *d += v);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let gb = acc(grads, nodes, b);
                    for n in 0..*batch {
                        for o in 0..*out_c {
                            let s: T = gout[(n * out_c + o) * plane..][..plane].iter().copied().sum();
                            gb[o] += s;
                        }
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let s = nodes[x.0].value.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                let gx = acc(grads, nodes, *x);
                for (p, gplane) in gout.chunks(oh * ow).enumerate() {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / factor) * w + xx / factor] += gplane[y * ow + xx];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let len = nodes[id.0].value.shape()[*axis] * inner;
                    if needs(id) {
                        let g = acc(grads, nodes, id);
                        for o in 0..outer {
                            let src = &gout[o * total + offset..][..len];
                            for (d, &v) in g[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let s = nodes[a.0].value.shape();
                let (outer, dim, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let ga = acc(grads, nodes, *a);
                for o in 0..outer {
                    let dst = &mut ga[(o * dim + start) * inner..][..len * inner];
                    for (d, &v) in dst.iter_mut().zip(&gout[o * len * inner..(o + 1) * len * inner]) {
                        *d += v;
                    }
                }
            }
            Op::Gather { a, axis, indices } => {
                let s = nodes[a.0].value.shape();
                let (outer, dim, inner) = split_axis(s, *axis);
                let ga = acc(grads, nodes, *a);
                let mut k = 0;
                for o in 0..outer {
                    for &i in indices {
                        let dst = &mut ga[(o * dim + i) * inner..][..inner];
                        for (d, &v) in dst.iter_mut().zip(&gout[k * inner..(k + 1) * inner]) {
                            *d += v;
                        }
                        k += 1;
                    }
                }
            }
            Op::SumAll { a } => {
                let g = gout[0];
                acc(grads, nodes, *a).iter_mut().for_each(|d| *d += g);
            }
            Op::MeanAll { a } => {
                let n = nodes[a.0].value.numel();
                let g = gout[0] / T::from_usize(n);
                acc(grads, nodes, *a).iter_mut().for_each(|d| *d += g);
            }
            Op::SumAxis { a, axis } => {
                let s = nodes[a.0].value.shape();
                let (outer, dim, inner) = split_axis(s, *axis);
                let ga = acc(grads, nodes, *a);
                for o in 0..outer {
                    for d in 0..dim {
                        let dst = &mut ga[(o * dim + d) * inner..][..inner];
                        for (x, &v) in dst.iter_mut().zip(&gout[o * inner..(o + 1) * inner]) {
                            *x += v;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let (_, d) = last_dim(node.value.shape());
                let ga = acc(grads, nodes, *a);
                for ((yr, gr), dst) in y.chunks(d).zip(gout.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for j in 0..d {
                        dst[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, scale } => {
                let z = val(*logits);
                let c = nodes[logits.0].value.shape()[1];
                let g = gout[0] * *scale;
                let gl = acc(grads, nodes, *logits);
                for ((row, dst), &t) in z.chunks(c).zip(gl.chunks_mut(c)).zip(targets) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let zsum: T = row.iter().map(|&v| (v - m).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - m).exp() / zsum;
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dst[j] += g * (p - onehot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.numel();
                let gm = val(*gamma);
                if needs(*gamma) {
                    let gg = acc(grads, nodes, *gamma);
                    for (xr, gr) in xhat.chunks(d).zip(gout.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = acc(grads, nodes, *beta);
                    for gr in gout.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if needs(*x) {
                    let inv_d = T::one() / T::from_usize(d);
                    let gx = acc(grads, nodes, *x);
                    for (r, ((xr, gr), dst)) in xhat.chunks(d).zip(gout.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..d {
                            let gh = gr[j] * gm[j];
                            mean_g += gh;
                            mean_gx += gh * xr[j];
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        for j in 0..d {
                            let gh = gr[j] * gm[j];
                            dst[j] += rstd[r] * (gh - mean_g - xr[j] * mean_gx);
                        }
                    }
                }
            }
            Op::L1Loss { a, b } => {
                let (a, b) = (*a, *b);
                let (da, db) = (val(a), val(b));
                let g = gout[0] / T::from_usize(da.len());
                let sign = |k: usize| {
                    let diff = da[k] - db[k];
                    if diff > T::zero() {
                        g
                    } else if diff < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                };
                if needs(a) {
                    let ga = acc(grads, nodes, a);
                    for (k, d) in ga.iter_mut().enumerate() {
                        *d += sign(k);
                    }
                }
                if needs(b) {
                    let gb = acc(grads, nodes, b);
                    for (k, d) in gb.iter_mut().enumerate() {
                        *d -= sign(k);
                    }
                }
            }
            Op::MseLoss { a, b } => {
                let (a, b) = (*a, *b);
                let (da, db) = (val(a), val(b));
                let g = gout[0] * T::from_f64(2.0) / T::from_usize(da.len());
                if needs(a) {
                    let ga = acc(grads, nodes, a);
                    for (k, d) in ga.iter_mut().enumerate() {
                        *d += g * (da[k] - db[k]);
                    }
                }
                if needs(b) {
                    let gb = acc(grads, nodes, b);
                    for (k, d) in gb.iter_mut().enumerate() {
                        *d -= g * (da[k] - db[k]);
                    }
                }
            }
            Op::Bilinear {
                fm,
                taps,
                channels,
                plane,
            } => {
                let gf = acc(grads, nodes, *fm);
                for (t, grow) in taps.iter().zip(gout.chunks(*channels)) {
                    for (ch, &g) in grow.iter().enumerate() {
                        for tap in t {
                            gf[tap.offset + ch * plane] += tap.weight * g;
                        }
                    }
                }
            }
            Op::AxisAngle { a } => {
                let src = val(*a);
                let ga = acc(grads, nodes, *a);
                for (r, row) in src.chunks(3).enumerate() {
                    let w = [row[0].as_f64(), row[1].as_f64(), row[2].as_f64()];
                    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
                    let (ca, cb, da, db) = rodrigues_coeffs(t2);
                    let k = skew(w);
                    let k2 = mat3_mul(&k, &k);
                    let g = &gout[r * 9..(r + 1) * 9];
                    for i in 0..3 {
                        let mut e = [0.0; 3];
                        e[i] = 1.0;
                        let ei = skew(e);
                        let eik = mat3_mul(&ei, &k);
                        let kei = mat3_mul(&k, &ei);
                        let mut total = 0.0;
                        for p in 0..3 {
                            for q in 0..3 {
                                let dr = da * w[i] * k[p][q]
                                    + ca * ei[p][q]
                                    + db * w[i] * k2[p][q]
                                    + cb * (eik[p][q] + kei[p][q]);
                                total += g[p * 3 + q].as_f64() * dr;
                            }
                        }
                        ga[r * 3 + i] += T::from_f64(total);
                    }
                }
            }
        }
    }
}
