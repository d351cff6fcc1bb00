//! Wengert-tape reverse-mode differentiation.
//!
//! Forward calls append nodes; `backward` replays the tape in reverse and
//! accumulates gradients in fixed order. Node values are kept alive for the
//! lifetime of the tape so backward never recomputes a forward value (im2col
//! column buffers are the one thing rebuilt on demand).

use super::kernels;
use super::{same_shape, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Exp { a: NodeId },
    Sqrt { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Abs { a: NodeId },
    Sigmoid { a: NodeId },
    Silu { a: NodeId },
    Gelu { a: NodeId },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose2d { a: NodeId },
    SoftmaxLastDim { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    AddBiasLastDim { a: NodeId, bias: NodeId },
    AddBiasChannel { a: NodeId, bias: NodeId },
    UpsampleNearest2 { a: NodeId },
    AvgPool2 { a: NodeId },
    GlobalAvgPool { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    Reshape { a: NodeId },
    SliceLastDim { a: NodeId, start: usize, len: usize },
    ConcatLastDim { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceChannels { a: NodeId, start: usize, len: usize },
    ConcatChannels { parts: Vec<NodeId> },
    Patchify { a: NodeId, grid: usize },
    Unpatchify { a: NodeId, channels: usize, grid: usize, patch: usize },
    EmbeddingRows { table: NodeId, indices: Vec<usize> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, zero-filled when the node never received one.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<S> {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Recording tape. One tape per forward/backward episode; create a fresh one
/// per training step or per inference call.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// Tape that never tracks gradients; forward values only.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        let rg = requires_grad && self.grad_enabled;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: rg });
        id
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    /// Re-insert a node's current value as a gradient-isolated constant.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(op_name(&op).to_string()));
        }
        let rg = requires_grad && self.grad_enabled;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad: rg });
        Ok(id)
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add { a, b }, self.rg2(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub { a, b }, self.rg2(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul { a, b }, self.rg2(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| -x);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Neg { a }, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cs = S::from_f64(c);
        let v = self.value(a).map(|x| x * cs);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cs = S::from_f64(c);
        let v = self.value(a).map(|x| x + cs);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::AddScalar { a }, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Exp { a }, rg)
    }

    /// Elementwise clamp into `[lo, hi]`; gradients pass only where the
    /// input is strictly inside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(TensorError::Parameter(format!(
                "clamp: lo {lo} must be below hi {hi}"
            )));
        }
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let v = self.value(a).map(|x| x.maximum(l).minimum(h));
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Clamp { a, lo, hi }, rg)
    }

    /// Elementwise square root; inputs must be strictly positive for a
    /// finite gradient (compose with `add_scalar` for an epsilon floor).
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.sqrt());
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Sqrt { a }, rg)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.abs());
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Abs { a }, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid_stable);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Sigmoid { a }, rg)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * sigmoid_stable(x));
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Silu { a }, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu_tanh);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Gelu { a }, rg)
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension(format!(
                "matmul: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::from_vec(&[m, n], c)?;
        self.push(v, Op::Matmul { a, b, m, k, n }, self.rg2(a, b))
    }

    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::Dimension(format!("transpose2d: {sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let v = Tensor::from_vec(&[c, r], kernels::transpose(self.value(a).data(), r, c))?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Transpose2d { a }, rg)
    }

    // ── normalization / attention ────────────────────────────────────

    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.is_empty() || *sa.last().unwrap() < 1 {
            return Err(TensorError::Dimension(format!("softmax_lastdim: {sa:?}")));
        }
        let v = kernels::softmax_lastdim(self.value(a));
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SoftmaxLastDim { a }, rg)
    }

    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let cols = *self.shape(a).last().ok_or_else(|| {
            TensorError::Dimension("layer_norm on 0-d tensor".into())
        })?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(TensorError::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} vs last extent {}",
                self.shape(gamma),
                self.shape(beta),
                cols
            )));
        }
        let v = kernels::layer_norm(
            self.value(a),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rg = self.nodes[a.0].requires_grad || self.rg2(gamma, beta);
        self.push(v, Op::LayerNorm { a, gamma, beta }, rg)
    }

    // ── convolution ──────────────────────────────────────────────────

    /// Direct cross-correlation of `[cin, h, w]` with `[cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(TensorError::Dimension(format!(
                "conv2d: input {sx:?} kernel {sw:?}"
            )));
        }
        let (kh, kw_) = (sw[2], sw[3]);
        if kh % 2 == 0 || kw_ % 2 == 0 {
            return Err(TensorError::Dimension(format!(
                "conv2d: kernel extents must be odd, got {kh}x{kw_}"
            )));
        }
        let ho = kernels::conv_out_extent(sx[1], kh, stride, pad).ok_or_else(|| {
            TensorError::Dimension(format!(
                "conv2d: non-integral output height for input {} kernel {kh} stride {stride} pad {pad}",
                sx[1]
            ))
        })?;
        let wo = kernels::conv_out_extent(sx[2], kw_, stride, pad).ok_or_else(|| {
            TensorError::Dimension(format!(
                "conv2d: non-integral output width for input {} kernel {kw_} stride {stride} pad {pad}",
                sx[2]
            ))
        })?;
        let (cin, cout) = (sx[0], sw[0]);
        let cols = kernels::im2col(
            self.value(x).data(),
            cin,
            sx[1],
            sx[2],
            kh,
            kw_,
            stride,
            pad,
            ho,
            wo,
        );
        let y = kernels::matmul(self.value(w).data(), &cols, cout, cin * kh * kw_, ho * wo);
        let v = Tensor::from_vec(&[cout, ho, wo], y)?;
        self.push(v, Op::Conv2d { x, w, stride, pad }, self.rg2(x, w))
    }

    // ── broadcasts ───────────────────────────────────────────────────

    /// `x[..., d] + bias[d]` over the last dimension.
    pub fn add_bias_lastdim(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = *self.shape(a).last().unwrap();
        if self.shape(bias) != [cols] {
            return Err(TensorError::Dimension(format!(
                "add_bias_lastdim: bias {:?} vs last extent {}",
                self.shape(bias),
                cols
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += b[i % cols];
        }
        self.push(v, Op::AddBiasLastDim { a, bias }, self.rg2(a, bias))
    }

    /// `x[c, h, w] + bias[c]` per channel.
    pub fn add_bias_channel(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || self.shape(bias) != [sa[0]] {
            return Err(TensorError::Dimension(format!(
                "add_bias_channel: input {:?} bias {:?}",
                sa,
                self.shape(bias)
            )));
        }
        let hw = sa[1] * sa[2];
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += b[i / hw];
        }
        self.push(v, Op::AddBiasChannel { a, bias }, self.rg2(a, bias))
    }

    // ── spatial ──────────────────────────────────────────────────────

    pub fn upsample_nearest2(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(TensorError::Dimension(format!("upsample_nearest2: {sa:?}")));
        }
        let v = Tensor::from_vec(
            &[sa[0], 2 * sa[1], 2 * sa[2]],
            kernels::upsample_nearest2(self.value(a).data(), sa[0], sa[1], sa[2]),
        )?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::UpsampleNearest2 { a }, rg)
    }

    /// 2x2 mean pooling of `[c, h, w]`; extents must be even.
    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || !sa[1].is_multiple_of(2) || !sa[2].is_multiple_of(2) {
            return Err(TensorError::Dimension(format!("avg_pool2: {sa:?}")));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let (h2, w2) = (h / 2, w / 2);
        let quarter = S::from_f64(0.25);
        let data = self.value(a).data();
        let mut out = vec![S::ZERO; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let r0 = (ch * h + 2 * y) * w;
                let r1 = r0 + w;
                let dst = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
                for (x, d) in dst.iter_mut().enumerate() {
                    *d = (data[r0 + 2 * x] + data[r0 + 2 * x + 1]
                        + data[r1 + 2 * x] + data[r1 + 2 * x + 1])
                        * quarter;
                }
            }
        }
        let v = Tensor::from_vec(&[c, h2, w2], out)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::AvgPool2 { a }, rg)
    }

    /// `[c, h, w] -> [c]` spatial mean.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(TensorError::Dimension(format!("global_avg_pool: {sa:?}")));
        }
        let hw = sa[1] * sa[2];
        let inv = S::from_f64(1.0 / hw as f64);
        let data = self.value(a).data();
        let mut out = vec![S::ZERO; sa[0]];
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = S::ZERO;
            for &x in &data[c * hw..(c + 1) * hw] {
                s += x;
            }
            *o = s * inv;
        }
        let v = Tensor::from_vec(&[sa[0]], out)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::GlobalAvgPool { a }, rg)
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = S::ZERO;
        for &x in self.value(a).data() {
            s += x;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let inv = S::from_f64(1.0 / n as f64);
        let mut s = S::ZERO;
        for &x in self.value(a).data() {
            s += x;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s * inv), Op::MeanAll { a }, rg)
    }

    // ── shape ────────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Reshape { a }, rg)
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn slice_lastdim(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] {
            return Err(TensorError::Dimension(format!(
                "slice_lastdim: {sa:?} cols [{start}, {})",
                start + len
            )));
        }
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(sa[0] * len);
        for r in 0..sa[0] {
            out.extend_from_slice(&data[r * sa[1] + start..r * sa[1] + start + len]);
        }
        let v = Tensor::from_vec(&[sa[0], len], out)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SliceLastDim { a, start, len }, rg)
    }

    /// Concatenate 2-d tensors with equal row counts along columns.
    pub fn concat_lastdim(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Dimension("concat_lastdim: no parts".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != rows {
                return Err(TensorError::Dimension(format!(
                    "concat_lastdim: part {sp:?} vs {rows} rows"
                )));
            }
            total += sp[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                let data = self.value(p).data();
                out.extend_from_slice(&data[r * c..(r + 1) * c]);
            }
        }
        let v = Tensor::from_vec(&[rows, total], out)?;
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.push(v, Op::ConcatLastDim { parts: parts.to_vec() }, rg)
    }

    /// Stack 2-d tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Dimension("concat_rows: no parts".into()));
        }
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[1] != cols {
                return Err(TensorError::Dimension(format!(
                    "concat_rows: part {sp:?} vs {cols} columns"
                )));
            }
            rows += sp[0];
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(&[rows, cols], out)?;
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.push(v, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    /// Channels `[start, start+len)` of a `[c, h, w]` tensor.
    pub fn slice_channels(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || start + len > sa[0] {
            return Err(TensorError::Dimension(format!(
                "slice_channels: {sa:?} channels [{start}, {})",
                start + len
            )));
        }
        let hw = sa[1] * sa[2];
        let data = &self.value(a).data()[start * hw..(start + len) * hw];
        let v = Tensor::from_vec(&[len, sa[1], sa[2]], data.to_vec())?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SliceChannels { a, start, len }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Dimension("concat_channels: no parts".into()));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 3 {
            return Err(TensorError::Dimension(format!("concat_channels: {s0:?}")));
        }
        let mut total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 3 || sp[1] != s0[1] || sp[2] != s0[2] {
                return Err(TensorError::Dimension(format!(
                    "concat_channels: part {sp:?} vs spatial {:?}",
                    &s0[1..]
                )));
            }
            total += sp[0];
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(&[total, s0[1], s0[2]], out)?;
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.push(v, Op::ConcatChannels { parts: parts.to_vec() }, rg)
    }

    /// `[c, h, w]` to `[g*g, c*p*p]` tokens; h and w must divide by `grid`.
    pub fn patchify(&mut self, a: NodeId, grid: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || !sa[1].is_multiple_of(grid) || !sa[2].is_multiple_of(grid) || sa[1] / grid != sa[2] / grid {
            return Err(TensorError::Dimension(format!(
                "patchify: {sa:?} not divisible into a {grid}x{grid} grid of square patches"
            )));
        }
        let p = sa[1] / grid;
        let v = Tensor::from_vec(
            &[grid * grid, sa[0] * p * p],
            kernels::patchify(self.value(a).data(), sa[0], sa[1], sa[2], grid),
        )?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Patchify { a, grid }, rg)
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, a: NodeId, channels: usize, grid: usize, patch: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != grid * grid || sa[1] != channels * patch * patch {
            return Err(TensorError::Dimension(format!(
                "unpatchify: tokens {sa:?} vs grid {grid} channels {channels} patch {patch}"
            )));
        }
        let v = Tensor::from_vec(
            &[channels, grid * patch, grid * patch],
            kernels::unpatchify(self.value(a).data(), channels, grid, patch),
        )?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Unpatchify { a, channels, grid, patch }, rg)
    }

    /// Gather rows of `table[n, d]` by index; rows may repeat.
    pub fn embedding_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::Dimension(format!("embedding_rows: table {st:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= st[0]) {
            return Err(TensorError::Parameter(format!(
                "embedding_rows: index {bad} out of range for {} buckets",
                st[0]
            )));
        }
        let d = st[1];
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let v = Tensor::from_vec(&[indices.len(), d], out)?;
        let rg = self.nodes[table.0].requires_grad;
        self.push(v, Op::EmbeddingRows { table, indices: indices.to_vec() }, rg)
    }

    // ── composite losses ─────────────────────────────────────────────

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    pub fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        self.mean_all(ad)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns per-node gradients for every
    /// grad-requiring node reachable from the root.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<S>> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::Dimension(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        if !self.grad_enabled {
            return Err(TensorError::Parameter(
                "backward on an inference tape".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(S::ONE));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.accumulate(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }

        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(TensorError::NonFinite("backward gradient".into()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        node: usize,
        dy: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let add_into = |grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;

        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if needs(*a) {
                    add_into(grads, *a, dy.clone());
                }
                if needs(*b) {
                    add_into(grads, *b, dy.clone());
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    add_into(grads, *a, dy.clone());
                }
                if needs(*b) {
                    add_into(grads, *b, dy.map(|x| -x));
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    add_into(grads, *a, zip(dy, self.value(*b), |d, v| d * v));
                }
                if needs(*b) {
                    add_into(grads, *b, zip(dy, self.value(*a), |d, v| d * v));
                }
            }
            Op::Neg { a } => {
                if needs(*a) {
                    add_into(grads, *a, dy.map(|x| -x));
                }
            }
            Op::Scale { a, c } => {
                if needs(*a) {
                    let cs = S::from_f64(*c);
                    add_into(grads, *a, dy.map(|x| x * cs));
                }
            }
            Op::AddScalar { a } => {
                if needs(*a) {
                    add_into(grads, *a, dy.clone());
                }
            }
            Op::Exp { a } => {
                if needs(*a) {
                    add_into(grads, *a, zip(dy, &self.nodes[node].value, |d, y| d * y));
                }
            }
            Op::Clamp { a, lo, hi } => {
                if needs(*a) {
                    let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
                    add_into(
                        grads,
                        *a,
                        zip(dy, self.value(*a), |d, x| {
                            if x > l && x < h {
                                d
                            } else {
                                S::ZERO
                            }
                        }),
                    );
                }
            }
            Op::Sqrt { a } => {
                if needs(*a) {
                    let half = S::from_f64(0.5);
                    add_into(
                        grads,
                        *a,
                        zip(dy, &self.nodes[node].value, |d, y| d * half / y),
                    );
                }
            }
            Op::Abs { a } => {
                if needs(*a) {
                    add_into(
                        grads,
                        *a,
                        zip(dy, self.value(*a), |d, x| {
                            if x > S::ZERO {
                                d
                            } else if x < S::ZERO {
                                -d
                            } else {
                                S::ZERO
                            }
                        }),
                    );
                }
            }
            Op::Sigmoid { a } => {
                if needs(*a) {
                    add_into(
                        grads,
                        *a,
                        zip(dy, &self.nodes[node].value, |d, y| d * y * (S::ONE - y)),
                    );
                }
            }
            Op::Silu { a } => {
                if needs(*a) {
                    add_into(
                        grads,
                        *a,
                        zip(dy, self.value(*a), |d, x| {
                            let s = sigmoid_stable(x);
                            d * s * (S::ONE + x * (S::ONE - s))
                        }),
                    );
                }
            }
            Op::Gelu { a } => {
                if needs(*a) {
                    add_into(grads, *a, zip(dy, self.value(*a), |d, x| d * gelu_tanh_grad(x)));
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if needs(*a) {
                    let da = kernels::matmul_bt(dy.data(), self.value(*b).data(), *m, *n, *k);
                    add_into(grads, *a, Tensor::from_vec(&[*m, *k], da)?);
                }
                if needs(*b) {
                    let db = kernels::matmul_at(self.value(*a).data(), dy.data(), *m, *k, *n);
                    add_into(grads, *b, Tensor::from_vec(&[*k, *n], db)?);
                }
            }
            Op::Transpose2d { a } => {
                if needs(*a) {
                    let s = dy.shape();
                    let t = kernels::transpose(dy.data(), s[0], s[1]);
                    add_into(grads, *a, Tensor::from_vec(&[s[1], s[0]], t)?);
                }
            }
            Op::SoftmaxLastDim { a } => {
                if needs(*a) {
                    add_into(
                        grads,
                        *a,
                        kernels::softmax_lastdim_backward(&self.nodes[node].value, dy),
                    );
                }
            }
            Op::LayerNorm { a, gamma, beta } => {
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_backward(self.value(*a), self.value(*gamma).data(), dy);
                if needs(*a) {
                    add_into(grads, *a, dx);
                }
                if needs(*gamma) {
                    add_into(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dgamma)?);
                }
                if needs(*beta) {
                    add_into(grads, *beta, Tensor::from_vec(self.shape(*beta), dbeta)?);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (cin, h, wid) = (sx[0], sx[1], sx[2]);
                let (cout, kh, kw_) = (sw[0], sw[2], sw[3]);
                let sy = dy.shape();
                let (ho, wo) = (sy[1], sy[2]);
                let ckk = cin * kh * kw_;
                if needs(*w) {
                    let cols = kernels::im2col(
                        self.value(*x).data(),
                        cin,
                        h,
                        wid,
                        kh,
                        kw_,
                        *stride,
                        *pad,
                        ho,
                        wo,
                    );
                    let dw = kernels::matmul_bt(dy.data(), &cols, cout, ho * wo, ckk);
                    add_into(grads, *w, Tensor::from_vec(&[cout, cin, kh, kw_], dw)?);
                }
                if needs(*x) {
                    let dcols =
                        kernels::matmul_at(self.value(*w).data(), dy.data(), cout, ckk, ho * wo);
                    let dx = kernels::col2im(
                        &dcols, cin, h, wid, kh, kw_, *stride, *pad, ho, wo,
                    );
                    add_into(grads, *x, Tensor::from_vec(&[cin, h, wid], dx)?);
                }
            }
            Op::AddBiasLastDim { a, bias } => {
                if needs(*a) {
                    add_into(grads, *a, dy.clone());
                }
                if needs(*bias) {
                    let cols = *self.shape(*bias).first().unwrap();
                    let mut db = vec![S::ZERO; cols];
                    for (i, &d) in dy.data().iter().enumerate() {
                        db[i % cols] += d;
                    }
                    add_into(grads, *bias, Tensor::from_vec(&[cols], db)?);
                }
            }
            Op::AddBiasChannel { a, bias } => {
                if needs(*a) {
                    add_into(grads, *a, dy.clone());
                }
                if needs(*bias) {
                    let c = self.shape(*bias)[0];
                    let hw = dy.numel() / c;
                    let mut db = vec![S::ZERO; c];
                    for (i, &d) in dy.data().iter().enumerate() {
                        db[i / hw] += d;
                    }
                    add_into(grads, *bias, Tensor::from_vec(&[c], db)?);
                }
            }
            Op::UpsampleNearest2 { a } => {
                if needs(*a) {
                    let sa = self.shape(*a);
                    let dx =
                        kernels::upsample_nearest2_backward(dy.data(), sa[0], sa[1], sa[2]);
                    add_into(grads, *a, Tensor::from_vec(sa, dx)?);
                }
            }
            Op::AvgPool2 { a } => {
                if needs(*a) {
                    let sa = self.shape(*a);
                    let (c, h, w) = (sa[0], sa[1], sa[2]);
                    let (h2, w2) = (h / 2, w / 2);
                    let quarter = S::from_f64(0.25);
                    let mut dx = vec![S::ZERO; c * h * w];
                    for ch in 0..c {
                        for y in 0..h2 {
                            let src = &dy.data()[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
                            let r0 = (ch * h + 2 * y) * w;
                            let r1 = r0 + w;
                            for (x, &g) in src.iter().enumerate() {
                                let gq = g * quarter;
                                dx[r0 + 2 * x] = gq;
                                dx[r0 + 2 * x + 1] = gq;
                                dx[r1 + 2 * x] = gq;
                                dx[r1 + 2 * x + 1] = gq;
                            }
                        }
                    }
                    add_into(grads, *a, Tensor::from_vec(sa, dx)?);
                }
            }
            Op::GlobalAvgPool { a } => {
                if needs(*a) {
                    let sa = self.shape(*a);
                    let hw = sa[1] * sa[2];
                    let inv = S::from_f64(1.0 / hw as f64);
                    let mut dx = vec![S::ZERO; sa[0] * hw];
                    for c in 0..sa[0] {
                        let g = dy.data()[c] * inv;
                        for v in &mut dx[c * hw..(c + 1) * hw] {
                            *v = g;
                        }
                    }
                    add_into(grads, *a, Tensor::from_vec(sa, dx)?);
                }
            }
            Op::SumAll { a } => {
                if needs(*a) {
                    let g = dy.item();
                    add_into(grads, *a, Tensor::full(self.shape(*a), g));
                }
            }
            Op::MeanAll { a } => {
                if needs(*a) {
                    let n = self.value(*a).numel();
                    let g = dy.item() * S::from_f64(1.0 / n as f64);
                    add_into(grads, *a, Tensor::full(self.shape(*a), g));
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    add_into(grads, *a, dy.reshaped(self.shape(*a))?);
                }
            }
            Op::SliceLastDim { a, start, len } => {
                if needs(*a) {
                    let sa = self.shape(*a);
                    let mut dx = vec![S::ZERO; sa[0] * sa[1]];
                    for r in 0..sa[0] {
                        for j in 0..*len {
                            dx[r * sa[1] + start + j] = dy.data()[r * len + j];
                        }
                    }
                    add_into(grads, *a, Tensor::from_vec(sa, dx)?);
                }
            }
            Op::ConcatLastDim { parts } => {
                let rows = dy.shape()[0];
                let total = dy.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if needs(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(
                                &dy.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        add_into(grads, p, Tensor::from_vec(&[rows, c], dp)?);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let cols = dy.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    if needs(p) {
                        let dp = dy.data()[offset * cols..(offset + r) * cols].to_vec();
                        add_into(grads, p, Tensor::from_vec(&[r, cols], dp)?);
                    }
                    offset += r;
                }
            }
            Op::SliceChannels { a, start, len } => {
                if needs(*a) {
                    let sa = self.shape(*a);
                    let hw = sa[1] * sa[2];
                    let mut dx = vec![S::ZERO; sa[0] * hw];
                    dx[start * hw..(start + len) * hw].copy_from_slice(dy.data());
                    add_into(grads, *a, Tensor::from_vec(sa, dx)?);
                }
            }
            Op::ConcatChannels { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let sp = self.shape(p);
                    let n = sp.iter().product::<usize>();
                    if needs(p) {
                        let dp = dy.data()[offset..offset + n].to_vec();
                        add_into(grads, p, Tensor::from_vec(sp, dp)?);
                    }
                    offset += n;
                }
            }
            Op::Patchify { a, grid } => {
                if needs(*a) {
                    let sa = self.shape(*a);
                    let p = sa[1] / grid;
                    let dx = kernels::unpatchify(dy.data(), sa[0], *grid, p);
                    add_into(grads, *a, Tensor::from_vec(sa, dx)?);
                }
            }
            Op::Unpatchify { a, channels, grid, patch } => {
                if needs(*a) {
                    let h = grid * patch;
                    let dt = kernels::patchify(dy.data(), *channels, h, h, *grid);
                    add_into(grads, *a, Tensor::from_vec(self.shape(*a), dt)?);
                }
            }
            Op::EmbeddingRows { table, indices } => {
                if needs(*table) {
                    let st = self.shape(*table);
                    let d = st[1];
                    let mut dt = vec![S::ZERO; st[0] * d];
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[idx * d + j] += dy.data()[row * d + j];
                        }
                    }
                    add_into(grads, *table, Tensor::from_vec(st, dt)?);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Neg { .. } => "neg",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Exp { .. } => "exp",
        Op::Sqrt { .. } => "sqrt",
        Op::Clamp { .. } => "clamp",
        Op::Abs { .. } => "abs",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Silu { .. } => "silu",
        Op::Gelu { .. } => "gelu",
        Op::Matmul { .. } => "matmul",
        Op::Transpose2d { .. } => "transpose2d",
        Op::SoftmaxLastDim { .. } => "softmax_lastdim",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv2d { .. } => "conv2d",
        Op::AddBiasLastDim { .. } => "add_bias_lastdim",
        Op::AddBiasChannel { .. } => "add_bias_channel",
        Op::UpsampleNearest2 { .. } => "upsample_nearest2",
        Op::AvgPool2 { .. } => "avg_pool2",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::Reshape { .. } => "reshape",
        Op::SliceLastDim { .. } => "slice_lastdim",
        Op::ConcatLastDim { .. } => "concat_lastdim",
        Op::ConcatRows { .. } => "concat_rows",
        Op::SliceChannels { .. } => "slice_channels",
        Op::ConcatChannels { .. } => "concat_channels",
        Op::Patchify { .. } => "patchify",
        Op::Unpatchify { .. } => "unpatchify",
        Op::EmbeddingRows { .. } => "embedding_rows",
    }
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("zip shape")
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

// tanh-form approximation; erf is not available in core float math.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_tanh_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[3.0, -1.0, 2.5, 7.0]), false);
        let eye = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2(2, 1, &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::Dimension(_))
        ));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Derived oracle: independent naive triple loop.
        let mut state = 0x1234_5678_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let (m, k, n) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let mut oracle = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                oracle[i * n + j] = s;
            }
        }
        let mut tape = Tape::new();
        let na = tape.constant(Tensor::from_vec(&[m, k], a).unwrap());
        let nb = tape.constant(Tensor::from_vec(&[k, n], b).unwrap());
        let c = tape.matmul(na, nb).unwrap();
        for (got, want) in tape.value(c).data().iter().zip(oracle.iter()) {
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_backward_formulas() {
        // dA = dC * B^T, dB = A^T * dC with dC = 1 (via sum_all root).
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = tape.leaf(t2(3, 2, &[1.0, -1.0, 0.5, 2.0, -2.0, 1.0]), true);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        // dC = ones(2,2); dA[i,t] = sum_j B[t,j]; dB[t,j] = sum_i A[i,t].
        let da = grads.get(a).unwrap();
        assert_eq!(da.data(), &[0.0, 2.5, -1.0, 0.0, 2.5, -1.0]);
        let db = grads.get(b).unwrap();
        assert_eq!(db.data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 4, &[2.0, 2.0, 2.0, 2.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_logits_no_overflow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 2, &[1000.0, 0.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        let v = tape.value(y).data();
        assert!(v[0] > 0.999_999);
        assert!(v[1] < 1e-6);
    }

    #[test]
    fn softmax_matches_direct_formula_and_sums_to_one() {
        let row = [0.3, -1.2, 2.7, 0.05, -0.6];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 5, &row));
        let y = tape.softmax_lastdim(x).unwrap();
        // Direct exp/sum oracle.
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let mut sum = 0.0;
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            let want = row[i].exp() / z;
            assert!((v - want).abs() <= 1e-6);
            sum += v;
        }
        assert!((sum - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(2, 3, &[0.5, -0.5, 1.0, 2.0, 0.0, -1.0]));
        let mask = tape.constant(t2(2, 3, &[0.0, -1e9, 0.0, -1e9, 0.0, -1e9]));
        let logits = tape.add(x, mask).unwrap();
        let y = tape.softmax_lastdim(logits).unwrap();
        let v = tape.value(y).data();
        for r in 0..2 {
            let s: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
        // Masked entries effectively zero.
        assert!(v[1] < 1e-12);
        assert!(v[3] < 1e-12 && v[5] < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 4, &[3.0, 3.0, 3.0, 3.0]));
        let gamma = tape.constant(Tensor::full(&[4], 1.0));
        let beta = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 2, &[-1.0, 1.0]));
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-4);
        assert!((v[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_matches_formula_oracle() {
        let row = [0.7, -2.0, 1.3, 0.4, 0.0, 5.0];
        let gamma_v = [1.1, 0.9, 1.0, 2.0, 0.5, 1.5];
        let beta_v = [0.1, -0.2, 0.0, 0.3, 0.0, -1.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 6, &row));
        let gamma = tape.constant(Tensor::from_vec(&[6], gamma_v.to_vec()).unwrap());
        let beta = tape.constant(Tensor::from_vec(&[6], beta_v.to_vec()).unwrap());
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        let mean: f64 = row.iter().sum::<f64>() / 6.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for (j, &v) in tape.value(y).data().iter().enumerate() {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * gamma_v[j] + beta_v[j];
            assert!((v - want).abs() <= 1e-5, "{v} vs {want}");
        }
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(
            Tensor::from_vec(&[1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap(),
        );
        let w = tape.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_all_ones_on_constant_image() {
        let mut tape = Tape::<f64>::new();
        let c = 2.5;
        let x = tape.constant(Tensor::full(&[1, 5, 5], c));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_direct_summation_oracle() {
        let mut state = 0x9e3779b9_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let (cin, h, w, cout, kh, kw, stride, pad) = (2, 8, 8, 4, 3, 3, 1, 1);
        let x: Vec<f64> = (0..cin * h * w).map(|_| next()).collect();
        let ker: Vec<f64> = (0..cout * cin * kh * kw).map(|_| next()).collect();
        // Direct summation oracle.
        let mut want = vec![0.0f64; cout * h * w];
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..w {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                                let ix = ox as isize * stride as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x[(ci * h + iy as usize) * w + ix as usize]
                                    * ker[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    want[(co * h + oy) * w + ox] = s;
                }
            }
        }
        let mut tape = Tape::new();
        let nx = tape.constant(Tensor::from_vec(&[cin, h, w], x).unwrap());
        let nw = tape.constant(Tensor::from_vec(&[cout, cin, kh, kw], ker).unwrap());
        let y = tape.conv2d(nx, nw, stride, pad).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(want.iter()) {
            assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, 2, 1),
            Err(TensorError::Dimension(_))
        ));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![-1.0, 4.0]).unwrap());
        // sqrt(-1) = NaN must surface as an error, not propagate.
        assert!(matches!(tape.sqrt(x), Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let y = tape.add(x, x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        // f(x) = sum(x * x) => df/dx = 2x.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(1, 3, &[1.0, -2.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn embedding_rows_gather_and_scatter() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let out = tape.embedding_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Row 2 gathered twice, row 0 once, row 1 never.
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rows_index_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.embedding_rows(table, &[3]),
            Err(TensorError::Parameter(_))
        ));
    }

    #[test]
    fn inference_tape_rejects_backward() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        assert!(!tape.requires_grad(x));
        assert!(tape.backward(x).is_err());
    }
}
