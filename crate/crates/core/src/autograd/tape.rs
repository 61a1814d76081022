//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to compute the local vector-Jacobian product. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//! Inputs consumed by several nodes receive the sum of their contributions.

use rand::Rng;

use super::gemm::{gemm, MatView};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head self-attention call.
///
/// Queries, keys and values are `[batch * seq_len, heads * head_size]`
/// matrices; `key_valid[b * seq_len + j]` says whether key `j` of sequence
/// `b` may be attended to (padding keys are excluded).
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_size: usize,
    pub key_valid: Vec<bool>,
}

impl AttentionSpec {
    fn width(&self) -> usize {
        self.heads * self.head_size
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Gelu { x: Var, t: Vec<T> },
    Sigmoid { x: Var },
    Tanh { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<f64> },
    Softmax { x: Var, axis: AxisSplit },
    LogSoftmax { x: Var, axis: AxisSplit },
    GatherRows { src: Var, ids: Vec<usize> },
    Pick { x: Var, flat: Vec<usize> },
    GroupDot { a: Var, h: Var, k: usize },
    Dropout { x: Var, mask: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<T> },
    BinaryNll { p: Var, replaced: Vec<bool>, floor: T },
}

/// `outer x len x inner` decomposition of a tensor around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn of(shape: &[usize], axis: usize) -> Self {
        AxisSplit {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn index(&self, o: usize, j: usize, i: usize) -> usize {
        (o * self.len + j) * self.inner + i
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Confined to a single
/// thread; independent tapes may run concurrently.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through one `exp`; libm's version is several times slower and
/// dominates GELU-heavy passes.
#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::from_f64(2.0);
    if u.abs() < T::from_f64(1e-4) {
        // Cancellation guard: tanh u = u - u³/3 + O(u⁵).
        return u - u * u * u / T::from_f64(3.0);
    }
    T::one() - two / ((two * u).exp() + T::one())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
        }
    }

    /// A tape that rejects any operation producing NaN or Inf. Off by default
    /// because the scan costs a pass over every output.
    pub fn with_finite_checks() -> Self {
        Tape {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`]; `None` when no
    /// gradient reached this node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Saved attention probabilities, `[batch, heads, seq_len, seq_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Saved probabilities of every attention node, in tape order.
    pub fn all_attention_probs(&self) -> Vec<&[T]> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { probs, .. } => Some(probs.as_slice()),
                _ => None,
            })
            .collect()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `a · b` of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a · bᵀ` of `[m, k]` and `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (bk, n, bview) = if trans_b {
            (bc, br, MatView::row_major(br, bc).t())
        } else {
            (br, bc, MatView::row_major(br, bc))
        };
        if bk != k {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: [{m}, {k}] x [{bk}, {n}]"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            self.value(a).data(),
            MatView::row_major(m, k),
            self.value(b).data(),
            bview,
            T::zero(),
            &mut out,
            MatView::row_major(m, n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a `[c]` bias to every row of a `[.., c]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let vb = self.value(bias);
        let c = vx.cols();
        if vb.shape() != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for rows of width {c}", vb.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (d, &b) in row.iter_mut().zip(vb.data()) {
                *d = *d + b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(name, value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        self.map("scale", x, |v| v * f, Op::Scale { x, factor: f })
    }

    /// GELU, tanh approximation. The inner `tanh` values are kept for the
    /// backward pass.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let vx = self.value(x);
        let t: Vec<T> = vx.data().iter().map(|&v| fast_tanh(c * (v + a * v * v * v))).collect();
        let data = vx.data().iter().zip(&t).map(|(&v, &ti)| half * v * (T::one() + ti)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu { x, t }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, |v| v.tanh(), Op::Tanh { x })
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies `gain` and `bias`. Statistics accumulate in `f64`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if c == 0 {
            return Err(Error::shape("layer_norm", "normalization axis is empty"));
        }
        for p in [gain, bias] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine parameter {:?} for width {c}", self.value(p).shape()),
                ));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.rows();
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![0.0f64; rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j].as_f64() - mean) * rs;
                xhat[r * c + j] = T::from_f64(xh);
                out[r * c + j] = T::from_f64(xh) * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    fn axis_split(&self, op: &'static str, x: Var, axis: usize) -> Result<AxisSplit> {
        let shape = self.value(x).shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} invalid for shape {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(Error::shape(op, format!("axis {axis} is empty")));
        }
        Ok(AxisSplit::of(shape, axis))
    }

    /// Numerically stable softmax along `axis` (max subtraction, `f64` sums).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.axis_split("softmax", x, axis)?;
        let vx = self.value(x);
        let mut out = vec![T::zero(); vx.len()];
        softmax_along(vx.data(), &mut out, split, false);
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { x, axis: split }, &[x])
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.axis_split("log_softmax", x, axis)?;
        let vx = self.value(x);
        let mut out = vec![T::zero(); vx.len()];
        softmax_along(vx.data(), &mut out, split, true);
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax { x, axis: split }, &[x])
    }

    /// Row lookup: `out[i] = src[ids[i]]` for a `[rows, cols]` source.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("gather_rows", src)?;
        let vs = self.value(src).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocab { id, size: rows });
            }
            out.extend_from_slice(&vs[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                src,
                ids: ids.to_vec(),
            },
            &[src],
        )
    }

    /// Picks single entries of a `[rows, cols]` tensor: `out[j] = x[r_j, c_j]`.
    pub fn pick(&mut self, x: Var, index: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("pick", x)?;
        let vx = self.value(x).data();
        let mut flat = Vec::with_capacity(index.len());
        let mut out = Vec::with_capacity(index.len());
        for &(r, c) in index {
            if r >= rows || c >= cols {
                return Err(Error::shape(
                    "pick",
                    format!("index ({r}, {c}) outside [{rows}, {cols}]"),
                ));
            }
            flat.push(r * cols + c);
            out.push(vx[r * cols + c]);
        }
        let value = Tensor::new(vec![index.len()], out)?;
        self.push("pick", value, Op::Pick { x, flat }, &[x])
    }

    /// Grouped dot products: `a` is `[n * k, e]`, `h` is `[n, e]`, and
    /// `out[i, j] = a[i * k + j] · h[i]`.
    pub fn group_dot(&mut self, a: Var, h: Var, k: usize) -> Result<Var> {
        let (ar, e) = self.matrix_dims("group_dot", a)?;
        let (n, he) = self.matrix_dims("group_dot", h)?;
        if he != e || ar != n * k {
            return Err(Error::shape(
                "group_dot",
                format!("[{ar}, {e}] grouped by {k} against [{n}, {he}]"),
            ));
        }
        let va = self.value(a).data();
        let vh = self.value(h).data();
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let hi = &vh[i * e..(i + 1) * e];
            for j in 0..k {
                let row = &va[(i * k + j) * e..(i * k + j + 1) * e];
                out[i * k + j] = dot(row, hi);
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        self.push("group_dot", value, Op::GroupDot { a, h, k }, &[a, h])
    }

    /// Inverted dropout. The keep mask is drawn from `rng`, so a fixed seed
    /// reproduces the same mask bit for bit. `rate == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push("sum", Tensor::scalar(T::from_f64(s)), Op::Sum { x }, &[x])
    }

    /// Mean of all elements; an empty tensor has mean zero.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.len();
        let s: f64 = vx.data().iter().map(|v| v.as_f64()).sum();
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        self.push("mean", Tensor::scalar(T::from_f64(m)), Op::Mean { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Per-element binary negative log-likelihood of "original" probabilities:
    /// `-(1 - z) ln p - z ln(1 - p)`, where `z` marks replaced positions.
    /// Both logs are floored at `floor` to stay finite on saturated inputs.
    pub fn binary_nll(&mut self, p: Var, replaced: &[bool], floor: f64) -> Result<Var> {
        let vp = self.value(p);
        if vp.len() != replaced.len() {
            return Err(Error::shape(
                "binary_nll",
                format!("{} probabilities for {} labels", vp.len(), replaced.len()),
            ));
        }
        let fl = T::from_f64(floor);
        let data = vp
            .data()
            .iter()
            .zip(replaced)
            .map(|(&pi, &z)| {
                let q = if z { T::one() - pi } else { pi };
                -(q.max(fl)).ln()
            })
            .collect();
        let value = Tensor::new(vp.shape().to_vec(), data)?;
        self.push(
            "binary_nll",
            value,
            Op::BinaryNll {
                p,
                replaced: replaced.to_vec(),
                floor: fl,
            },
            &[p],
        )
    }

    /// Fused scaled dot-product multi-head self-attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let rows = spec.batch * spec.seq_len;
        let width = spec.width();
        for t in [q, k, v] {
            let s = self.value(t).shape();
            if s != [rows, width] {
                return Err(Error::shape(
                    "attention",
                    format!("expected [{rows}, {width}], got {s:?}"),
                ));
            }
        }
        if spec.key_valid.len() != rows {
            return Err(Error::shape("attention", "key mask length"));
        }
        let (l, dh, hs) = (spec.seq_len, spec.head_size, spec.heads);
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); spec.batch * hs * l * l];
        let mut out = vec![T::zero(); rows * width];
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..spec.batch {
            let valid = &spec.key_valid[b * l..(b + 1) * l];
            for h in 0..hs {
                let base = b * l * width + h * dh;
                let block = MatView::block(base, l, dh, width);
                let p_off = (b * hs + h) * l * l;
                let p = &mut probs[p_off..p_off + l * l];
                gemm(scale, vq, block, vk, block.t(), T::zero(), p, MatView::row_major(l, l));
                for row in p.chunks_mut(l) {
                    masked_softmax_row(row, valid);
                }
                gemm(
                    T::one(),
                    p,
                    MatView::row_major(l, l),
                    vv,
                    block,
                    T::zero(),
                    &mut out,
                    block,
                );
            }
        }
        let value = Tensor::new(vec![rows, width], out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Reverse sweep from `root`, seeding its gradient with ones. Gradients of
    /// a previous sweep are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Internal("backward root not on this tape".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                let gview = MatView::row_major(m, n);
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    // dA = G · op(B)ᵀ
                    let bview = if *trans_b {
                        MatView::row_major(n, k)
                    } else {
                        MatView::row_major(k, n).t()
                    };
                    gemm(T::one(), g, gview, vb.data(), bview, T::one(), da, MatView::row_major(m, k));
                }
                if let Some(db) = grad_buf(grads, nodes, *b) {
                    if *trans_b {
                        // B is [n, k]: dB = Gᵀ · A
                        gemm(
                            T::one(),
                            g,
                            gview.t(),
                            va.data(),
                            MatView::row_major(m, k),
                            T::one(),
                            db,
                            MatView::row_major(n, k),
                        );
                    } else {
                        gemm(
                            T::one(),
                            va.data(),
                            MatView::row_major(m, k).t(),
                            g,
                            gview,
                            T::one(),
                            db,
                            MatView::row_major(k, n),
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                accumulate(grads, nodes, *a, g.iter().copied());
                accumulate(grads, nodes, *b, g.iter().copied());
            }
            Op::Sub { a, b } => {
                accumulate(grads, nodes, *a, g.iter().copied());
                accumulate(grads, nodes, *b, g.iter().map(|&v| -v));
            }
            Op::Mul { a, b } => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                accumulate(grads, nodes, *a, g.iter().zip(vb).map(|(&gi, &y)| gi * y));
                accumulate(grads, nodes, *b, g.iter().zip(va).map(|(&gi, &x)| gi * x));
            }
            Op::AddBias { x, bias } => {
                accumulate(grads, nodes, *x, g.iter().copied());
                if let Some(db) = grad_buf(grads, nodes, *bias) {
                    let c = db.len();
                    for row in g.chunks(c.max(1)) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                accumulate(grads, nodes, *x, g.iter().map(|&gi| gi * *factor));
            }
            Op::Gelu { x, t } => {
                let c = T::from_f64(GELU_C);
                let a3 = T::from_f64(3.0 * 0.044715);
                let half = T::from_f64(0.5);
                let vx = nodes[x.0].value.data();
                accumulate(
                    grads,
                    nodes,
                    *x,
                    g.iter().zip(vx).zip(t).map(|((&gi, &x), &t)| {
                        let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + a3 * x * x);
                        gi * d
                    }),
                );
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                accumulate(
                    grads,
                    nodes,
                    *x,
                    g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)),
                );
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                accumulate(
                    grads,
                    nodes,
                    *x,
                    g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let vg = nodes[gain.0].value.data();
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = (gr[j] * vg[j]).as_f64();
                            mean_d += d;
                            mean_dx += d * xr[j].as_f64();
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let d = (gr[j] * vg[j]).as_f64();
                            let v = rs * (d - mean_d - xr[j].as_f64() * mean_dx);
                            dx[r * c + j] = dx[r * c + j] + T::from_f64(v);
                        }
                    }
                }
                if let Some(dg) = grad_buf(grads, nodes, *gain) {
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] = dg[j] + gr[j] * xr[j];
                        }
                    }
                }
                if let Some(db) = grad_buf(grads, nodes, *bias) {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            db[j] = db[j] + gr[j];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for o in 0..axis.outer {
                        for inn in 0..axis.inner {
                            let s: f64 = (0..axis.len)
                                .map(|j| {
                                    let idx = axis.index(o, j, inn);
                                    (g[idx] * y[idx]).as_f64()
                                })
                                .sum();
                            let s = T::from_f64(s);
                            for j in 0..axis.len {
                                let idx = axis.index(o, j, inn);
                                dx[idx] = dx[idx] + y[idx] * (g[idx] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for o in 0..axis.outer {
                        for inn in 0..axis.inner {
                            let s: f64 = (0..axis.len)
                                .map(|j| g[axis.index(o, j, inn)].as_f64())
                                .sum();
                            let s = T::from_f64(s);
                            for j in 0..axis.len {
                                let idx = axis.index(o, j, inn);
                                dx[idx] = dx[idx] + g[idx] - y[idx].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { src, ids } => {
                if let Some(ds) = grad_buf(grads, nodes, *src) {
                    let cols = nodes[src.0].value.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut ds[id * cols..(id + 1) * cols];
                        for (d, &gi) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Pick { x, flat } => {
                if let Some(dx) = grad_buf(grads, nodes, *x) {
                    for (&idx, &gi) in flat.iter().zip(g) {
                        dx[idx] = dx[idx] + gi;
                    }
                }
            }
            Op::GroupDot { a, h, k } => {
                let e = nodes[h.0].value.cols();
                let n = nodes[h.0].value.rows();
                let va = nodes[a.0].value.data();
                let vh = nodes[h.0].value.data();
                if let Some(da) = grad_buf(grads, nodes, *a) {
                    for i in 0..n {
                        let hi = &vh[i * e..(i + 1) * e];
                        for j in 0..*k {
                            let gij = g[i * k + j];
                            let row = &mut da[(i * k + j) * e..(i * k + j + 1) * e];
                            for (d, &hv) in row.iter_mut().zip(hi) {
                                *d = *d + gij * hv;
                            }
                        }
                    }
                }
                if let Some(dh) = grad_buf(grads, nodes, *h) {
                    for i in 0..n {
                        let row = &mut dh[i * e..(i + 1) * e];
                        for j in 0..*k {
                            let gij = g[i * k + j];
                            let ar = &va[(i * k + j) * e..(i * k + j + 1) * e];
                            for (d, &av) in row.iter_mut().zip(ar) {
                                *d = *d + gij * av;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, nodes, *x, g.iter().zip(mask).map(|(&gi, &m)| gi * m));
            }
            Op::Sum { x } => {
                let n = nodes[x.0].value.len();
                accumulate(grads, nodes, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean { x } => {
                let n = nodes[x.0].value.len();
                if n > 0 {
                    let s = g[0] / T::from_f64(n as f64);
                    accumulate(grads, nodes, *x, std::iter::repeat_n(s, n));
                }
            }
            Op::Reshape { x } => {
                accumulate(grads, nodes, *x, g.iter().copied());
            }
            Op::BinaryNll { p, replaced, floor } => {
                let vp = nodes[p.0].value.data();
                accumulate(
                    grads,
                    nodes,
                    *p,
                    g.iter().zip(vp).zip(replaced).map(|((&gi, &pi), &z)| {
                        if z {
                            let q = T::one() - pi;
                            if q > *floor {
                                gi / q
                            } else {
                                T::zero()
                            }
                        } else if pi > *floor {
                            -gi / pi
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (l, dh, hs) = (spec.seq_len, spec.head_size, spec.heads);
                let width = spec.width();
                let rows = spec.batch * l;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (vq, vk, vv) = (
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                );
                let mut dq = vec![T::zero(); rows * width];
                let mut dk = vec![T::zero(); rows * width];
                let mut dv = vec![T::zero(); rows * width];
                let mut dp = vec![T::zero(); l * l];
                let sq = MatView::row_major(l, l);
                for b in 0..spec.batch {
                    for h in 0..hs {
                        let block = MatView::block(b * l * width + h * dh, l, dh, width);
                        let p_off = (b * hs + h) * l * l;
                        let p = &probs[p_off..p_off + l * l];
                        // dP = dO · Vᵀ, dV = Pᵀ · dO
                        gemm(T::one(), g, block, vv, block.t(), T::zero(), &mut dp, sq);
                        gemm(T::one(), p, sq.t(), g, block, T::one(), &mut dv, block);
                        // dS = P ∘ (dP - rowsum(dP ∘ P))
                        for r in 0..l {
                            let pr = &p[r * l..(r + 1) * l];
                            let dr = &mut dp[r * l..(r + 1) * l];
                            let s: f64 = pr.iter().zip(dr.iter()).map(|(&a, &b)| (a * b).as_f64()).sum();
                            let s = T::from_f64(s);
                            for (d, &pv) in dr.iter_mut().zip(pr) {
                                *d = pv * (*d - s);
                            }
                        }
                        gemm(scale, &dp, sq, vk, block, T::one(), &mut dq, block);
                        gemm(scale, &dp, sq.t(), vq, block, T::one(), &mut dk, block);
                    }
                }
                accumulate(grads, nodes, *q, dq.into_iter());
                accumulate(grads, nodes, *k, dk.into_iter());
                accumulate(grads, nodes, *v, dv.into_iter());
            }
        }
    }
}

fn grad_buf<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    local: impl Iterator<Item = T>,
) {
    if let Some(buf) = grad_buf(grads, nodes, v) {
        for (d, l) in buf.iter_mut().zip(local) {
            *d = *d + l;
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn softmax_along<T: Scalar>(x: &[T], out: &mut [T], split: AxisSplit, log: bool) {
    for o in 0..split.outer {
        for inn in 0..split.inner {
            let mut max = f64::NEG_INFINITY;
            for j in 0..split.len {
                max = max.max(x[split.index(o, j, inn)].as_f64());
            }
            let mut sum = 0.0f64;
            for j in 0..split.len {
                sum += (x[split.index(o, j, inn)].as_f64() - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..split.len {
                let idx = split.index(o, j, inn);
                let lv = x[idx].as_f64() - lse;
                out[idx] = T::from_f64(if log { lv } else { lv.exp() });
            }
        }
    }
}

fn masked_softmax_row<T: Scalar>(row: &mut [T], valid: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (v, &ok) in row.iter().zip(valid) {
        if ok {
            max = max.max(v.as_f64());
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = 0.0f64;
    for (v, &ok) in row.iter_mut().zip(valid) {
        if ok {
            let e = (v.as_f64() - max).exp();
            sum += e;
            *v = T::from_f64(e);
        } else {
            *v = T::zero();
        }
    }
    let inv = T::from_f64(1.0 / sum);
    for (v, &ok) in row.iter_mut().zip(valid) {
        if ok {
            *v = *v * inv;
        }
    }
}
