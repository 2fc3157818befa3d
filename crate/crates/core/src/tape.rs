//! Wengert-tape reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations record a node when at least one operand is tracked; plain
//! constants flow through the same code paths without touching the tape, so
//! frozen networks run as ordinary arithmetic. Each node stores the op, the
//! input node ids and the forward value, which is everything `backward`
//! needs for a single reverse sweep in recorded order.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::conv::{self, ConvDims};
use crate::error::{Error, Result};
use crate::tensor::{strides_of, NodeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Equal,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Ln(usize),
    Exp(usize),
    Scale(usize, f64),
    AddScalar(usize),
    ClampMin(usize, f64),
    ClampMax(usize, f64),
    SmoothL1(usize),
    BceWithLogits {
        logits: usize,
        targets: Arc<Vec<f64>>,
    },
    Softmax {
        input: usize,
        axes: Vec<usize>,
    },
    LogSoftmax {
        input: usize,
        axes: Vec<usize>,
    },
    // the masked softmax backward only needs its own output (off-support
    // cells carry zeros), so no support buffer is saved
    MaskedSoftmax {
        input: usize,
        axes: Vec<usize>,
    },
    Reduce {
        input: usize,
        axes: Vec<usize>,
        kind: ReduceKind,
    },
    Expand {
        input: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    Select {
        input: usize,
        axis: usize,
        index: usize,
    },
    SliceWindow {
        input: usize,
        y0: usize,
        x0: usize,
    },
    PadWindow {
        input: usize,
        y0: usize,
        x0: usize,
    },
    Stack(Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        dims: ConvDims,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
}

/// Recording tape. Single-threaded by contract: one forward/backward pass at
/// a time; independent tapes may run concurrently on disjoint data.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a gradient-carrying leaf holding a snapshot of `t`'s data.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, true)
    }

    /// Register a constant leaf (participates in the graph, no gradient intent).
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: &Tensor, requires_grad: bool) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.buffer(),
        });
        let mut out = Tensor::from_parts(t.shape().to_vec(), t.buffer(), None);
        out.set_tracking(
            NodeRef {
                tape_id: self.id,
                index,
            },
            requires_grad,
        );
        out
    }

    fn node_id(&mut self, t: &Tensor) -> Result<usize> {
        match t.node {
            Some(r) => {
                if r.tape_id != self.id {
                    return Err(Error::TapeMismatch);
                }
                Ok(r.index)
            }
            None => {
                // Auto-register constants so mixed tracked/untracked ops work.
                let leaf = self.push_leaf(t, false);
                Ok(leaf.node.unwrap().index)
            }
        }
    }

    fn finish(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[&Tensor],
        make_op: impl FnOnce(Vec<usize>) -> Op,
    ) -> Result<Tensor> {
        let tracked = inputs.iter().any(|t| t.is_tracked());
        let value = Arc::new(value);
        if !tracked {
            return Ok(Tensor::from_parts(shape, value, None));
        }
        let ids = inputs
            .iter()
            .map(|t| self.node_id(t))
            .collect::<Result<Vec<_>>>()?;
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: make_op(ids),
            shape: shape.clone(),
            value: Arc::clone(&value),
        });
        let mut out = Tensor::from_parts(shape, value, None);
        out.set_tracking(
            NodeRef {
                tape_id: self.id,
                index,
            },
            false,
        );
        Ok(out)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        let bc = broadcast_kind(a, b)?;
        let value = zip_values(a.data(), b.data(), bc, f);
        let shape = match bc {
            Broadcast::LeftScalar => b.shape().to_vec(),
            _ => a.shape().to_vec(),
        };
        self.finish(shape, value, &[a, b], |ids| make_op(ids[0], ids[1]))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if b.data().iter().any(|v| *v == 0.0) {
            return Err(Error::DomainError("division by zero".into()));
        }
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn minimum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, f64::min, Op::Minimum)
    }

    pub fn maximum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, f64::max, Op::Maximum)
    }

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        make_op: impl FnOnce(usize) -> Op,
    ) -> Result<Tensor> {
        let value = a.data().iter().map(|&x| f(x)).collect();
        self.finish(a.shape().to_vec(), value, &[a], |ids| make_op(ids[0]))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn abs(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.data().iter().any(|v| *v < 0.0) {
            return Err(Error::DomainError("sqrt of negative value".into()));
        }
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn ln(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.data().iter().any(|v| *v <= 0.0) {
            return Err(Error::DomainError("ln of non-positive value".into()));
        }
        self.unary(a, f64::ln, Op::Ln)
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.data().iter().any(|v| *v > 709.0) {
            return Err(Error::DomainError("exp overflow".into()));
        }
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn scale(&mut self, a: &Tensor, k: f64) -> Result<Tensor> {
        self.unary(a, |x| k * x, |id| Op::Scale(id, k))
    }

    pub fn add_scalar(&mut self, a: &Tensor, k: f64) -> Result<Tensor> {
        self.unary(a, |x| x + k, Op::AddScalar)
    }

    pub fn clamp_min(&mut self, a: &Tensor, k: f64) -> Result<Tensor> {
        self.unary(a, |x| x.max(k), |id| Op::ClampMin(id, k))
    }

    pub fn clamp_max(&mut self, a: &Tensor, k: f64) -> Result<Tensor> {
        self.unary(a, |x| x.min(k), |id| Op::ClampMax(id, k))
    }

    /// Elementwise smooth-L1 of the input (usually a difference tensor):
    /// 0.5 x^2 inside |x| < 1, |x| - 0.5 outside.
    pub fn smooth_l1(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(
            a,
            |x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            },
            Op::SmoothL1,
        )
    }

    /// Numerically stable binary cross-entropy on logits. Targets are taken
    /// by value (no gradient path into them).
    pub fn bce_with_logits(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        if logits.shape() != targets.shape() {
            return Err(Error::ShapeMismatch(format!(
                "bce logits {:?} vs targets {:?}",
                logits.shape(),
                targets.shape()
            )));
        }
        if targets.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::DomainError("bce target outside [0,1]".into()));
        }
        let targets_arc = targets.buffer();
        let value: Vec<f64> = logits
            .data()
            .iter()
            .zip(targets_arc.iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        self.finish(logits.shape().to_vec(), value, &[logits], move |ids| {
            Op::BceWithLogits {
                logits: ids[0],
                targets: targets_arc,
            }
        })
    }

    // ── softmax family ──────────────────────────────────────────────────

    pub fn softmax(&mut self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let lanes = Lanes::build(x.shape(), axes)?;
        let value = softmax_values(x.data(), &lanes, None);
        let axes = lanes.axes;
        self.finish(x.shape().to_vec(), value, &[x], |ids| Op::Softmax {
            input: ids[0],
            axes,
        })
    }

    pub fn log_softmax(&mut self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let lanes = Lanes::build(x.shape(), axes)?;
        let mut value = vec![0.0; x.len()];
        for &base in &lanes.outer {
            let mut max = f64::NEG_INFINITY;
            for &off in &lanes.inner {
                max = max.max(x.data()[base + off]);
            }
            let mut denom = 0.0;
            for &off in &lanes.inner {
                denom += (x.data()[base + off] - max).exp();
            }
            let log_denom = denom.ln();
            for &off in &lanes.inner {
                value[base + off] = x.data()[base + off] - max - log_denom;
            }
        }
        let axes = lanes.axes;
        self.finish(x.shape().to_vec(), value, &[x], |ids| Op::LogSoftmax {
            input: ids[0],
            axes,
        })
    }

    /// Softmax restricted to cells where `support` is 1; zero elsewhere.
    /// Every lane must contain at least one supported cell.
    pub fn masked_softmax(&mut self, x: &Tensor, support: &Tensor, axes: &[usize]) -> Result<Tensor> {
        if support.shape() != x.shape() {
            return Err(Error::ShapeMismatch(format!(
                "support {:?} vs input {:?}",
                support.shape(),
                x.shape()
            )));
        }
        if support.data().iter().any(|&s| s != 0.0 && s != 1.0) {
            return Err(Error::DomainError("softmax support must be binary".into()));
        }
        let lanes = Lanes::build(x.shape(), axes)?;
        for &base in &lanes.outer {
            if !lanes.inner.iter().any(|&off| support.data()[base + off] == 1.0) {
                return Err(Error::DomainError("empty softmax support".into()));
            }
        }
        let value = softmax_values(x.data(), &lanes, Some(support.data()));
        let axes = lanes.axes;
        self.finish(x.shape().to_vec(), value, &[x], move |ids| Op::MaskedSoftmax {
            input: ids[0],
            axes,
        })
    }

    // ── reductions and shape ops ────────────────────────────────────────

    pub fn sum(&mut self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.reduce(x, axes, ReduceKind::Sum)
    }

    pub fn mean(&mut self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.reduce(x, axes, ReduceKind::Mean)
    }

    /// Sum of every element, as a scalar tensor.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let axes: Vec<usize> = (0..x.rank()).collect();
        if axes.is_empty() {
            return self.reshape(x, &[]);
        }
        self.sum(x, &axes)
    }

    fn reduce(&mut self, x: &Tensor, axes: &[usize], kind: ReduceKind) -> Result<Tensor> {
        let lanes = Lanes::build(x.shape(), axes)?;
        let mut value = vec![0.0; lanes.outer.len()];
        for (o, &base) in lanes.outer.iter().enumerate() {
            let mut acc = 0.0;
            for &off in &lanes.inner {
                acc += x.data()[base + off];
            }
            value[o] = match kind {
                ReduceKind::Sum => acc,
                ReduceKind::Mean => acc / lanes.inner.len() as f64,
            };
        }
        let out_shape = remove_axes(x.shape(), &lanes.axes);
        let axes = lanes.axes;
        self.finish(out_shape, value, &[x], |ids| Op::Reduce {
            input: ids[0],
            axes,
            kind,
        })
    }

    /// Insert replicated axes at the given output positions. The inverse of
    /// `sum` over the same axes: `expand(v, axes, sizes)` has shape equal to
    /// `v`'s shape with `sizes[i]` inserted at position `axes[i]`.
    pub fn expand(&mut self, x: &Tensor, axes: &[usize], sizes: &[usize]) -> Result<Tensor> {
        if axes.len() != sizes.len() {
            return Err(Error::InvalidAxis(format!(
                "expand got {} axes but {} sizes",
                axes.len(),
                sizes.len()
            )));
        }
        if axes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidAxis("expand axes must be strictly increasing".into()));
        }
        let out_rank = x.rank() + axes.len();
        if let Some(&bad) = axes.iter().find(|&&a| a >= out_rank) {
            return Err(Error::InvalidAxis(format!("expand axis {bad} out of range")));
        }
        let mut out_shape = Vec::with_capacity(out_rank);
        let mut src = x.shape().iter();
        let mut k = 0;
        for dim in 0..out_rank {
            if k < axes.len() && axes[k] == dim {
                out_shape.push(sizes[k]);
                k += 1;
            } else {
                out_shape.push(*src.next().unwrap());
            }
        }
        let lanes = Lanes::build(&out_shape, axes)?;
        debug_assert_eq!(lanes.outer.len(), x.len());
        let mut value = vec![0.0; out_shape.iter().product()];
        for (i, &base) in lanes.outer.iter().enumerate() {
            let v = x.data()[i];
            for &off in &lanes.inner {
                value[base + off] = v;
            }
        }
        let axes = lanes.axes;
        self.finish(out_shape, value, &[x], |ids| Op::Expand {
            input: ids[0],
            axes,
        })
    }

    pub fn reshape(&mut self, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != x.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                x.shape(),
                new_shape
            )));
        }
        let value = x.data().to_vec();
        self.finish(new_shape.to_vec(), value, &[x], |ids| Op::Reshape(ids[0]))
    }

    /// Drop `axis` by selecting the slice at `index`.
    pub fn select(&mut self, x: &Tensor, axis: usize, index: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::InvalidAxis(format!("select axis {axis} on rank {}", x.rank())));
        }
        if index >= x.shape()[axis] {
            return Err(Error::InvalidAxis(format!(
                "select index {index} exceeds dim {}",
                x.shape()[axis]
            )));
        }
        let lanes = Lanes::build(x.shape(), &[axis])?;
        let stride = strides_of(x.shape())[axis];
        let mut value = vec![0.0; lanes.outer.len()];
        for (o, &base) in lanes.outer.iter().enumerate() {
            value[o] = x.data()[base + index * stride];
        }
        let out_shape = remove_axes(x.shape(), &[axis]);
        self.finish(out_shape, value, &[x], |ids| Op::Select {
            input: ids[0],
            axis,
            index,
        })
    }

    /// Window `[y0..y0+h, x0..x0+w]` over the last two axes.
    pub fn slice_window(&mut self, x: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let r = x.rank();
        if r < 2 {
            return Err(Error::ShapeMismatch("slice_window needs rank >= 2".into()));
        }
        let (full_h, full_w) = (x.shape()[r - 2], x.shape()[r - 1]);
        if y0 + h > full_h || x0 + w > full_w {
            return Err(Error::ShapeMismatch(format!(
                "window {y0}+{h} x {x0}+{w} exceeds {full_h}x{full_w}"
            )));
        }
        let planes: usize = x.shape()[..r - 2].iter().product();
        let mut value = vec![0.0; planes * h * w];
        for p in 0..planes {
            let src = &x.data()[p * full_h * full_w..(p + 1) * full_h * full_w];
            let dst = &mut value[p * h * w..(p + 1) * h * w];
            for row in 0..h {
                let s = (y0 + row) * full_w + x0;
                dst[row * w..(row + 1) * w].copy_from_slice(&src[s..s + w]);
            }
        }
        let mut out_shape = x.shape()[..r - 2].to_vec();
        out_shape.push(h);
        out_shape.push(w);
        self.finish(out_shape, value, &[x], |ids| Op::SliceWindow {
            input: ids[0],
            y0,
            x0,
        })
    }

    /// Embed the last-two-axes window into a larger zero plane at (y0, x0).
    pub fn pad_window(&mut self, x: &Tensor, y0: usize, x0: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
        let r = x.rank();
        if r < 2 {
            return Err(Error::ShapeMismatch("pad_window needs rank >= 2".into()));
        }
        let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
        if y0 + h > out_h || x0 + w > out_w {
            return Err(Error::ShapeMismatch(format!(
                "window {y0}+{h} x {x0}+{w} exceeds {out_h}x{out_w}"
            )));
        }
        let planes: usize = x.shape()[..r - 2].iter().product();
        let mut value = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut value[p * out_h * out_w..(p + 1) * out_h * out_w];
            for row in 0..h {
                let d = (y0 + row) * out_w + x0;
                dst[d..d + w].copy_from_slice(&src[row * w..(row + 1) * w]);
            }
        }
        let mut out_shape = x.shape()[..r - 2].to_vec();
        out_shape.push(out_h);
        out_shape.push(out_w);
        self.finish(out_shape, value, &[x], |ids| Op::PadWindow {
            input: ids[0],
            y0,
            x0,
        })
    }

    /// Stack same-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("stack of zero tensors".into()));
        }
        let shape = parts[0].shape().to_vec();
        if parts.iter().any(|p| p.shape() != shape) {
            return Err(Error::ShapeMismatch("stack requires identical shapes".into()));
        }
        let each = parts[0].len();
        let mut value = Vec::with_capacity(each * parts.len());
        for p in parts {
            value.extend_from_slice(p.data());
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&shape);
        let refs: Vec<&Tensor> = parts.iter().collect();
        self.finish(out_shape, value, &refs, Op::Stack)
    }

    /// 2D cross-correlation with square kernel k in {1, 3}.
    /// x: [N, Cin, H, W], w: [Cout, Cin, k, k], b: [Cout].
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if x.rank() != 4 || w.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, wcin, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if k != k2 || !(k == 1 || k == 3) {
            return Err(Error::ShapeMismatch(format!("kernel must be square 1x1 or 3x3, got {k}x{k2}")));
        }
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias {:?} vs {cout} output channels",
                b.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::ShapeMismatch("conv2d stride must be positive".into()));
        }
        let out_h = ConvDims::out_size(h, k, stride, pad)
            .ok_or_else(|| Error::ShapeMismatch(format!("conv2d input {h}x{wd} smaller than kernel")))?;
        let out_w = ConvDims::out_size(wd, k, stride, pad)
            .ok_or_else(|| Error::ShapeMismatch(format!("conv2d input {h}x{wd} smaller than kernel")))?;
        let dims = ConvDims {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let value = conv::forward(x.data(), w.data(), b.data(), &dims);
        self.finish(vec![n, cout, out_h, out_w], value, &[x, w, b], |ids| Op::Conv2d {
            x: ids[0],
            w: ids[1],
            b: ids[2],
            dims,
        })
    }

    // ── reverse sweep ───────────────────────────────────────────────────

    /// Reverse-accumulate gradients of a scalar loss for every node on the
    /// tape. Deterministic: nodes are visited in strict reverse recording
    /// order, each exactly once.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let node = loss.node.ok_or(Error::DetachedTensor)?;
        if node.tape_id != self.id {
            return Err(Error::TapeMismatch);
        }
        if loss.len() != 1 {
            return Err(Error::NotScalar);
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[node.index][0] = 1.0;

        for i in (0..=node.index).rev() {
            let g = std::mem::take(&mut grads[i]);
            self.propagate(i, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let val = |id: usize| -> &[f64] { &self.nodes[id].value };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let bc = broadcast_of(val(*a).len(), val(*b).len());
                accumulate_binary(grads, *a, *b, g, bc, |_, _, g| (g, g), val(*a), val(*b));
            }
            Op::Sub(a, b) => {
                let bc = broadcast_of(val(*a).len(), val(*b).len());
                accumulate_binary(grads, *a, *b, g, bc, |_, _, g| (g, -g), val(*a), val(*b));
            }
            Op::Mul(a, b) => {
                let bc = broadcast_of(val(*a).len(), val(*b).len());
                accumulate_binary(grads, *a, *b, g, bc, |x, y, g| (g * y, g * x), val(*a), val(*b));
            }
            Op::Div(a, b) => {
                let bc = broadcast_of(val(*a).len(), val(*b).len());
                accumulate_binary(
                    grads,
                    *a,
                    *b,
                    g,
                    bc,
                    |x, y, g| (g / y, -g * x / (y * y)),
                    val(*a),
                    val(*b),
                );
            }
            Op::Minimum(a, b) => {
                let bc = broadcast_of(val(*a).len(), val(*b).len());
                accumulate_binary(
                    grads,
                    *a,
                    *b,
                    g,
                    bc,
                    |x, y, g| if x <= y { (g, 0.0) } else { (0.0, g) },
                    val(*a),
                    val(*b),
                );
            }
            Op::Maximum(a, b) => {
                let bc = broadcast_of(val(*a).len(), val(*b).len());
                accumulate_binary(
                    grads,
                    *a,
                    *b,
                    g,
                    bc,
                    |x, y, g| if x >= y { (g, 0.0) } else { (0.0, g) },
                    val(*a),
                    val(*b),
                );
            }
            Op::Relu(a) => accumulate_unary(grads, *a, g, val(*a), |x, g| if x > 0.0 { g } else { 0.0 }),
            Op::Abs(a) => accumulate_unary(grads, *a, g, val(*a), |x, g| g * sign(x)),
            Op::Square(a) => accumulate_unary(grads, *a, g, val(*a), |x, g| 2.0 * x * g),
            Op::Sqrt(a) => {
                // d/dx sqrt = 1/(2 sqrt); defined as 0 at 0 (clamped-sqrt convention).
                let y = &node.value;
                let ga = &mut grads[*a];
                for j in 0..g.len() {
                    if y[j] > 0.0 {
                        ga[j] += g[j] * 0.5 / y[j];
                    }
                }
            }
            Op::Ln(a) => accumulate_unary(grads, *a, g, val(*a), |x, g| g / x),
            Op::Exp(a) => {
                let y = &node.value;
                let ga = &mut grads[*a];
                for j in 0..g.len() {
                    ga[j] += g[j] * y[j];
                }
            }
            Op::Scale(a, k) => accumulate_unary(grads, *a, g, val(*a), |_, g| g * k),
            Op::AddScalar(a) => accumulate_unary(grads, *a, g, val(*a), |_, g| g),
            Op::ClampMin(a, k) => accumulate_unary(grads, *a, g, val(*a), |x, g| if x >= *k { g } else { 0.0 }),
            Op::ClampMax(a, k) => accumulate_unary(grads, *a, g, val(*a), |x, g| if x <= *k { g } else { 0.0 }),
            Op::SmoothL1(a) => accumulate_unary(grads, *a, g, val(*a), |x, g| g * x.clamp(-1.0, 1.0)),
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let gl = &mut grads[*logits];
                for j in 0..g.len() {
                    let sigma = 1.0 / (1.0 + (-z[j]).exp());
                    gl[j] += g[j] * (sigma - targets[j]);
                }
            }
            Op::Softmax { input, axes } | Op::MaskedSoftmax { input, axes, .. } => {
                // dx_i = y_i * (g_i - sum_j g_j y_j); masked lanes carry y=0
                // off-support so the same formula applies.
                let y = &node.value;
                let lanes = Lanes::build(&node.shape, axes).expect("lanes valid at record time");
                let gi = &mut grads[*input];
                for &base in &lanes.outer {
                    let mut dot = 0.0;
                    for &off in &lanes.inner {
                        dot += g[base + off] * y[base + off];
                    }
                    for &off in &lanes.inner {
                        gi[base + off] += y[base + off] * (g[base + off] - dot);
                    }
                }
            }
            Op::LogSoftmax { input, axes } => {
                // dx_i = g_i - softmax_i * sum_j g_j
                let y = &node.value;
                let lanes = Lanes::build(&node.shape, axes).expect("lanes valid at record time");
                let gi = &mut grads[*input];
                for &base in &lanes.outer {
                    let mut gsum = 0.0;
                    for &off in &lanes.inner {
                        gsum += g[base + off];
                    }
                    for &off in &lanes.inner {
                        gi[base + off] += g[base + off] - y[base + off].exp() * gsum;
                    }
                }
            }
            Op::Reduce { input, axes, kind } => {
                let in_shape = &self.nodes[*input].shape;
                let lanes = Lanes::build(in_shape, axes).expect("lanes valid at record time");
                let scale = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => 1.0 / lanes.inner.len() as f64,
                };
                let gi = &mut grads[*input];
                for (o, &base) in lanes.outer.iter().enumerate() {
                    let gv = g[o] * scale;
                    for &off in &lanes.inner {
                        gi[base + off] += gv;
                    }
                }
            }
            Op::Expand { input, axes } => {
                let lanes = Lanes::build(&node.shape, axes).expect("lanes valid at record time");
                let gi = &mut grads[*input];
                for (o, &base) in lanes.outer.iter().enumerate() {
                    let mut acc = 0.0;
                    for &off in &lanes.inner {
                        acc += g[base + off];
                    }
                    gi[o] += acc;
                }
            }
            Op::Reshape(input) => {
                let gi = &mut grads[*input];
                for j in 0..g.len() {
                    gi[j] += g[j];
                }
            }
            Op::Select { input, axis, index } => {
                let in_shape = &self.nodes[*input].shape;
                let lanes = Lanes::build(in_shape, &[*axis]).expect("lanes valid at record time");
                let stride = strides_of(in_shape)[*axis];
                let gi = &mut grads[*input];
                for (o, &base) in lanes.outer.iter().enumerate() {
                    gi[base + index * stride] += g[o];
                }
            }
            Op::SliceWindow { input, y0, x0 } => {
                let in_shape = &self.nodes[*input].shape;
                let r = in_shape.len();
                let (full_h, full_w) = (in_shape[r - 2], in_shape[r - 1]);
                let r_out = node.shape.len();
                let (h, w) = (node.shape[r_out - 2], node.shape[r_out - 1]);
                let planes: usize = in_shape[..r - 2].iter().product();
                let gi = &mut grads[*input];
                for p in 0..planes {
                    for row in 0..h {
                        let s = p * h * w + row * w;
                        let d = p * full_h * full_w + (y0 + row) * full_w + x0;
                        for col in 0..w {
                            gi[d + col] += g[s + col];
                        }
                    }
                }
            }
            Op::PadWindow { input, y0, x0 } => {
                let in_shape = &self.nodes[*input].shape;
                let r = in_shape.len();
                let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
                let r_out = node.shape.len();
                let (out_h, out_w) = (node.shape[r_out - 2], node.shape[r_out - 1]);
                let planes: usize = in_shape[..r - 2].iter().product();
                let gi = &mut grads[*input];
                for p in 0..planes {
                    for row in 0..h {
                        let d = p * h * w + row * w;
                        let s = p * out_h * out_w + (y0 + row) * out_w + x0;
                        for col in 0..w {
                            gi[d + col] += g[s + col];
                        }
                    }
                }
            }
            Op::Stack(inputs) => {
                let each = if inputs.is_empty() { 0 } else { self.nodes[inputs[0]].value.len() };
                for (p, &id) in inputs.iter().enumerate() {
                    let gi = &mut grads[id];
                    let src = &g[p * each..(p + 1) * each];
                    for j in 0..each {
                        gi[j] += src[j];
                    }
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let gx = conv::backward_x(g, val(*w), dims);
                add_into(&mut grads[*x], &gx);
                let gw = conv::backward_w(g, val(*x), dims);
                add_into(&mut grads[*w], &gw);
                let gb = conv::backward_b(g, dims);
                add_into(&mut grads[*b], &gb);
            }
        }
    }
}

/// Per-node gradients produced by one reverse sweep.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the swept loss with respect to `t`. Unreached tensors
    /// yield all-zero gradients of the right length.
    pub fn get(&self, t: &Tensor) -> Result<&[f64]> {
        let node = t.node.ok_or(Error::DetachedTensor)?;
        if node.tape_id != self.tape_id {
            return Err(Error::TapeMismatch);
        }
        Ok(&self.grads[node.index])
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for j in 0..dst.len() {
        dst[j] += src[j];
    }
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Equal);
    }
    if a.len() == 1 {
        return Ok(Broadcast::LeftScalar);
    }
    if b.len() == 1 {
        return Ok(Broadcast::RightScalar);
    }
    Err(Error::ShapeMismatch(format!(
        "elementwise op on {:?} vs {:?} (only scalar broadcast is supported)",
        a.shape(),
        b.shape()
    )))
}

fn broadcast_of(a_len: usize, b_len: usize) -> Broadcast {
    if a_len == b_len {
        Broadcast::Equal
    } else if a_len == 1 {
        Broadcast::LeftScalar
    } else {
        Broadcast::RightScalar
    }
}

fn zip_values(a: &[f64], b: &[f64], bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match bc {
        Broadcast::Equal => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::LeftScalar => b.iter().map(|&y| f(a[0], y)).collect(),
        Broadcast::RightScalar => a.iter().map(|&x| f(x, b[0])).collect(),
    }
}

/// Apply a per-element pullback `(x, y, g) -> (da, db)` honoring scalar
/// broadcast (the scalar side accumulates the sum of its contributions).
fn accumulate_binary(
    grads: &mut [Vec<f64>],
    a: usize,
    b: usize,
    g: &[f64],
    bc: Broadcast,
    pull: impl Fn(f64, f64, f64) -> (f64, f64),
    av: &[f64],
    bv: &[f64],
) {
    match bc {
        Broadcast::Equal => {
            if a == b {
                for j in 0..g.len() {
                    let (da, db) = pull(av[j], bv[j], g[j]);
                    grads[a][j] += da + db;
                }
            } else {
                let (ga, gb) = index_pair(grads, a, b);
                for j in 0..g.len() {
                    let (da, db) = pull(av[j], bv[j], g[j]);
                    ga[j] += da;
                    gb[j] += db;
                }
            }
        }
        Broadcast::LeftScalar => {
            let (ga, gb) = index_pair(grads, a, b);
            let mut acc = 0.0;
            for j in 0..g.len() {
                let (da, db) = pull(av[0], bv[j], g[j]);
                acc += da;
                gb[j] += db;
            }
            ga[0] += acc;
        }
        Broadcast::RightScalar => {
            let (ga, gb) = index_pair(grads, a, b);
            let mut acc = 0.0;
            for j in 0..g.len() {
                let (da, db) = pull(av[j], bv[0], g[j]);
                ga[j] += da;
                acc += db;
            }
            gb[0] += acc;
        }
    }
}

fn index_pair(grads: &mut [Vec<f64>], a: usize, b: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = grads.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = grads.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn accumulate_unary(grads: &mut [Vec<f64>], a: usize, g: &[f64], av: &[f64], pull: impl Fn(f64, f64) -> f64) {
    let ga = &mut grads[a];
    for j in 0..g.len() {
        ga[j] += pull(av[j], g[j]);
    }
}

fn remove_axes(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

/// Offset decomposition for axis-set operations: every element offset is
/// `outer[i] + inner[j]` where `outer` enumerates the kept axes in row-major
/// order and `inner` enumerates the operated axes.
struct Lanes {
    axes: Vec<usize>,
    outer: Vec<usize>,
    inner: Vec<usize>,
}

impl Lanes {
    fn build(shape: &[usize], axes: &[usize]) -> Result<Lanes> {
        if axes.is_empty() {
            return Err(Error::InvalidAxis("empty axis set".into()));
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            return Err(Error::InvalidAxis("duplicate axes".into()));
        }
        if let Some(&bad) = sorted.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::InvalidAxis(format!(
                "axis {bad} out of range for rank {}",
                shape.len()
            )));
        }
        let strides = strides_of(shape);
        let mut outer = vec![0usize];
        let mut inner = vec![0usize];
        for (dim, (&size, &stride)) in shape.iter().zip(&strides).enumerate() {
            let target = if sorted.contains(&dim) { &mut inner } else { &mut outer };
            let mut next = Vec::with_capacity(target.len() * size);
            for &base in target.iter() {
                for i in 0..size {
                    next.push(base + i * stride);
                }
            }
            *target = next;
        }
        Ok(Lanes {
            axes: sorted,
            outer,
            inner,
        })
    }
}

fn softmax_values(x: &[f64], lanes: &Lanes, support: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for &base in &lanes.outer {
        let mut max = f64::NEG_INFINITY;
        for &off in &lanes.inner {
            if support.map_or(true, |s| s[base + off] == 1.0) {
                max = max.max(x[base + off]);
            }
        }
        let mut denom = 0.0;
        for &off in &lanes.inner {
            if support.map_or(true, |s| s[base + off] == 1.0) {
                denom += (x[base + off] - max).exp();
            }
        }
        for &off in &lanes.inner {
            if support.map_or(true, |s| s[base + off] == 1.0) {
                out[base + off] = (x[base + off] - max).exp() / denom;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_abs_definitions() {
        let mut tape = Tape::new();
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(tape.relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
        let y = t(&[2], &[-3.0, 3.0]);
        assert_eq!(tape.abs(&y).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn sqrt_backward_matches_analytic() {
        let mut tape = Tape::new();
        let x = tape.watch(&t(&[1], &[4.0]));
        let y = tape.sqrt(&x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert!((grads.get(&x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut tape = Tape::new();
        let x = t(&[4], &[0.0; 4]);
        let s = tape.softmax(&x, &[0]).unwrap();
        for v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = t(&[2], &[1.0f64.ln(), 3.0f64.ln()]);
        let s = tape.softmax(&x, &[0]).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_joint_axes() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[0.0, 0.0, 0.0, 5.0f64.ln()]);
        let s = tape.softmax(&x, &[0, 1]).unwrap();
        assert!((s.data()[3] - 5.0 / 8.0).abs() < 1e-12);
        for v in &s.data()[..3] {
            assert!((v - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        let mut tape = Tape::new();
        let x = t(&[3, 4], &(0..12).map(|i| (i as f64 * 0.7).sin() * 3.0).collect::<Vec<_>>());
        let s = tape.softmax(&x, &[1]).unwrap();
        for row in 0..3 {
            let sum: f64 = s.data()[row * 4..(row + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(s.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let m = tape.mean(&x, &[0, 1]).unwrap();
        assert_eq!(m.item().unwrap(), 4.0);
        let s = tape.sum(&x, &[1]).unwrap();
        assert_eq!(s.data(), &[4.0, 12.0]);
        assert_eq!(s.shape(), &[2]);
    }

    #[test]
    fn mean_backward_spreads_evenly() {
        let mut tape = Tape::new();
        let x = tape.watch(&t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let m = tape.mean(&x, &[0, 1]).unwrap();
        let grads = tape.backward(&m).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let x = tape.watch(&t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.watch(&t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.watch(&t(&[2], &[1.0, 2.0]));
        let y = tape.watch(&t(&[2], &[5.0, 6.0]));
        let s = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_on_tape() {
        let tape = Tape::new();
        let x = t(&[1], &[1.0]);
        assert!(matches!(tape.backward(&x), Err(Error::DetachedTensor)));

        let mut tape = Tape::new();
        let x = tape.watch(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::NotScalar)));
    }

    #[test]
    fn domain_errors() {
        let mut tape = Tape::new();
        let neg = t(&[1], &[-1.0]);
        assert!(matches!(tape.sqrt(&neg), Err(Error::DomainError(_))));
        let zero = t(&[2], &[1.0, 0.0]);
        let one = t(&[2], &[1.0, 1.0]);
        assert!(matches!(tape.div(&one, &zero), Err(Error::DomainError(_))));
        assert!(matches!(tape.ln(&zero), Err(Error::DomainError(_))));
        let big = t(&[1], &[800.0]);
        assert!(matches!(tape.exp(&big), Err(Error::DomainError(_))));
    }

    #[test]
    fn shape_mismatch_rejected_but_scalar_broadcast_allowed() {
        let mut tape = Tape::new();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(tape.add(&a, &b), Err(Error::ShapeMismatch(_))));
        let k = Tensor::scalar(10.0);
        let r = tape.add(&a, &k).unwrap();
        assert_eq!(r.data(), &[11.0, 12.0]);
        let r = tape.sub(&k, &a).unwrap();
        assert_eq!(r.data(), &[9.0, 8.0]);
    }

    #[test]
    fn scalar_broadcast_backward_sums() {
        let mut tape = Tape::new();
        let a = tape.watch(&t(&[3], &[1.0, 2.0, 3.0]));
        let k = tape.watch(&Tensor::scalar(2.0));
        let prod = tape.mul(&a, &k).unwrap();
        let s = tape.sum_all(&prod).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&k).unwrap(), &[6.0]);
        assert_eq!(grads.get(&a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn invalid_axis_rejected() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(tape.softmax(&x, &[2]), Err(Error::InvalidAxis(_))));
        assert!(matches!(tape.sum(&x, &[]), Err(Error::InvalidAxis(_))));
        assert!(matches!(tape.softmax(&x, &[0, 0]), Err(Error::InvalidAxis(_))));
    }

    #[test]
    fn identity_conv_is_exact_identity() {
        let mut tape = Tape::new();
        let x = t(&[1, 2, 3, 3], &(0..18).map(|i| i as f64 * 0.37 - 2.0).collect::<Vec<_>>());
        let mut w = vec![0.0; 2 * 2];
        w[0] = 1.0; // w[0,0,0,0]
        w[3] = 1.0; // w[1,1,0,0]
        let w = t(&[2, 2, 1, 1], &w);
        let b = t(&[2], &[0.0, 0.0]);
        let y = tape.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_shape_checks() {
        let mut tape = Tape::new();
        let x = t(&[1, 2, 4, 4], &[0.0; 32]);
        let w = t(&[1, 3, 3, 3], &[0.0; 27]);
        let b = t(&[1], &[0.0]);
        assert!(matches!(tape.conv2d(&x, &w, &b, 1, 1), Err(Error::ShapeMismatch(_))));
        let w5 = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(tape.conv2d(&x, &w5, &b, 1, 2), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn select_and_stack_roundtrip() {
        let mut tape = Tape::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r0 = tape.select(&x, 0, 0).unwrap();
        let r1 = tape.select(&x, 0, 1).unwrap();
        assert_eq!(r0.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(r1.data(), &[4.0, 5.0, 6.0]);
        let back = tape.stack(&[r0, r1]).unwrap();
        assert_eq!(back.data(), x.data());
        let c1 = tape.select(&x, 1, 2).unwrap();
        assert_eq!(c1.data(), &[3.0, 6.0]);
    }

    #[test]
    fn slice_and_pad_windows() {
        let mut tape = Tape::new();
        let x = t(&[1, 4, 4], &(0..16).map(|i| i as f64).collect::<Vec<_>>());
        let win = tape.slice_window(&x, 1, 2, 2, 2).unwrap();
        assert_eq!(win.shape(), &[1, 2, 2]);
        assert_eq!(win.data(), &[6.0, 7.0, 10.0, 11.0]);
        let padded = tape.pad_window(&win, 1, 2, 4, 4).unwrap();
        assert_eq!(padded.shape(), &[1, 4, 4]);
        assert_eq!(padded.data()[6], 6.0);
        assert_eq!(padded.data()[11], 11.0);
        assert_eq!(padded.data()[0], 0.0);
    }

    #[test]
    fn expand_inverse_of_sum() {
        let mut tape = Tape::new();
        let v = t(&[2], &[3.0, 4.0]);
        let e = tape.expand(&v, &[0, 2], &[2, 3]).unwrap();
        assert_eq!(e.shape(), &[2, 2, 3]);
        // every [i, c, j] equals v[c]
        for i in 0..2 {
            for c in 0..2 {
                for j in 0..3 {
                    assert_eq!(e.data()[(i * 2 + c) * 3 + j], v.data()[c]);
                }
            }
        }
        let s = tape.sum(&e, &[0, 2]).unwrap();
        assert_eq!(s.data(), &[18.0, 24.0]);
    }

    #[test]
    fn masked_softmax_zeroes_unsupported() {
        let mut tape = Tape::new();
        let x = t(&[4], &[10.0, 0.0, 0.0, 10.0]);
        let support = t(&[4], &[0.0, 1.0, 1.0, 0.0]);
        let s = tape.masked_softmax(&x, &support, &[0]).unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert_eq!(s.data()[3], 0.0);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
        assert!((s.data()[2] - 0.5).abs() < 1e-15);

        let empty = t(&[4], &[0.0; 4]);
        assert!(matches!(
            tape.masked_softmax(&x, &empty, &[0]),
            Err(Error::DomainError(_))
        ));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || -> Vec<u8> {
            let mut tape = Tape::new();
            let data: Vec<f64> = (0..24).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
            let x = tape.watch(&t(&[2, 3, 4], &data));
            let sm = tape.softmax(&x, &[1, 2]).unwrap();
            let sq = tape.square(&sm).unwrap();
            let s = tape.sum_all(&sq).unwrap();
            let grads = tape.backward(&s).unwrap();
            grads
                .get(&x)
                .unwrap()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cross_tape_use_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.watch(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(t2.relu(&x), Err(Error::TapeMismatch)));
    }
}
