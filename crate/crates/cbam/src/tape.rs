//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation is a method on [`GradTape`]. The tape records each result
//! as a node; [`GradTape::backward`] replays the record in reverse and returns
//! the gradient of a scalar loss with respect to every node. Tensors passed in
//! without a node identity are registered as constants-slash-leaves on first
//! use, so the same forward code serves both inference and training.
//!
//! A tape is confined to one thread. Parallelism happens across independent
//! tapes sharing immutable parameter tensors.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a node on a specific tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeRef {
    tape: u64,
    index: usize,
}

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    BroadcastMul { a: usize, b: usize },
    BroadcastAdd { a: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Linear { x: usize, w: usize },
    Conv2d { input: usize, kernel: usize, bias: usize, padding: usize },
    AvgPoolSpatial { x: usize },
    MaxPoolSpatial { x: usize, argmax: Vec<usize> },
    ChannelAvgPool { x: usize },
    ChannelMaxPool { x: usize, argmax: Vec<usize> },
    ConcatChannel { a: usize, b: usize },
    Reshape { x: usize },
    Subsample2 { x: usize },
    SumAll { x: usize },
    Scale { x: usize, factor: f64 },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
}

pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
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

    /// Register a tensor as a leaf of this tape and return the tracked handle.
    ///
    /// Gradients are only addressable through handles carrying a node
    /// identity, so parameters must be registered before the forward pass.
    /// A tensor already tracked on this tape is returned unchanged.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if let Some(node) = t.node() {
            if node.tape == self.id {
                return t.clone();
            }
        }
        let index = self.push(t.detached(), Op::Leaf);
        self.nodes[index].value.clone()
    }

    /// Resolve an operation input to a node index, registering untracked
    /// tensors as leaves. A node from a different tape is an error.
    fn track(&mut self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(node) if node.tape == self.id => Ok(node.index),
            Some(_) => Err(Error::NodeNotOnTape),
            None => Ok(self.push(t.detached(), Op::Leaf)),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> usize {
        let index = self.nodes.len();
        let value = value.with_node(NodeRef {
            tape: self.id,
            index,
        });
        self.nodes.push(Node { value, op });
        index
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Tensor {
        let value = Tensor::from_vec(shape, data).expect("op produced a valid shape");
        value.debug_check_finite(name);
        let index = self.push(value, op);
        self.nodes[index].value.clone()
    }

    fn value(&self, index: usize) -> &Tensor {
        &self.nodes[index].value
    }

    // ── Elementwise and broadcast ops ───────────────────────────────────

    /// Elementwise product with per-axis broadcasting. Ranks must match and
    /// each axis pair must be equal or have a 1 on either side.
    pub fn broadcast_mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ia = self.track(a)?;
        let ib = self.track(b)?;
        let out_shape = broadcast_shape("broadcast_mul", a.shape(), b.shape())?;
        let data = broadcast_zip(a, b, &out_shape, |x, y| x * y);
        Ok(self.emit(out_shape, data, Op::BroadcastMul { a: ia, b: ib }, "broadcast_mul"))
    }

    /// Elementwise sum with the same broadcasting rules as [`broadcast_mul`].
    ///
    /// [`broadcast_mul`]: GradTape::broadcast_mul
    pub fn broadcast_add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ia = self.track(a)?;
        let ib = self.track(b)?;
        let out_shape = broadcast_shape("broadcast_add", a.shape(), b.shape())?;
        let data = broadcast_zip(a, b, &out_shape, |x, y| x + y);
        Ok(self.emit(out_shape, data, Op::BroadcastAdd { a: ia, b: ib }, "broadcast_add"))
    }

    /// max(0, x). The derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.track(x)?;
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        Ok(self.emit(x.shape().to_vec(), data, Op::Relu { x: ix }, "relu"))
    }

    /// Logistic sigmoid, evaluated in the numerically stable two-branch form.
    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.track(x)?;
        let data = x.data().iter().map(|&v| stable_sigmoid(v)).collect();
        Ok(self.emit(x.shape().to_vec(), data, Op::Sigmoid { x: ix }, "sigmoid"))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let ix = self.track(x)?;
        let data = x.data().iter().map(|&v| v * factor).collect();
        Ok(self.emit(x.shape().to_vec(), data, Op::Scale { x: ix, factor }, "scale"))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Matrix product over the trailing axis: `out[..., o] = Σ_i x[..., i] w[o, i]`.
    /// The weight is `Cout x Cin`; no bias term.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let ix = self.track(x)?;
        let iw = self.track(w)?;
        let (c_out, c_in) = match w.shape() {
            &[o, i] => (o, i),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    detail: format!("weight must be rank-2 Cout x Cin, got {other:?}"),
                })
            }
        };
        let x_in = *x.shape().last().expect("tensors have rank >= 1");
        if x_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!(
                    "input trailing extent {x_in} does not match weight Cin {c_in}"
                ),
            });
        }
        let rows = x.len() / c_in;
        let xd = x.data();
        let wd = w.data();
        let mut data = vec![0.0; rows * c_out];
        for r in 0..rows {
            let xrow = &xd[r * c_in..(r + 1) * c_in];
            let orow = &mut data[r * c_out..(r + 1) * c_out];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &wd[o * c_in..(o + 1) * c_in];
                let mut acc = 0.0;
                for i in 0..c_in {
                    acc += xrow[i] * wrow[i];
                }
                *slot = acc;
            }
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = c_out;
        Ok(self.emit(out_shape, data, Op::Linear { x: ix, w: iw }, "linear"))
    }

    /// Zero-padded cross-correlation by direct summation.
    ///
    /// `input` is `N x Cin x H x W`, `kernel` is `Cout x Cin x k x k` with odd
    /// `k`, `bias` has one value per output channel. Output spatial extents
    /// are `H + 2 padding - k + 1`; with `padding = (k-1)/2` they equal the
    /// input's.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        padding: usize,
    ) -> Result<Tensor> {
        let ii = self.track(input)?;
        let ik = self.track(kernel)?;
        let ib = self.track(bias)?;
        let (n_b, c_in, h, w) = input.dims4()?;
        let (c_out, kc_in, kh, kw) = kernel.dims4()?;
        if kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be square, got {kh}x{kw}"),
            });
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(Error::InvalidKernel { k });
        }
        if kc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {c_in} channels, kernel expects {kc_in}"),
            });
        }
        if bias.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias must have shape [{c_out}], got {:?}", bias.shape()),
            });
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {k} exceeds padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        let h_out = h + 2 * padding - k + 1;
        let w_out = w + 2 * padding - k + 1;
        let xd = input.data();
        let kd = kernel.data();
        let bd = bias.data();
        let mut data = vec![0.0; n_b * c_out * h_out * w_out];

        for n in 0..n_b {
            for oc in 0..c_out {
                let out_base = (n * c_out + oc) * h_out * w_out;
                data[out_base..out_base + h_out * w_out].fill(bd[oc]);
                for ic in 0..c_in {
                    let in_base = (n * c_in + ic) * h * w;
                    let k_base = (oc * c_in + ic) * k * k;
                    for dh in 0..k {
                        // input row ih = oh + dh - padding must be in [0, h)
                        let oh_lo = padding.saturating_sub(dh);
                        let oh_hi = (h + padding).saturating_sub(dh).min(h_out);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + dh - padding;
                            let in_row = &xd[in_base + ih * w..in_base + (ih + 1) * w];
                            let out_row =
                                &mut data[out_base + oh * w_out..out_base + (oh + 1) * w_out];
                            for dw in 0..k {
                                let kv = kd[k_base + dh * k + dw];
                                let ow_lo = padding.saturating_sub(dw);
                                let ow_hi = (w + padding).saturating_sub(dw).min(w_out);
                                for ow in ow_lo..ow_hi {
                                    out_row[ow] += kv * in_row[ow + dw - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.emit(
            vec![n_b, c_out, h_out, w_out],
            data,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                bias: ib,
                padding,
            },
            "conv2d",
        ))
    }

    // ── Pooling reductions ──────────────────────────────────────────────

    /// Mean over the spatial axes: `N x C x H x W -> N x C x 1 x 1`.
    pub fn global_avg_pool_spatial(&mut self, f: &Tensor) -> Result<Tensor> {
        let ix = self.track(f)?;
        let (n_b, c, h, w) = f.dims4()?;
        let hw = (h * w) as f64;
        let fd = f.data();
        let mut data = vec![0.0; n_b * c];
        for (g, slot) in data.iter_mut().enumerate() {
            let base = g * h * w;
            *slot = fd[base..base + h * w].iter().sum::<f64>() / hw;
        }
        Ok(self.emit(vec![n_b, c, 1, 1], data, Op::AvgPoolSpatial { x: ix }, "global_avg_pool_spatial"))
    }

    /// Max over the spatial axes. Ties and the gradient route to the first
    /// maximal position in row-major order.
    pub fn global_max_pool_spatial(&mut self, f: &Tensor) -> Result<Tensor> {
        let ix = self.track(f)?;
        let (n_b, c, h, w) = f.dims4()?;
        let fd = f.data();
        let mut data = vec![0.0; n_b * c];
        let mut argmax = vec![0usize; n_b * c];
        for g in 0..n_b * c {
            let base = g * h * w;
            let mut best = fd[base];
            let mut best_at = base;
            for off in base + 1..base + h * w {
                if fd[off] > best {
                    best = fd[off];
                    best_at = off;
                }
            }
            data[g] = best;
            argmax[g] = best_at;
        }
        Ok(self.emit(vec![n_b, c, 1, 1], data, Op::MaxPoolSpatial { x: ix, argmax }, "global_max_pool_spatial"))
    }

    /// Per-pixel mean across the channel axis: `N x C x H x W -> N x 1 x H x W`.
    pub fn channel_avg_pool(&mut self, f: &Tensor) -> Result<Tensor> {
        let ix = self.track(f)?;
        let (n_b, c, h, w) = f.dims4()?;
        let hw = h * w;
        let fd = f.data();
        let mut data = vec![0.0; n_b * hw];
        for n in 0..n_b {
            let out_base = n * hw;
            let in_base = n * c * hw;
            for ch in 0..c {
                let ch_base = in_base + ch * hw;
                for p in 0..hw {
                    data[out_base + p] += fd[ch_base + p];
                }
            }
            for p in 0..hw {
                data[out_base + p] /= c as f64;
            }
        }
        Ok(self.emit(vec![n_b, 1, h, w], data, Op::ChannelAvgPool { x: ix }, "channel_avg_pool"))
    }

    /// Per-pixel max across the channel axis, first-channel tie-break.
    pub fn channel_max_pool(&mut self, f: &Tensor) -> Result<Tensor> {
        let ix = self.track(f)?;
        let (n_b, c, h, w) = f.dims4()?;
        let hw = h * w;
        let fd = f.data();
        let mut data = vec![0.0; n_b * hw];
        let mut argmax = vec![0usize; n_b * hw];
        for n in 0..n_b {
            let out_base = n * hw;
            let in_base = n * c * hw;
            for p in 0..hw {
                let mut best = fd[in_base + p];
                let mut best_at = in_base + p;
                for ch in 1..c {
                    let off = in_base + ch * hw + p;
                    if fd[off] > best {
                        best = fd[off];
                        best_at = off;
                    }
                }
                data[out_base + p] = best;
                argmax[out_base + p] = best_at;
            }
        }
        Ok(self.emit(vec![n_b, 1, h, w], data, Op::ChannelMaxPool { x: ix, argmax }, "channel_max_pool"))
    }

    /// Stack two feature maps along the channel axis.
    pub fn concat_channel(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ia = self.track(a)?;
        let ib = self.track(b)?;
        let (n_a, c_a, h_a, w_a) = a.dims4()?;
        let (n_b, c_b, h_b, w_b) = b.dims4()?;
        if (n_a, h_a, w_a) != (n_b, h_b, w_b) {
            return Err(Error::ShapeMismatch {
                op: "concat_channel",
                detail: format!("batch/spatial extents differ: {:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let hw = h_a * w_a;
        let ad = a.data();
        let bd = b.data();
        let mut data = vec![0.0; n_a * (c_a + c_b) * hw];
        for n in 0..n_a {
            let out_base = n * (c_a + c_b) * hw;
            data[out_base..out_base + c_a * hw]
                .copy_from_slice(&ad[n * c_a * hw..(n + 1) * c_a * hw]);
            data[out_base + c_a * hw..out_base + (c_a + c_b) * hw]
                .copy_from_slice(&bd[n * c_b * hw..(n + 1) * c_b * hw]);
        }
        Ok(self.emit(vec![n_a, c_a + c_b, h_a, w_a], data, Op::ConcatChannel { a: ia, b: ib }, "concat_channel"))
    }

    // ── Shape plumbing ──────────────────────────────────────────────────

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let ix = self.track(x)?;
        let count: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || count != x.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", x.shape()),
            });
        }
        let data = x.to_vec();
        Ok(self.emit(shape.to_vec(), data, Op::Reshape { x: ix }, "reshape"))
    }

    /// Keep every second row and column (spatial decimation by 2).
    /// Composing a same-padding conv with this is a stride-2 convolution.
    pub fn subsample2(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.track(x)?;
        let (n_b, c, h, w) = x.dims4()?;
        let h_out = h.div_ceil(2);
        let w_out = w.div_ceil(2);
        let xd = x.data();
        let mut data = vec![0.0; n_b * c * h_out * w_out];
        for g in 0..n_b * c {
            let in_base = g * h * w;
            let out_base = g * h_out * w_out;
            for oh in 0..h_out {
                for ow in 0..w_out {
                    data[out_base + oh * w_out + ow] = xd[in_base + (2 * oh) * w + 2 * ow];
                }
            }
        }
        Ok(self.emit(vec![n_b, c, h_out, w_out], data, Op::Subsample2 { x: ix }, "subsample2"))
    }

    // ── Reductions and losses ───────────────────────────────────────────

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.track(x)?;
        let total: f64 = x.data().iter().sum();
        Ok(self.emit(vec![1], vec![total], Op::SumAll { x: ix }, "sum_all"))
    }

    /// Mean softmax cross-entropy over a batch of logits (`N x K`) against
    /// class labels. Evaluated in log-space so finite logits give a finite
    /// loss.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let il = self.track(logits)?;
        let (n_b, k) = match logits.shape() {
            &[n, k] => (n, k),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    detail: format!("logits must be rank-2 N x K, got {other:?}"),
                })
            }
        };
        if labels.len() != n_b {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{n_b} logit rows but {} labels", labels.len()),
            });
        }
        let ld = logits.data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes: k,
                });
            }
            let row = &ld[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let loss = total / n_b as f64;
        Ok(self.emit(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
            },
            "softmax_cross_entropy",
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Gradient of a scalar loss with respect to every node on the tape.
    /// Nodes the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_node = loss.node().ok_or(Error::NodeNotOnTape)?;
        if loss_node.tape != self.id || loss_node.index >= self.nodes.len() {
            return Err(Error::NodeNotOnTape);
        }
        if loss.len() != 1 {
            return Err(Error::NotScalar { elems: loss.len() });
        }

        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        let mut touched = vec![false; self.nodes.len()];
        grads[loss_node.index][0] = 1.0;
        touched[loss_node.index] = true;

        for i in (0..=loss_node.index).rev() {
            if !touched[i] {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = &upper[0];
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::BroadcastMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let out_shape = self.value_shape(i);
                    backprop_broadcast_mul(g, av, bv, out_shape, &mut lower[*a], &mut lower[*b]);
                    touched[*a] = true;
                    touched[*b] = true;
                }
                Op::BroadcastAdd { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let out_shape = self.value_shape(i);
                    backprop_broadcast_add(g, av.shape(), bv.shape(), out_shape, &mut lower[*a], &mut lower[*b]);
                    touched[*a] = true;
                    touched[*b] = true;
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let gx = &mut lower[*x];
                    for (j, &xj) in xv.iter().enumerate() {
                        if xj > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                    touched[*x] = true;
                }
                Op::Sigmoid { x } => {
                    let yv = self.nodes[i].value.data();
                    let gx = &mut lower[*x];
                    for (j, &yj) in yv.iter().enumerate() {
                        gx[j] += g[j] * yj * (1.0 - yj);
                    }
                    touched[*x] = true;
                }
                Op::Scale { x, factor } => {
                    let gx = &mut lower[*x];
                    for (j, gj) in g.iter().enumerate() {
                        gx[j] += gj * factor;
                    }
                    touched[*x] = true;
                }
                Op::Linear { x, w } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let c_out = wv.shape()[0];
                    let c_in = wv.shape()[1];
                    let rows = xv.len() / c_in;
                    let xd = xv.data();
                    let wd = wv.data();
                    // Both inputs may alias (x == w is legal); split carefully.
                    backprop_linear(g, xd, wd, rows, c_in, c_out, lower, *x, *w);
                    touched[*x] = true;
                    touched[*w] = true;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    padding,
                } => {
                    let xv = self.value(*input);
                    let kv = self.value(*kernel);
                    backprop_conv2d(g, xv, kv, *padding, lower, *input, *kernel, *bias);
                    touched[*input] = true;
                    touched[*kernel] = true;
                    touched[*bias] = true;
                }
                Op::AvgPoolSpatial { x } => {
                    let (_, _, h, w) = self.value(*x).dims4().expect("recorded NCHW");
                    let hw = h * w;
                    let inv = 1.0 / hw as f64;
                    let gx = &mut lower[*x];
                    for (grp, gj) in g.iter().enumerate() {
                        let base = grp * hw;
                        let add = gj * inv;
                        for slot in &mut gx[base..base + hw] {
                            *slot += add;
                        }
                    }
                    touched[*x] = true;
                }
                Op::MaxPoolSpatial { x, argmax } | Op::ChannelMaxPool { x, argmax } => {
                    let gx = &mut lower[*x];
                    for (grp, gj) in g.iter().enumerate() {
                        gx[argmax[grp]] += gj;
                    }
                    touched[*x] = true;
                }
                Op::ChannelAvgPool { x } => {
                    let (n_b, c, h, w) = self.value(*x).dims4().expect("recorded NCHW");
                    let hw = h * w;
                    let inv = 1.0 / c as f64;
                    let gx = &mut lower[*x];
                    for n in 0..n_b {
                        for ch in 0..c {
                            let in_base = (n * c + ch) * hw;
                            let out_base = n * hw;
                            for p in 0..hw {
                                gx[in_base + p] += g[out_base + p] * inv;
                            }
                        }
                    }
                    touched[*x] = true;
                }
                Op::ConcatChannel { a, b } => {
                    let (n_b, c_a, h, w) = self.value(*a).dims4().expect("recorded NCHW");
                    let c_b = self.value(*b).shape()[1];
                    let hw = h * w;
                    // a and b are distinct buffers even if equal-valued; indices may match.
                    for n in 0..n_b {
                        let out_base = n * (c_a + c_b) * hw;
                        {
                            let ga = &mut lower[*a];
                            let dst = &mut ga[n * c_a * hw..(n + 1) * c_a * hw];
                            for (j, slot) in dst.iter_mut().enumerate() {
                                *slot += g[out_base + j];
                            }
                        }
                        {
                            let gb = &mut lower[*b];
                            let dst = &mut gb[n * c_b * hw..(n + 1) * c_b * hw];
                            for (j, slot) in dst.iter_mut().enumerate() {
                                *slot += g[out_base + c_a * hw + j];
                            }
                        }
                    }
                    touched[*a] = true;
                    touched[*b] = true;
                }
                Op::Reshape { x } => {
                    let gx = &mut lower[*x];
                    for (j, gj) in g.iter().enumerate() {
                        gx[j] += gj;
                    }
                    touched[*x] = true;
                }
                Op::Subsample2 { x } => {
                    let (n_b, c, h, w) = self.value(*x).dims4().expect("recorded NCHW");
                    let h_out = h.div_ceil(2);
                    let w_out = w.div_ceil(2);
                    let gx = &mut lower[*x];
                    for grp in 0..n_b * c {
                        let in_base = grp * h * w;
                        let out_base = grp * h_out * w_out;
                        for oh in 0..h_out {
                            for ow in 0..w_out {
                                gx[in_base + (2 * oh) * w + 2 * ow] +=
                                    g[out_base + oh * w_out + ow];
                            }
                        }
                    }
                    touched[*x] = true;
                }
                Op::SumAll { x } => {
                    let gx = &mut lower[*x];
                    let gj = g[0];
                    for slot in gx.iter_mut() {
                        *slot += gj;
                    }
                    touched[*x] = true;
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lv = self.value(*logits);
                    let k = lv.shape()[1];
                    let n_b = labels.len();
                    let ld = lv.data();
                    let gl = &mut lower[*logits];
                    let gj = g[0] / n_b as f64;
                    for (row, &y) in labels.iter().enumerate() {
                        let base = row * k;
                        let logit_row = &ld[base..base + k];
                        let max = logit_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = logit_row.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..k {
                            let p = (logit_row[j] - max).exp() / denom;
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            gl[base + j] += gj * (p - indicator);
                        }
                    }
                    touched[*logits] = true;
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, data)| {
                Tensor::from_vec(self.nodes[i].value.shape().to_vec(), data)
                    .expect("gradient shape equals forward shape")
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn value_shape(&self, index: usize) -> &[usize] {
        self.nodes[index].value.shape()
    }
}

/// Gradients of one backward pass, addressable by tracked tensor handles.
pub struct Gradients {
    tape: u64,
    grads: Vec<Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`. The tensor must carry a node
    /// identity from the tape that produced these gradients.
    pub fn wrt(&self, t: &Tensor) -> Result<&Tensor> {
        match t.node() {
            Some(node) if node.tape == self.tape && node.index < self.grads.len() => {
                Ok(&self.grads[node.index])
            }
            _ => Err(Error::NodeNotOnTape),
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("rank mismatch: {a:?} vs {b:?}"),
        });
    }
    a.iter()
        .zip(b.iter())
        .map(|(&ea, &eb)| {
            if ea == eb || ea == 1 || eb == 1 {
                Ok(ea.max(eb))
            } else {
                Err(Error::ShapeMismatch {
                    op,
                    detail: format!("axis extents incompatible: {a:?} vs {b:?}"),
                })
            }
        })
        .collect()
}

/// Effective row-major strides with 0 on broadcast (extent-1) axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == 1 && out_shape[ax] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[ax];
    }
    strides
}

/// Walk every output index of `out_shape`, calling `f(out_flat, a_flat, b_flat)`.
fn broadcast_walk(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for out_flat in 0..total {
        f(out_flat, off_a, off_b);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= sa[ax] * out_shape[ax];
            off_b -= sb[ax] * out_shape[ax];
        }
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let total: usize = out_shape.iter().product();
    let mut data = vec![0.0; total];
    let ad = a.data();
    let bd = b.data();
    broadcast_walk(a.shape(), b.shape(), out_shape, |o, ia, ib| {
        data[o] = f(ad[ia], bd[ib]);
    });
    data
}

fn backprop_broadcast_mul(
    g: &[f64],
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    ga: &mut [f64],
    gb: &mut [f64],
) {
    let ad = a.data();
    let bd = b.data();
    broadcast_walk(a.shape(), b.shape(), out_shape, |o, ia, ib| {
        ga[ia] += g[o] * bd[ib];
        gb[ib] += g[o] * ad[ia];
    });
}

fn backprop_broadcast_add(
    g: &[f64],
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    ga: &mut [f64],
    gb: &mut [f64],
) {
    broadcast_walk(a_shape, b_shape, out_shape, |o, ia, ib| {
        ga[ia] += g[o];
        gb[ib] += g[o];
    });
}

#[allow(clippy::too_many_arguments)]
fn backprop_linear(
    g: &[f64],
    xd: &[f64],
    wd: &[f64],
    rows: usize,
    c_in: usize,
    c_out: usize,
    lower: &mut [Vec<f64>],
    x_idx: usize,
    w_idx: usize,
) {
    // dX[r,i] += Σ_o G[r,o] W[o,i];  dW[o,i] += Σ_r G[r,o] X[r,i]
    let mut dx = vec![0.0; rows * c_in];
    let mut dw = vec![0.0; c_out * c_in];
    for r in 0..rows {
        let grow = &g[r * c_out..(r + 1) * c_out];
        let xrow = &xd[r * c_in..(r + 1) * c_in];
        let dxrow = &mut dx[r * c_in..(r + 1) * c_in];
        for o in 0..c_out {
            let go = grow[o];
            if go == 0.0 {
                continue;
            }
            let wrow = &wd[o * c_in..(o + 1) * c_in];
            let dwrow = &mut dw[o * c_in..(o + 1) * c_in];
            for i in 0..c_in {
                dxrow[i] += go * wrow[i];
                dwrow[i] += go * xrow[i];
            }
        }
    }
    for (j, v) in dx.into_iter().enumerate() {
        lower[x_idx][j] += v;
    }
    for (j, v) in dw.into_iter().enumerate() {
        lower[w_idx][j] += v;
    }
}

#[allow(clippy::too_many_arguments)]
fn backprop_conv2d(
    g: &[f64],
    input: &Tensor,
    kernel: &Tensor,
    padding: usize,
    lower: &mut [Vec<f64>],
    x_idx: usize,
    k_idx: usize,
    b_idx: usize,
) {
    let (n_b, c_in, h, w) = input.dims4().expect("recorded NCHW");
    let (c_out, _, k, _) = kernel.dims4().expect("recorded kernel");
    let h_out = h + 2 * padding - k + 1;
    let w_out = w + 2 * padding - k + 1;
    let xd = input.data();
    let kd = kernel.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; c_out];

    for n in 0..n_b {
        for oc in 0..c_out {
            let out_base = (n * c_out + oc) * h_out * w_out;
            let gslice = &g[out_base..out_base + h_out * w_out];
            db[oc] += gslice.iter().sum::<f64>();
            for ic in 0..c_in {
                let in_base = (n * c_in + ic) * h * w;
                let k_base = (oc * c_in + ic) * k * k;
                for dh in 0..k {
                    let oh_lo = padding.saturating_sub(dh);
                    let oh_hi = (h + padding).saturating_sub(dh).min(h_out);
                    for oh in oh_lo..oh_hi {
                        let ih = oh + dh - padding;
                        let grow = &gslice[oh * w_out..(oh + 1) * w_out];
                        for dw_ in 0..k {
                            let kv = kd[k_base + dh * k + dw_];
                            let ow_lo = padding.saturating_sub(dw_);
                            let ow_hi = (w + padding).saturating_sub(dw_).min(w_out);
                            let mut dk_acc = 0.0;
                            for ow in ow_lo..ow_hi {
                                let go = grow[ow];
                                if go == 0.0 {
                                    continue;
                                }
                                let in_off = in_base + ih * w + ow + dw_ - padding;
                                dx[in_off] += go * kv;
                                dk_acc += go * xd[in_off];
                            }
                            dk[k_base + dh * k + dw_] += dk_acc;
                        }
                    }
                }
            }
        }
    }
    for (j, v) in dx.into_iter().enumerate() {
        lower[x_idx][j] += v;
    }
    for (j, v) in dk.into_iter().enumerate() {
        lower[k_idx][j] += v;
    }
    for (j, v) in db.into_iter().enumerate() {
        lower[b_idx][j] += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, relative_error, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    // Brute-force conv oracle: per output element, accumulate bias then every
    // in-bounds product in (ic, kh, kw) order. Mirrors the zero-padding
    // semantics without materializing the pad.
    fn conv2d_oracle(x: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Tensor {
        let (n_b, c_in, h, w) = x.dims4().unwrap();
        let (c_out, _, k, _) = kernel.dims4().unwrap();
        let h_out = h + 2 * padding - k + 1;
        let w_out = w + 2 * padding - k + 1;
        let mut out = vec![0.0; n_b * c_out * h_out * w_out];
        for n in 0..n_b {
            for oc in 0..c_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = bias.data()[oc];
                        for ic in 0..c_in {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = oh + kh;
                                    let iw = ow + kw;
                                    if ih < padding || iw < padding {
                                        continue;
                                    }
                                    let (ih, iw) = (ih - padding, iw - padding);
                                    if ih >= h || iw >= w {
                                        continue;
                                    }
                                    acc += x.at4(n, ic, ih, iw) * kernel.at4(oc, ic, kh, kw);
                                }
                            }
                        }
                        out[((n * c_out + oc) * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
        }
        t(&[n_b, c_out, h_out, w_out], out)
    }

    #[test]
    fn broadcast_mul_constant_gate() {
        let mut tape = GradTape::new();
        let gate = Tensor::full(&[3, 1, 1], 0.5);
        let f = Tensor::full(&[3, 2, 2], 4.0);
        let out = tape.broadcast_mul(&gate, &f).unwrap();
        assert_eq!(out.shape(), &[3, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn broadcast_mul_ones_is_identity() {
        let mut tape = GradTape::new();
        let a = Tensor::ones(&[2, 2]);
        let out = tape.broadcast_mul(&a, &a).unwrap();
        assert!(out.bits_eq(&Tensor::ones(&[2, 2]).detached()) || out.data() == Tensor::ones(&[2, 2]).data());
    }

    #[test]
    fn broadcast_mul_scalar_times_matrix() {
        let mut tape = GradTape::new();
        let a = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 1, 1], vec![2.0]);
        let out = tape.broadcast_mul(&a, &b).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn broadcast_mul_rejects_incompatible_axes() {
        let mut tape = GradTape::new();
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[2, 2]);
        match tape.broadcast_mul(&a, &b) {
            Err(Error::ShapeMismatch { .. }) => {}
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn broadcast_mul_matches_materialized_oracle_on_small_shapes() {
        // Every rank-3 shape pair with extents in {1,2,3} that broadcasts.
        let extents = [1usize, 2, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &a0 in &extents {
            for &a1 in &extents {
                for &a2 in &extents {
                    for &b0 in &extents {
                        for &b1 in &extents {
                            for &b2 in &extents {
                                let sa = [a0, a1, a2];
                                let sb = [b0, b1, b2];
                                let compatible = sa
                                    .iter()
                                    .zip(sb.iter())
                                    .all(|(&x, &y)| x == y || x == 1 || y == 1);
                                if !compatible {
                                    continue;
                                }
                                let a = Tensor::rand_uniform(&sa, -2.0, 2.0, &mut rng);
                                let b = Tensor::rand_uniform(&sb, -2.0, 2.0, &mut rng);
                                let mut tape = GradTape::new();
                                let got = tape.broadcast_mul(&a, &b).unwrap();
                                // Materialize both operands to the output shape, then multiply.
                                let os: Vec<usize> =
                                    sa.iter().zip(sb.iter()).map(|(&x, &y)| x.max(y)).collect();
                                let mut want = vec![0.0; os.iter().product()];
                                for i0 in 0..os[0] {
                                    for i1 in 0..os[1] {
                                        for i2 in 0..os[2] {
                                            let pick = |t: &Tensor, s: &[usize; 3]| {
                                                let j0 = if s[0] == 1 { 0 } else { i0 };
                                                let j1 = if s[1] == 1 { 0 } else { i1 };
                                                let j2 = if s[2] == 1 { 0 } else { i2 };
                                                t.data()[(j0 * s[1] + j1) * s[2] + j2]
                                            };
                                            want[(i0 * os[1] + i1) * os[2] + i2] =
                                                pick(&a, &sa) * pick(&b, &sb);
                                        }
                                    }
                                }
                                assert_eq!(got.shape(), os.as_slice());
                                assert_eq!(got.data(), want.as_slice(), "{sa:?} x {sb:?}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = GradTape::new();
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = t(&[1, 1, 1, 1], vec![1.0]);
        let b = Tensor::zeros(&[1]);
        let out = tape.conv2d(&x, &k, &b, 0).unwrap();
        assert!(out.data() == x.data());
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv2d_ones_box_kernel_same_padding() {
        let mut tape = GradTape::new();
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let out = tape.conv2d(&x, &k, &b, 1).unwrap();
        assert_eq!(out.at4(0, 0, 1, 1), 9.0);
        assert_eq!(out.at4(0, 0, 0, 1), 6.0);
        assert_eq!(out.at4(0, 0, 1, 0), 6.0);
        assert_eq!(out.at4(0, 0, 0, 0), 4.0);
        assert_eq!(out.at4(0, 0, 2, 2), 4.0);
    }

    #[test]
    fn conv2d_zero_kernel_yields_bias() {
        let mut tape = GradTape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut rng);
        let k = Tensor::zeros(&[2, 3, 3, 3]);
        let b = t(&[2], vec![0.7, -1.1]);
        let out = tape.conv2d(&x, &k, &b, 1).unwrap();
        for n in 0..2 {
            for oc in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        assert_eq!(out.at4(n, oc, h, w), b.data()[oc]);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_rejects_even_kernel_and_channel_mismatch() {
        let mut tape = GradTape::new();
        let x = Tensor::ones(&[1, 2, 4, 4]);
        match tape.conv2d(&x, &Tensor::ones(&[1, 2, 2, 2]), &Tensor::zeros(&[1]), 0) {
            Err(Error::InvalidKernel { k: 2 }) => {}
            other => panic!("expected InvalidKernel, got {other:?}"),
        }
        match tape.conv2d(&x, &Tensor::ones(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1) {
            Err(Error::ShapeMismatch { .. }) => {}
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn conv2d_matches_brute_force_oracle_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, c_in, h, w) in &[(1, 1, 3, 3), (2, 3, 8, 8), (1, 2, 5, 7), (2, 1, 1, 1)] {
            for &k in &[1usize, 3, 7] {
                for &c_out in &[1usize, 2] {
                    for padding in [0, (k - 1) / 2, k - 1] {
                        if h + 2 * padding < k || w + 2 * padding < k {
                            continue;
                        }
                        let x = Tensor::rand_uniform(&[n, c_in, h, w], -2.0, 2.0, &mut rng);
                        let kern =
                            Tensor::rand_uniform(&[c_out, c_in, k, k], -1.0, 1.0, &mut rng);
                        let b = Tensor::rand_uniform(&[c_out], -1.0, 1.0, &mut rng);
                        let mut tape = GradTape::new();
                        let got = tape.conv2d(&x, &kern, &b, padding).unwrap();
                        let want = conv2d_oracle(&x, &kern, &b, padding);
                        assert!(
                            got.bits_eq(&want),
                            "conv mismatch at n={n} cin={c_in} h={h} w={w} k={k} pad={padding}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_same_padding_preserves_extents() {
        for &k in &[1usize, 3, 5, 7] {
            for h in 1..=16usize {
                for w in 1..=16usize {
                    let mut tape = GradTape::new();
                    let x = Tensor::ones(&[1, 1, h, w]);
                    let kern = Tensor::ones(&[1, 1, k, k]);
                    let out = tape
                        .conv2d(&x, &kern, &Tensor::zeros(&[1]), (k - 1) / 2)
                        .unwrap();
                    assert_eq!(out.shape(), &[1, 1, h, w], "k={k} h={h} w={w}");
                }
            }
        }
    }

    #[test]
    fn spatial_pools_match_examples() {
        let mut tape = GradTape::new();
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.global_avg_pool_spatial(&x).unwrap().data(), &[2.5]);
        assert_eq!(tape.global_max_pool_spatial(&x).unwrap().data(), &[4.0]);

        let c = Tensor::full(&[2, 3, 2, 2], -0.3);
        let avg = tape.global_avg_pool_spatial(&c).unwrap();
        let max = tape.global_max_pool_spatial(&c).unwrap();
        assert!(avg.bits_eq(&max.detached()) || avg.data() == max.data());

        let neg = t(&[1, 1, 2, 2], vec![-1.0, -5.0, -3.0, -2.0]);
        assert_eq!(tape.global_max_pool_spatial(&neg).unwrap().data(), &[-1.0]);

        let z = Tensor::zeros(&[1, 2, 3, 3]);
        assert_eq!(tape.global_avg_pool_spatial(&z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn channel_pools_match_examples() {
        let mut tape = GradTape::new();
        let x = t(&[1, 2, 1, 1], vec![2.0, 4.0]);
        assert_eq!(tape.channel_avg_pool(&x).unwrap().data(), &[3.0]);
        assert_eq!(tape.channel_max_pool(&x).unwrap().data(), &[4.0]);

        let single = t(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]);
        assert_eq!(tape.channel_avg_pool(&single).unwrap().data(), single.data());
        assert_eq!(tape.channel_max_pool(&single).unwrap().data(), single.data());

        let z = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(tape.channel_avg_pool(&z).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(tape.channel_max_pool(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pools_match_naive_reduction_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, c, h, w) in &[(1usize, 1usize, 1usize, 1usize), (2, 3, 8, 8), (1, 4, 3, 5)] {
            let x = Tensor::rand_uniform(&[n, c, h, w], -2.0, 2.0, &mut rng);
            let mut tape = GradTape::new();
            let ga = tape.global_avg_pool_spatial(&x).unwrap();
            let gm = tape.global_max_pool_spatial(&x).unwrap();
            let ca = tape.channel_avg_pool(&x).unwrap();
            let cm = tape.channel_max_pool(&x).unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let mut sum = 0.0;
                    let mut best = f64::NEG_INFINITY;
                    for hi in 0..h {
                        for wi in 0..w {
                            sum += x.at4(ni, ci, hi, wi);
                            best = best.max(x.at4(ni, ci, hi, wi));
                        }
                    }
                    assert_eq!(ga.at4(ni, ci, 0, 0).to_bits(), (sum / (h * w) as f64).to_bits());
                    assert_eq!(gm.at4(ni, ci, 0, 0), best);
                }
            }
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let mut sum = 0.0;
                        let mut best = f64::NEG_INFINITY;
                        for ci in 0..c {
                            sum += x.at4(ni, ci, hi, wi);
                            best = best.max(x.at4(ni, ci, hi, wi));
                        }
                        assert_eq!(
                            ca.at4(ni, 0, hi, wi).to_bits(),
                            (sum / c as f64).to_bits()
                        );
                        assert_eq!(cm.at4(ni, 0, hi, wi), best);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_channel_round_trip_and_error() {
        let mut tape = GradTape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::rand_uniform(&[1, 1, 2, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[1, 1, 2, 2], -1.0, 1.0, &mut rng);
        let cat = tape.concat_channel(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[1, 2, 2, 2]);
        assert_eq!(&cat.data()[..4], a.data());
        assert_eq!(&cat.data()[4..], b.data());

        let bad = Tensor::ones(&[1, 1, 3, 3]);
        match tape.concat_channel(&a, &bad) {
            Err(Error::ShapeMismatch { .. }) => {}
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn concat_with_zeros_then_channel_avg_halves() {
        let mut tape = GradTape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::rand_uniform(&[2, 1, 3, 3], -2.0, 2.0, &mut rng);
        let z = Tensor::zeros(&[2, 1, 3, 3]);
        let cat = tape.concat_channel(&x, &z).unwrap();
        let avg = tape.channel_avg_pool(&cat).unwrap();
        for (got, want) in avg.data().iter().zip(x.data()) {
            assert!((got - want / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_matches_examples() {
        let mut tape = GradTape::new();
        let x = t(&[2], vec![1.0, 2.0]);
        let eye = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(tape.linear(&x, &eye).unwrap().data(), x.data());

        let w = t(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]);
        assert_eq!(tape.linear(&x, &w).unwrap().data(), &[3.0, 2.0]);

        let z = Tensor::zeros(&[3, 2]);
        assert!(tape.linear(&z, &w).unwrap().data().iter().all(|&v| v == 0.0));

        match tape.linear(&t(&[3], vec![1.0, 2.0, 3.0]), &w) {
            Err(Error::ShapeMismatch { .. }) => {}
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn activations_match_examples() {
        let mut tape = GradTape::new();
        let x = t(&[3], vec![-3.0, 0.0, 3.0]);
        assert_eq!(tape.relu(&x).unwrap().data(), &[0.0, 0.0, 3.0]);
        assert_eq!(tape.sigmoid(&Tensor::zeros(&[1])).unwrap().data(), &[0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..32 {
            let v: f64 = rng.gen_range(-8.0..8.0);
            let s = tape.sigmoid(&Tensor::scalar(v)).unwrap().data()[0];
            let s_neg = tape.sigmoid(&Tensor::scalar(-v)).unwrap().data()[0];
            assert!((s + s_neg - 1.0).abs() < 1e-12);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = GradTape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap());
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.wrt(&x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_x() {
        let mut tape = GradTape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let sq = tape.broadcast_mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for (g, xv) in grads.wrt(&x).unwrap().data().iter().zip(x.data()) {
            assert!((g - 2.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut tape = GradTape::new();
        let x = tape.leaf(&Tensor::ones(&[2]));
        match tape.backward(&x) {
            Err(Error::NotScalar { elems: 2 }) => {}
            other => panic!("expected NotScalar, got {other:?}"),
        }
        match tape.backward(&Tensor::scalar(1.0)) {
            Err(Error::NodeNotOnTape) => {}
            other => panic!("expected NodeNotOnTape, got {other:?}"),
        }
    }

    #[test]
    fn ops_reject_nodes_from_another_tape() {
        let mut tape_a = GradTape::new();
        let mut tape_b = GradTape::new();
        let x = tape_a.leaf(&Tensor::ones(&[2]));
        match tape_b.relu(&x) {
            Err(Error::NodeNotOnTape) => {}
            other => panic!("expected NodeNotOnTape, got {other:?}"),
        }
    }

    #[test]
    fn unused_nodes_get_zero_gradients() {
        let mut tape = GradTape::new();
        let used = tape.leaf(&Tensor::ones(&[2]));
        let unused = tape.leaf(&Tensor::ones(&[3]));
        let loss = tape.sum_all(&used).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gu = grads.wrt(&unused).unwrap();
        assert_eq!(gu.shape(), &[3]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_gradient_has_one_nonzero_per_group_equal_to_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = Tensor::rand_uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut rng);
        let weights = Tensor::rand_uniform(&[2, 3, 1, 1], -1.0, 1.0, &mut rng);
        let mut tape = GradTape::new();
        let x = tape.leaf(&x0);
        let pooled = tape.global_max_pool_spatial(&x).unwrap();
        let weighted = tape.broadcast_mul(&pooled, &weights).unwrap();
        let loss = tape.sum_all(&weighted).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.wrt(&x).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut nonzero = Vec::new();
                for h in 0..4 {
                    for w in 0..4 {
                        let v = gx.at4(n, c, h, w);
                        if v != 0.0 {
                            nonzero.push(v);
                        }
                    }
                }
                assert_eq!(nonzero.len(), 1, "group n={n} c={c}");
                let upstream = weights.at4(n, c, 0, 0);
                assert!((nonzero[0] - upstream).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x0 = Tensor::rand_uniform(&[1, 2, 4, 4], -2.0, 2.0, &mut rng);
        let k0 = Tensor::randn(&[2, 2, 3, 3], 0.1, &mut rng);
        let b0 = Tensor::randn(&[2], 0.1, &mut rng);
        let dir = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);

        let forward = |x: &Tensor, k: &Tensor, b: &Tensor| -> f64 {
            let mut tape = GradTape::new();
            let y = tape.conv2d(x, k, b, 1).unwrap();
            let w = tape.broadcast_mul(&y, &dir).unwrap();
            tape.sum_all(&w).unwrap().item().unwrap()
        };

        let mut tape = GradTape::new();
        let x = tape.leaf(&x0);
        let k = tape.leaf(&k0);
        let b = tape.leaf(&b0);
        let y = tape.conv2d(&x, &k, &b, 1).unwrap();
        let w = tape.broadcast_mul(&y, &dir).unwrap();
        let loss = tape.sum_all(&w).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let num_x = finite_diff_grad(|v| forward(v, &k0, &b0), &x0, DEFAULT_EPS);
        let num_k = finite_diff_grad(|v| forward(&x0, v, &b0), &k0, DEFAULT_EPS);
        let num_b = finite_diff_grad(|v| forward(&x0, &k0, v), &b0, DEFAULT_EPS);
        assert!(relative_error(grads.wrt(&x).unwrap(), &num_x) < 1e-6);
        assert!(relative_error(grads.wrt(&k).unwrap(), &num_k) < 1e-6);
        assert!(relative_error(grads.wrt(&b).unwrap(), &num_b) < 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_matches_hand_values() {
        let mut tape = GradTape::new();
        // Uniform logits: loss = ln K.
        let logits = Tensor::zeros(&[2, 4]);
        let loss = tape.softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss.item().unwrap() - 4.0f64.ln()).abs() < 1e-12);

        match tape.softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]) {
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 }) => {}
            other => panic!("expected LabelOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits0 = Tensor::rand_uniform(&[3, 5], -2.0, 2.0, &mut rng);
        let labels = vec![1usize, 4, 0];
        let mut tape = GradTape::new();
        let logits = tape.leaf(&logits0);
        let loss = tape.softmax_cross_entropy(&logits, &labels).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let num = finite_diff_grad(
            |v| {
                let mut tape = GradTape::new();
                tape.softmax_cross_entropy(v, &labels).unwrap().item().unwrap()
            },
            &logits0,
            DEFAULT_EPS,
        );
        assert!(relative_error(grads.wrt(&logits).unwrap(), &num) < 1e-7);
    }

    #[test]
    fn subsample2_takes_even_positions() {
        let mut tape = GradTape::new();
        let x = t(&[1, 1, 3, 4], (0..12).map(f64::from).collect());
        let out = tape.subsample2(&x).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn reshape_preserves_data_and_rejects_bad_count() {
        let mut tape = GradTape::new();
        let x = t(&[2, 3], (0..6).map(f64::from).collect());
        let out = tape.reshape(&x, &[6]).unwrap();
        assert_eq!(out.data(), x.data());
        assert!(tape.reshape(&x, &[4]).is_err());
    }
}
