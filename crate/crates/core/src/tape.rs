//! Reverse-mode automatic differentiation on a single-threaded tape.
//!
//! Operations are methods on [`Tape`]; they compute the forward value
//! eagerly and record what backward needs. Nodes are created in topological
//! order, so [`Tape::backward`] is a single reverse sweep. A tensor that was
//! never registered with [`Tape::var`] (and is not derived from one) acts as
//! a constant: ops on constants alone are not recorded.
//!
//! Accumulation order inside every op is a fixed loop nest; two identical
//! forward/backward passes produce bit-identical results.

use std::sync::Arc;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Dims equal on both operands.
    Elementwise,
    /// Second operand is a per-channel vector `[C]` applied over `[C, ...]`.
    ChannelVec,
}

#[derive(Clone, Debug)]
enum OpKind<T> {
    Leaf,
    Add(Broadcast),
    Hadamard(Broadcast),
    Scale(T),
    ConcatChannels { parts: Vec<usize> },
    SliceChannels { start: usize },
    Conv2d { stride: usize, pad: usize },
    BilinearResize,
    GlobalAvgPool,
    Sigmoid,
    Tanh,
    Relu,
    Fc,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<T> },
    SmoothL1,
    Sum,
    Reshape,
    Transpose2d,
    GatherRows { indices: Vec<usize> },
}

struct Node<T> {
    op: OpKind<T>,
    /// Inputs with their node id when tracked; the value is always saved
    /// (cheap: buffers are shared) because backward may need it.
    inputs: Vec<(Option<NodeId>, Tensor<T>)>,
    out_dims: Vec<usize>,
    out_data: Arc<Vec<T>>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, keyed by node id.
pub struct GradientMap<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradientMap<T> {
    /// Gradient of the loss w.r.t. the node with this id.
    pub fn by_node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a tracked tensor (None for constants or untouched nodes).
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        t.node().and_then(|id| self.by_node(id))
    }
}

/// Operation recorder for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), done: false }
    }

    /// Number of recorded nodes.
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Clear all records so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.done = false;
    }

    /// Register a leaf whose gradient should be computed.
    pub fn var(&mut self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.nodes.len();
        let out = Tensor::tracked(t.dims().to_vec(), t.buffer(), id, true);
        self.nodes.push(Node {
            op: OpKind::Leaf,
            inputs: Vec::new(),
            out_dims: t.dims().to_vec(),
            out_data: t.buffer(),
            requires_grad: true,
        });
        out
    }

    fn push(
        &mut self,
        op: OpKind<T>,
        inputs: Vec<(Option<NodeId>, Tensor<T>)>,
        dims: Vec<usize>,
        data: Vec<T>,
    ) -> Tensor<T> {
        let tracked = inputs.iter().any(|(id, _)| id.is_some());
        let buf = Arc::new(data);
        if !tracked {
            // Pure constant computation: do not grow the tape.
            return Tensor::untracked(dims, buf);
        }
        let id = self.nodes.len();
        let out = Tensor::tracked(dims.clone(), Arc::clone(&buf), id, false);
        self.nodes.push(Node { op, inputs, out_dims: dims, out_data: buf, requires_grad: false });
        out
    }

    fn input_ref(&self, t: &Tensor<T>) -> (Option<NodeId>, Tensor<T>) {
        (t.node().filter(|&id| id < self.nodes.len()), t.clone())
    }

    // ───────────────────────── elementwise / broadcast ─────────────────────

    fn broadcast_of(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
        if a.dims() == b.dims() {
            return Ok(Broadcast::Elementwise);
        }
        if b.rank() == 1 && a.rank() >= 2 && a.dims()[0] == b.dims()[0] {
            return Ok(Broadcast::ChannelVec);
        }
        shape_err(format!(
            "operands {:?} and {:?} are neither equal-dims nor channel-broadcastable",
            a.dims(),
            b.dims()
        ))
    }

    /// Elementwise sum; `b` may be a per-channel vector over `a = [C, ...]`.
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let bcast = Self::broadcast_of(a, b)?;
        let out = match bcast {
            Broadcast::Elementwise => {
                a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect()
            }
            Broadcast::ChannelVec => {
                let c = b.numel();
                let plane = a.numel() / c;
                let mut out = Vec::with_capacity(a.numel());
                for (ci, &bv) in b.data().iter().enumerate().take(c) {
                    out.extend(a.data()[ci * plane..(ci + 1) * plane].iter().map(|&x| x + bv));
                }
                out
            }
        };
        let inputs = vec![self.input_ref(a), self.input_ref(b)];
        Ok(self.push(OpKind::Add(bcast), inputs, a.dims().to_vec(), out))
    }

    /// Hadamard (elementwise) product; `b` may be a per-channel vector.
    pub fn hadamard(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let bcast = Self::broadcast_of(a, b)?;
        let out = match bcast {
            Broadcast::Elementwise => {
                a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect()
            }
            Broadcast::ChannelVec => {
                let c = b.numel();
                let plane = a.numel() / c;
                let mut out = Vec::with_capacity(a.numel());
                for (ci, &bv) in b.data().iter().enumerate().take(c) {
                    out.extend(a.data()[ci * plane..(ci + 1) * plane].iter().map(|&x| x * bv));
                }
                out
            }
        };
        let inputs = vec![self.input_ref(a), self.input_ref(b)];
        Ok(self.push(OpKind::Hadamard(bcast), inputs, a.dims().to_vec(), out))
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, a: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
        let out = a.data().iter().map(|&x| x * factor).collect();
        let inputs = vec![self.input_ref(a)];
        Ok(self.push(OpKind::Scale(factor), inputs, a.dims().to_vec(), out))
    }

    // ───────────────────────── concat / slice ──────────────────────────────

    /// Concatenate along dim 0 (channels for `[C,H,W]` maps); trailing dims
    /// must match.
    pub fn concat_channels(&mut self, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return arg_err("concat_channels on empty list");
        }
        let tail = &xs[0].dims()[1..];
        for x in xs {
            if x.rank() != xs[0].rank() || &x.dims()[1..] != tail {
                return shape_err(format!(
                    "concat_channels trailing dims differ: {:?} vs {:?}",
                    xs[0].dims(),
                    x.dims()
                ));
            }
        }
        let parts: Vec<usize> = xs.iter().map(|x| x.dims()[0]).collect();
        let c_out: usize = parts.iter().sum();
        let mut dims = xs[0].dims().to_vec();
        dims[0] = c_out;
        let mut out = Vec::with_capacity(dims.iter().product());
        for x in xs {
            out.extend_from_slice(x.data());
        }
        let inputs = xs.iter().map(|x| self.input_ref(x)).collect();
        Ok(self.push(OpKind::ConcatChannels { parts }, inputs, dims, out))
    }

    /// Take `len` consecutive dim-0 slabs starting at `start`.
    pub fn slice_channels(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        if len == 0 {
            return arg_err("slice_channels with zero length");
        }
        let c = x.dims()[0];
        if start + len > c {
            return shape_err(format!(
                "slice_channels [{start}, {}) out of range for {c} channels",
                start + len
            ));
        }
        let plane: usize = x.dims()[1..].iter().product();
        let mut dims = x.dims().to_vec();
        dims[0] = len;
        let out = x.data()[start * plane..(start + len) * plane].to_vec();
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(OpKind::SliceChannels { start }, inputs, dims, out))
    }

    // ───────────────────────── convolution ─────────────────────────────────

    /// 2-D convolution: `x=[inC,H,W]`, `w=[outC,inC,kh,kw]`, `b=[outC]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
            return shape_err(format!(
                "conv2d ranks: x {:?}, w {:?}, b {:?}",
                x.dims(),
                w.dims(),
                b.dims()
            ));
        }
        let (ci, h, iw) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (co, wci, kh, kw) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
        if wci != ci {
            return shape_err(format!("conv2d channels: x has {ci}, w expects {wci}"));
        }
        if b.dims()[0] != co {
            return shape_err(format!("conv2d bias length {} != out channels {co}", b.dims()[0]));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return arg_err(format!("conv2d kernel must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return arg_err("conv2d stride must be >= 1");
        }
        if h + 2 * pad < kh || iw + 2 * pad < kw {
            return shape_err(format!(
                "conv2d non-positive output for input {h}x{iw}, kernel {kh}x{kw}, pad {pad}"
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (iw + 2 * pad - kw) / stride + 1;

        let out = conv2d_forward(
            x.data(), w.data(), b.data(), ci, h, iw, co, kh, kw, stride, pad, oh, ow,
        );
        let inputs = vec![self.input_ref(x), self.input_ref(w), self.input_ref(b)];
        Ok(self.push(OpKind::Conv2d { stride, pad }, inputs, vec![co, oh, ow], out))
    }

    // ───────────────────────── resize / pooling ────────────────────────────

    /// Bilinear resize with half-pixel centers and border clamping.
    pub fn bilinear_resize(&mut self, x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        if x.rank() != 3 {
            return shape_err(format!("bilinear_resize expects [C,H,W], got {:?}", x.dims()));
        }
        if out_h == 0 || out_w == 0 {
            return arg_err("bilinear_resize target size must be >= 1");
        }
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let ys = interp_axis(h, out_h);
        let xs = interp_axis(w, out_w);
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ci in 0..c {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            let oplane = &mut out[ci * out_h * out_w..(ci + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let wy1 = T::from_f64_lossy(fy);
                let wy0 = T::one() - wy1;
                let row0 = &plane[y0 * w..y0 * w + w];
                let row1 = &plane[y1 * w..y1 * w + w];
                let orow = &mut oplane[oy * out_w..(oy + 1) * out_w];
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let wx1 = T::from_f64_lossy(fx);
                    let wx0 = T::one() - wx1;
                    orow[ox] = wy0 * wx0 * row0[x0]
                        + wy0 * wx1 * row0[x1]
                        + wy1 * wx0 * row1[x0]
                        + wy1 * wx1 * row1[x1];
                }
            }
        }
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(OpKind::BilinearResize, inputs, vec![c, out_h, out_w], out))
    }

    /// Spatial mean per channel: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 3 {
            return shape_err(format!("global_avg_pool expects [C,H,W], got {:?}", x.dims()));
        }
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let inv = T::from_f64_lossy(1.0 / (h * w) as f64);
        let mut out = Vec::with_capacity(c);
        for ci in 0..c {
            let mut acc = T::zero();
            for v in &x.data()[ci * h * w..(ci + 1) * h * w] {
                acc += *v;
            }
            out.push(acc * inv);
        }
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(OpKind::GlobalAvgPool, inputs, vec![c], out))
    }

    // ───────────────────────── activations ─────────────────────────────────

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| sigmoid_stable(v)).collect();
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(OpKind::Sigmoid, inputs, x.dims().to_vec(), out))
    }

    pub fn tanh(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| v.tanh()).collect();
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(OpKind::Tanh, inputs, x.dims().to_vec(), out))
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(OpKind::Relu, inputs, x.dims().to_vec(), out))
    }

    // ───────────────────────── linear algebra ──────────────────────────────

    /// Affine map on a vector: `y = w x + b`, `x=[in]`, `w=[out,in]`, `b=[out]`.
    pub fn fc(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 1 || w.rank() != 2 || b.rank() != 1 {
            return shape_err(format!(
                "fc ranks: x {:?}, w {:?}, b {:?}",
                x.dims(),
                w.dims(),
                b.dims()
            ));
        }
        let (o, i) = (w.dims()[0], w.dims()[1]);
        if x.numel() != i || b.numel() != o {
            return shape_err(format!(
                "fc dims: x {:?} vs w {:?} vs b {:?}",
                x.dims(),
                w.dims(),
                b.dims()
            ));
        }
        let xd = x.data();
        let wd = w.data();
        let mut out = Vec::with_capacity(o);
        for r in 0..o {
            let mut acc = b.data()[r];
            let row = &wd[r * i..(r + 1) * i];
            for (wv, xv) in row.iter().zip(xd) {
                acc += *wv * *xv;
            }
            out.push(acc);
        }
        let inputs = vec![self.input_ref(x), self.input_ref(w), self.input_ref(b)];
        Ok(self.push(OpKind::Fc, inputs, vec![o], out))
    }

    /// Matrix transpose `[r,c] -> [c,r]`.
    pub fn transpose2d(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 {
            return shape_err(format!("transpose2d expects rank 2, got {:?}", x.dims()));
        }
        let (r, c) = (x.dims()[0], x.dims()[1]);
        let xd = x.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(OpKind::Transpose2d, inputs, vec![c, r], out))
    }

    /// Same buffer, new dims (element count preserved).
    pub fn reshape(&mut self, x: &Tensor<T>, dims: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        if numel != x.numel() || dims.is_empty() {
            return shape_err(format!("reshape {:?} -> {:?}", x.dims(), dims));
        }
        let out = x.data().to_vec();
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(OpKind::Reshape, inputs, dims, out))
    }

    /// Select rows of a `[N,C]` matrix; duplicate indices allowed.
    pub fn gather_rows(&mut self, x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
        if x.rank() != 2 {
            return shape_err(format!("gather_rows expects rank 2, got {:?}", x.dims()));
        }
        if indices.is_empty() {
            return arg_err("gather_rows with empty index list");
        }
        let (n, c) = (x.dims()[0], x.dims()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return arg_err(format!("gather_rows index {bad} out of range for {n} rows"));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(
            OpKind::GatherRows { indices: indices.to_vec() },
            inputs,
            vec![indices.len(), c],
            out,
        ))
    }

    // ───────────────────────── reductions / losses ─────────────────────────

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for v in x.data() {
            acc += *v;
        }
        let inputs = vec![self.input_ref(x)];
        Ok(self.push(OpKind::Sum, inputs, vec![1], vec![acc]))
    }

    /// Mean softmax cross-entropy over rows of `logits=[N,C]`.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        if logits.rank() != 2 {
            return shape_err(format!("softmax_cross_entropy expects [N,C], got {:?}", logits.dims()));
        }
        let (n, c) = (logits.dims()[0], logits.dims()[1]);
        if labels.len() != n {
            return arg_err(format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return arg_err(format!("label {bad} out of range for {c} classes"));
        }
        let ld = logits.data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for r in 0..n {
            let row = &ld[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * c + j] = e;
                denom += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / denom;
            }
            let lse = m + denom.ln();
            total += lse - row[labels[r]];
        }
        let loss = total * T::from_f64_lossy(1.0 / n as f64);
        let inputs = vec![self.input_ref(logits)];
        Ok(self.push(
            OpKind::SoftmaxCrossEntropy { labels: labels.to_vec(), probs },
            inputs,
            vec![1],
            vec![loss],
        ))
    }

    /// Mean smooth-L1 (quadratic below 1, linear above) over all elements.
    pub fn smooth_l1(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        if pred.dims() != target.dims() {
            return shape_err(format!(
                "smooth_l1 dims: pred {:?} vs target {:?}",
                pred.dims(),
                target.dims()
            ));
        }
        let half = T::from_f64_lossy(0.5);
        let mut total = T::zero();
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            let d = p - t;
            let a = d.abs();
            total += if a < T::one() { half * d * d } else { a - half };
        }
        let loss = total * T::from_f64_lossy(1.0 / pred.numel() as f64);
        let inputs = vec![self.input_ref(pred), self.input_ref(target)];
        Ok(self.push(OpKind::SmoothL1, inputs, vec![1], vec![loss]))
    }

    // ───────────────────────── backward ────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients are populated for every
    /// tracked leaf (zero where the loss does not depend on it). The tape is
    /// consumed: call [`Tape::reset`] before recording again.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<GradientMap<T>> {
        if self.done {
            return Err(Error::Tape("backward already ran on this tape; reset first".into()));
        }
        if loss.numel() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got dims {:?}", loss.dims())));
        }
        let root = match loss.node() {
            Some(id) if id < self.nodes.len() => id,
            _ => return Err(Error::Tape("loss tensor is detached from this tape".into())),
        };
        self.done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        for (id, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[id];
            match g {
                Some(buf) => out.push(Some(
                    Tensor::from_vec(node.out_dims.clone(), buf).expect("grad dims match node"),
                )),
                None => {
                    if node.requires_grad {
                        out.push(Some(Tensor::zeros(node.out_dims.clone())));
                    } else {
                        out.push(None);
                    }
                }
            }
        }
        Ok(GradientMap { grads: out })
    }

    fn propagate(&self, id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Split borrows: grads of inputs always have id < this node's id.
        let node = &self.nodes[id];
        let needs: Vec<bool> = node.inputs.iter().map(|(nid, _)| nid.is_some()).collect();
        let send = |slot: usize, buf: Vec<T>, grads: &mut [Option<Vec<T>>]| {
            if let (Some(nid), _) = node.inputs[slot] {
                match &mut grads[nid] {
                    Some(acc) => add_into(acc, &buf),
                    dst @ None => *dst = Some(buf),
                }
            }
        };

        match &node.op {
            OpKind::Leaf => {}

            OpKind::Add(bcast) => {
                let a = &node.inputs[0].1;
                let b = &node.inputs[1].1;
                if needs[0] {
                    send(0, g.to_vec(), grads);
                }
                if needs[1] {
                    match bcast {
                        Broadcast::Elementwise => send(1, g.to_vec(), grads),
                        Broadcast::ChannelVec => {
                            let c = b.numel();
                            let plane = a.numel() / c;
                            let mut db = vec![T::zero(); c];
                            for (ci, d) in db.iter_mut().enumerate() {
                                for &gv in &g[ci * plane..(ci + 1) * plane] {
                                    *d += gv;
                                }
                            }
                            send(1, db, grads);
                        }
                    }
                }
            }

            OpKind::Hadamard(bcast) => {
                let a = &node.inputs[0].1;
                let b = &node.inputs[1].1;
                match bcast {
                    Broadcast::Elementwise => {
                        if needs[0] {
                            let da = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
                            send(0, da, grads);
                        }
                        if needs[1] {
                            let db = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                            send(1, db, grads);
                        }
                    }
                    Broadcast::ChannelVec => {
                        let c = b.numel();
                        let plane = a.numel() / c;
                        if needs[0] {
                            let mut da = vec![T::zero(); a.numel()];
                            for (ci, &bv) in b.data().iter().enumerate() {
                                for (d, &gv) in
                                    da[ci * plane..(ci + 1) * plane].iter_mut().zip(&g[ci * plane..])
                                {
                                    *d = gv * bv;
                                }
                            }
                            send(0, da, grads);
                        }
                        if needs[1] {
                            let ad = a.data();
                            let mut db = vec![T::zero(); c];
                            for (ci, d) in db.iter_mut().enumerate() {
                                for (&gv, &av) in
                                    g[ci * plane..(ci + 1) * plane].iter().zip(&ad[ci * plane..])
                                {
                                    *d += gv * av;
                                }
                            }
                            send(1, db, grads);
                        }
                    }
                }
            }

            OpKind::Scale(f) => {
                if needs[0] {
                    send(0, g.iter().map(|&gv| gv * *f).collect(), grads);
                }
            }

            OpKind::ConcatChannels { parts } => {
                let plane: usize = node.out_dims[1..].iter().product();
                let mut offset = 0usize;
                for (slot, &c) in parts.iter().enumerate() {
                    let len = c * plane;
                    if needs[slot] {
                        send(slot, g[offset..offset + len].to_vec(), grads);
                    }
                    offset += len;
                }
            }

            OpKind::SliceChannels { start } => {
                if needs[0] {
                    let x = &node.inputs[0].1;
                    let plane: usize = x.dims()[1..].iter().product();
                    let mut dx = vec![T::zero(); x.numel()];
                    dx[start * plane..start * plane + g.len()].copy_from_slice(g);
                    send(0, dx, grads);
                }
            }

            OpKind::Conv2d { stride, pad } => {
                let x = &node.inputs[0].1;
                let w = &node.inputs[1].1;
                let (ci, h, iw) = (x.dims()[0], x.dims()[1], x.dims()[2]);
                let (co, kh, kw) = (w.dims()[0], w.dims()[2], w.dims()[3]);
                let (oh, ow) = (node.out_dims[1], node.out_dims[2]);
                if needs[0] {
                    let dx = conv2d_backward_input(
                        g, w.data(), ci, h, iw, co, kh, kw, *stride, *pad, oh, ow,
                    );
                    send(0, dx, grads);
                }
                if needs[1] {
                    let dw = conv2d_backward_weight(
                        g, x.data(), ci, h, iw, co, kh, kw, *stride, *pad, oh, ow,
                    );
                    send(1, dw, grads);
                }
                if needs[2] {
                    let mut db = vec![T::zero(); co];
                    for (oc, d) in db.iter_mut().enumerate() {
                        for &gv in &g[oc * oh * ow..(oc + 1) * oh * ow] {
                            *d += gv;
                        }
                    }
                    send(2, db, grads);
                }
            }

            OpKind::BilinearResize => {
                if needs[0] {
                    let x = &node.inputs[0].1;
                    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
                    let (oh, ow) = (node.out_dims[1], node.out_dims[2]);
                    let ys = interp_axis(h, oh);
                    let xs = interp_axis(w, ow);
                    let mut dx = vec![T::zero(); x.numel()];
                    for ci in 0..c {
                        let gplane = &g[ci * oh * ow..(ci + 1) * oh * ow];
                        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            let wy1 = T::from_f64_lossy(fy);
                            let wy0 = T::one() - wy1;
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let wx1 = T::from_f64_lossy(fx);
                                let wx0 = T::one() - wx1;
                                let gv = gplane[oy * ow + ox];
                                dplane[y0 * w + x0] += wy0 * wx0 * gv;
                                dplane[y0 * w + x1] += wy0 * wx1 * gv;
                                dplane[y1 * w + x0] += wy1 * wx0 * gv;
                                dplane[y1 * w + x1] += wy1 * wx1 * gv;
                            }
                        }
                    }
                    send(0, dx, grads);
                }
            }

            OpKind::GlobalAvgPool => {
                if needs[0] {
                    let x = &node.inputs[0].1;
                    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
                    let inv = T::from_f64_lossy(1.0 / (h * w) as f64);
                    let mut dx = vec![T::zero(); x.numel()];
                    for ci in 0..c {
                        let gv = g[ci] * inv;
                        for d in &mut dx[ci * h * w..(ci + 1) * h * w] {
                            *d = gv;
                        }
                    }
                    send(0, dx, grads);
                }
            }

            OpKind::Sigmoid => {
                if needs[0] {
                    let y = &node.out_data;
                    let dx = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    send(0, dx, grads);
                }
            }

            OpKind::Tanh => {
                if needs[0] {
                    let y = &node.out_data;
                    let dx = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect();
                    send(0, dx, grads);
                }
            }

            OpKind::Relu => {
                if needs[0] {
                    let x = &node.inputs[0].1;
                    let dx = g
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    send(0, dx, grads);
                }
            }

            OpKind::Fc => {
                let x = &node.inputs[0].1;
                let w = &node.inputs[1].1;
                let (o, i) = (w.dims()[0], w.dims()[1]);
                if needs[0] {
                    let wd = w.data();
                    let mut dx = vec![T::zero(); i];
                    for (r, &gv) in g.iter().enumerate().take(o) {
                        for (d, &wv) in dx.iter_mut().zip(&wd[r * i..(r + 1) * i]) {
                            *d += gv * wv;
                        }
                    }
                    send(0, dx, grads);
                }
                if needs[1] {
                    let xd = x.data();
                    let mut dw = vec![T::zero(); o * i];
                    for (r, &gv) in g.iter().enumerate().take(o) {
                        for (d, &xv) in dw[r * i..(r + 1) * i].iter_mut().zip(xd) {
                            *d = gv * xv;
                        }
                    }
                    send(1, dw, grads);
                }
                if needs[2] {
                    send(2, g.to_vec(), grads);
                }
            }

            OpKind::SoftmaxCrossEntropy { labels, probs } => {
                if needs[0] {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0] * T::from_f64_lossy(1.0 / n as f64);
                    let mut dl = Vec::with_capacity(n * c);
                    for (r, &lab) in labels.iter().enumerate() {
                        for (j, &p) in probs[r * c..(r + 1) * c].iter().enumerate() {
                            let t = if j == lab { T::one() } else { T::zero() };
                            dl.push(scale * (p - t));
                        }
                    }
                    send(0, dl, grads);
                }
            }

            OpKind::SmoothL1 => {
                let p = &node.inputs[0].1;
                let t = &node.inputs[1].1;
                let inv = T::from_f64_lossy(1.0 / p.numel() as f64);
                let scale = g[0] * inv;
                let slope: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&pv, &tv)| {
                        let d = pv - tv;
                        if d.abs() < T::one() {
                            d
                        } else if d > T::zero() {
                            T::one()
                        } else {
                            -T::one()
                        }
                    })
                    .collect();
                if needs[0] {
                    send(0, slope.iter().map(|&s| s * scale).collect(), grads);
                }
                if needs[1] {
                    send(1, slope.iter().map(|&s| -s * scale).collect(), grads);
                }
            }

            OpKind::Sum => {
                if needs[0] {
                    let x = &node.inputs[0].1;
                    send(0, vec![g[0]; x.numel()], grads);
                }
            }

            OpKind::Reshape => {
                if needs[0] {
                    send(0, g.to_vec(), grads);
                }
            }

            OpKind::Transpose2d => {
                if needs[0] {
                    let x = &node.inputs[0].1;
                    let (r, c) = (x.dims()[0], x.dims()[1]);
                    let mut dx = vec![T::zero(); r * c];
                    for j in 0..c {
                        for i in 0..r {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    send(0, dx, grads);
                }
            }

            OpKind::GatherRows { indices } => {
                if needs[0] {
                    let x = &node.inputs[0].1;
                    let c = x.dims()[1];
                    let mut dx = vec![T::zero(); x.numel()];
                    for (row, &i) in indices.iter().enumerate() {
                        for (d, &gv) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[row * c..(row + 1) * c]) {
                            *d += gv;
                        }
                    }
                    send(0, dx, grads);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn sigmoid_stable<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Per-output-pixel source pair and fraction for one axis, half-pixel
/// convention with border clamping.
fn interp_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Valid output index range `[lo, hi)` such that `o*stride + k0` stays in
/// `[0, n_in)`.
fn out_range(n_out: usize, n_in: usize, stride: usize, k0: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if k0 >= 0 { 0 } else { (-k0 + s - 1) / s };
    let hi = (n_in as isize - 1 - k0).div_euclid(s);
    if hi < lo {
        return (0, 0);
    }
    let lo = lo.max(0) as usize;
    let hi = (hi as usize).min(n_out.saturating_sub(1));
    if hi < lo {
        (0, 0)
    } else {
        (lo, hi + 1)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    ci: usize,
    h: usize,
    iw: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); co * oh * ow];
    for oc in 0..co {
        out[oc * oh * ow..(oc + 1) * oh * ow].fill(b[oc]);
    }
    for oc in 0..co {
        let oplane = oc * oh * ow;
        for ic in 0..ci {
            let xplane = &x[ic * h * iw..(ic + 1) * h * iw];
            for ky in 0..kh {
                let iy0 = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = out_range(oh, h, stride, iy0);
                for kx in 0..kw {
                    let wv = w[((oc * ci + ic) * kh + ky) * kw + kx];
                    let ix0 = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = out_range(ow, iw, stride, ix0);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * stride) as isize + iy0;
                        let xrow = &xplane[iy as usize * iw..iy as usize * iw + iw];
                        let orow = &mut out[oplane + oy * ow..oplane + (oy + 1) * ow];
                        if stride == 1 {
                            let src = &xrow[(ox_lo as isize + ix0) as usize
                                ..(ox_hi as isize - 1 + ix0) as usize + 1];
                            for (d, &s) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * stride) as isize + ix0;
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input<T: Scalar>(
    g: &[T],
    w: &[T],
    ci: usize,
    h: usize,
    iw: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); ci * h * iw];
    for oc in 0..co {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let dplane = &mut dx[ic * h * iw..(ic + 1) * h * iw];
            for ky in 0..kh {
                let iy0 = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = out_range(oh, h, stride, iy0);
                for kx in 0..kw {
                    let wv = w[((oc * ci + ic) * kh + ky) * kw + kx];
                    let ix0 = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = out_range(ow, iw, stride, ix0);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * stride) as isize + iy0;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let drow =
                            &mut dplane[iy as usize * iw..iy as usize * iw + iw];
                        if stride == 1 {
                            let dst = &mut drow[(ox_lo as isize + ix0) as usize
                                ..(ox_hi as isize - 1 + ix0) as usize + 1];
                            for (d, &gv) in dst.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                *d += wv * gv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * stride) as isize + ix0;
                                drow[ix as usize] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight<T: Scalar>(
    g: &[T],
    x: &[T],
    ci: usize,
    h: usize,
    iw: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dw = vec![T::zero(); co * ci * kh * kw];
    for oc in 0..co {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let xplane = &x[ic * h * iw..(ic + 1) * h * iw];
            for ky in 0..kh {
                let iy0 = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = out_range(oh, h, stride, iy0);
                for kx in 0..kw {
                    let ix0 = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = out_range(ow, iw, stride, ix0);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * stride) as isize + iy0;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xplane[iy as usize * iw..iy as usize * iw + iw];
                        if stride == 1 {
                            let src = &xrow[(ox_lo as isize + ix0) as usize
                                ..(ox_hi as isize - 1 + ix0) as usize + 1];
                            for (&gv, &xv) in grow[ox_lo..ox_hi].iter().zip(src) {
                                acc += gv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * stride) as isize + ix0;
                                acc += grow[ox] * xrow[ix as usize];
                            }
                        }
                    }
                    dw[((oc * ci + ic) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    dw
}
