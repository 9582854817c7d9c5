use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, Nchw, RoiBox};
use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Records operations for one forward pass so they can be differentiated.
///
/// A tape is single-use: after [`Tape::backward`] it refuses a second
/// backward pass. Build a fresh tape per training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Reduction flavor for [`Var::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    Sum,
    Mean,
    L1,
    L2,
}

enum Op {
    Leaf,
    Conv2d(ConvGeom),
    ChannelBias(Nchw),
    Binary(BinaryKind, Bcast),
    Scale(f64),
    Relu,
    Sigmoid,
    Reduce { kind: NormAxis, map: Vec<usize>, count: usize },
    BilinearSample { h: usize, w: usize, c: usize, x: f64, y: f64 },
    RoiAlign { dims: Nchw, boxes: Vec<RoiBox>, res: usize },
    Upsample2x(Nchw),
    ChannelSoftmax { dims: Nchw, tau: f64 },
    SpatialSoftmax { dims: Nchw, tau: f64 },
    BatchNorm { dims: Nchw, inv_std: Vec<f64>, xhat: Vec<f64> },
    FrozenNorm { dims: Nchw, inv_std: Vec<f64>, xhat: Vec<f64> },
    Focal { target: Rc<Tensor>, norm: f64 },
    Gather { index: Vec<usize> },
    Reshape,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by one backward pass, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not require grad or is not reachable
    /// from the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

/// Probability clamp used by the focal loss.
pub const FOCAL_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, inputs: Vec<usize>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|&i| nodes[i].requires_grad),
        };
        nodes.push(Node { value: Rc::new(value), inputs, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A trainable input: gradients flow into it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let v = self.push(value, Vec::new(), Op::Leaf);
        self.nodes.borrow_mut()[v.id].requires_grad = true;
        v
    }

    /// A detached input: never accumulates gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss was recorded on a different tape".into()));
        }
        if self.spent.replace(true) {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            self.spent.set(false);
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        // Node ids are assigned in recording order, so descending id is a
        // reverse topological order.
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            let wants: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let local = backprop(&node.op, &ins, &node.value, &gout, &wants);
            for ((&inp, g), want) in node.inputs.iter().zip(local).zip(wants) {
                if !want {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[inp] {
                    Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (id, g) in grads.iter_mut().enumerate() {
            let keep = matches!(nodes[id].op, Op::Leaf) && nodes[id].requires_grad;
            if !keep {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn scalar_or_same(a: &Tensor, b: &Tensor, what: &str) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::None)
    } else if b.len() == 1 {
        Ok(Bcast::RhsScalar)
    } else if a.len() == 1 {
        Ok(Bcast::LhsScalar)
    } else {
        Err(Error::Config(format!("{what}: incompatible shapes {:?} and {:?}", a.shape(), b.shape())))
    }
}

fn nchw(t: &Tensor, what: &str) -> Result<Nchw> {
    Nchw::from_shape(t.shape())
        .ok_or_else(|| Error::Config(format!("{what} expects a rank-4 NCHW tensor, got {:?}", t.shape())))
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Cross-correlation of an NCHW input with a KCHW kernel.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let x = self.value();
        let k = kernel.value();
        let input = nchw(&x, "conv2d input")?;
        let [kn, kc, kh, kw] = match *k.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::Config(format!("conv2d kernel must be rank 4, got {:?}", k.shape()))),
        };
        if kc != input.c {
            return Err(Error::Config(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {kc}",
                input.c
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if kh > input.h + 2 * padding || kw > input.w + 2 * padding {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                input.h + 2 * padding,
                input.w + 2 * padding
            )));
        }
        let g = ConvGeom {
            input,
            k: kn,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (input.h + 2 * padding - kh) / stride + 1,
            ow: (input.w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(x.data(), k.data(), &g);
        let t = Tensor { shape: g.out_shape().to_vec(), data: out };
        Ok(self.tape.push(t, vec![self.id, kernel.id], Op::Conv2d(g)))
    }

    /// Adds a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let dims = nchw(&x, "add_channel_bias")?;
        if b.shape() != [dims.c] {
            return Err(Error::Config(format!("bias shape {:?} does not match {} channels", b.shape(), dims.c)));
        }
        let plane = dims.plane();
        let mut data = x.data().to_vec();
        for (p, chunk) in data.chunks_mut(plane).enumerate() {
            let bv = b.data()[p % dims.c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor { shape: x.shape().to_vec(), data };
        Ok(self.tape.push(t, vec![self.id, bias.id], Op::ChannelBias(dims)))
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let bc = scalar_or_same(&a, &b, "elementwise")?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let t = match bc {
            Bcast::None => Tensor {
                shape: a.shape().to_vec(),
                data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            },
            Bcast::RhsScalar => {
                let y = b.item();
                Tensor { shape: a.shape().to_vec(), data: a.data().iter().map(|&x| f(x, y)).collect() }
            }
            Bcast::LhsScalar => {
                let x = a.item();
                Tensor { shape: b.shape().to_vec(), data: b.data().iter().map(|&y| f(x, y)).collect() }
            }
        };
        Ok(self.tape.push(t, vec![self.id, other.id], Op::Binary(kind, bc)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let t = self.value().map(|v| v * factor);
        self.tape.push(t, vec![self.id], Op::Scale(factor))
    }

    pub fn relu(self) -> Var<'t> {
        let t = self.value().map(|v| v.max(0.0));
        self.tape.push(t, vec![self.id], Op::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let t = self.value().map(sigmoid);
        self.tape.push(t, vec![self.id], Op::Sigmoid)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.tape.push(t, vec![self.id], Op::Reshape))
    }

    /// Reduces over `axes` (all axes when empty), removing them from the shape.
    pub fn reduce(self, kind: NormAxis, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let axes: Vec<usize> = if axes.is_empty() { (0..rank).collect() } else { axes.to_vec() };
        if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::Config(format!("axis {bad} out of range for rank {rank}")));
        }
        let reduced: Vec<bool> = (0..rank).map(|a| axes.contains(&a)).collect();
        let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| x.shape()[a]).product();
        if count == 0 || x.is_empty() {
            return Err(Error::Config("empty reduction extent".into()));
        }
        let out_shape: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| x.shape()[a]).collect();
        let out_strides = strides(&out_shape);
        let in_strides = x.strides();
        let mut map = Vec::with_capacity(x.len());
        for flat in 0..x.len() {
            let mut o = 0;
            let mut k = 0;
            for a in 0..rank {
                if !reduced[a] {
                    let idx = (flat / in_strides[a]) % x.shape()[a];
                    o += idx * out_strides[k];
                    k += 1;
                }
            }
            map.push(o);
        }
        let n_out: usize = out_shape.iter().product();
        let mut acc = vec![0.0; n_out];
        for (&v, &o) in x.data().iter().zip(&map) {
            acc[o] += match kind {
                NormAxis::Sum | NormAxis::Mean => v,
                NormAxis::L1 => v.abs(),
                NormAxis::L2 => v * v,
            };
        }
        match kind {
            NormAxis::Mean => acc.iter_mut().for_each(|a| *a /= count as f64),
            NormAxis::L2 => acc.iter_mut().for_each(|a| *a = a.sqrt()),
            _ => {}
        }
        let t = Tensor { shape: out_shape, data: acc };
        Ok(self.tape.push(t, vec![self.id], Op::Reduce { kind, map, count }))
    }

    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(NormAxis::Sum, axes)
    }

    pub fn sum_all(self) -> Var<'t> {
        self.reduce(NormAxis::Sum, &[]).expect("full sum of a non-empty tensor")
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(NormAxis::Mean, axes)
    }

    pub fn l1_norm(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(NormAxis::L1, axes)
    }

    /// Euclidean norm. The gradient at an exactly-zero group is zero.
    pub fn l2_norm(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(NormAxis::L2, axes)
    }

    /// Border-clamped bilinear lookup of every channel of a `[C, H, W]` map.
    pub fn bilinear_sample(self, x: f64, y: f64) -> Result<Var<'t>> {
        let f = self.value();
        let [c, h, w] = match *f.shape() {
            [c, h, w] if h > 0 && w > 0 => [c, h, w],
            _ => return Err(Error::Config(format!("bilinear_sample expects [C,H,W], got {:?}", f.shape()))),
        };
        let taps = kernels::bilinear_weights(h, w, x, y);
        let data = (0..c)
            .map(|ch| {
                let plane = &f.data()[ch * h * w..][..h * w];
                taps.iter().map(|&(i, wt)| wt * plane[i]).sum()
            })
            .collect();
        let t = Tensor { shape: vec![c], data };
        Ok(self.tape.push(t, vec![self.id], Op::BilinearSample { h, w, c, x, y }))
    }

    /// RoI-Align of an NCHW map: one `[C, r, r]` patch per box, stacked to `[P, C, r, r]`.
    pub fn roi_align(self, boxes: &[RoiBox], res: usize) -> Result<Var<'t>> {
        let x = self.value();
        let dims = nchw(&x, "roi_align")?;
        if res == 0 {
            return Err(Error::Config("roi_align resolution must be >= 1".into()));
        }
        if let Some(b) = boxes.iter().find(|b| b.batch >= dims.n) {
            return Err(Error::Config(format!("roi batch index {} out of range {}", b.batch, dims.n)));
        }
        let data = kernels::roi_align_forward(x.data(), dims, boxes, res);
        let t = Tensor { shape: vec![boxes.len(), dims.c, res, res], data };
        Ok(self.tape.push(t, vec![self.id], Op::RoiAlign { dims, boxes: boxes.to_vec(), res }))
    }

    pub fn upsample2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let dims = nchw(&x, "upsample2x")?;
        let data = kernels::upsample2x_forward(x.data(), dims);
        let t = Tensor { shape: vec![dims.n, dims.c, dims.h * 2, dims.w * 2], data };
        Ok(self.tape.push(t, vec![self.id], Op::Upsample2x(dims)))
    }

    /// Temperature softmax across channels at every spatial location of an NCHW tensor.
    pub fn channel_softmax(self, tau: f64) -> Result<Var<'t>> {
        let x = self.value();
        let dims = nchw(&x, "channel_softmax")?;
        check_tau(tau)?;
        let data = kernels::channel_softmax_forward(x.data(), dims, tau);
        let t = Tensor { shape: x.shape().to_vec(), data };
        Ok(self.tape.push(t, vec![self.id], Op::ChannelSoftmax { dims, tau }))
    }

    /// Temperature softmax across the spatial positions of every channel.
    pub fn spatial_softmax(self, tau: f64) -> Result<Var<'t>> {
        let x = self.value();
        let dims = nchw(&x, "spatial_softmax")?;
        check_tau(tau)?;
        let data = kernels::spatial_softmax_forward(x.data(), dims, tau);
        let t = Tensor { shape: x.shape().to_vec(), data };
        Ok(self.tape.push(t, vec![self.id], Op::SpatialSoftmax { dims, tau }))
    }

    /// Batch normalization with statistics over (N, H, W). Returns the output
    /// together with the batch mean and biased variance per channel.
    pub fn batch_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let x = self.value();
        let dims = nchw(&x, "batch_norm")?;
        let (mean, var) = kernels::channel_stats(x.data(), dims);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.affine_norm(gamma, beta, dims, &mean, &inv_std)?;
        let (t, xhat) = out;
        let v = self.tape.push(t, vec![self.id, gamma.id, beta.id], Op::BatchNorm { dims, inv_std, xhat });
        Ok((v, mean, var))
    }

    /// Normalization with fixed (running) statistics.
    pub fn frozen_norm(self, gamma: Var<'t>, beta: Var<'t>, mean: &[f64], var: &[f64], eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let dims = nchw(&x, "frozen_norm")?;
        if mean.len() != dims.c || var.len() != dims.c {
            return Err(Error::Config("running statistics do not match channel count".into()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (t, xhat) = self.affine_norm(gamma, beta, dims, mean, &inv_std)?;
        Ok(self.tape.push(t, vec![self.id, gamma.id, beta.id], Op::FrozenNorm { dims, inv_std, xhat }))
    }

    fn affine_norm(&self, gamma: Var<'t>, beta: Var<'t>, dims: Nchw, mean: &[f64], inv_std: &[f64]) -> Result<(Tensor, Vec<f64>)> {
        let x = self.value();
        let g = gamma.value();
        let b = beta.value();
        if g.shape() != [dims.c] || b.shape() != [dims.c] {
            return Err(Error::Config(format!(
                "norm scale/shift must have shape [{}], got {:?} / {:?}",
                dims.c,
                g.shape(),
                b.shape()
            )));
        }
        let plane = dims.plane();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (p, (src, (xh, o))) in x
            .data()
            .chunks(plane)
            .zip(xhat.chunks_mut(plane).zip(out.chunks_mut(plane)))
            .enumerate()
        {
            let ch = p % dims.c;
            for ((&v, xh), o) in src.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *o = g.data()[ch] * *xh + b.data()[ch];
            }
        }
        Ok((Tensor { shape: x.shape().to_vec(), data: out }, xhat))
    }

    /// Penalty-reduced focal loss (exponents 2 and 4) between a probability
    /// map and a target heatmap, normalized by the number of cells whose
    /// target is exactly 1 (at least 1).
    pub fn focal_loss(self, target: &Tensor) -> Result<Var<'t>> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(Error::Config(format!(
                "focal loss shape mismatch: prediction {:?}, target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let num_pos = target.data().iter().filter(|&&t| t == 1.0).count();
        let norm = num_pos.max(1) as f64;
        let total: f64 = p.data().iter().zip(target.data()).map(|(&pv, &tv)| focal_term(pv, tv).0).sum();
        let t = Tensor::scalar(total / norm);
        Ok(self.tape.push(t, vec![self.id], Op::Focal { target: Rc::new(target.clone()), norm }))
    }

    /// Reads arbitrary elements by flat index into a new tensor of `shape`.
    pub fn gather(self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::Config("gather index count does not match output shape".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Config(format!("gather index {bad} out of range {}", x.len())));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let t = Tensor { shape: shape.to_vec(), data };
        Ok(self.tape.push(t, vec![self.id], Op::Gather { index }))
    }

    /// Channel vectors of an NCHW map at `(batch, row, col)` cells → `[P, C]`.
    pub fn gather_cells(self, cells: &[(usize, usize, usize)]) -> Result<Var<'t>> {
        let x = self.value();
        let dims = nchw(&x, "gather_cells")?;
        let mut index = Vec::with_capacity(cells.len() * dims.c);
        for &(b, i, j) in cells {
            if b >= dims.n || i >= dims.h || j >= dims.w {
                return Err(Error::Config(format!("cell ({b},{i},{j}) outside map {:?}", dims.shape())));
            }
            for ch in 0..dims.c {
                index.push(((b * dims.c + ch) * dims.h + i) * dims.w + j);
            }
        }
        self.gather(index, &[cells.len(), dims.c])
    }

    /// Per-channel maximum over the cells covered by each box → `[P, C]`.
    pub fn region_max(self, boxes: &[RoiBox]) -> Result<Var<'t>> {
        let x = self.value();
        let dims = nchw(&x, "region_max")?;
        let mut index = Vec::with_capacity(boxes.len() * dims.c);
        for b in boxes {
            if b.batch >= dims.n {
                return Err(Error::Config(format!("roi batch index {} out of range {}", b.batch, dims.n)));
            }
            let cells = b.covered_cells(dims.h, dims.w);
            for ch in 0..dims.c {
                let base = (b.batch * dims.c + ch) * dims.plane();
                let best = cells
                    .iter()
                    .map(|&(i, j)| base + i * dims.w + j)
                    .fold(None::<usize>, |acc, idx| match acc {
                        Some(a) if x.data()[a] >= x.data()[idx] => Some(a),
                        _ => Some(idx),
                    })
                    .expect("covered_cells is never empty");
                index.push(best);
            }
        }
        self.gather(index, &[boxes.len(), dims.c])
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("softmax temperature must be positive, got {tau}")))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Focal-loss contribution of one cell and its derivative w.r.t. the prediction.
fn focal_term(p: f64, t: f64) -> (f64, f64) {
    let clamped = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let live = if clamped == p { 1.0 } else { 0.0 };
    let p = clamped;
    if t == 1.0 {
        let q = 1.0 - p;
        let loss = -q * q * p.ln();
        let d = 2.0 * q * p.ln() - q * q / p;
        (loss, d * live)
    } else {
        let wt = (1.0 - t).powi(4);
        let ln1p = (1.0 - p).ln();
        let loss = -wt * p * p * ln1p;
        let d = -wt * (2.0 * p * ln1p - p * p / (1.0 - p));
        (loss, d * live)
    }
}

fn backprop(op: &Op, ins: &[&Tensor], out: &Tensor, gout: &Tensor, wants: &[bool]) -> Vec<Option<Tensor>> {
    let like = |t: &Tensor, data: Vec<f64>| Tensor { shape: t.shape().to_vec(), data };
    let g = gout.data();
    match op {
        Op::Leaf => Vec::new(),
        Op::Conv2d(geom) => {
            let mut dx = wants[0].then(|| vec![0.0; ins[0].len()]);
            let mut dw = wants[1].then(|| vec![0.0; ins[1].len()]);
            kernels::conv2d_backward(ins[0].data(), ins[1].data(), g, geom, dx.as_deref_mut(), dw.as_deref_mut());
            vec![dx.map(|d| like(ins[0], d)), dw.map(|d| like(ins[1], d))]
        }
        Op::ChannelBias(dims) => {
            let mut db = vec![0.0; dims.c];
            for (p, chunk) in g.chunks(dims.plane()).enumerate() {
                db[p % dims.c] += chunk.iter().sum::<f64>();
            }
            vec![Some(gout.clone()), Some(like(ins[1], db))]
        }
        Op::Binary(kind, bc) => {
            let (a, b) = (ins[0], ins[1]);
            let (mut da, mut db): (Vec<f64>, Vec<f64>) = match (kind, bc) {
                (BinaryKind::Add, _) => (g.to_vec(), g.to_vec()),
                (BinaryKind::Sub, _) => (g.to_vec(), g.iter().map(|v| -v).collect()),
                (BinaryKind::Mul, Bcast::None) => (
                    g.iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                    g.iter().zip(a.data()).map(|(x, y)| x * y).collect(),
                ),
                (BinaryKind::Mul, Bcast::RhsScalar) => (
                    g.iter().map(|x| x * b.item()).collect(),
                    g.iter().zip(a.data()).map(|(x, y)| x * y).collect(),
                ),
                (BinaryKind::Mul, Bcast::LhsScalar) => (
                    g.iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                    g.iter().map(|x| x * a.item()).collect(),
                ),
            };
            match bc {
                Bcast::RhsScalar => db = vec![db.iter().sum()],
                Bcast::LhsScalar => da = vec![da.iter().sum()],
                Bcast::None => {}
            }
            vec![Some(like(a, da)), Some(like(b, db))]
        }
        Op::Scale(f) => vec![Some(like(ins[0], g.iter().map(|v| v * f).collect()))],
        Op::Relu => vec![Some(like(
            ins[0],
            g.iter().zip(ins[0].data()).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect(),
        ))],
        Op::Sigmoid => vec![Some(like(
            ins[0],
            g.iter().zip(out.data()).map(|(gv, &s)| gv * s * (1.0 - s)).collect(),
        ))],
        Op::Reshape => vec![Some(like(ins[0], g.to_vec()))],
        Op::Reduce { kind, map, count } => {
            let x = ins[0].data();
            let d = match kind {
                NormAxis::Sum => map.iter().map(|&o| g[o]).collect(),
                NormAxis::Mean => map.iter().map(|&o| g[o] / *count as f64).collect(),
                NormAxis::L1 => x.iter().zip(map).map(|(&v, &o)| g[o] * sign(v)).collect(),
                NormAxis::L2 => x
                    .iter()
                    .zip(map)
                    .map(|(&v, &o)| {
                        let n = out.data()[o];
                        if n == 0.0 {
                            0.0
                        } else {
                            g[o] * v / n
                        }
                    })
                    .collect(),
            };
            vec![Some(like(ins[0], d))]
        }
        Op::BilinearSample { h, w, c, x, y } => {
            let taps = kernels::bilinear_weights(*h, *w, *x, *y);
            let mut d = vec![0.0; ins[0].len()];
            for ch in 0..*c {
                for &(i, wt) in &taps {
                    d[ch * h * w + i] += wt * g[ch];
                }
            }
            vec![Some(like(ins[0], d))]
        }
        Op::RoiAlign { dims, boxes, res } => {
            let mut d = vec![0.0; ins[0].len()];
            kernels::roi_align_backward(g, *dims, boxes, *res, &mut d);
            vec![Some(like(ins[0], d))]
        }
        Op::Upsample2x(dims) => {
            let mut d = vec![0.0; ins[0].len()];
            kernels::upsample2x_backward(g, *dims, &mut d);
            vec![Some(like(ins[0], d))]
        }
        Op::ChannelSoftmax { dims, tau } => {
            let mut d = vec![0.0; ins[0].len()];
            kernels::channel_softmax_backward(out.data(), g, *dims, *tau, &mut d);
            vec![Some(like(ins[0], d))]
        }
        Op::SpatialSoftmax { dims, tau } => {
            let mut d = vec![0.0; ins[0].len()];
            kernels::spatial_softmax_backward(out.data(), g, *dims, *tau, &mut d);
            vec![Some(like(ins[0], d))]
        }
        Op::BatchNorm { dims, inv_std, xhat } => {
            let plane = dims.plane();
            let m = (dims.n * plane) as f64;
            let gamma = ins[1].data();
            let mut dgamma = vec![0.0; dims.c];
            let mut dbeta = vec![0.0; dims.c];
            for (p, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                let ch = p % dims.c;
                dbeta[ch] += gc.iter().sum::<f64>();
                dgamma[ch] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
            }
            let dx = wants[0].then(|| {
                let mut dx = vec![0.0; ins[0].len()];
                for (p, ((gc, xc), dc)) in g.chunks(plane).zip(xhat.chunks(plane)).zip(dx.chunks_mut(plane)).enumerate() {
                    let ch = p % dims.c;
                    let k = gamma[ch] * inv_std[ch] / m;
                    for ((d, &gv), &xh) in dc.iter_mut().zip(gc).zip(xc) {
                        *d = k * (m * gv - dbeta[ch] - xh * dgamma[ch]);
                    }
                }
                like(ins[0], dx)
            });
            vec![dx, Some(like(ins[1], dgamma)), Some(like(ins[2], dbeta))]
        }
        Op::FrozenNorm { dims, inv_std, xhat } => {
            let plane = dims.plane();
            let gamma = ins[1].data();
            let mut dgamma = vec![0.0; dims.c];
            let mut dbeta = vec![0.0; dims.c];
            let mut dx = vec![0.0; ins[0].len()];
            for (p, ((gc, xc), dc)) in g.chunks(plane).zip(xhat.chunks(plane)).zip(dx.chunks_mut(plane)).enumerate() {
                let ch = p % dims.c;
                dbeta[ch] += gc.iter().sum::<f64>();
                dgamma[ch] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                for (d, &gv) in dc.iter_mut().zip(gc) {
                    *d = gv * gamma[ch] * inv_std[ch];
                }
            }
            vec![Some(like(ins[0], dx)), Some(like(ins[1], dgamma)), Some(like(ins[2], dbeta))]
        }
        Op::Focal { target, norm } => {
            let scale = g[0] / norm;
            let d = ins[0]
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| focal_term(p, t).1 * scale)
                .collect();
            vec![Some(like(ins[0], d))]
        }
        Op::Gather { index } => {
            let mut d = vec![0.0; ins[0].len()];
            for (&i, gv) in index.iter().zip(g) {
                d[i] += gv;
            }
            vec![Some(like(ins[0], d))]
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
