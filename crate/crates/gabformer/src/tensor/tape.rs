//! Wengert tape: reverse-mode differentiation by operation recording.
//!
//! Every differentiable operation appends one node holding the result values
//! and a record of its inputs. Nodes are created in topological order, so
//! [`Tape::backward`] is a single reverse sweep: each node is visited after
//! all of its consumers and scatters its gradient to its parents.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padding rule applied before a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingMode {
    /// Pad with zeros.
    Zero,
    /// Mirror interior samples without repeating the edge (`-1 -> 1`).
    Reflect,
}

/// Handle to one node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum OpRecord {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    /// Channel-wise normalization of a BCHW tensor; `rstd` is saved per (b, pixel).
    ChannelNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    /// Multiply each channel plane of a BCHW tensor by a learnable `[C]` scale.
    ScaleChannels {
        x: Var,
        scale: Var,
    },
    /// Divide `[B*heads, m, n]` logits by a learnable per-head scalar `[heads]`.
    DivHeadScale {
        x: Var,
        xi: Var,
        heads: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    ConvValid {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
    },
    Pad2d {
        x: Var,
        pad: usize,
        mode: PaddingMode,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    MeanAll(Var),
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    /// True when this node or any ancestor requires a gradient.
    pub tracked: bool,
    pub op: OpRecord,
}

/// Ordered record of executed differentiable operations.
///
/// A tape is single-threaded. One forward pass appends nodes; one
/// [`Tape::backward`] call populates gradients. Running backward twice
/// without [`Tape::clear_grads`] is an error.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    check_finite: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// New tape with non-finite checks enabled.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
            backward_done: false,
        }
    }

    /// Toggle the per-operation NaN/Inf scan.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, value: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            data: value.data().to_vec(),
            grad: None,
            requires_grad,
            tracked: requires_grad,
            op: OpRecord::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(&Tensor::scalar(value), false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Clone a node's value out of the tape.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is internally consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last backward pass, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].shape.clone(), g.clone())
                .expect("gradient mirrors node shape")
        })
    }

    /// Drop all gradients and re-arm backward.
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub(crate) fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Append a node, running the finite check on its freshly computed data.
    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: OpRecord,
        tracked: bool,
        op_name: &'static str,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            tracked,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── Elementwise operations ───────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(self.shape(a).to_vec(), data, OpRecord::Add(a, b), tracked, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(self.shape(a).to_vec(), data, OpRecord::Sub(a, b), tracked, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(self.shape(a).to_vec(), data, OpRecord::Mul(a, b), tracked, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, OpRecord::Scale(x, c), tracked, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, OpRecord::AddScalar(x), tracked, "add_scalar")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| -v).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, OpRecord::Neg(x), tracked, "neg")
    }

    /// |x| with the subgradient convention sign(0) = 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.abs()).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, OpRecord::Abs(x), tracked, "abs")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, OpRecord::Relu(x), tracked, "relu")
    }

    /// Exact GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| gelu_exact(v)).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, OpRecord::Gelu(x), tracked, "gelu")
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        let tracked = self.tracked(x);
        self.push(vec![], vec![s], OpRecord::SumAll(x), tracked, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.numel(x);
        if n == 0 {
            return Err(Error::invalid("mean_all of an empty tensor".to_string()));
        }
        let s: f64 = self.data(x).iter().sum();
        let tracked = self.tracked(x);
        self.push(vec![], vec![s / n as f64], OpRecord::MeanAll(x), tracked, "mean_all")
    }

    // ── Softmax and normalization ────────────────────────────────────

    /// Numerically stable softmax along `axis`; each lane sums to 1.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[base + l * inner] /= sum;
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(shape, data, OpRecord::Softmax { x, axis }, tracked, "softmax")
    }

    /// Zero-mean unit-variance over the channel axis of a BCHW tensor,
    /// per (batch, pixel). The learnable scale is a separate op.
    pub fn channel_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "channel_norm expects BCHW, got {:?}",
                shape
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let src = self.data(x);
        let mut mean = vec![0.0; b * hw];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[(bi * c + ci) * hw..][..hw];
                let m = &mut mean[bi * hw..][..hw];
                for (mv, &xv) in m.iter_mut().zip(plane) {
                    *mv += xv;
                }
            }
        }
        let inv_c = 1.0 / c as f64;
        for mv in mean.iter_mut() {
            *mv *= inv_c;
        }
        let mut var = vec![0.0; b * hw];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[(bi * c + ci) * hw..][..hw];
                let m = &mean[bi * hw..][..hw];
                let vvs = &mut var[bi * hw..][..hw];
                for ((vv, &xv), &mv) in vvs.iter_mut().zip(plane).zip(m) {
                    let d = xv - mv;
                    *vv += d * d;
                }
            }
        }
        let mut rstd = var;
        for rv in rstd.iter_mut() {
            *rv = 1.0 / (*rv * inv_c + eps).sqrt();
        }
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[(bi * c + ci) * hw..][..hw];
                let out = &mut data[(bi * c + ci) * hw..][..hw];
                let m = &mean[bi * hw..][..hw];
                let r = &rstd[bi * hw..][..hw];
                for (((ov, &xv), &mv), &rv) in out.iter_mut().zip(plane).zip(m).zip(r) {
                    *ov = (xv - mv) * rv;
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(shape, data, OpRecord::ChannelNorm { x, rstd }, tracked, "channel_norm")
    }

    /// Multiply each channel plane of a BCHW tensor by `scale[c]`.
    pub fn scale_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "scale_channels expects BCHW, got {:?}",
                shape
            )));
        }
        let c = shape[1];
        if self.shape(scale) != [c] {
            return Err(Error::shape(format!(
                "scale_channels: scale {:?} does not match C={c}",
                self.shape(scale)
            )));
        }
        let (b, hw) = (shape[0], shape[2] * shape[3]);
        let src = self.data(x);
        let sc = self.data(scale);
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let s = sc[ci];
                let plane = &src[(bi * c + ci) * hw..][..hw];
                let out = &mut data[(bi * c + ci) * hw..][..hw];
                for (ov, &xv) in out.iter_mut().zip(plane) {
                    *ov = xv * s;
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(scale);
        self.push(shape, data, OpRecord::ScaleChannels { x, scale }, tracked, "scale_channels")
    }

    /// Divide `[B*heads, m, n]` logits by the learnable temperature of their head.
    pub fn div_head_scale(&mut self, x: Var, xi: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] % heads != 0 {
            return Err(Error::shape(format!(
                "div_head_scale expects [B*heads, m, n] with heads={heads}, got {:?}",
                shape
            )));
        }
        if self.shape(xi) != [heads] {
            return Err(Error::shape(format!(
                "div_head_scale: xi {:?} does not match heads={heads}",
                self.shape(xi)
            )));
        }
        let block = shape[1] * shape[2];
        let src = self.data(x);
        let xiv = self.data(xi);
        let mut data = vec![0.0; src.len()];
        for row in 0..shape[0] {
            let t = xiv[row % heads];
            let s = &src[row * block..][..block];
            let o = &mut data[row * block..][..block];
            for (ov, &xv) in o.iter_mut().zip(s) {
                *ov = xv / t;
            }
        }
        let tracked = self.tracked(x) || self.tracked(xi);
        self.push(shape, data, OpRecord::DivHeadScale { x, xi, heads }, tracked, "div_head_scale")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Autograd("backward on an empty tape".into()));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Autograd(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Autograd(
                "backward already ran on this tape; call clear_grads first".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].tracked {
                continue;
            }
            let g = self.nodes[id].grad.take().expect("checked above");
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    pub(crate) fn acc_grad(&mut self, v: Var, contribution: &[f64]) {
        let node = &mut self.nodes[v.0];
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        debug_assert_eq!(g.len(), contribution.len());
        for (gv, &cv) in g.iter_mut().zip(contribution) {
            *gv += cv;
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Take the record out so the match does not hold a borrow of the
        // node arena; every arm computes fresh contribution buffers from
        // immutable reads, then accumulates them into the parents.
        let op = std::mem::replace(&mut self.nodes[id].op, OpRecord::Leaf);
        match &op {
            OpRecord::Leaf => {}
            OpRecord::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.tracked(a) {
                    self.acc_grad(a, g);
                }
                if self.tracked(b) {
                    self.acc_grad(b, g);
                }
            }
            OpRecord::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.tracked(a) {
                    self.acc_grad(a, g);
                }
                if self.tracked(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc_grad(b, &neg);
                }
            }
            OpRecord::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.tracked(a) {
                    let da = zip_map(g, self.data(b), |gv, bv| gv * bv);
                    self.acc_grad(a, &da);
                }
                if self.tracked(b) {
                    let db = zip_map(g, self.data(a), |gv, av| gv * av);
                    self.acc_grad(b, &db);
                }
            }
            OpRecord::Scale(x, c) => {
                let (x, c) = (*x, *c);
                if self.tracked(x) {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::AddScalar(x) => {
                let x = *x;
                if self.tracked(x) {
                    self.acc_grad(x, g);
                }
            }
            OpRecord::Neg(x) => {
                let x = *x;
                if self.tracked(x) {
                    let dx: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::Abs(x) => {
                let x = *x;
                if self.tracked(x) {
                    let dx = zip_map(g, self.data(x), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::Relu(x) => {
                let x = *x;
                if self.tracked(x) {
                    let dx = zip_map(g, self.data(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::Gelu(x) => {
                let x = *x;
                if self.tracked(x) {
                    let dx = zip_map(g, self.data(x), |gv, xv| gv * gelu_grad(xv));
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if self.tracked(x) {
                    let shape = self.nodes[id].shape.clone();
                    let (outer, len, inner) = axis_split(&shape, axis);
                    let y = &self.nodes[id].data;
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                let k = base + l * inner;
                                dot += g[k] * y[k];
                            }
                            for l in 0..len {
                                let k = base + l * inner;
                                dx[k] = y[k] * (g[k] - dot);
                            }
                        }
                    }
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::ChannelNorm { x, rstd } => {
                let x = *x;
                if self.tracked(x) {
                    let shape = self.nodes[id].shape.clone();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let hw = h * w;
                    let inv_c = 1.0 / c as f64;
                    let y = &self.nodes[id].data;
                    let mut m1 = vec![0.0; b * hw];
                    let mut m2 = vec![0.0; b * hw];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            let gp = &g[off..off + hw];
                            let yp = &y[off..off + hw];
                            let m1s = &mut m1[bi * hw..][..hw];
                            for (mv, &gv) in m1s.iter_mut().zip(gp) {
                                *mv += gv;
                            }
                            let m2s = &mut m2[bi * hw..][..hw];
                            for ((mv, &gv), &yv) in m2s.iter_mut().zip(gp).zip(yp) {
                                *mv += gv * yv;
                            }
                        }
                    }
                    for mv in m1.iter_mut() {
                        *mv *= inv_c;
                    }
                    for mv in m2.iter_mut() {
                        *mv *= inv_c;
                    }
                    let mut dx = vec![0.0; y.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            let gp = &g[off..off + hw];
                            let yp = &y[off..off + hw];
                            let m1s = &m1[bi * hw..][..hw];
                            let m2s = &m2[bi * hw..][..hw];
                            let rs = &rstd[bi * hw..][..hw];
                            let dxp = &mut dx[off..off + hw];
                            for i in 0..hw {
                                dxp[i] = rs[i] * (gp[i] - m1s[i] - yp[i] * m2s[i]);
                            }
                        }
                    }
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::ScaleChannels { x, scale } => {
                let (x, scale) = (*x, *scale);
                let shape = self.nodes[id].shape.clone();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                if self.tracked(x) {
                    let sc = self.data(scale).to_vec();
                    let mut dx = vec![0.0; self.numel(x)];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            let s = sc[ci];
                            for i in 0..hw {
                                dx[off + i] = g[off + i] * s;
                            }
                        }
                    }
                    self.acc_grad(x, &dx);
                }
                if self.tracked(scale) {
                    let xv = self.data(x);
                    let mut ds = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            let mut acc = 0.0;
                            for i in 0..hw {
                                acc += g[off + i] * xv[off + i];
                            }
                            ds[ci] += acc;
                        }
                    }
                    self.acc_grad(scale, &ds);
                }
            }
            OpRecord::DivHeadScale { x, xi, heads } => {
                let (x, xi, heads) = (*x, *xi, *heads);
                let shape = self.nodes[id].shape.clone();
                let block = shape[1] * shape[2];
                let xiv = self.data(xi).to_vec();
                if self.tracked(x) {
                    let mut dx = vec![0.0; self.numel(x)];
                    for row in 0..shape[0] {
                        let t = xiv[row % heads];
                        for i in 0..block {
                            dx[row * block + i] = g[row * block + i] / t;
                        }
                    }
                    self.acc_grad(x, &dx);
                }
                if self.tracked(xi) {
                    // y = x / xi  =>  d xi = -(1/xi) * sum(g * y)
                    let y = &self.nodes[id].data;
                    let mut dxi = vec![0.0; heads];
                    for row in 0..shape[0] {
                        let hidx = row % heads;
                        let mut acc = 0.0;
                        for i in 0..block {
                            acc += g[row * block + i] * y[row * block + i];
                        }
                        dxi[hidx] -= acc / xiv[hidx];
                    }
                    self.acc_grad(xi, &dxi);
                }
            }
            OpRecord::SumAll(x) => {
                let x = *x;
                if self.tracked(x) {
                    let dx = vec![g[0]; self.numel(x)];
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::MeanAll(x) => {
                let x = *x;
                if self.tracked(x) {
                    let n = self.numel(x);
                    let dx = vec![g[0] / n as f64; n];
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::MatMul { .. } => self.backward_matmul(&op, g),
            OpRecord::ConvValid { .. } => self.backward_conv(&op, id, g),
            OpRecord::Pad2d { .. } => self.backward_pad(&op, id, g),
            OpRecord::PixelShuffle { .. }
            | OpRecord::PixelUnshuffle { .. }
            | OpRecord::Reshape(_)
            | OpRecord::Permute { .. }
            | OpRecord::Concat { .. }
            | OpRecord::Narrow { .. } => self.backward_shape_op(&op, id, g),
        }
        self.nodes[id].op = op;
    }
}

/// Split a shape into (outer, axis length, inner) blocks around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_small = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    phi_big + x * phi_small
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_from(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape, data).unwrap(), true)
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, -0.25, 4.0]);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_backward_is_two_x() {
        let mut tape = Tape::new();
        let vals = vec![0.5, -1.0, 2.0, 3.0];
        let x = leaf_from(&mut tape, vec![4], vals.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        for (gv, xv) in g.data().iter().zip(&vals) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![2], vec![1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn repeated_backward_without_reset_errors() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![2], vec![1.0, 2.0]);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
        tape.clear_grads();
        tape.backward(s).unwrap();
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![4], vec![0.0; 4]);
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.data(y) {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = leaf_from(
            &mut tape,
            vec![2, 3],
            vec![1.0, -2.0, 0.5, 10.0, 10.0, -10.0],
        );
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.data(y);
        for row in 0..2 {
            let s: f64 = d[row * 3..row * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(d[row * 3..row * 3 + 3].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gelu_is_zero_at_zero() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1], vec![0.0]);
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.data(y)[0], 0.0);
    }

    #[test]
    fn non_finite_result_is_surfaced() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1], vec![1e308]);
        let doubled = tape.add(x, x); // overflows to +inf
        assert!(matches!(
            doubled,
            Err(crate::error::Error::NonFinite { op: "add" })
        ));
    }

    #[test]
    fn finite_checks_can_be_disabled() {
        let mut tape = Tape::new();
        tape.set_finite_checks(false);
        let x = leaf_from(&mut tape, vec![1], vec![1e308]);
        assert!(tape.add(x, x).is_ok());
    }

    #[test]
    fn channel_norm_is_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let x = leaf_from(
            &mut tape,
            vec![1, 4, 1, 2],
            vec![1.0, 5.0, -2.0, 0.5, 3.0, -1.5, 0.0, 2.0],
        );
        let y = tape.channel_norm(x, 1e-10).unwrap();
        let d = tape.data(y);
        for px in 0..2 {
            let lane: Vec<f64> = (0..4).map(|c| d[c * 2 + px]).collect();
            let mean: f64 = lane.iter().sum::<f64>() / 4.0;
            let var: f64 = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }
}
