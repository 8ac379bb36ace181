//! Eager tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! Every operation computes its value immediately and records what it needs
//! for the backward pass. Graphs are built per training step and dropped
//! afterwards. All arithmetic is f64 and single-threaded, so two runs with
//! the same inputs produce bit-identical values and gradients.
//!
//! Elementwise binary ops broadcast with NumPy right-aligned semantics.

use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    PowScalar(NodeId, f64),
    Sqrt(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Softplus(NodeId),
    ClampMin(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose2(NodeId),
    SumAll(NodeId),
    /// Sum over the last axis, keeping it as a length-1 axis.
    SumKeepLast(NodeId),
    Reshape(NodeId),
    /// Pick index `i` along axis 1 of a rank-3 tensor: [B, L, D] -> [B, D].
    SelectMid(NodeId, usize),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        pad: usize,
    },
    Upsample2xNearest(NodeId),
    ResizeBilinear(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// A node that does not take gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that accumulates gradients during backward.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.scale(-1.0);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect());
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.scale(c);
        let rg = self.rg(a);
        self.push(v, Op::MulScalar(a, c), rg)
    }

    /// `x^p` for strictly positive inputs.
    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        debug_assert!(
            t.data().iter().all(|&x| x > 0.0),
            "pow_scalar needs positive inputs"
        );
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.powf(p)).collect());
        let rg = self.rg(a);
        self.push(v, Op::PowScalar(a, p), rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.sqrt()).collect());
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let v = Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|&x| if x >= 0.0 { x } else { slope * x })
                .collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| sigmoid(x)).collect());
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let v = Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
                .collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    /// `max(x, c)` elementwise; gradient passes where `x > c`.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.max(c)).collect());
        let rg = self.rg(a);
        self.push(v, Op::ClampMin(a, c), rg)
    }

    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let v = matmul_value(ta, tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let v = transpose2_value(t);
        let rg = self.rg(a);
        self.push(v, Op::Transpose2(a), rg)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a.0].value.data().iter().sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over the last axis, keeping it: `[..., d] -> [..., 1]`.
    pub fn sum_keep_last(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        let d = *shape.last().expect("sum_keep_last on rank-0 tensor");
        let rows = t.len() / d;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(t.data()[r * d..(r + 1) * d].iter().sum());
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = 1;
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, out), Op::SumKeepLast(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.nodes[a.0].value.clone().reshaped(shape);
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// `[B, L, D] -> [B, D]`, selecting index `i` along the middle axis.
    pub fn select_mid(&mut self, a: NodeId, i: usize) -> NodeId {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 3, "select_mid expects rank 3, got {s:?}");
        let (b, l, d) = (s[0], s[1], s[2]);
        assert!(i < l);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let base = (bi * l + i) * d;
            out.extend_from_slice(&t.data()[base..base + d]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![b, d], out), Op::SelectMid(a, i), rg)
    }

    /// 2-D convolution, stride 1, zero padding. `input [B,Ci,H,W]`,
    /// `weight [Co,Ci,kh,kw]` -> `[B,Co,H',W']`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, pad: usize) -> NodeId {
        let v = conv2d_value(&self.nodes[input.0].value, &self.nodes[weight.0].value, pad);
        let rg = self.rg(input) || self.rg(weight);
        self.push(v, Op::Conv2d { input, weight, pad }, rg)
    }

    /// Nearest-neighbour 2x upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; b * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = t.data()[((bi * c + ci) * h + y) * w + x];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                out[((bi * c + ci) * oh + 2 * y + dy) * ow + 2 * x + dx] = v;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![b, c, oh, ow], out),
            Op::Upsample2xNearest(a),
            rg,
        )
    }

    /// Differentiable bilinear resize of `[B,C,H,W]` to `out_h x out_w`
    /// (half-pixel centers, edge clamped). Resizing to the input size is the
    /// identity.
    pub fn resize_bilinear(&mut self, a: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let mut out = vec![0.0; b * c * out_h * out_w];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &t.data()[((bi * c + ci) * h) * w..((bi * c + ci) * h + h) * w];
                for oy in 0..out_h {
                    let (y0, y1, wy0, wy1) = ty[oy];
                    for ox in 0..out_w {
                        let (x0, x1, wx0, wx1) = tx[ox];
                        let v = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                            + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                        out[((bi * c + ci) * out_h + oy) * out_w + ox] = v;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![b, c, out_h, out_w], out),
            Op::ResizeBilinear(a),
            rg,
        )
    }

    /// Reverse pass from a scalar `[1]` node. Accumulates gradients for every
    /// node with `requires_grad` on a path to `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum_bcast(&mut grads, *a, &g);
                    self.accum_bcast(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.accum_bcast(&mut grads, *a, &g);
                    let neg = g.scale(-1.0);
                    self.accum_bcast(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.rg(*a) {
                        let ga = bcast_binary(&g, tb, |x, y| x * y);
                        self.accum_bcast(&mut grads, *a, &ga);
                    }
                    if self.rg(*b) {
                        let gb = bcast_binary(&g, ta, |x, y| x * y);
                        self.accum_bcast(&mut grads, *b, &gb);
                    }
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.rg(*a) {
                        let ga = bcast_binary(&g, tb, |x, y| x / y);
                        self.accum_bcast(&mut grads, *a, &ga);
                    }
                    if self.rg(*b) {
                        // d(a/b)/db = -a / b^2
                        let quotient = bcast_binary(ta, tb, |x, y| -x / (y * y));
                        let gb = bcast_binary(&g, &quotient, |x, y| x * y);
                        self.accum_bcast(&mut grads, *b, &gb);
                    }
                }
                Op::Neg(a) => {
                    let ga = g.scale(-1.0);
                    self.accum(&mut grads, *a, ga);
                }
                Op::AddScalar(a) => self.accum(&mut grads, *a, g.clone()),
                Op::MulScalar(a, c) => self.accum(&mut grads, *a, g.scale(*c)),
                Op::PowScalar(a, p) => {
                    let ta = &self.nodes[a.0].value;
                    let ga = Tensor::new(
                        ta.shape().to_vec(),
                        ta.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gy)| gy * p * x.powf(p - 1.0))
                            .collect(),
                    );
                    self.accum(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    let ga = Tensor::new(
                        y.shape().to_vec(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&sq, &gy)| gy * 0.5 / sq.max(1e-300))
                            .collect(),
                    );
                    self.accum(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let ta = &self.nodes[a.0].value;
                    let ga = Tensor::new(
                        ta.shape().to_vec(),
                        ta.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gy)| if x >= 0.0 { gy } else { gy * slope })
                            .collect(),
                    );
                    self.accum(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Tensor::new(
                        y.shape().to_vec(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&s, &gy)| gy * s * (1.0 - s))
                            .collect(),
                    );
                    self.accum(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ta = &self.nodes[a.0].value;
                    let ga = Tensor::new(
                        ta.shape().to_vec(),
                        ta.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gy)| gy * sigmoid(x))
                            .collect(),
                    );
                    self.accum(&mut grads, *a, ga);
                }
                Op::ClampMin(a, c) => {
                    let ta = &self.nodes[a.0].value;
                    let ga = Tensor::new(
                        ta.shape().to_vec(),
                        ta.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gy)| if x > *c { gy } else { 0.0 })
                            .collect(),
                    );
                    self.accum(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.rg(*a) {
                        let bt = transpose2_value(tb);
                        self.accum(&mut grads, *a, matmul_value(&g, &bt));
                    }
                    if self.rg(*b) {
                        let at = transpose2_value(ta);
                        self.accum(&mut grads, *b, matmul_value(&at, &g));
                    }
                }
                Op::Transpose2(a) => {
                    self.accum(&mut grads, *a, transpose2_value(&g));
                }
                Op::SumAll(a) => {
                    let ta = &self.nodes[a.0].value;
                    let ga = Tensor::full(ta.shape().to_vec(), g.item());
                    self.accum(&mut grads, *a, ga);
                }
                Op::SumKeepLast(a) => {
                    let ta = &self.nodes[a.0].value;
                    let d = *ta.shape().last().unwrap();
                    let mut out = Vec::with_capacity(ta.len());
                    for gv in g.data() {
                        out.extend(std::iter::repeat(*gv).take(d));
                    }
                    self.accum(&mut grads, *a, Tensor::new(ta.shape().to_vec(), out));
                }
                Op::Reshape(a) => {
                    let ta = &self.nodes[a.0].value;
                    let ga = g.clone().reshaped(ta.shape().to_vec());
                    self.accum(&mut grads, *a, ga);
                }
                Op::SelectMid(a, i) => {
                    let ta = &self.nodes[a.0].value;
                    let s = ta.shape();
                    let (b, l, d) = (s[0], s[1], s[2]);
                    let mut ga = Tensor::zeros(vec![b, l, d]);
                    for bi in 0..b {
                        let dst = (bi * l + i) * d;
                        let src = bi * d;
                        ga.data_mut()[dst..dst + d].copy_from_slice(&g.data()[src..src + d]);
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::Conv2d { input, weight, pad } => {
                    let (ti, tw) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
                    if self.rg(*input) {
                        self.accum(&mut grads, *input, conv2d_grad_input(ti, tw, &g, *pad));
                    }
                    if self.rg(*weight) {
                        self.accum(&mut grads, *weight, conv2d_grad_weight(ti, tw, &g, *pad));
                    }
                }
                Op::Upsample2xNearest(a) => {
                    let ta = &self.nodes[a.0].value;
                    let s = ta.shape();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut ga = Tensor::zeros(vec![b, c, h, w]);
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let mut acc = 0.0;
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            acc += g.data()
                                                [((bi * c + ci) * oh + 2 * y + dy) * ow + 2 * x + dx];
                                        }
                                    }
                                    ga.data_mut()[((bi * c + ci) * h + y) * w + x] = acc;
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::ResizeBilinear(a) => {
                    let ta = &self.nodes[a.0].value;
                    let s = ta.shape();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let os = node.value.shape();
                    let (oh, ow) = (os[2], os[3]);
                    let ty = bilinear_taps(h, oh);
                    let tx = bilinear_taps(w, ow);
                    let mut ga = Tensor::zeros(vec![b, c, h, w]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            for oy in 0..oh {
                                let (y0, y1, wy0, wy1) = ty[oy];
                                for ox in 0..ow {
                                    let (x0, x1, wx0, wx1) = tx[ox];
                                    let gv = g.data()[((bi * c + ci) * oh + oy) * ow + ox];
                                    let gd = ga.data_mut();
                                    gd[base + y0 * w + x0] += gv * wy0 * wx0;
                                    gd[base + y0 * w + x1] += gv * wy0 * wx1;
                                    gd[base + y1 * w + x0] += gv * wy1 * wx0;
                                    gd[base + y1 * w + x1] += gv * wy1 * wx1;
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], target: NodeId, g: Tensor) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Accumulate a gradient that may live in a broadcast shape; it is summed
    /// down to the target node's shape first.
    fn accum_bcast(&self, grads: &mut [Option<Tensor>], target: NodeId, g: &Tensor) {
        if !self.rg(target) {
            return;
        }
        let reduced = reduce_to_shape(g, self.nodes[target.0].value.shape());
        self.accum(grads, target, reduced);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear sampling taps with half-pixel centers and edge clamping:
/// `(i0, i1, w0, w1)` per output index.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = floor.max(0.0) as usize;
            let i0 = i0.min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            // src < 0 clamps fully to the first sample
            if floor < 0.0 {
                (0, i1, 1.0, 0.0)
            } else {
                (i0, i1, 1.0 - frac, frac)
            }
        })
        .collect()
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Strides for reading `shape` as if broadcast to `out_shape` (0 on expanded axes).
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let offset = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

fn bcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape());
    let n: usize = out_shape.iter().product();
    let sa = bcast_strides(a.shape(), &out_shape);
    let sb = bcast_strides(b.shape(), &out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a.data()[oa], b.data()[ob]));
        // odometer increment
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Sum `t` down to `target_shape` (inverse of broadcasting).
fn reduce_to_shape(t: &Tensor, target_shape: &[usize]) -> Tensor {
    if t.shape() == target_shape {
        return t.clone();
    }
    let out_shape = t.shape();
    let nd = out_shape.len();
    let st = bcast_strides(target_shape, out_shape);
    let mut acc = vec![0.0; target_shape.iter().product()];
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for &v in t.data() {
        acc[off] += v;
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= st[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(target_shape.to_vec(), acc)
}

fn matmul_value(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.len(), 2, "matmul lhs must be rank 2, got {sa:?}");
    assert_eq!(sb.len(), 2, "matmul rhs must be rank 2, got {sb:?}");
    assert_eq!(sa[1], sb[0], "matmul inner dims: {sa:?} x {sb:?}");
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn transpose2_value(t: &Tensor) -> Tensor {
    let s = t.shape();
    assert_eq!(s.len(), 2);
    let (m, n) = (s[0], s[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn conv2d_value(input: &Tensor, weight: &Tensor, pad: usize) -> Tensor {
    let si = input.shape();
    let sw = weight.shape();
    assert_eq!(si.len(), 4, "conv2d input must be [B,Ci,H,W]");
    assert_eq!(sw.len(), 4, "conv2d weight must be [Co,Ci,kh,kw]");
    assert_eq!(si[1], sw[1], "conv2d channel mismatch");
    let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
    let (co, kh, kw) = (sw[0], sw[2], sw[3]);
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input.data()
                                    [((bi * ci + c) * h + iy as usize) * w + ix as usize]
                                    * weight.data()[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], out)
}

fn conv2d_grad_input(input: &Tensor, weight: &Tensor, gout: &Tensor, pad: usize) -> Tensor {
    let si = input.shape();
    let sw = weight.shape();
    let so = gout.shape();
    let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
    let (co, kh, kw) = (sw[0], sw[2], sw[3]);
    let (oh, ow) = (so[2], so[3]);
    let mut gin = Tensor::zeros(vec![b, ci, h, w]);
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout.data()[((bi * co + o) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gin.data_mut()
                                    [((bi * ci + c) * h + iy as usize) * w + ix as usize] +=
                                    g * weight.data()[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

fn conv2d_grad_weight(input: &Tensor, weight: &Tensor, gout: &Tensor, pad: usize) -> Tensor {
    let si = input.shape();
    let sw = weight.shape();
    let so = gout.shape();
    let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
    let (co, kh, kw) = (sw[0], sw[2], sw[3]);
    let (oh, ow) = (so[2], so[3]);
    let mut gw = Tensor::zeros(vec![co, ci, kh, kw]);
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout.data()[((bi * co + o) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gw.data_mut()[((o * ci + c) * kh + ky) * kw + kx] += g
                                    * input.data()
                                        [((bi * ci + c) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}
