//! Reverse-mode automatic differentiation on a flat tape of `f64` tensors.
//!
//! # Overview
//!
//! A [`Graph`] owns an append-only list of nodes; every forward operation
//! evaluates eagerly and records what it needs for the backward sweep.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! leaf nodes. The engine is deliberately small: everything the networks,
//! losses, and rate estimator need — and nothing else — implemented over
//! `ndarray` in `f64` so that gradients can be validated against central
//! finite differences at tight tolerances and so that runs are bit-for-bit
//! reproducible on a single thread.
//!
//! Domain-specific differentiable operations (bilinear warping, the entropy
//! model's rate term) plug in through the [`CustomOp`] trait from their own
//! modules rather than being hardwired here.
//!
//! # Usage
//!
//! ```
//! use blurvc::autodiff::Graph;
//! use ndarray::arr1;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(arr1(&[1.0, 2.0, 3.0]).into_dyn());
//! let y = g.square(x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss);
//! assert_eq!(grads.get(x).unwrap()[[1]], 4.0); // d(x^2)/dx = 2x
//! ```

pub mod check;
pub mod kernels;

use std::rc::Rc;

use ndarray::{ArrayD, ArrayView3, ArrayViewD, Axis, IxDyn, Slice};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(usize);

/// A differentiable operation defined outside this module.
///
/// `backward` receives the same input values the forward pass saw plus the
/// gradient of the loss with respect to the op's output, and returns one
/// gradient (or `None`) per input. Implementations recompute whatever
/// intermediates they need from the inputs.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[ArrayViewD<f64>]) -> ArrayD<f64>;
    fn backward(&self, inputs: &[ArrayViewD<f64>], grad_out: &ArrayViewD<f64>)
        -> Vec<Option<ArrayD<f64>>>;
}

enum Op {
    Leaf,
    Add(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    Div(Tid, Tid),
    Scale(Tid, f64),
    Offset(Tid),
    Relu(Tid),
    SoftRelu(Tid),
    Abs(Tid),
    Square(Tid),
    Sqrt(Tid),
    PowConst(Tid, f64),
    Sum(Tid),
    SumChannels(Tid),
    Concat(Vec<Tid>),
    Conv2d { x: Tid, w: Tid, b: Option<Tid>, pad: usize },
    SpaceToDepth(Tid, usize),
    DepthToSpace(Tid, usize),
    AvgPool(Tid, usize),
    GaussValid { x: Tid, taps: Vec<f64> },
    Custom { op: Rc<dyn CustomOp>, inputs: Vec<Tid> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients returned by [`Graph::backward`], indexed by leaf [`Tid`].
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to the given leaf, if it received any.
    pub fn get(&self, t: Tid) -> Option<&ArrayD<f64>> {
        self.slots.get(t.0).and_then(|s| s.as_ref())
    }

    /// Like [`Grads::get`] but returns a zero array of the leaf's shape when
    /// no gradient flowed.
    pub fn get_or_zeros(&self, t: Tid, shape: &[usize]) -> ArrayD<f64> {
        match self.get(t) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// The tape. See the module docs for the overall contract.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Tid {
        self.nodes.push(Node { value, op, needs_grad });
        Tid(self.nodes.len() - 1)
    }

    fn ng(&self, t: Tid) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// Insert a differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, v: ArrayD<f64>) -> Tid {
        self.push(v, Op::Leaf, true)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, v: ArrayD<f64>) -> Tid {
        self.push(v, Op::Leaf, false)
    }

    /// Value of a node.
    pub fn value(&self, t: Tid) -> &ArrayD<f64> {
        &self.nodes[t.0].value
    }

    /// Value of a node viewed as `[C, H, W]`.
    pub fn value3(&self, t: Tid) -> ArrayView3<'_, f64> {
        self.nodes[t.0]
            .value
            .view()
            .into_dimensionality()
            .expect("node is not 3-d")
    }

    /// Value of a 0-d (scalar) node.
    pub fn scalar(&self, t: Tid) -> f64 {
        let v = &self.nodes[t.0].value;
        assert_eq!(v.len(), 1, "node is not a scalar");
        *v.first().unwrap()
    }

    fn binary_shapes_match(&self, a: Tid, b: Tid) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "elementwise op shape mismatch"
        );
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        self.binary_shapes_match(a, b);
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        self.binary_shapes_match(a, b);
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        self.binary_shapes_match(a, b);
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Elementwise division; the caller guarantees a nonvanishing denominator.
    pub fn div(&mut self, a: Tid, b: Tid) -> Tid {
        self.binary_shapes_match(a, b);
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn offset(&mut self, a: Tid, c: f64) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::Offset(a), ng)
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Smooth, strictly monotone activation: `softplus(x) - ln 2`.
    ///
    /// Zero at zero, derivative `sigmoid(x)` everywhere in `(0, 1)`, so no
    /// unit ever has an exactly-zero gradient and finite-difference probes
    /// see no kinks.
    pub fn soft_relu(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| stable_softplus(x) - std::f64::consts::LN_2);
        let ng = self.ng(a);
        self.push(v, Op::SoftRelu(a), ng)
    }

    pub fn abs(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    /// Elementwise square root; the caller guarantees nonnegative input.
    pub fn sqrt(&mut self, a: Tid) -> Tid {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    /// Elementwise `x^p` for positive inputs.
    pub fn pow_const(&mut self, a: Tid, p: f64) -> Tid {
        let v = self.nodes[a.0].value.mapv(|x| x.powf(p));
        let ng = self.ng(a);
        self.push(v, Op::PowConst(a, p), ng)
    }

    /// Sum of all elements, as a 0-d node.
    pub fn sum(&mut self, a: Tid) -> Tid {
        let s = self.nodes[a.0].value.sum();
        let ng = self.ng(a);
        self.push(ndarray::arr0(s).into_dyn(), Op::Sum(a), ng)
    }

    /// Mean of all elements, as a 0-d node.
    pub fn mean(&mut self, a: Tid) -> Tid {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[C, H, W] -> [1, H, W]` channel sum.
    pub fn sum_channels(&mut self, a: Tid) -> Tid {
        let v3 = self.value3(a);
        let summed = v3.sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(summed.into_dyn(), Op::SumChannels(a), ng)
    }

    /// Concatenate `[Ci, H, W]` nodes along the channel axis.
    pub fn concat(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<ArrayView3<f64>> = parts.iter().map(|&t| self.value3(t)).collect();
        let v = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat shape mismatch");
        let ng = parts.iter().any(|&t| self.ng(t));
        self.push(v.into_dyn(), Op::Concat(parts.to_vec()), ng)
    }

    /// Stride-1 2-d convolution: `x` is `[Cin, H, W]`, `w` is
    /// `[Cout, Cin, k, k]`, optional bias `[Cout]`, symmetric zero padding.
    pub fn conv2d(&mut self, x: Tid, w: Tid, b: Option<Tid>, pad: usize) -> Tid {
        let xv = self.value3(x);
        let wv = &self.nodes[w.0].value;
        let wdim = wv.shape();
        assert_eq!(wdim.len(), 4, "conv weight must be 4-d");
        let (c_out, c_in, k) = (wdim[0], wdim[1], wdim[2]);
        assert_eq!(wdim[3], k, "conv kernel must be square");
        assert_eq!(xv.dim().0, c_in, "conv input channel mismatch");
        let (_, h, ww) = xv.dim();
        let cols = kernels::im2col(&xv, k, pad);
        let w2 = wv
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .expect("weights contiguous");
        let mut y2 = w2.dot(&cols);
        if let Some(bt) = b {
            let bv = &self.nodes[bt.0].value;
            assert_eq!(bv.len(), c_out, "conv bias length mismatch");
            for (mut row, bias) in y2.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                row += *bias;
            }
        }
        let v = y2
            .into_shape_with_order((c_out, h, ww))
            .expect("conv output reshape");
        let ng = self.ng(x) || self.ng(w) || b.map(|bt| self.ng(bt)).unwrap_or(false);
        self.push(v.into_dyn(), Op::Conv2d { x, w, b, pad }, ng)
    }

    /// `[C, H, W] -> [C*r*r, H/r, W/r]`.
    pub fn space_to_depth(&mut self, x: Tid, r: usize) -> Tid {
        let v = kernels::space_to_depth(&self.value3(x), r);
        let ng = self.ng(x);
        self.push(v.into_dyn(), Op::SpaceToDepth(x, r), ng)
    }

    /// `[C*r*r, H, W] -> [C, H*r, W*r]`.
    pub fn depth_to_space(&mut self, x: Tid, r: usize) -> Tid {
        let v = kernels::depth_to_space(&self.value3(x), r);
        let ng = self.ng(x);
        self.push(v.into_dyn(), Op::DepthToSpace(x, r), ng)
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Tid, k: usize) -> Tid {
        let v = kernels::avg_pool(&self.value3(x), k);
        let ng = self.ng(x);
        self.push(v.into_dyn(), Op::AvgPool(x, k), ng)
    }

    /// Per-channel separable filtering with a symmetric tap vector and valid
    /// boundaries (used for the structural-similarity windows).
    pub fn gauss_valid(&mut self, x: Tid, taps: Vec<f64>) -> Tid {
        let v = kernels::separable_filter_valid(&self.value3(x), &taps);
        let ng = self.ng(x);
        self.push(v.into_dyn(), Op::GaussValid { x, taps }, ng)
    }

    /// Apply a [`CustomOp`].
    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Tid]) -> Tid {
        let views: Vec<ArrayViewD<f64>> =
            inputs.iter().map(|&t| self.nodes[t.0].value.view()).collect();
        let v = op.forward(&views);
        let ng = inputs.iter().any(|&t| self.ng(t));
        self.push(
            v,
            Op::Custom { op, inputs: inputs.to_vec() },
            ng,
        )
    }

    /// Reverse sweep from a scalar loss; returns leaf gradients.
    pub fn backward(&self, loss: Tid) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        assert!(self.ng(loss), "loss does not depend on any differentiable leaf");
        let mut slots: Vec<Option<ArrayD<f64>>> = Vec::new();
        slots.resize_with(self.nodes.len(), || None);
        slots[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                slots[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // retain leaf gradients for the caller
            }
            let Some(g) = slots[i].take() else { continue };
            self.propagate(i, &g, &mut slots);
        }
        // Matmul-backed backward formulas can produce valid but
        // non-standard-layout arrays for degenerate shapes; repack so every
        // consumer may assume contiguous row-major gradients.
        for slot in slots.iter_mut() {
            if let Some(a) = slot {
                if !a.is_standard_layout() {
                    *a = a.as_standard_layout().into_owned();
                }
            }
        }
        Grads { slots }
    }

    fn propagate(&self, i: usize, g: &ArrayD<f64>, slots: &mut [Option<ArrayD<f64>>]) {
        fn acc(slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>) {
            match slot {
                Some(existing) => *existing += &delta,
                None => *slot = Some(delta),
            }
        }
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves are retained, not propagated"),
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(&mut slots[a.0], g.clone());
                }
                if self.ng(*b) {
                    acc(&mut slots[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    acc(&mut slots[a.0], g.clone());
                }
                if self.ng(*b) {
                    acc(&mut slots[b.0], g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(&mut slots[a.0], g * &self.nodes[b.0].value);
                }
                if self.ng(*b) {
                    acc(&mut slots[b.0], g * &self.nodes[a.0].value);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                if self.ng(*a) {
                    acc(&mut slots[a.0], g / bv);
                }
                if self.ng(*b) {
                    let av = &self.nodes[a.0].value;
                    acc(&mut slots[b.0], -(g * av) / (bv * bv));
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    acc(&mut slots[a.0], g.mapv(|x| x * c));
                }
            }
            Op::Offset(a) => {
                if self.ng(*a) {
                    acc(&mut slots[a.0], g.clone());
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut slots[a.0], g * &mask);
                }
            }
            Op::SoftRelu(a) => {
                if self.ng(*a) {
                    let d = self.nodes[a.0].value.mapv(sigmoid);
                    acc(&mut slots[a.0], g * &d);
                }
            }
            Op::Abs(a) => {
                if self.ng(*a) {
                    let s = self.nodes[a.0].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut slots[a.0], g * &s);
                }
            }
            Op::Square(a) => {
                if self.ng(*a) {
                    let d = self.nodes[a.0].value.mapv(|x| 2.0 * x);
                    acc(&mut slots[a.0], g * &d);
                }
            }
            Op::Sqrt(a) => {
                if self.ng(*a) {
                    // d sqrt(x)/dx = 1 / (2 sqrt(x)); forward value reused.
                    // At x == 0 the derivative is unbounded; use subgradient 0
                    // (the convention that makes norms of zero vectors inert).
                    let d = self.nodes[i].value.mapv(|y| if y == 0.0 { 0.0 } else { 0.5 / y });
                    acc(&mut slots[a.0], g * &d);
                }
            }
            Op::PowConst(a, p) => {
                if self.ng(*a) {
                    let d = self.nodes[a.0].value.mapv(|x| p * x.powf(p - 1.0));
                    acc(&mut slots[a.0], g * &d);
                }
            }
            Op::Sum(a) => {
                if self.ng(*a) {
                    let gs = *g.first().unwrap();
                    let shape = self.nodes[a.0].value.raw_dim();
                    acc(&mut slots[a.0], ArrayD::from_elem(shape, gs));
                }
            }
            Op::SumChannels(a) => {
                if self.ng(*a) {
                    let av = self.value3(*a);
                    let (c, _, _) = av.dim();
                    let g3: ArrayView3<f64> =
                        g.view().into_dimensionality().expect("sum_channels grad");
                    let g2 = g3.index_axis(Axis(0), 0);
                    let mut out = ndarray::Array3::zeros(av.raw_dim());
                    for ci in 0..c {
                        out.index_axis_mut(Axis(0), ci).assign(&g2);
                    }
                    acc(&mut slots[a.0], out.into_dyn());
                }
            }
            Op::Concat(parts) => {
                let g3: ArrayView3<f64> = g.view().into_dimensionality().expect("concat grad");
                let mut start = 0;
                for &p in parts {
                    let c = self.value3(p).dim().0;
                    if self.ng(p) {
                        let piece = g3
                            .slice_axis(Axis(0), Slice::from(start..start + c))
                            .to_owned();
                        acc(&mut slots[p.0], piece.into_dyn());
                    }
                    start += c;
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let xv = self.value3(*x);
                let wv = &self.nodes[w.0].value;
                let wdim = wv.shape();
                let (c_out, c_in, k) = (wdim[0], wdim[1], wdim[2]);
                let (_, h, ww) = xv.dim();
                let g2 = g
                    .view()
                    .into_shape_with_order((c_out, h * ww))
                    .expect("conv grad reshape");
                if self.ng(*w) {
                    let cols = kernels::im2col(&xv, k, *pad);
                    // `dot` may return a non-standard layout for degenerate
                    // shapes (1x1 spatial maps), so reshape with fallback copy.
                    let gw = g2.dot(&cols.t());
                    acc(
                        &mut slots[w.0],
                        gw.into_shape_clone((c_out, c_in, k, k))
                            .expect("grad_w reshape")
                            .into_dyn(),
                    );
                }
                if self.ng(*x) {
                    let w2 = wv
                        .view()
                        .into_shape_with_order((c_out, c_in * k * k))
                        .expect("weights contiguous");
                    let gcols = w2.t().dot(&g2);
                    let gx = kernels::col2im(&gcols.view(), c_in, h, ww, k, *pad);
                    acc(&mut slots[x.0], gx.into_dyn());
                }
                if let Some(bt) = b {
                    if self.ng(*bt) {
                        let gb = g2.sum_axis(Axis(1));
                        acc(&mut slots[bt.0], gb.into_dyn());
                    }
                }
            }
            Op::SpaceToDepth(a, r) => {
                if self.ng(*a) {
                    let g3: ArrayView3<f64> = g.view().into_dimensionality().expect("s2d grad");
                    acc(&mut slots[a.0], kernels::depth_to_space(&g3, *r).into_dyn());
                }
            }
            Op::DepthToSpace(a, r) => {
                if self.ng(*a) {
                    let g3: ArrayView3<f64> = g.view().into_dimensionality().expect("d2s grad");
                    acc(&mut slots[a.0], kernels::space_to_depth(&g3, *r).into_dyn());
                }
            }
            Op::AvgPool(a, k) => {
                if self.ng(*a) {
                    let g3: ArrayView3<f64> = g.view().into_dimensionality().expect("pool grad");
                    acc(&mut slots[a.0], kernels::avg_pool_backward(&g3, *k).into_dyn());
                }
            }
            Op::GaussValid { x, taps } => {
                if self.ng(*x) {
                    let xv = self.value3(*x);
                    let (_, h, w) = xv.dim();
                    let g3: ArrayView3<f64> = g.view().into_dimensionality().expect("gauss grad");
                    acc(
                        &mut slots[x.0],
                        kernels::separable_filter_valid_backward(&g3, taps, h, w).into_dyn(),
                    );
                }
            }
            Op::Custom { op, inputs } => {
                let views: Vec<ArrayViewD<f64>> =
                    inputs.iter().map(|&t| self.nodes[t.0].value.view()).collect();
                let grads = op.backward(&views, &g.view());
                assert_eq!(
                    grads.len(),
                    inputs.len(),
                    "custom op {} returned wrong gradient count",
                    op.name()
                );
                for (t, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if self.ng(*t) {
                            acc(&mut slots[t.0], gi);
                        }
                    }
                }
            }
        }
    }
}
