//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Tape`] records a directed acyclic graph of tensor operations;
//! [`Tape::backward`] walks it in reverse and accumulates gradients.
//! The engine is generic over the float type so the same network code
//! runs in `f32` for training and `f64` for finite-difference checks.
//!
//! Conventions: images and feature maps are channel-first `(C, H, W)`,
//! deformation fields are `(2, H, W)` with `dx` at channel 0, vectors
//! are 1-d, and scalars are 0-d arrays.

mod conv;
pub mod gradcheck;
pub mod layers;
mod var;

pub use var::{Adam, VarId, VarStore};

use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// Float element for tapes and stores.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<A: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, A),
    AddScalar(NodeId),
    Abs(NodeId),
    LeakyRelu(NodeId, A),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        cols: ndarray::Array2<A>,
    },
    BiasAdd {
        x: NodeId,
        b: NodeId,
    },
    MatVec {
        w: NodeId,
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        axis: usize,
    },
    SliceAxis {
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Upsample2x(NodeId),
    AdaptiveMaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    ChannelScale {
        x: NodeId,
        w: NodeId,
    },
    Warp {
        img: NodeId,
        field: NodeId,
    },
    SmoothLoss(NodeId),
    Normalize(NodeId),
    Dot(NodeId, NodeId),
}

struct Node<A: Scalar> {
    value: ArrayD<A>,
    op: Op<A>,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<A: Scalar> {
    nodes: Vec<Node<A>>,
    bindings: Vec<(VarId, NodeId)>,
}

impl<A: Scalar> Default for Tape<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> Tape<A> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<A>, op: Op<A>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<A> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, id: NodeId) -> A {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().expect("empty node value")
    }

    /// Differentiable leaf (e.g. a probe input in a gradient check).
    pub fn input(&mut self, value: ArrayD<A>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: ArrayD<A>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: A) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Bind a stored variable as a trainable leaf; its gradient is
    /// retrievable through [`Grads::of_var`].
    pub fn var(&mut self, store: &VarStore<A>, id: VarId) -> NodeId {
        let node = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bindings.push((id, node));
        node
    }

    /// Bind a stored variable as a constant (frozen weights).
    pub fn frozen(&mut self, store: &VarStore<A>, id: VarId) -> NodeId {
        self.push(store.get(id).clone(), Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: A) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: A) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: A) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x > A::zero() { x } else { x * slope });
        let ng = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.leaky_relu(a, A::zero())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = A::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// `ln(1 + e^x)` evaluated in its overflow-safe form.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(softplus_stable);
        let ng = self.needs(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = A::lit(self.nodes[a.0].value.len() as f64);
        let total = self.nodes[a.0].value.iter().fold(A::zero(), |acc, &x| acc + x);
        let v = ArrayD::from_elem(IxDyn(&[]), total / n);
        let ng = self.needs(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a.0].value.iter().fold(A::zero(), |acc, &x| acc + x);
        let v = ArrayD::from_elem(IxDyn(&[]), total);
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// 2-d convolution: `x` is `(C_in, H, W)`, `w` is `(C_out, C_in, kh, kw)`,
    /// zero padding. Output is `(C_out, Ho, Wo)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let (v, cols) = conv::conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad);
        let ng = self.needs(x) || self.needs(w);
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
            ng,
        )
    }

    /// Add a per-channel bias `b: (C,)` to `x: (C, H, W)`.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(b), &[xs[0]], "bias_add channel mismatch");
        let mut v = self.nodes[x.0].value.clone();
        let bv = &self.nodes[b.0].value;
        for c in 0..xs[0] {
            let bc = bv[[c]];
            v.index_axis_mut(Axis(0), c).mapv_inplace(|t| t + bc);
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(v, Op::BiasAdd { x, b }, ng)
    }

    /// `w: (O, I)` times `x: (I,)` giving `(O,)`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matvec weight must be 2-d");
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("matvec input must be 1-d");
        assert_eq!(wv.ncols(), xv.len(), "matvec shape mismatch");
        let v = wv.dot(&xv).into_dyn();
        let ng = self.needs(w) || self.needs(x);
        self.push(v, Op::MatVec { w, x }, ng)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> NodeId {
        let v = ndarray::concatenate(
            Axis(axis),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("concat shape mismatch");
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Concat { a, b, axis }, ng)
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let ng = self.needs(x);
        self.push(
            v,
            Op::SliceAxis {
                x,
                axis,
                start,
                end,
            },
            ng,
        )
    }

    /// Nearest-neighbor 2x spatial upsampling of `(C, H, W)`.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv);
        let mut v = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let t = xv[[ch, i, j]];
                    v[[ch, 2 * i, 2 * j]] = t;
                    v[[ch, 2 * i, 2 * j + 1]] = t;
                    v[[ch, 2 * i + 1, 2 * j]] = t;
                    v[[ch, 2 * i + 1, 2 * j + 1]] = t;
                }
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::Upsample2x(x), ng)
    }

    /// Adaptive max pooling of `(C, H, W)` to `(C, oh, ow)`. Output cell
    /// `(i, j)` covers input rows `[floor(i*H/oh), ceil((i+1)*H/oh))` and
    /// the analogous columns; ties resolve to the first element scanned.
    pub fn adaptive_max_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv);
        assert!(oh >= 1 && ow >= 1 && oh <= h && ow <= w, "bad pool target");
        let mut v = ArrayD::zeros(IxDyn(&[c, oh, ow]));
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                let r0 = i * h / oh;
                let r1 = ((i + 1) * h).div_ceil(oh);
                for j in 0..ow {
                    let c0 = j * w / ow;
                    let c1 = ((j + 1) * w).div_ceil(ow);
                    let mut best = xv[[ch, r0, c0]];
                    let mut best_flat = (ch * h + r0) * w + c0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            let t = xv[[ch, r, cc]];
                            if t > best {
                                best = t;
                                best_flat = (ch * h + r) * w + cc;
                            }
                        }
                    }
                    v[[ch, i, j]] = best;
                    argmax[(ch * oh + i) * ow + j] = best_flat;
                }
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::AdaptiveMaxPool { x, argmax }, ng)
    }

    /// Per-channel spatial mean of `(C, H, W)` giving `(C,)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv);
        let n = A::lit((h * w) as f64);
        let mut v = ArrayD::zeros(IxDyn(&[c]));
        for ch in 0..c {
            let total = xv
                .index_axis(Axis(0), ch)
                .iter()
                .fold(A::zero(), |acc, &t| acc + t);
            v[[ch]] = total / n;
        }
        let ng = self.needs(x);
        self.push(v, Op::GlobalAvgPool(x), ng)
    }

    /// Channel-wise multiplication: `x: (C, H, W)` scaled by `w: (C,)`.
    pub fn channel_scale(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(w), &[xs[0]], "channel_scale dim mismatch");
        let mut v = self.nodes[x.0].value.clone();
        let wv = &self.nodes[w.0].value;
        for c in 0..xs[0] {
            let f = wv[[c]];
            v.index_axis_mut(Axis(0), c).mapv_inplace(|t| t * f);
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(v, Op::ChannelScale { x, w }, ng)
    }

    /// Differentiable bilinear warp. `img: (C, H, W)`, `field: (2, H, W)`;
    /// `out(p) = img(p + field(p))` with border-clamped sampling.
    pub fn warp(&mut self, img: NodeId, field: NodeId) -> NodeId {
        let iv = &self.nodes[img.0].value;
        let fv = &self.nodes[field.0].value;
        let (c, h, w) = dims3(iv);
        let fs = fv.shape();
        assert_eq!(fs, &[2, h, w], "warp field/image shape mismatch");
        let mut v = ArrayD::zeros(IxDyn(&[c, h, w]));
        for i in 0..h {
            for j in 0..w {
                let sx = A::lit(j as f64) + fv[[0, i, j]];
                let sy = A::lit(i as f64) + fv[[1, i, j]];
                let (x0, x1, fx) = clamp_lerp(sx, w);
                let (y0, y1, fy) = clamp_lerp(sy, h);
                for ch in 0..c {
                    let top = iv[[ch, y0, x0]] * (A::one() - fx) + iv[[ch, y0, x1]] * fx;
                    let bot = iv[[ch, y1, x0]] * (A::one() - fx) + iv[[ch, y1, x1]] * fx;
                    v[[ch, i, j]] = top * (A::one() - fy) + bot * fy;
                }
            }
        }
        let ng = self.needs(img) || self.needs(field);
        self.push(v, Op::Warp { img, field }, ng)
    }

    /// Mean squared forward-difference norm of a `(2, H, W)` field over
    /// the `(H-1) x (W-1)` positions where both differences exist.
    pub fn smoothness(&mut self, field: NodeId) -> NodeId {
        let fv = &self.nodes[field.0].value;
        let (c, h, w) = dims3(fv);
        assert_eq!(c, 2, "smoothness expects a (2, H, W) field");
        assert!(h >= 2 && w >= 2, "field too small for gradients");
        let mut total = A::zero();
        for ch in 0..2 {
            for i in 0..h - 1 {
                for j in 0..w - 1 {
                    let dx = fv[[ch, i, j + 1]] - fv[[ch, i, j]];
                    let dy = fv[[ch, i + 1, j]] - fv[[ch, i, j]];
                    total += dx * dx + dy * dy;
                }
            }
        }
        let n = A::lit(((h - 1) * (w - 1)) as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), total / n);
        let ng = self.needs(field);
        self.push(v, Op::SmoothLoss(field), ng)
    }

    /// L2 normalization of a vector.
    pub fn normalize(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let norm = xv.iter().fold(A::zero(), |acc, &t| acc + t * t).sqrt();
        let n = if norm > A::zero() { norm } else { A::one() };
        let v = xv.mapv(|t| t / n);
        let ng = self.needs(x);
        self.push(v, Op::Normalize(x), ng)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "dot shape mismatch");
        let total = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .fold(A::zero(), |acc, (&x, &y)| acc + x * y);
        let v = ArrayD::from_elem(IxDyn(&[]), total);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Dot(a, b), ng)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Grads<A> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<A>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), A::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || grads[id].is_none() {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Grads {
            by_node: grads,
            var_bindings: self.bindings.clone(),
        }
    }

    fn propagate(&self, id: usize, g: &ArrayD<A>, grads: &mut [Option<ArrayD<A>>]) {
        let nodes = &self.nodes;
        let acc = |grads: &mut [Option<ArrayD<A>>], p: NodeId, delta: ArrayD<A>| {
            if !nodes[p.0].needs_grad {
                return;
            }
            match &mut grads[p.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|t| -t));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &nodes[b.0].value);
                acc(grads, *b, g * &nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let bv = &nodes[b.0].value;
                acc(grads, *a, g / bv);
                let y = &nodes[id].value;
                let gb = g.iter()
                    .zip(y.iter())
                    .zip(bv.iter())
                    .map(|((&gi, &yi), &bi)| -gi * yi / bi)
                    .collect::<Vec<_>>();
                acc(grads, *b, ArrayD::from_shape_vec(bv.raw_dim(), gb).unwrap());
            }
            Op::Scale(a, c) => acc(grads, *a, g.mapv(|t| t * *c)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Abs(a) => {
                let av = &nodes[a.0].value;
                let ga = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &ai)| {
                        if ai > A::zero() {
                            gi
                        } else if ai < A::zero() {
                            -gi
                        } else {
                            A::zero()
                        }
                    })
                    .collect::<Vec<_>>();
                acc(grads, *a, ArrayD::from_shape_vec(av.raw_dim(), ga).unwrap());
            }
            Op::LeakyRelu(a, slope) => {
                let av = &nodes[a.0].value;
                let ga = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &ai)| if ai > A::zero() { gi } else { gi * *slope })
                    .collect::<Vec<_>>();
                acc(grads, *a, ArrayD::from_shape_vec(av.raw_dim(), ga).unwrap());
            }
            Op::Sigmoid(a) => {
                let y = &nodes[id].value;
                let ga = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &yi)| gi * yi * (A::one() - yi))
                    .collect::<Vec<_>>();
                acc(grads, *a, ArrayD::from_shape_vec(y.raw_dim(), ga).unwrap());
            }
            Op::Softplus(a) => {
                let av = &nodes[a.0].value;
                let one = A::one();
                let ga = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &ai)| gi * (one / (one + (-ai).exp())))
                    .collect::<Vec<_>>();
                acc(grads, *a, ArrayD::from_shape_vec(av.raw_dim(), ga).unwrap());
            }
            Op::Tanh(a) => {
                let y = &nodes[id].value;
                let ga = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &yi)| gi * (A::one() - yi * yi))
                    .collect::<Vec<_>>();
                acc(grads, *a, ArrayD::from_shape_vec(y.raw_dim(), ga).unwrap());
            }
            Op::MeanAll(a) => {
                let n = A::lit(nodes[a.0].value.len() as f64);
                let gs = *g.iter().next().expect("scalar grad") / n;
                acc(grads, *a, ArrayD::from_elem(nodes[a.0].value.raw_dim(), gs));
            }
            Op::SumAll(a) => {
                let gs = *g.iter().next().expect("scalar grad");
                acc(grads, *a, ArrayD::from_elem(nodes[a.0].value.raw_dim(), gs));
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let (gx, gw) = conv::conv2d_backward(
                    g,
                    &nodes[x.0].value,
                    &nodes[w.0].value,
                    *stride,
                    *pad,
                    cols,
                    nodes[x.0].needs_grad,
                    nodes[w.0].needs_grad,
                );
                if let Some(gx) = gx {
                    acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    acc(grads, *w, gw);
                }
            }
            Op::BiasAdd { x, b } => {
                acc(grads, *x, g.clone());
                if nodes[b.0].needs_grad {
                    let c = nodes[b.0].value.len();
                    let mut gb = ArrayD::zeros(IxDyn(&[c]));
                    for ch in 0..c {
                        gb[[ch]] = g
                            .index_axis(Axis(0), ch)
                            .iter()
                            .fold(A::zero(), |acc2, &t| acc2 + t);
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::MatVec { w, x } => {
                let wv = nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let xv = nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if nodes[w.0].needs_grad {
                    let mut gw = ndarray::Array2::<A>::zeros((wv.nrows(), wv.ncols()));
                    for o in 0..wv.nrows() {
                        for i in 0..wv.ncols() {
                            gw[[o, i]] = gv[o] * xv[i];
                        }
                    }
                    acc(grads, *w, gw.into_dyn());
                }
                if nodes[x.0].needs_grad {
                    let gx = wv.t().dot(&gv);
                    acc(grads, *x, gx.into_dyn());
                }
            }
            Op::Concat { a, b, axis } => {
                let na = nodes[a.0].value.shape()[*axis];
                let ga = g.slice_axis(Axis(*axis), Slice::from(0..na)).to_owned();
                let gb = g
                    .slice_axis(Axis(*axis), Slice::from(na..g.shape()[*axis]))
                    .to_owned();
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::SliceAxis {
                x,
                axis,
                start,
                end,
            } => {
                let mut gx = ArrayD::zeros(nodes[x.0].value.raw_dim());
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                    .assign(g);
                acc(grads, *x, gx);
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = dims3(&nodes[x.0].value);
                let mut gx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[[ch, i, j]] = g[[ch, 2 * i, 2 * j]]
                                + g[[ch, 2 * i, 2 * j + 1]]
                                + g[[ch, 2 * i + 1, 2 * j]]
                                + g[[ch, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::AdaptiveMaxPool { x, argmax } => {
                let mut gx = ArrayD::zeros(nodes[x.0].value.raw_dim());
                let gx_flat = gx.as_slice_mut().expect("standard layout");
                for (k, &flat) in argmax.iter().enumerate() {
                    gx_flat[flat] += g.as_slice().expect("standard layout")[k];
                }
                acc(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = dims3(&nodes[x.0].value);
                let n = A::lit((h * w) as f64);
                let mut gx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ch in 0..c {
                    let gc = g[[ch]] / n;
                    gx.index_axis_mut(Axis(0), ch).fill(gc);
                }
                acc(grads, *x, gx);
            }
            Op::ChannelScale { x, w } => {
                let (c, h, w_) = dims3(&nodes[x.0].value);
                if nodes[x.0].needs_grad {
                    let mut gx = g.clone();
                    for ch in 0..c {
                        let f = nodes[w.0].value[[ch]];
                        gx.index_axis_mut(Axis(0), ch).mapv_inplace(|t| t * f);
                    }
                    acc(grads, *x, gx);
                }
                if nodes[w.0].needs_grad {
                    let mut gw = ArrayD::zeros(IxDyn(&[c]));
                    for ch in 0..c {
                        let mut s = A::zero();
                        for i in 0..h {
                            for j in 0..w_ {
                                s += g[[ch, i, j]] * nodes[x.0].value[[ch, i, j]];
                            }
                        }
                        gw[[ch]] = s;
                    }
                    acc(grads, *w, gw);
                }
            }
            Op::Warp { img, field } => {
                let iv = &nodes[img.0].value;
                let fv = &nodes[field.0].value;
                let (c, h, w) = dims3(iv);
                let mut gi = ArrayD::zeros(IxDyn(&[c, h, w]));
                let mut gf = ArrayD::zeros(IxDyn(&[2, h, w]));
                let one = A::one();
                for i in 0..h {
                    for j in 0..w {
                        let sx = A::lit(j as f64) + fv[[0, i, j]];
                        let sy = A::lit(i as f64) + fv[[1, i, j]];
                        let (x0, x1, fx) = clamp_lerp(sx, w);
                        let (y0, y1, fy) = clamp_lerp(sy, h);
                        // clamped coordinates stop responding to the field
                        let in_x = sx > A::zero() && sx < A::lit((w - 1) as f64);
                        let in_y = sy > A::zero() && sy < A::lit((h - 1) as f64);
                        let mut gsx = A::zero();
                        let mut gsy = A::zero();
                        for ch in 0..c {
                            let go = g[[ch, i, j]];
                            let v00 = iv[[ch, y0, x0]];
                            let v01 = iv[[ch, y0, x1]];
                            let v10 = iv[[ch, y1, x0]];
                            let v11 = iv[[ch, y1, x1]];
                            if nodes[img.0].needs_grad {
                                gi[[ch, y0, x0]] += go * (one - fy) * (one - fx);
                                gi[[ch, y0, x1]] += go * (one - fy) * fx;
                                gi[[ch, y1, x0]] += go * fy * (one - fx);
                                gi[[ch, y1, x1]] += go * fy * fx;
                            }
                            if in_x {
                                gsx += go * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                            }
                            if in_y {
                                gsy += go * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                        }
                        gf[[0, i, j]] = gsx;
                        gf[[1, i, j]] = gsy;
                    }
                }
                if nodes[img.0].needs_grad {
                    acc(grads, *img, gi);
                }
                acc(grads, *field, gf);
            }
            Op::SmoothLoss(field) => {
                let fv = &nodes[field.0].value;
                let (_, h, w) = dims3(fv);
                let n = A::lit(((h - 1) * (w - 1)) as f64);
                let gs = *g.iter().next().expect("scalar grad") / n;
                let two = A::lit(2.0);
                let mut gf = ArrayD::zeros(fv.raw_dim());
                for ch in 0..2 {
                    for i in 0..h - 1 {
                        for j in 0..w - 1 {
                            let dx = fv[[ch, i, j + 1]] - fv[[ch, i, j]];
                            let dy = fv[[ch, i + 1, j]] - fv[[ch, i, j]];
                            gf[[ch, i, j + 1]] += two * dx * gs;
                            gf[[ch, i, j]] -= two * dx * gs;
                            gf[[ch, i + 1, j]] += two * dy * gs;
                            gf[[ch, i, j]] -= two * dy * gs;
                        }
                    }
                }
                acc(grads, *field, gf);
            }
            Op::Normalize(x) => {
                let xv = &nodes[x.0].value;
                let y = &nodes[id].value;
                let norm = xv.iter().fold(A::zero(), |acc2, &t| acc2 + t * t).sqrt();
                let n = if norm > A::zero() { norm } else { A::one() };
                let ydotg = y
                    .iter()
                    .zip(g.iter())
                    .fold(A::zero(), |acc2, (&yi, &gi)| acc2 + yi * gi);
                let gx = y
                    .iter()
                    .zip(g.iter())
                    .map(|(&yi, &gi)| (gi - yi * ydotg) / n)
                    .collect::<Vec<_>>();
                acc(grads, *x, ArrayD::from_shape_vec(xv.raw_dim(), gx).unwrap());
            }
            Op::Dot(a, b) => {
                let gs = *g.iter().next().expect("scalar grad");
                acc(grads, *a, nodes[b.0].value.mapv(|t| t * gs));
                acc(grads, *b, nodes[a.0].value.mapv(|t| t * gs));
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<A: Scalar> {
    by_node: Vec<Option<ArrayD<A>>>,
    var_bindings: Vec<(VarId, NodeId)>,
}

impl<A: Scalar> Grads<A> {
    /// Gradient with respect to a leaf node, if it received one.
    pub fn wrt(&self, id: NodeId) -> Option<&ArrayD<A>> {
        self.by_node[id.0].as_ref()
    }

    /// Gradient with respect to a stored variable, summed over all of its
    /// bindings on the tape. Zero if the variable was never bound or never
    /// received a gradient.
    pub fn of_var(&self, store: &VarStore<A>, id: VarId) -> ArrayD<A> {
        let mut out = ArrayD::zeros(store.get(id).raw_dim());
        for (vid, node) in &self.var_bindings {
            if *vid == id {
                if let Some(g) = &self.by_node[node.0] {
                    out += g;
                }
            }
        }
        out
    }

    /// Gradients for every variable in the store, in store order.
    pub fn all_vars(&self, store: &VarStore<A>) -> Vec<ArrayD<A>> {
        (0..store.len()).map(|i| self.of_var(store, VarId(i))).collect()
    }
}

fn softplus_stable<A: Scalar>(x: A) -> A {
    // max(x, 0) + ln(1 + e^{-|x|})
    let m = if x > A::zero() { x } else { A::zero() };
    m + (A::one() + (-x.abs()).exp()).ln()
}

fn dims3<A: Scalar>(v: &ArrayD<A>) -> (usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 3, "expected a 3-d array, got {s:?}");
    (s[0], s[1], s[2])
}

/// Clamped bilinear tap: returns floor/ceil indices and the fraction.
fn clamp_lerp<A: Scalar>(s: A, extent: usize) -> (usize, usize, A) {
    let max = A::lit((extent - 1) as f64);
    let c = if s < A::zero() {
        A::zero()
    } else if s > max {
        max
    } else {
        s
    };
    let f = c.floor();
    let i0 = f.to_f64_lossy() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, c - f)
}

#[cfg(test)]
mod tests;
