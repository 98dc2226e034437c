//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation
//! evaluates eagerly, records its inputs, and [`Graph::backward`] walks the
//! record in reverse. Shape errors inside the graph are programming errors
//! and panic; callers validate user-facing inputs before building graphs.

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::scalar::{matmul, MatRef};
use crate::tensor::numel;
use crate::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Relu,
    LeakyRelu(T),
    Tanh,
    Sigmoid,
    Exp,
    /// Natural log with the output floored at the given value.
    LnFloor(T),
    Abs,
    Sqrt,
    Square,
    Recip,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary<T>),
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    RowNorm(Var),
    RowScale(Var, Var),
    Reshape(Var),
    Concat(Vec<Var>),
    CatRows(Vec<Var>),
    Narrow(Var, usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample(Var, usize),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Tile(Var),
    PairwiseSqDist(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], one per leaf that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient [`Graph::backward`] will report.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the current value of `v` into a new constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data).expect("same shape");
        self.push_op(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push_op(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push_op(out, Op::AddScalar(a), &[a])
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: T, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, c)
    }

    fn unary(&mut self, a: Var, u: Unary<T>) -> Var {
        let f: Box<dyn Fn(T) -> T> = match u {
            Unary::Relu => Box::new(|x: T| if x > T::zero() { x } else { T::zero() }),
            Unary::LeakyRelu(s) => Box::new(move |x: T| if x > T::zero() { x } else { x * s }),
            Unary::Tanh => Box::new(|x: T| x.tanh()),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Exp => Box::new(|x: T| x.exp()),
            Unary::LnFloor(lo) => Box::new(move |x: T| x.ln().max(lo)),
            Unary::Abs => Box::new(|x: T| x.abs()),
            Unary::Sqrt => Box::new(|x: T| x.sqrt()),
            Unary::Square => Box::new(|x: T| x * x),
            Unary::Recip => Box::new(|x: T| T::one() / x),
        };
        let out = self.value(a).map(f);
        self.push_op(out, Op::Unary(a, u), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// Natural log, floored at `floor` (gradient is zero where the floor binds).
    pub fn ln_floor(&mut self, a: Var, floor: T) -> Var {
        self.unary(a, Unary::LnFloor(floor))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert!(v.numel() > 0, "mean of empty tensor");
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `[N, C, H, W] -> [N, C]` average over the spatial axes.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.shape();
        assert_eq!(s.len(), 4, "mean_spatial expects NCHW");
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let inv = T::lit(1.0 / plane as f64);
        let data = v.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(vec![n, c], data).expect("shape");
        self.push_op(out, Op::MeanSpatial(a), &[a])
    }

    /// `[N, D] -> [N]` Euclidean norm of each row.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.shape();
        assert_eq!(s.len(), 2, "row_norm expects [N, D]");
        let data = v.data().chunks(s[1].max(1)).map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
        let out = Tensor::from_vec(vec![s[0]], data).expect("shape");
        self.push_op(out, Op::RowNorm(a), &[a])
    }

    /// `x [N, ...] * s [N]`, scaling every row of `x` by its own factor.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let n = vx.shape().first().copied().unwrap_or(0);
        assert_eq!(vs.numel(), n, "row_scale needs one factor per row");
        let row = vx.numel().checked_div(n).unwrap_or(0);
        let mut data = Vec::with_capacity(vx.numel());
        for (r, &k) in vx.data().chunks(row.max(1)).zip(vs.data()) {
            data.extend(r.iter().map(|&v| v * k));
        }
        let out = Tensor::from_vec(vx.shape().to_vec(), data).expect("shape");
        self.push_op(out, Op::RowScale(x, s), &[x, s])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape.to_vec());
        self.push_op(out, Op::Reshape(a), &[a])
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        assert!(first.len() >= 2, "concat needs rank >= 2");
        let n = first[0];
        let inner = numel(&first[2..]);
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[0], n, "concat batch mismatch");
            assert_eq!(s[2..], first[2..], "concat trailing shape mismatch");
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n * total_c * inner);
        for i in 0..n {
            for &p in parts {
                let v = self.value(p);
                let row = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let out = Tensor::from_vec(shape, data).expect("shape");
        self.push_op(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Concatenates along axis 0; all other axes must agree.
    pub fn cat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "cat_rows of nothing");
        let first = self.shape(parts[0]).to_vec();
        let tensors: Vec<&Tensor<T>> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p)[1..], first[1..], "cat_rows trailing shape mismatch");
                self.value(p)
            })
            .collect();
        let out = Tensor::cat_rows(&tensors);
        self.push_op(out, Op::CatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` along axis 0.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).rows(start, len);
        self.push_op(out, Op::Narrow(a, start), &[a])
    }

    /// `x [N, in] * w^T [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape(), vw.shape());
        assert_eq!(xs.len(), 2, "linear input must be [N, in], got {xs:?}");
        assert_eq!(ws.len(), 2, "linear weight must be [out, in]");
        assert_eq!(xs[1], ws[1], "linear in-features mismatch: {xs:?} vs {ws:?}");
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let vb = self.value(b).data();
            assert_eq!(vb.len(), fout, "linear bias size mismatch");
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(vb);
            }
        }
        matmul(
            T::one(),
            MatRef::row_major(vx.data(), n, fin),
            MatRef::transposed(vw.data(), fout, fin),
            T::one(),
            &mut out,
        );
        let out = Tensor::from_vec(vec![n, fout], out).expect("shape");
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        let bias = b.map(|b| {
            let vb = self.value(b).data();
            assert_eq!(vb.len(), geom.out_c, "conv2d bias size mismatch");
            vb
        });
        let y = conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let out = Tensor::from_vec(geom.output_shape().to_vec(), y).expect("shape");
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op(out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Nearest-neighbour spatial upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let v = self.value(x);
        let s = v.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample expects NCHW");
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in v.data().chunks(h * w) {
            for oy in 0..oh {
                let src = &plane[(oy / factor) * w..][..w];
                for ox in 0..ow {
                    data.push(src[ox / factor]);
                }
            }
        }
        let out = Tensor::from_vec(vec![s[0], s[1], oh, ow], data).expect("shape");
        self.push_op(out, Op::Upsample(x, factor), &[x])
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 4, "instance_norm expects NCHW");
        let plane = s[2] * s[3];
        let inv_n = T::lit(1.0 / plane as f64);
        let mut data = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(s[0] * s[1]);
        for p in v.data().chunks(plane) {
            let mean = p.iter().copied().sum::<T>() * inv_n;
            let var = p.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(p.iter().map(|&a| (a - mean) * is));
        }
        let out = Tensor::from_vec(s.to_vec(), data).expect("shape");
        self.push_op(out, Op::InstanceNorm { x, inv_std }, &[x])
    }

    /// `x * scale[c] + shift[c]` over an NCHW tensor.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (vx, vs, vb) = (self.value(x), self.value(scale), self.value(shift));
        let s = vx.shape();
        assert_eq!(s.len(), 4, "channel_affine expects NCHW");
        let c = s[1];
        assert_eq!(vs.numel(), c, "channel_affine scale size");
        assert_eq!(vb.numel(), c, "channel_affine shift size");
        let plane = s[2] * s[3];
        let mut data = Vec::with_capacity(vx.numel());
        for (i, p) in vx.data().chunks(plane).enumerate() {
            let (a, b) = (vs.data()[i % c], vb.data()[i % c]);
            data.extend(p.iter().map(|&v| v * a + b));
        }
        let out = Tensor::from_vec(s.to_vec(), data).expect("shape");
        self.push_op(out, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// `[N, C] -> [N, C, H, W]` by repeating each value over the plane.
    pub fn tile(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 2, "tile expects [N, C]");
        let plane = h * w;
        let mut data = Vec::with_capacity(v.numel() * plane);
        for &a in v.data() {
            data.extend(std::iter::repeat_n(a, plane));
        }
        let out = Tensor::from_vec(vec![s[0], s[1], h, w], data).expect("shape");
        self.push_op(out, Op::Tile(x), &[x])
    }

    /// `a [n, d], b [m, d] -> [n, m]` squared Euclidean distances.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!(sa.len(), 2, "pairwise_sq_dist expects [n, d]");
        assert_eq!(sb.len(), 2, "pairwise_sq_dist expects [m, d]");
        assert_eq!(sa[1], sb[1], "pairwise_sq_dist dimension mismatch");
        let d = sa[1];
        let mut data = Vec::with_capacity(sa[0] * sb[0]);
        for ra in va.data().chunks(d.max(1)).take(sa[0]) {
            for rb in vb.data().chunks(d.max(1)).take(sb[0]) {
                data.push(ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        let out = Tensor::from_vec(vec![sa[0], sb[0]], data).expect("shape");
        self.push_op(out, Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Only leaves created with [`Graph::leaf`] keep their gradient in the
    /// result; intermediate gradients are released as soon as they have been
    /// propagated.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, data: Vec<T>| {
            if !self.needs(v) {
                return;
            }
            let t = Tensor::from_vec(self.shape(v).to_vec(), data).expect("gradient shape");
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gyd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gyd.to_vec());
                acc(*b, gyd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gyd.to_vec());
                if self.needs(*b) {
                    acc(*b, gyd.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(*a, gyd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.needs(*b) {
                    acc(*b, gyd.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, gyd.iter().map(|&g| g * *c).collect()),
            Op::AddScalar(a) => acc(*a, gyd.to_vec()),
            Op::Unary(a, u) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let zero = T::zero();
                let one = T::one();
                let g: Vec<T> = match *u {
                    Unary::Relu => gyd.iter().zip(x).map(|(&g, &x)| if x > zero { g } else { zero }).collect(),
                    Unary::LeakyRelu(s) => {
                        gyd.iter().zip(x).map(|(&g, &x)| if x > zero { g } else { g * s }).collect()
                    }
                    Unary::Tanh => gyd.iter().zip(y).map(|(&g, &y)| g * (one - y * y)).collect(),
                    Unary::Sigmoid => gyd.iter().zip(y).map(|(&g, &y)| g * y * (one - y)).collect(),
                    Unary::Exp => gyd.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    Unary::LnFloor(lo) => gyd
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| if y > lo { g / x } else { zero })
                        .collect(),
                    Unary::Abs => gyd
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            if x > zero {
                                g
                            } else if x < zero {
                                -g
                            } else {
                                zero
                            }
                        })
                        .collect(),
                    Unary::Sqrt => {
                        let two = T::lit(2.0);
                        gyd.iter().zip(y).map(|(&g, &y)| if y > zero { g / (two * y) } else { zero }).collect()
                    }
                    Unary::Square => {
                        let two = T::lit(2.0);
                        gyd.iter().zip(x).map(|(&g, &x)| g * two * x).collect()
                    }
                    Unary::Recip => gyd.iter().zip(y).map(|(&g, &y)| -g * y * y).collect(),
                };
                acc(*a, g);
            }
            Op::Sum(a) => acc(*a, vec![gyd[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![gyd[0] / T::lit(n as f64); n]);
            }
            Op::MeanSpatial(a) => {
                let s = self.shape(*a);
                let plane = s[2] * s[3];
                let inv = T::lit(1.0 / plane as f64);
                let mut g = Vec::with_capacity(numel(s));
                for &v in gyd {
                    g.extend(std::iter::repeat_n(v * inv, plane));
                }
                acc(*a, g);
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let d = x.shape()[1];
                let mut g = Vec::with_capacity(x.numel());
                for (i, row) in x.data().chunks(d.max(1)).take(x.shape()[0]).enumerate() {
                    let norm = node.value.data()[i];
                    if norm > T::zero() {
                        let k = gyd[i] / norm;
                        g.extend(row.iter().map(|&v| v * k));
                    } else {
                        g.extend(std::iter::repeat_n(T::zero(), d));
                    }
                }
                acc(*a, g);
            }
            Op::RowScale(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let n = vs.numel();
                let row = vx.numel().checked_div(n).unwrap_or(0);
                if self.needs(*x) {
                    let mut g = Vec::with_capacity(vx.numel());
                    for (gr, &k) in gyd.chunks(row.max(1)).zip(vs.data()) {
                        g.extend(gr.iter().map(|&v| v * k));
                    }
                    acc(*x, g);
                }
                if self.needs(*s) {
                    let g = gyd
                        .chunks(row.max(1))
                        .zip(vx.data().chunks(row.max(1)))
                        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p * q).sum())
                        .collect();
                    acc(*s, g);
                }
            }
            Op::Reshape(a) => acc(*a, gyd.to_vec()),
            Op::Concat(parts) => {
                let s = node.value.shape();
                let n = s[0];
                let inner = numel(&s[2..]);
                let total = s[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let row = self.shape(p)[1] * inner;
                    if self.needs(p) {
                        let mut g = Vec::with_capacity(n * row);
                        for i in 0..n {
                            g.extend_from_slice(&gyd[i * total + offset..][..row]);
                        }
                        acc(p, g);
                    }
                    offset += row;
                }
            }
            Op::CatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        acc(p, gyd[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, start) => {
                let s = self.shape(*a);
                let row = numel(&s[1..]);
                let mut g = vec![T::zero(); numel(s)];
                g[start * row..start * row + gyd.len()].copy_from_slice(gyd);
                acc(*a, g);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, fin) = (vx.shape()[0], vx.shape()[1]);
                let fout = vw.shape()[0];
                if self.needs(*x) {
                    let mut g = vec![T::zero(); n * fin];
                    matmul(
                        T::one(),
                        MatRef::row_major(gyd, n, fout),
                        MatRef::row_major(vw.data(), fout, fin),
                        T::zero(),
                        &mut g,
                    );
                    acc(*x, g);
                }
                if self.needs(*w) {
                    let mut g = vec![T::zero(); fout * fin];
                    matmul(
                        T::one(),
                        MatRef::transposed(gyd, n, fout),
                        MatRef::row_major(vx.data(), n, fin),
                        T::zero(),
                        &mut g,
                    );
                    acc(*w, g);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut g = vec![T::zero(); fout];
                        for row in gyd.chunks(fout) {
                            for (a, &v) in g.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        acc(*b, g);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let grads =
                    conv2d_backward(self.value(*x).data(), self.value(*w).data(), gyd, geom, need);
                if let Some(g) = grads.input {
                    acc(*x, g);
                }
                if let Some(g) = grads.weight {
                    acc(*w, g);
                }
                if let (Some(b), Some(g)) = (b, grads.bias) {
                    acc(*b, g);
                }
            }
            Op::Upsample(x, f) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * f, w * f);
                let mut g = vec![T::zero(); numel(s)];
                for (gp, yp) in g.chunks_mut(h * w).zip(gyd.chunks(oh * ow)) {
                    for oy in 0..oh {
                        let dst = &mut gp[(oy / f) * w..][..w];
                        for (ox, &v) in yp[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            dst[ox / f] += v;
                        }
                    }
                }
                acc(*x, g);
            }
            Op::InstanceNorm { x, inv_std } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv_n = T::lit(1.0 / plane as f64);
                let mut g = Vec::with_capacity(numel(s));
                for ((gp, yp), &is) in gyd.chunks(plane).zip(node.value.data().chunks(plane)).zip(inv_std) {
                    let mean_g = gp.iter().copied().sum::<T>() * inv_n;
                    let mean_gy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    g.extend(gp.iter().zip(yp).map(|(&gv, &yv)| is * (gv - mean_g - yv * mean_gy)));
                }
                acc(*x, g);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let vx = self.value(*x);
                let s = vx.shape();
                let c = s[1];
                let plane = s[2] * s[3];
                let sc = self.value(*scale).data();
                if self.needs(*x) {
                    let mut g = Vec::with_capacity(vx.numel());
                    for (i, gp) in gyd.chunks(plane).enumerate() {
                        let a = sc[i % c];
                        g.extend(gp.iter().map(|&v| v * a));
                    }
                    acc(*x, g);
                }
                if self.needs(*scale) || self.needs(*shift) {
                    let mut gs = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for (i, (gp, xp)) in gyd.chunks(plane).zip(vx.data().chunks(plane)).enumerate() {
                        gs[i % c] += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
                        gb[i % c] += gp.iter().copied().sum::<T>();
                    }
                    acc(*scale, gs);
                    acc(*shift, gb);
                }
            }
            Op::Tile(x) => {
                let s = node.value.shape();
                let plane = s[2] * s[3];
                acc(*x, gyd.chunks(plane).map(|p| p.iter().copied().sum()).collect());
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, d) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[0];
                let two = T::lit(2.0);
                let mut ga = vec![T::zero(); n * d];
                let mut gb = vec![T::zero(); m * d];
                for i in 0..n {
                    let ra = &va.data()[i * d..(i + 1) * d];
                    for j in 0..m {
                        let rb = &vb.data()[j * d..(j + 1) * d];
                        let k = two * gyd[i * m + j];
                        for t in 0..d {
                            let diff = k * (ra[t] - rb[t]);
                            ga[i * d + t] += diff;
                            gb[j * d + t] -= diff;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
