use super::kernels::{self, Activation};
use super::{check_dim, Result, Scalar, Shape, Tensor, TensorError};
use crate::flow_ops;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    TransposedConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Sum(Var),
    NormalizeChannels {
        x: Var,
        scale: T,
        eps: T,
    },
    Correlation {
        a: Var,
        b: Var,
        max_disp: usize,
        patch: usize,
    },
    Warp {
        image: Var,
        flow: Var,
    },
    PixelNormSum {
        x: Var,
        mask: Option<Tensor<T>>,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records a differentiable computation. Nodes are appended in evaluation order,
/// so the node list is already a topological order for the backward sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    nan_check: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            nan_check: false,
        }
    }

    /// Rejects any forward result containing NaN or infinity.
    pub fn with_nan_check(mut self, on: bool) -> Self {
        self.nan_check = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.nan_check && !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", y, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    pub fn transposed_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::transposed_conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("transposed_conv2d", y, Op::TransposedConv2d { x, w, b, stride, pad }, &inputs)
    }

    pub fn maxpool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = kernels::maxpool(self.value(x), window, stride)?;
        self.push("maxpool", y, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = self.value(x).map(|v| kind.apply(v));
        self.push("activation", y, Op::Activation { x, kind }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    /// Concatenates along the channel axis, preserving input order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: OP,
            msg: "no inputs".into(),
        })?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            check_dim(OP, "batch", s0.n(), s.n())?;
            check_dim(OP, "height", s0.h(), s.h())?;
            check_dim(OP, "width", s0.w(), s.w())?;
            channels += s.c();
        }
        let out_shape = Shape::new(s0.n(), channels, s0.h(), s0.w());
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s0.n() {
            for &v in inputs {
                data.extend_from_slice(self.value(v).item(n));
            }
        }
        let y = Tensor::from_vec(out_shape, data)?;
        self.push(OP, y, Op::Concat(inputs.to_vec()), inputs)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        for (i, dim) in ["batch", "channels", "height", "width"].into_iter().enumerate() {
            check_dim(op, dim, sa.0[i], sb.0[i])?;
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(sa, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", y, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor);
        self.push("scale", y, Op::Scale(x, factor), &[x])
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| T::one() - v);
        self.push("one_minus", y, Op::OneMinus(x), &[x])
    }

    /// Sum of all elements as a 1x1x1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::Sum(x), &[x])
    }

    /// Rescales every pixel's channel vector to length `scale`:
    /// `y = scale * x / sqrt(sum_c x^2 + eps)`.
    pub fn normalize_channels(&mut self, x: Var, scale: T, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let mut y = Tensor::zeros(s);
        for n in 0..s.n() {
            for p in 0..s.plane() {
                let idx = |c: usize| (n * s.c() + c) * s.plane() + p;
                let sq = (0..s.c()).fold(T::zero(), |acc, c| acc + xv.data()[idx(c)] * xv.data()[idx(c)]);
                let f = scale / (sq + eps).sqrt();
                for c in 0..s.c() {
                    y.data_mut()[idx(c)] = xv.data()[idx(c)] * f;
                }
            }
        }
        self.push("normalize_channels", y, Op::NormalizeChannels { x, scale, eps }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added into every
    /// gradient-requiring leaf; call [`Tape::zero_grad`] to reset them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s != Shape::scalar() {
            return Err(TensorError::NotScalar(s));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, grad: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&grad),
                slot => *slot = Some(grad),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if wants(*x) {
                    send(*x, kernels::conv2d_backward_data(g, wv, xv.shape(), *stride, *pad));
                }
                if wants(*w) {
                    send(*w, kernels::conv2d_backward_weight(xv, g, wv.shape(), *stride, *pad));
                }
                if let Some(b) = b {
                    let shape = self.shape(*b);
                    send(*b, kernels::bias_grad(g).reshape(shape).expect("bias length"));
                }
            }
            Op::TransposedConv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if wants(*x) {
                    send(*x, kernels::conv2d(g, wv, None, *stride, *pad).expect("adjoint shapes agree"));
                }
                if wants(*w) {
                    send(*w, kernels::conv2d_backward_weight(g, xv, wv.shape(), *stride, *pad));
                }
                if let Some(b) = b {
                    let shape = self.shape(*b);
                    send(*b, kernels::bias_grad(g).reshape(shape).expect("bias length"));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let d = gx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                send(*x, gx);
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                send(*x, Tensor::from_vec(xv.shape(), data).expect("same shape"));
            }
            Op::Concat(inputs) => {
                let s = g.shape();
                let mut offset = 0;
                for &v in inputs {
                    let sv = self.shape(v);
                    let len = sv.c() * sv.plane();
                    if wants(v) {
                        let mut data = Vec::with_capacity(sv.len());
                        for n in 0..s.n() {
                            let start = n * s.c() * s.plane() + offset;
                            data.extend_from_slice(&g.data()[start..start + len]);
                        }
                        send(v, Tensor::from_vec(sv, data).expect("slice shape"));
                    }
                    offset += len;
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(*a, zip_map(g, bv, |gi, bi| gi * bi));
                }
                if wants(*b) {
                    send(*b, zip_map(g, av, |gi, ai| gi * ai));
                }
            }
            Op::Scale(x, f) => send(*x, g.map(|v| v * *f)),
            Op::OneMinus(x) => send(*x, g.map(|v| -v)),
            Op::Sum(x) => send(*x, Tensor::full(self.shape(*x), g.data()[0])),
            Op::NormalizeChannels { x, scale, eps } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n() {
                    for p in 0..s.plane() {
                        let idx = |c: usize| (n * s.c() + c) * s.plane() + p;
                        let (sq, gdotx) = (0..s.c()).fold((T::zero(), T::zero()), |(sq, gd), c| {
                            let xi = xv.data()[idx(c)];
                            (sq + xi * xi, gd + g.data()[idx(c)] * xi)
                        });
                        let r = (sq + *eps).sqrt();
                        let r3 = r * r * r;
                        for c in 0..s.c() {
                            let i = idx(c);
                            gx.data_mut()[i] = *scale * (g.data()[i] / r - xv.data()[i] * gdotx / r3);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Correlation { a, b, max_disp, patch } => {
                let (ga, gb) =
                    flow_ops::correlation_backward(self.value(*a), self.value(*b), g, *max_disp, *patch);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Warp { image, flow } => {
                let (gi, gf) = flow_ops::warp_backward(self.value(*image), self.value(*flow), g);
                send(*image, gi);
                send(*flow, gf);
            }
            Op::PixelNormSum { x, mask, eps } => {
                send(*x, flow_ops::pixel_norm_sum_backward(self.value(*x), mask.as_ref(), *eps, g.data()[0]));
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}
