use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    /// `ln(max(x, eps))`; zero gradient where clamped.
    Log(f64),
    Abs,
    Square,
    Sqrt,
    Powf(f64),
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    SumTo(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Concat(Vec<usize>, usize),
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Conv3d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Upsample { x: usize, factor: [usize; 3] },
    AdaptiveMaxPool { x: usize, argmax: Vec<usize> },
    InstanceNorm { x: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations. Build a graph per forward pass, call [`Graph::backward`], drop it.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Reverse-mode pass from a one-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn unary_grad(kind: Unary, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = g.clone();
    let d = out.data_mut();
    let xs = x.data();
    let ys = y.data();
    for i in 0..d.len() {
        let (xv, yv) = (xs[i], ys[i]);
        d[i] *= match kind {
            Unary::Relu => (xv > 0.0) as u8 as f64,
            Unary::LeakyRelu(s) => {
                if xv > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Sigmoid => yv * (1.0 - yv),
            Unary::Tanh => 1.0 - yv * yv,
            Unary::Exp => yv,
            Unary::Log(eps) => {
                if xv > eps {
                    1.0 / xv
                } else {
                    0.0
                }
            }
            Unary::Abs => xv.signum() * (xv != 0.0) as u8 as f64,
            Unary::Square => 2.0 * xv,
            Unary::Sqrt => {
                if yv > 0.0 {
                    0.5 / yv
                } else {
                    0.0
                }
            }
            Unary::Powf(p) => {
                if xv == 0.0 && p < 1.0 {
                    0.0
                } else {
                    p * xv.powf(p - 1.0)
                }
            }
        };
    }
    out
}

fn broadcast_values(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    kernels::broadcast_map(out_shape, t.shape()).iter().map(|&i| t.data()[i]).collect()
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (i, &p) in [*a, *b].iter().enumerate() {
                if nodes[p].requires_grad {
                    let ps = nodes[p].value.shape();
                    let mut r = kernels::reduce_to(g.data(), out_shape, ps);
                    if i == 1 && sign < 0.0 {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, nodes, p, Tensor::new(ps, r));
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let bb = broadcast_values(vb, out_shape);
                let prod: Vec<f64> = g.data().iter().zip(&bb).map(|(x, y)| x * y).collect();
                let r = kernels::reduce_to(&prod, out_shape, va.shape());
                accumulate(grads, nodes, *a, Tensor::new(va.shape(), r));
            }
            if nodes[*b].requires_grad {
                let ab = broadcast_values(va, out_shape);
                let prod: Vec<f64> = g.data().iter().zip(&ab).map(|(x, y)| x * y).collect();
                let r = kernels::reduce_to(&prod, out_shape, vb.shape());
                accumulate(grads, nodes, *b, Tensor::new(vb.shape(), r));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let bb = broadcast_values(vb, out_shape);
            if nodes[*a].requires_grad {
                let q: Vec<f64> = g.data().iter().zip(&bb).map(|(x, y)| x / y).collect();
                let r = kernels::reduce_to(&q, out_shape, va.shape());
                accumulate(grads, nodes, *a, Tensor::new(va.shape(), r));
            }
            if nodes[*b].requires_grad {
                let ab = broadcast_values(va, out_shape);
                let q: Vec<f64> = (0..g.numel())
                    .map(|i| -g.data()[i] * ab[i] / (bb[i] * bb[i]))
                    .collect();
                let r = kernels::reduce_to(&q, out_shape, vb.shape());
                accumulate(grads, nodes, *b, Tensor::new(vb.shape(), r));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.map(|v| v * s)),
        Op::Offset(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Unary(a, kind) => {
            let r = unary_grad(*kind, &nodes[*a].value, &node.value, g);
            accumulate(grads, nodes, *a, r);
        }
        Op::Clamp(a, lo, hi) => {
            let x = &nodes[*a].value;
            let r = g.zip_map(x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 });
            accumulate(grads, nodes, *a, r);
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, 0.0);
                accumulate(grads, nodes, *a, Tensor::new(&[m, k], ga));
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, 0.0);
                accumulate(grads, nodes, *b, Tensor::new(&[k, n], gb));
            }
        }
        Op::SumTo(a) => {
            let in_shape = nodes[*a].value.shape();
            let r = broadcast_values(g, in_shape);
            accumulate(grads, nodes, *a, Tensor::new(in_shape, r));
        }
        Op::Softmax(a, axis) => {
            let y = &node.value;
            let gy: Vec<f64> = g.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
            let mut red_shape = out_shape.to_vec();
            red_shape[*axis] = 1;
            let s = kernels::reduce_to(&gy, out_shape, &red_shape);
            let sb = broadcast_values(&Tensor::new(&red_shape, s), out_shape);
            let r: Vec<f64> = (0..y.numel()).map(|i| y.data()[i] * (g.data()[i] - sb[i])).collect();
            accumulate(grads, nodes, *a, Tensor::new(out_shape, r));
        }
        Op::LogSoftmax(a, axis) => {
            let y = &node.value;
            let mut red_shape = out_shape.to_vec();
            red_shape[*axis] = 1;
            let s = kernels::reduce_to(g.data(), out_shape, &red_shape);
            let sb = broadcast_values(&Tensor::new(&red_shape, s), out_shape);
            let r: Vec<f64> =
                (0..y.numel()).map(|i| g.data()[i] - y.data()[i].exp() * sb[i]).collect();
            accumulate(grads, nodes, *a, Tensor::new(out_shape, r));
        }
        Op::Concat(parts, axis) => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let ps = nodes[p].value.shape().to_vec();
                let len = ps[*axis];
                if nodes[p].requires_grad {
                    let mut r = Vec::with_capacity(numel(&ps));
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        r.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    accumulate(grads, nodes, p, Tensor::new(&ps, r));
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let (total, len) = (in_shape[*axis], out_shape[*axis]);
            let mut r = vec![0.0; numel(in_shape)];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                r[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            accumulate(grads, nodes, *x, Tensor::new(in_shape, r));
        }
        Op::Reshape(a) => {
            let s = nodes[*a].value.shape();
            accumulate(grads, nodes, *a, g.clone().reshape(s));
        }
        Op::Permute(a, perm) => {
            let inv = kernels::inverse_permutation(perm);
            let (d, s) = kernels::permute(g.data(), out_shape, &inv);
            accumulate(grads, nodes, *a, Tensor::new(&s, d));
        }
        Op::Conv3d { x, w, b, geom } => conv3d_backward(nodes, *x, *w, *b, geom, g, grads),
        Op::Upsample { x, factor } => {
            let in_shape = nodes[*x].value.shape();
            let (n, c) = (in_shape[0], in_shape[1]);
            let [d, h, w] = [in_shape[2], in_shape[3], in_shape[4]];
            let [od, oh, ow] = [out_shape[2], out_shape[3], out_shape[4]];
            let mut r = vec![0.0; numel(in_shape)];
            for nc in 0..n * c {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let src = ((nc * od + z) * oh + y) * ow + xx;
                            let dst =
                                ((nc * d + z / factor[0]) * h + y / factor[1]) * w + xx / factor[2];
                            r[dst] += g.data()[src];
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(in_shape, r));
        }
        Op::AdaptiveMaxPool { x, argmax } => {
            let in_shape = nodes[*x].value.shape();
            let mut r = vec![0.0; numel(in_shape)];
            for (gv, &i) in g.data().iter().zip(argmax) {
                r[i] += gv;
            }
            accumulate(grads, nodes, *x, Tensor::new(in_shape, r));
        }
        Op::InstanceNorm { x, xhat, inv_std } => {
            let m: usize = out_shape[2..].iter().product();
            let mut r = vec![0.0; g.numel()];
            for (row, &is) in inv_std.iter().enumerate() {
                let gs = &g.data()[row * m..(row + 1) * m];
                let xs = &xhat[row * m..(row + 1) * m];
                let sum_g: f64 = gs.iter().sum();
                let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                let mf = m as f64;
                for i in 0..m {
                    r[row * m + i] = is / mf * (mf * gs[i] - sum_g - xs[i] * sum_gx);
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(out_shape, r));
        }
    }
}

fn conv3d_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    b: Option<usize>,
    geom: &ConvGeom,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) {
    let vx = &nodes[x].value;
    let vw = &nodes[w].value;
    let n = vx.shape()[0];
    let cout = vw.shape()[0];
    let k = geom.rows();
    let out = geom.output();
    let p: usize = out.iter().product();
    let sample_in = numel(&vx.shape()[1..]);
    let need_x = nodes[x].requires_grad;
    let need_w = nodes[w].requires_grad;
    let mut gw = vec![0.0; cout * k];
    let mut gx = if need_x { vec![0.0; vx.numel()] } else { Vec::new() };
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for s in 0..n {
        let gs = &g.data()[s * cout * p..(s + 1) * cout * p];
        if need_w {
            kernels::im2col(&vx.data()[s * sample_in..(s + 1) * sample_in], geom, &mut cols);
            kernels::gemm(cout, p, k, gs, false, &cols, true, &mut gw, 1.0);
        }
        if need_x {
            kernels::gemm(k, cout, p, vw.data(), true, gs, false, &mut dcols, 0.0);
            kernels::col2im(&dcols, geom, &mut gx[s * sample_in..(s + 1) * sample_in]);
        }
    }
    if need_w {
        accumulate(grads, nodes, w, Tensor::new(vw.shape(), gw));
    }
    if need_x {
        accumulate(grads, nodes, x, Tensor::new(vx.shape(), gx));
    }
    if let Some(b) = b {
        if nodes[b].requires_grad {
            let mut gb = vec![0.0; cout];
            for s in 0..n {
                for (c, acc) in gb.iter_mut().enumerate() {
                    let base = (s * cout + c) * p;
                    *acc += g.data()[base..base + p].iter().sum::<f64>();
                }
            }
            accumulate(grads, nodes, b, Tensor::new(&[cout], gb));
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn unary_op(self, kind: Unary) -> Var<'g> {
        let x = self.value();
        let y = x.map(|v| match kind {
            Unary::Relu => v.max(0.0),
            Unary::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            Unary::Sigmoid => sigmoid(v),
            Unary::Tanh => v.tanh(),
            Unary::Exp => v.exp(),
            Unary::Log(eps) => v.max(eps).ln(),
            Unary::Abs => v.abs(),
            Unary::Square => v * v,
            Unary::Sqrt => v.max(0.0).sqrt(),
            Unary::Powf(p) => v.powf(p),
        });
        self.graph.push(y, Op::Unary(self.id, kind), self.requires_grad())
    }

    fn binary(self, other: Var<'g>, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph));
        let (a, b) = (self.value(), other.value());
        let out_shape = kernels::broadcast_shape(a.shape(), b.shape());
        let av = broadcast_values(&a, &out_shape);
        let bv = broadcast_values(&b, &out_shape);
        let data = av.iter().zip(&bv).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(Tensor::new(&out_shape, data), op(self.id, other.id), rg)
    }

    /// Elementwise sum; either side may broadcast along unit dims.
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let y = self.value().map(|v| v * s);
        self.graph.push(y, Op::Scale(self.id, s), self.requires_grad())
    }

    pub fn offset(self, c: f64) -> Var<'g> {
        let y = self.value().map(|v| v + c);
        self.graph.push(y, Op::Offset(self.id), self.requires_grad())
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'g> {
        self.scale(-1.0).offset(1.0)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary_op(Unary::Relu)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary_op(Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary_op(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary_op(Unary::Tanh)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary_op(Unary::Exp)
    }

    /// Natural log of `max(x, eps)`.
    pub fn ln_clamped(self, eps: f64) -> Var<'g> {
        self.unary_op(Unary::Log(eps))
    }

    pub fn abs(self) -> Var<'g> {
        self.unary_op(Unary::Abs)
    }

    pub fn square(self) -> Var<'g> {
        self.unary_op(Unary::Square)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary_op(Unary::Sqrt)
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary_op(Unary::Powf(p))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        let y = self.value().map(|v| v.clamp(lo, hi));
        self.graph.push(y, Op::Clamp(self.id, lo, hi), self.requires_grad())
    }

    /// `[m, k] x [k, n]`
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2D, got {:?}", a.shape());
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2D, got {:?}", b.shape());
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(b.shape()[0], k, "matmul inner dims: {:?} x {:?}", a.shape(), b.shape());
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(Tensor::new(&[m, n], c), Op::MatMul(self.id, other.id), rg)
    }

    /// Sum down to a broadcast-compatible `shape` (same rank, unit dims where summed).
    pub fn sum_to(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let r = kernels::reduce_to(x.data(), x.shape(), shape);
        self.graph.push(Tensor::new(shape, r), Op::SumTo(self.id), self.requires_grad())
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(self) -> Var<'g> {
        let rank = self.value().ndim();
        self.sum_to(&vec![1; rank]).reshape(&[1])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as unit dims.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'g> {
        let mut shape = self.shape();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'g> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / count as f64)
    }

    pub fn softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let y = softmax_values(&x, axis, false);
        self.graph.push(y, Op::Softmax(self.id, axis), self.requires_grad())
    }

    pub fn log_softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let y = softmax_values(&x, axis, true);
        self.graph.push(y, Op::LogSoftmax(self.id, axis), self.requires_grad())
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut out_shape = values[0].shape().to_vec();
        out_shape[axis] = 0;
        for v in &values {
            assert_eq!(v.ndim(), out_shape.len());
            for (d, (&a, &b)) in v.shape().iter().zip(values[0].shape()).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?}", v.shape());
            }
            out_shape[axis] += v.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        graph.push(
            Tensor::new(&out_shape, data),
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            rg,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        self.graph.push(
            Tensor::new(&out_shape, data),
            Op::Narrow { x: self.id, axis, start },
            self.requires_grad(),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let y = (*x).clone().reshape(shape);
        self.graph.push(y, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let x = self.value();
        let (d, s) = kernels::permute(x.data(), x.shape(), perm);
        self.graph.push(Tensor::new(&s, d), Op::Permute(self.id, perm.to_vec()), self.requires_grad())
    }

    /// 3D convolution. `self`: `[n, cin, d, h, w]`, `weight`: `[cout, cin, kd, kh, kw]`.
    pub fn conv3d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 5, "conv3d input must be [n, c, d, h, w], got {:?}", x.shape());
        assert_eq!(w.ndim(), 5, "conv3d weight must be 5D");
        assert_eq!(x.shape()[1], w.shape()[1], "conv3d channel mismatch {:?} vs {:?}", x.shape(), w.shape());
        let (n, cout) = (x.shape()[0], w.shape()[0]);
        let geom = ConvGeom {
            cin: x.shape()[1],
            input: [x.shape()[2], x.shape()[3], x.shape()[4]],
            kernel: [w.shape()[2], w.shape()[3], w.shape()[4]],
            stride,
            pad,
        };
        let out = geom.output();
        let p: usize = out.iter().product();
        let k = geom.rows();
        let sample_in = numel(&x.shape()[1..]);
        let mut y = vec![0.0; n * cout * p];
        let mut cols = vec![0.0; k * p];
        let bv = bias.map(|b| b.value());
        for s in 0..n {
            kernels::im2col(&x.data()[s * sample_in..(s + 1) * sample_in], &geom, &mut cols);
            let ys = &mut y[s * cout * p..(s + 1) * cout * p];
            if let Some(b) = &bv {
                for c in 0..cout {
                    ys[c * p..(c + 1) * p].fill(b.data()[c]);
                }
            }
            kernels::gemm(cout, k, p, w.data(), false, &cols, false, ys, 1.0);
        }
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        self.graph.push(
            Tensor::new(&[n, cout, out[0], out[1], out[2]], y),
            Op::Conv3d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom },
            rg,
        )
    }

    /// Nearest-neighbour upsampling of `[n, c, d, h, w]` by integer factors.
    pub fn upsample_nearest(self, factor: [usize; 3]) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        let [od, oh, ow] = [d * factor[0], h * factor[1], w * factor[2]];
        let mut y = Vec::with_capacity(nc * od * oh * ow);
        for c in 0..nc {
            for z in 0..od {
                for yy in 0..oh {
                    let row = ((c * d + z / factor[0]) * h + yy / factor[1]) * w;
                    for xx in 0..ow {
                        y.push(x.data()[row + xx / factor[2]]);
                    }
                }
            }
        }
        self.graph.push(
            Tensor::new(&[s[0], s[1], od, oh, ow], y),
            Op::Upsample { x: self.id, factor },
            self.requires_grad(),
        )
    }

    /// Adaptive max pooling of `[n, c, d, h, w]` to `[n, c, target...]`.
    pub fn adaptive_max_pool3d(self, target: [usize; 3]) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        let bz = kernels::adaptive_bins(d, target[0]);
        let by = kernels::adaptive_bins(h, target[1]);
        let bx = kernels::adaptive_bins(w, target[2]);
        let mut y = Vec::with_capacity(nc * target.iter().product::<usize>());
        let mut argmax = Vec::with_capacity(y.capacity());
        for c in 0..nc {
            let base = c * d * h * w;
            for &(z0, z1) in &bz {
                for &(y0, y1) in &by {
                    for &(x0, x1) in &bx {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = base + (z0 * h + y0) * w + x0;
                        for z in z0..z1 {
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    let i = base + (z * h + yy) * w + xx;
                                    if x.data()[i] > best {
                                        best = x.data()[i];
                                        arg = i;
                                    }
                                }
                            }
                        }
                        y.push(best);
                        argmax.push(arg);
                    }
                }
            }
        }
        self.graph.push(
            Tensor::new(&[s[0], s[1], target[0], target[1], target[2]], y),
            Op::AdaptiveMaxPool { x: self.id, argmax },
            self.requires_grad(),
        )
    }

    /// Normalize each `(sample, channel)` over all trailing axes to zero mean, unit variance.
    pub fn instance_norm(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        assert!(s.len() >= 3, "instance_norm expects [n, c, ...]");
        let rows = s[0] * s[1];
        let m: usize = s[2..].iter().product();
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let v = &x.data()[r * m..(r + 1) * m];
            let mean = v.iter().sum::<f64>() / m as f64;
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for i in 0..m {
                xhat[r * m + i] = (v[i] - mean) * is;
            }
            inv_std.push(is);
        }
        self.graph.push(
            Tensor::new(s, xhat.clone()),
            Op::InstanceNorm { x: self.id, xhat, inv_std },
            self.requires_grad(),
        )
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_values(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let s = x.shape();
    let outer: usize = s[..axis].iter().product();
    let len = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let st = strides(s)[axis];
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|k| x.data()[base + k * st]).fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..len).map(|k| (x.data()[base + k * st] - max).exp()).sum::<f64>().ln() + max;
            for k in 0..len {
                let lv = x.data()[base + k * st] - lse;
                out[base + k * st] = if log { lv } else { lv.exp() };
            }
        }
    }
    Tensor::new(s, out)
}
