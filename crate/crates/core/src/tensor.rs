//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap, reference-counted handle to an immutable node of
//! the computation graph. Every operation allocates a new node that remembers
//! its inputs; [`backward`] walks the graph from a scalar root in reverse
//! topological order and accumulates gradients into every reachable tensor
//! that requires them.
//!
//! Only the operations the aesthetic model needs are provided. Broadcasting is
//! limited to rank-0 scalars on either side of a binary op.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("conv2d: unsupported kernel size {0} (only 1 and 3)")]
    KernelSize(usize),
    #[error("backward requires a single-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("concat of an empty tensor list")]
    EmptyConcat,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Softplus,
    Abs,
}

enum Op {
    Leaf,
    Binary(BinaryOp, Tensor, Tensor),
    Unary(UnaryOp, Tensor),
    MatMul(Tensor, Tensor),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    AvgPool3(Tensor),
    GlobalAvgPool(Tensor),
    Concat(Vec<Tensor>),
    Reshape(Tensor),
    Sum(Tensor),
    AddN(Vec<Tensor>),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Unary(_, x) | Op::AvgPool3(x) | Op::GlobalAvgPool(x) | Op::Reshape(x) | Op::Sum(x) => vec![x],
            Op::Conv2d { input, weight, bias } => vec![input, weight, bias],
            Op::Concat(xs) | Op::AddN(xs) => xs.iter().collect(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Unary(UnaryOp::Relu, _) => "relu",
            Op::Unary(UnaryOp::Sigmoid, _) => "sigmoid",
            Op::Unary(UnaryOp::Softplus, _) => "softplus",
            Op::Unary(UnaryOp::Abs, _) => "abs",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool3(_) => "avg_pool2d_3x3",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Concat(_) => "concat_channels",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::AddN(_) => "add_n",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// Handle to a node of the differentiation graph.
///
/// Cloning a `Tensor` clones the handle, not the data.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op.name())
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    if numel(shape) != len {
        return Err(TensorError::DataLength {
            shape: shape.to_vec(),
            expected: numel(shape),
            actual: len,
        });
    }
    Ok(())
}

impl Tensor {
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        check_shape(&shape, data.len())?;
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: Op::Leaf,
        })))
    }

    /// Constant leaf that takes no part in gradient accumulation.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf: backward passes accumulate into its gradient.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, true)
    }

    /// Rank-0 constant.
    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(Vec::new(), vec![value], false).expect("rank-0 shape is always valid")
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Self::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn ones_like(other: &Tensor) -> Tensor {
        Self::full(other.shape(), 1.0).expect("shape of an existing tensor is valid")
    }

    /// Same values, cut loose from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false).expect("shape of an existing tensor is valid")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    /// Gradient as an owned buffer; zeros when nothing has been accumulated.
    pub fn grad_vec(&self) -> Vec<f64> {
        self.0.grad.borrow().clone().unwrap_or_else(|| vec![0.0; self.len()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        apply_binary(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        apply_binary(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        apply_binary(BinaryOp::Mul, self, other)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        apply_binary(BinaryOp::Mul, self, &Tensor::scalar(factor)).expect("scalar broadcast always applies")
    }

    pub fn relu(&self) -> Tensor {
        apply_unary(UnaryOp::Relu, self)
    }

    pub fn sigmoid(&self) -> Tensor {
        apply_unary(UnaryOp::Sigmoid, self)
    }

    pub fn softplus(&self) -> Tensor {
        apply_unary(UnaryOp::Softplus, self)
    }

    pub fn abs(&self) -> Tensor {
        apply_unary(UnaryOp::Abs, self)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let total = compensated_sum(&self.0.data);
        Tensor::from_op(Vec::new(), vec![total], Op::Sum(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.len())?;
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.0.data.clone(),
            Op::Reshape(self.clone()),
        ))
    }
}

/// Neumaier summation: the result is within one rounding of the exact sum.
fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn scalar_pair_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.rank() == 0 {
        Ok(b.shape().to_vec())
    } else if b.rank() == 0 {
        Ok(a.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

/// Element-wise `add`, `sub` or `mul`. Either operand may be rank-0.
pub fn apply_binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    };
    let shape = scalar_pair_shape(name, a, b)?;
    let n = numel(&shape);
    let (da, db) = (a.data(), b.data());
    let at = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
    let bt = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
    let f: fn(f64, f64) -> f64 = match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
    };
    let data = (0..n).map(|i| f(at(i), bt(i))).collect();
    Ok(Tensor::from_op(shape, data, Op::Binary(op, a.clone(), b.clone())))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large x
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn apply_unary(op: UnaryOp, x: &Tensor) -> Tensor {
    let f: fn(f64) -> f64 = match op {
        UnaryOp::Relu => |v| if v > 0.0 { v } else { 0.0 },
        UnaryOp::Sigmoid => sigmoid,
        UnaryOp::Softplus => softplus,
        UnaryOp::Abs => f64::abs,
    };
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(x.shape().to_vec(), data, Op::Unary(op, x.clone()))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(TensorError::Rank {
            op: "matmul",
            expected: 2,
            shape: a.shape().to_vec(),
        });
    }
    if b.rank() != 2 {
        return Err(TensorError::Rank {
            op: "matmul",
            expected: 2,
            shape: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_op(vec![m, n], out, Op::MatMul(a.clone(), b.clone())))
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
}

fn chw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::Rank {
            op,
            expected: 3,
            shape: x.shape().to_vec(),
        }),
    }
}

/// Stride-1 convolution of a `C_in×H×W` map with a `C_out×C_in×k×k` kernel,
/// `k ∈ {1, 3}`, zero "same" padding. `bias` has shape `[C_out]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, h, w) = chw("conv2d", input)?;
    let (c_out, wc_in, kh, kw) = match *weight.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: weight.shape().to_vec(),
            })
        }
    };
    if kh != kw || (kh != 1 && kh != 3) {
        return Err(TensorError::KernelSize(kh.max(kw)));
    }
    if wc_in != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    if bias.shape() != [c_out] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d bias",
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let k = kh;
    let pad = (k / 2) as isize;
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((co * c_in + ci) * k + ky) * k + kx];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox as isize + dx;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[oy * w + ox] += wv * xin[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c_out, h, w],
        out,
        Op::Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
        },
    ))
}

/// 3×3 average pooling, stride 1, zero padding; every window divides by 9.
pub fn avg_pool2d_3x3(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw("avg_pool2d_3x3", x)?;
    let data = x.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0;
                for iy in oy.saturating_sub(1)..(oy + 2).min(h) {
                    for ix in ox.saturating_sub(1)..(ox + 2).min(w) {
                        acc += data[base + iy * w + ix];
                    }
                }
                out[base + oy * w + ox] = acc / 9.0;
            }
        }
    }
    Ok(Tensor::from_op(x.shape().to_vec(), out, Op::AvgPool3(x.clone())))
}

/// Per-channel spatial mean: `C×H×W → C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw("global_avg_pool", x)?;
    let hw = h * w;
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Tensor::from_op(vec![c], out, Op::GlobalAvgPool(x.clone())))
}

/// Concatenation along the leading (channel) axis.
pub fn concat_channels(xs: &[Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or(TensorError::EmptyConcat)?;
    if first.rank() == 0 {
        return Err(TensorError::Rank {
            op: "concat_channels",
            expected: 1,
            shape: Vec::new(),
        });
    }
    let tail = &first.shape()[1..];
    let mut channels = 0;
    for x in xs {
        if x.rank() != first.rank() || &x.shape()[1..] != tail {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: first.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        channels += x.shape()[0];
    }
    if xs.len() == 1 {
        return Ok(first.clone());
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(tail);
    let data = xs.iter().flat_map(|x| x.data().iter().copied()).collect();
    Ok(Tensor::from_op(shape, data, Op::Concat(xs.to_vec())))
}

/// Element-wise sum of equally shaped tensors.
pub fn add_n(xs: &[Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or(TensorError::EmptyConcat)?;
    let mut out = first.data().to_vec();
    for x in &xs[1..] {
        if x.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add_n",
                left: first.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        out.iter_mut().zip(x.data()).for_each(|(o, v)| *o += v);
    }
    Ok(Tensor::from_op(first.shape().to_vec(), out, Op::AddN(xs.to_vec())))
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, inputs already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.ptr()) {
            continue;
        }
        stack.push((node.clone(), true));
        for input in node.0.op.inputs() {
            if input.requires_grad() && !seen.contains(&input.ptr()) {
                stack.push((input.clone(), false));
            }
        }
    }
    order
}

fn accumulate(pending: &mut HashMap<usize, Vec<f64>>, t: &Tensor, contribution: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    match pending.get_mut(&t.ptr()) {
        Some(buf) => buf.iter_mut().zip(&contribution).for_each(|(b, c)| *b += c),
        None => {
            pending.insert(t.ptr(), contribution);
        }
    }
}

fn reduce_if_scalar(target: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if target.len() == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

/// Back-propagates from a single-element root.
///
/// Gradients accumulate: running `backward` twice on the same graph doubles
/// every gradient. Call [`Tensor::zero_grad`] (or rebuild leaves) in between.
pub fn backward(root: &Tensor) -> Result<()> {
    if root.len() != 1 {
        return Err(TensorError::NonScalarRoot(root.shape().to_vec()));
    }
    if !root.requires_grad() {
        return Ok(());
    }
    let order = topo_order(root);
    let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
    pending.insert(root.ptr(), vec![1.0]);
    for node in order.iter().rev() {
        let Some(g) = pending.remove(&node.ptr()) else {
            continue;
        };
        {
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => *slot = Some(g.clone()),
            }
        }
        propagate(node, &g, &mut pending);
    }
    Ok(())
}

fn propagate(node: &Tensor, g: &[f64], pending: &mut HashMap<usize, Vec<f64>>) {
    match &node.0.op {
        Op::Leaf => {}
        Op::Binary(op, a, b) => {
            let (da, db) = (a.data(), b.data());
            let at = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
            let bt = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
            let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                BinaryOp::Add => (g.to_vec(), g.to_vec()),
                BinaryOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                BinaryOp::Mul => g.iter().enumerate().map(|(i, &v)| (v * bt(i), v * at(i))).unzip(),
            };
            if a.requires_grad() {
                accumulate(pending, a, reduce_if_scalar(a, ga));
            }
            if b.requires_grad() {
                accumulate(pending, b, reduce_if_scalar(b, gb));
            }
        }
        Op::Unary(op, x) => {
            let out = node.data();
            let gx = x
                .data()
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&xi, &yi), &gi)| {
                    gi * match op {
                        UnaryOp::Relu => {
                            if xi > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Sigmoid => yi * (1.0 - yi),
                        UnaryOp::Softplus => sigmoid(xi),
                        UnaryOp::Abs => {
                            if xi > 0.0 {
                                1.0
                            } else if xi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    }
                })
                .collect();
            accumulate(pending, x, gx);
        }
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = G · Bᵀ
                let bd = b.data();
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        ga[i * k + p] = (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum();
                    }
                }
                accumulate(pending, a, ga);
            }
            if b.requires_grad() {
                // dB = Aᵀ · G
                let ad = a.data();
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                accumulate(pending, b, gb);
            }
        }
        Op::Conv2d { input, weight, bias } => conv2d_backward(input, weight, bias, g, pending),
        Op::AvgPool3(x) => {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                let base = ch * h * w;
                for oy in 0..h {
                    for ox in 0..w {
                        let gv = g[base + oy * w + ox] / 9.0;
                        for iy in oy.saturating_sub(1)..(oy + 2).min(h) {
                            for ix in ox.saturating_sub(1)..(ox + 2).min(w) {
                                gx[base + iy * w + ix] += gv;
                            }
                        }
                    }
                }
            }
            accumulate(pending, x, gx);
        }
        Op::GlobalAvgPool(x) => {
            let hw = x.shape()[1] * x.shape()[2];
            let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
            accumulate(pending, x, gx);
        }
        Op::Concat(xs) => {
            let mut offset = 0;
            for x in xs {
                let n = x.len();
                if x.requires_grad() {
                    accumulate(pending, x, g[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        Op::Reshape(x) => accumulate(pending, x, g.to_vec()),
        Op::Sum(x) => accumulate(pending, x, vec![g[0]; x.len()]),
        Op::AddN(xs) => {
            for x in xs {
                accumulate(pending, x, g.to_vec());
            }
        }
    }
}

fn conv2d_backward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &[f64], pending: &mut HashMap<usize, Vec<f64>>) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, k) = (weight.shape()[0], weight.shape()[2]);
    let pad = (k / 2) as isize;
    let (x, wt) = (input.data(), weight.data());
    let mut gx = input.requires_grad().then(|| vec![0.0; x.len()]);
    let mut gw = weight.requires_grad().then(|| vec![0.0; wt.len()]);
    for co in 0..c_out {
        let gplane = &g[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let xoff = ci * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * c_in + ci) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let mut acc_w = 0.0;
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox as isize + dx;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = xoff + iy as usize * w + ix as usize;
                            let gv = gplane[oy * w + ox];
                            acc_w += gv * x[xi];
                            if let Some(gx) = gx.as_mut() {
                                gx[xi] += gv * wv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc_w;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        accumulate(pending, input, gx);
    }
    if let Some(gw) = gw {
        accumulate(pending, weight, gw);
    }
    if bias.requires_grad() {
        let gb = g.chunks_exact(h * w).map(|p| p.iter().sum()).collect();
        accumulate(pending, bias, gb);
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with the denominator floored at 1e-12.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the analytic gradient of the scalar-valued `f` against central
/// differences with step `h`, for every element of every input.
///
/// `inputs` only supply shapes and values; `f` is called with fresh leaves.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], h: f64) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&[Tensor]) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let root = f(&leaves)?;
    backward(&root)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(Tensor::grad_vec).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for (ti, input) in inputs.iter().enumerate() {
        let mut buf = input.data().to_vec();
        for e in 0..buf.len() {
            let orig = buf[e];
            let (up, down) = (orig + h, orig - h);
            buf[e] = up;
            probe[ti] = Tensor::new(input.shape(), buf.clone())?;
            let plus = f(&probe)?.item();
            buf[e] = down;
            probe[ti] = Tensor::new(input.shape(), buf.clone())?;
            let minus = f(&probe)?.item();
            buf[e] = orig;
            // divide by the step actually taken after rounding
            let numeric = (plus - minus) / (up - down);
            let err = relative_error(analytic[ti][e], numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst: Some((ti, e)),
                    analytic: analytic[ti][e],
                    numeric,
                };
            }
        }
        probe[ti] = input.detach();
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_error)
}
