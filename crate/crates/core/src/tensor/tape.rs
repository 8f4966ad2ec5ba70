//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its value; [`Tape::backward`] walks the
//! nodes in reverse. Leaf gradients persist and accumulate across calls
//! until [`Tape::zero_grad`].

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, GroupStats, Window};
use crate::tensor::{Shape, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Convolution operands as recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

/// A differentiable operation defined outside the tape, such as a loss.
pub trait Function: Send {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor4]) -> Result<Tensor4>;

    /// Gradients with respect to each input, given the gradient of the output.
    fn backward(&self, inputs: &[&Tensor4], output: &Tensor4, grad_output: &Tensor4) -> Vec<Option<Tensor4>>;
}

enum Op {
    Leaf,
    Conv2d { input: Var, params: ConvParams },
    Upsample2x(Var),
    Concat(Var, Var),
    SliceChannels { input: Var, start: usize },
    Crop(Var),
    Add(Var, Var),
    Relu(Var),
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats },
    Mean(Var),
    Sum(Var),
    Scale(Var, f64),
    MulScalar { input: Var, scalar: Var },
    Exp(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, window: Window },
    Rearrange { input: Var, classes: usize },
    Custom { inputs: Vec<Var>, func: Box<dyn Function> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, params } => {
                let mut v = vec![*input, params.weight];
                v.extend(params.bias);
                v
            }
            Op::Concat(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::GroupNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::MulScalar { input, scalar } => vec![*input, *scalar],
            Op::Custom { inputs, .. } => inputs.clone(),
            Op::Upsample2x(x)
            | Op::SliceChannels { input: x, .. }
            | Op::Crop(x)
            | Op::Relu(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Scale(x, _)
            | Op::Exp(x)
            | Op::MaxPool { input: x, .. }
            | Op::AvgPool { input: x, .. }
            | Op::Rearrange { input: x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor4>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).field("macs", &self.macs).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Convolution multiply-accumulates executed so far on this tape.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor4, op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn conv2d(&mut self, input: Var, params: ConvParams) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(params.weight);
        let b = params.bias.map(|b| self.value(b));
        let out = kernels::conv2d(x, w, b, params.stride, params.padding)?;
        self.macs += kernels::conv_macs(x.shape(), w.shape(), out.shape());
        Ok(self.derived(out, Op::Conv2d { input, params }))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = kernels::upsample2x(self.value(x));
        self.derived(out, Op::Upsample2x(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Concat(a, b)))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_channels(self.value(x), start, len)?;
        Ok(self.derived(out, Op::SliceChannels { input: x, start }))
    }

    /// Keeps the top-left `h × w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if self.shape(x).h == h && self.shape(x).w == w {
            return Ok(x);
        }
        let out = kernels::crop(self.value(x), h, w)?;
        Ok(self.derived(out, Op::Crop(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{} vs {}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb)?;
        Ok(self.derived(out, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.derived(out, Op::Relu(x))
    }

    /// Group normalization; `gamma` and `beta` hold one value per channel.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (out, stats) = kernels::group_norm(self.value(x), groups, self.value(gamma), self.value(beta))?;
        Ok(self.derived(out, Op::GroupNorm { input: x, gamma, beta, groups, stats }))
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor4::scalar(v.sum() / v.numel() as f64);
        self.derived(out, Op::Mean(x))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum());
        self.derived(out, Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.derived(out, Op::Scale(x, factor))
    }

    /// Multiplies every element by a recorded single-element value.
    pub fn mul_scalar(&mut self, x: Var, scalar: Var) -> Result<Var> {
        let s = self.value(scalar).item()?;
        let out = self.value(x).map(|v| v * s);
        Ok(self.derived(out, Op::MulScalar { input: x, scalar }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.derived(out, Op::Exp(x))
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool(self.value(x), Window::square(kernel, stride, padding))?;
        Ok(self.derived(out, Op::MaxPool { input: x, argmax }))
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let window = Window::square(kernel, stride, padding);
        let out = kernels::avg_pool(self.value(x), window)?;
        Ok(self.derived(out, Op::AvgPool { input: x, window }))
    }

    /// `(n, 4N, H, W) -> (n, N, 2H, 2W)`, see [`kernels::rearrange_quadrants`].
    pub fn rearrange_quadrants(&mut self, x: Var, classes: usize) -> Result<Var> {
        let out = kernels::rearrange_quadrants(self.value(x), classes)?;
        Ok(self.derived(out, Op::Rearrange { input: x, classes }))
    }

    pub fn custom(&mut self, func: Box<dyn Function>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor4> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = func.forward(&values)?;
        Ok(self.derived(out, Op::Custom { inputs: inputs.to_vec(), func }))
    }

    /// Accumulates `d(loss)/d(leaf)` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::shape("backward", format!("loss must be a scalar, got {shape}")));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (var, contribution) in self.input_grads(id, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match grads[var.0].as_mut() {
                    Some(acc) => acc.add_assign(&contribution)?,
                    None => grads[var.0] = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, id: usize, g: &Tensor4) -> Vec<(Var, Tensor4)> {
        let node = &self.nodes[id];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, params } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(params.weight),
                    g,
                    params.stride,
                    params.padding,
                    (rg(*input), rg(params.weight), params.bias.is_some_and(rg)),
                );
                let mut out = Vec::new();
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.weight {
                    out.push((params.weight, dw));
                }
                if let (Some(b), Some(db)) = (params.bias, grads.bias) {
                    let db = Tensor4::new(self.shape(b), db.into_data()).expect("bias shape checked at forward");
                    out.push((b, db));
                }
                out
            }
            Op::Upsample2x(x) => vec![(*x, kernels::upsample2x_backward(g))],
            Op::Concat(a, b) => {
                let ca = self.shape(*a).c;
                let cb = self.shape(*b).c;
                vec![
                    (*a, kernels::slice_channels(g, 0, ca).expect("concat grad")),
                    (*b, kernels::slice_channels(g, ca, cb).expect("concat grad")),
                ]
            }
            Op::SliceChannels { input, start } => {
                vec![(*input, kernels::unslice_channels(g, self.shape(*input), *start))]
            }
            Op::Crop(x) => vec![(*x, kernels::crop_backward(g, self.shape(*x)))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *dv = 0.0;
                    }
                }
                vec![(*x, d)]
            }
            Op::GroupNorm { input, gamma, beta, groups, stats } => {
                let grads =
                    kernels::group_norm_backward(self.value(*input), *groups, self.value(*gamma), stats, g);
                let gamma_g = Tensor4::new(self.shape(*gamma), grads.gamma.into_data()).expect("affine shape");
                let beta_g = Tensor4::new(self.shape(*beta), grads.beta.into_data()).expect("affine shape");
                vec![(*input, grads.input), (*gamma, gamma_g), (*beta, beta_g)]
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                vec![(*x, Tensor4::full(s, g.data()[0] / s.numel() as f64))]
            }
            Op::Sum(x) => vec![(*x, Tensor4::full(self.shape(*x), g.data()[0]))],
            Op::Scale(x, f) => vec![(*x, g.map(|v| v * f))],
            Op::MulScalar { input, scalar } => {
                let s = self.value(*scalar).data()[0];
                let dot: f64 = g.data().iter().zip(self.value(*input).data()).map(|(a, b)| a * b).sum();
                let ds = Tensor4::new(self.shape(*scalar), vec![dot]).expect("scalar shape");
                vec![(*input, g.map(|v| v * s)), (*scalar, ds)]
            }
            Op::Exp(x) => {
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= y;
                }
                vec![(*x, d)]
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, kernels::max_pool_backward(g, argmax, self.shape(*input)))]
            }
            Op::AvgPool { input, window } => {
                vec![(*input, kernels::avg_pool_backward(g, self.shape(*input), *window))]
            }
            Op::Rearrange { input, classes } => {
                vec![(*input, kernels::gather_quadrants(g, *classes).expect("rearrange grad"))]
            }
            Op::Custom { inputs, func } => {
                let values: Vec<&Tensor4> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = func.backward(&values, &node.value, g);
                inputs.iter().zip(grads).filter_map(|(v, d)| d.map(|d| (*v, d))).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::new(Shape::new(1, 1, 2, 2), vec![1., -2., 3., 4.]).unwrap(), true);
        let loss = tape.reduce_mean(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::full(Shape::new(1, 1, 1, 2), 1.0), true);
        let y = tape.scale(x, 3.0);
        let loss = tape.reduce_sum(y);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 6.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::zeros(Shape::new(1, 1, 2, 2)), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor4::new(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_rejects_mismatch_and_identity_with_zeros() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor4::full(Shape::new(1, 2, 2, 2), 1.5));
        let z = tape.constant(Tensor4::zeros(Shape::new(1, 2, 2, 2)));
        let b = tape.constant(Tensor4::zeros(Shape::new(1, 2, 2, 3)));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::full(Shape::new(1, 1, 2, 2), 1.0), true);
        let c = tape.constant(Tensor4::full(Shape::new(1, 1, 2, 2), 2.0));
        let s = tape.add(x, c).unwrap();
        let loss = tape.reduce_sum(s);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn conv_counts_macs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor4::zeros(Shape::new(1, 3, 8, 8)));
        let w = tape.constant(Tensor4::zeros(Shape::new(5, 3, 3, 3)));
        let y = tape.conv2d(x, ConvParams { weight: w, bias: None, stride: 2, padding: 1 }).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 5, 4, 4));
        assert_eq!(tape.macs(), 5 * 3 * 9 * 16);
    }
}
