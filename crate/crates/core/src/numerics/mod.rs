//! Differentiable tensor substrate.
//!
//! [`Tensor`] is the storage type: row-major `f32` with an optional gradient
//! buffer. Model math runs on a [`Graph`], a reverse-mode tape whose node
//! values are kept in `f64`; parameters enter the tape as leaves and leave it
//! again through [`Graph::to_tensor`] or the gradient map returned by
//! [`Graph::backward`].
//!
//! Every op is evaluated in creation order and gradients are accumulated in
//! reverse creation order, so two runs over the same inputs are bit-identical.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, grad_check_with_tolerance, GradCheckReport, DEFAULT_GRAD_TOLERANCE};
pub use graph::{Gradients, Graph, Var};
pub use params::{Binder, ParamStore};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major `f32` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    /// Samples every entry from `U(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Fan-in scaled initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        Self::uniform(shape, 1.0 / (fan_in.max(1) as f32).sqrt(), rng)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient of {} values for tensor of {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let mut out = Tensor::new(shape.to_vec(), self.data.clone())?;
        out.requires_grad = self.requires_grad;
        Ok(out)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_f64(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: values.iter().map(|&v| v as f32).collect(),
            grad: None,
            requires_grad: false,
        }
    }
}

fn eval_unary(x: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = f(&mut g, v)?;
    Ok(g.to_tensor(y))
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    eval_unary(x, |g, v| g.softmax(v, axis))
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let gv = g.constant(gain);
    let bv = g.constant(bias);
    let y = g.layer_norm(v, gv, bv, eps)?;
    Ok(g.to_tensor(y))
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    eval_unary(x, |g, v| Ok(g.gelu(v)))
}

/// Rank-2 matrix product with `f64` accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let av = g.constant(a);
    let bv = g.constant(b);
    let y = g.matmul(av, bv)?;
    Ok(g.to_tensor(y))
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = parts.iter().map(|t| g.constant(t)).collect();
    let y = g.concat(&vars, axis)?;
    Ok(g.to_tensor(y))
}

/// Splits `x` along `axis` into consecutive pieces of the given extents.
pub fn split(x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if axis >= x.rank() {
        return Err(Error::InvalidAxis {
            axis,
            rank: x.rank(),
        });
    }
    if sizes.iter().sum::<usize>() != x.shape[axis] {
        return Err(Error::shape(
            "split",
            format!("sizes {sizes:?} do not cover extent {}", x.shape[axis]),
        ));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let extent = x.shape[axis];
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &len in sizes {
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&x.data[base..base + len * inner]);
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        out.push(Tensor::new(shape, data)?);
        start += len;
    }
    Ok(out)
}

/// Sinusoidal position table of shape `(positions, dim)`:
/// even slots `sin(pos / 10000^(2i/dim))`, odd slots the matching cosine.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding dimension must be even and positive, got {dim}"
        )));
    }
    let mut out = vec![0.0f64; positions * dim];
    for pos in 0..positions {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf((2 * i) as f64 / dim as f64);
            let arg = pos as f64 / freq;
            out[pos * dim + 2 * i] = arg.sin();
            out[pos * dim + 2 * i + 1] = arg.cos();
        }
    }
    Ok(out)
}
