//! Layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, so a
//! `forward`/`backward` pair must not be interleaved with another forward on
//! the same layer. `infer` is the cache-free evaluation path used for
//! concurrent inference on frozen nets.

mod activation;
mod conv;
mod linear;
mod norm;

pub use activation::{LeakyRelu, Relu, Sigmoid, Tanh};
pub use conv::{col2im, im2col, Conv2d, ConvGeom, ConvTranspose2d};
pub use linear::{Linear, Reshape};
pub use norm::BatchNorm;

use crate::{Float, Tensor};

/// Batch-norm behaviour. `Eval` uses (and never updates) running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Float> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;
pub type TensorVisitor<'a, T> = dyn FnMut(&str, &Tensor<T>) + 'a;
pub type TensorVisitorMut<'a, T> = dyn FnMut(&str, &mut Tensor<T>) + 'a;

pub trait Layer<T: Float>: Send + Sync {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T>;

    fn infer(&self, x: &Tensor<T>) -> Tensor<T>;

    /// Returns the gradient w.r.t. the last forward input. Parameter
    /// gradients are accumulated only when `param_grads` is set.
    fn backward(&mut self, grad: Tensor<T>, param_grads: bool) -> Tensor<T>;

    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, T>) {}

    /// Parameter values followed by non-trainable buffers, in a fixed order.
    fn visit_state(&self, _f: &mut TensorVisitor<'_, T>) {}

    fn visit_state_mut(&mut self, _f: &mut TensorVisitorMut<'_, T>) {}

    fn clone_box(&self) -> Box<dyn Layer<T>>;
}

impl<T: Float> Clone for Box<dyn Layer<T>> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Anything exposing named parameters and state: layers, sequences, whole nets.
pub trait Module<T: Float> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>);
    fn visit_state(&self, f: &mut TensorVisitor<'_, T>);
    fn visit_state_mut(&mut self, f: &mut TensorVisitorMut<'_, T>);

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_state(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    /// Overwrites state tensors by name. Every state tensor must be present
    /// with a matching shape.
    fn load_state(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<(), StateError> {
        let lookup: std::collections::HashMap<&str, &Tensor<T>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        self.visit_state_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match lookup.get(name) {
                None => err = Some(StateError::Missing(name.to_string())),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(StateError::Shape {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: src.shape().to_vec(),
                    })
                }
                Some(src) => *t = (*src).clone(),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StateError {
    #[error("state tensor `{0}` missing")]
    Missing(String),
    #[error("state tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Named layers applied in order.
#[derive(Clone, Default)]
pub struct Sequential<T: Float> {
    layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Float> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(mut self, name: &str, layer: impl Layer<T> + 'static) -> Self {
        self.layers.push((name.to_string(), Box::new(layer)));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        for (_, l) in &mut self.layers {
            x = l.forward(x, mode);
        }
        x
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut iter = self.layers.iter();
        let mut y = match iter.next() {
            Some((_, l)) => l.infer(x),
            None => return x.clone(),
        };
        for (_, l) in iter {
            y = l.infer(&y);
        }
        y
    }

    /// Every layer's inference output, named after the layer.
    pub fn infer_trace(&self, x: &Tensor<T>) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = Vec::with_capacity(self.layers.len());
        for (name, l) in &self.layers {
            let y = l.infer(out.last().map_or(x, |(_, t)| t));
            out.push((name.clone(), y));
        }
        out
    }

    pub fn backward(&mut self, mut grad: Tensor<T>, param_grads: bool) -> Tensor<T> {
        for (_, l) in self.layers.iter_mut().rev() {
            grad = l.backward(grad, param_grads);
        }
        grad
    }
}

impl<T: Float> Module<T> for Sequential<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        for (name, l) in &mut self.layers {
            l.visit_params(&mut |n, p| f(&format!("{name}.{n}"), p));
        }
    }

    fn visit_state(&self, f: &mut TensorVisitor<'_, T>) {
        for (name, l) in &self.layers {
            l.visit_state(&mut |n, t| f(&format!("{name}.{n}"), t));
        }
    }

    fn visit_state_mut(&mut self, f: &mut TensorVisitorMut<'_, T>) {
        for (name, l) in &mut self.layers {
            l.visit_state_mut(&mut |n, t| f(&format!("{name}.{n}"), t));
        }
    }
}
