use rand::Rng;

use super::conv::init_normal;
use super::{Layer, Mode, Param, ParamVisitor, TensorVisitor, TensorVisitorMut};
use crate::{Float, Tensor};

/// Fully-connected layer over the flattened item, `y = x W^T + b`.
#[derive(Clone)]
pub struct Linear<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_dim: usize,
    out_dim: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Float> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(init_normal(&[out_dim, in_dim], std, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_dim]))),
            in_dim,
            out_dim,
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.item_len(), self.in_dim, "linear input width mismatch");
        let b = x.batch();
        let mut y = Tensor::zeros(&[b, self.out_dim]);
        T::gemm(
            b,
            self.in_dim,
            self.out_dim,
            T::one(),
            x.data(),
            self.in_dim as isize,
            1,
            self.weight.value.data(),
            1,
            self.in_dim as isize,
            T::zero(),
            y.data_mut(),
            self.out_dim as isize,
            1,
        );
        if let Some(bias) = &self.bias {
            for row in y.data_mut().chunks_mut(self.out_dim) {
                for (v, &bv) in row.iter_mut().zip(bias.value.data()) {
                    *v += bv;
                }
            }
        }
        y
    }
}

impl<T: Float> Layer<T> for Linear<T> {
    fn forward(&mut self, x: Tensor<T>, _mode: Mode) -> Tensor<T> {
        let y = self.run(&x);
        self.cache = Some(x);
        y
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x)
    }

    fn backward(&mut self, grad: Tensor<T>, param_grads: bool) -> Tensor<T> {
        let x = self.cache.as_ref().expect("linear backward before forward");
        let b = x.batch();
        if param_grads {
            T::gemm(
                self.out_dim,
                b,
                self.in_dim,
                T::one(),
                grad.data(),
                1,
                self.out_dim as isize,
                x.data(),
                self.in_dim as isize,
                1,
                T::one(),
                self.weight.grad.data_mut(),
                self.in_dim as isize,
                1,
            );
            if let Some(bias) = &mut self.bias {
                for row in grad.data().chunks(self.out_dim) {
                    for (g, &v) in bias.grad.data_mut().iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            b,
            self.out_dim,
            self.in_dim,
            T::one(),
            grad.data(),
            self.out_dim as isize,
            1,
            self.weight.value.data(),
            self.in_dim as isize,
            1,
            T::zero(),
            dx.data_mut(),
            self.in_dim as isize,
            1,
        );
        dx
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            f("bias", b);
        }
    }

    fn visit_state(&self, f: &mut TensorVisitor<'_, T>) {
        f("weight", &self.weight.value);
        if let Some(b) = &self.bias {
            f("bias", &b.value);
        }
    }

    fn visit_state_mut(&mut self, f: &mut TensorVisitorMut<'_, T>) {
        f("weight", &mut self.weight.value);
        if let Some(b) = &mut self.bias {
            f("bias", &mut b.value);
        }
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}

/// Reshapes every item of the batch; the leading axis is preserved.
#[derive(Clone)]
pub struct Reshape {
    item_shape: Vec<usize>,
    input_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(item_shape: &[usize]) -> Self {
        Self {
            item_shape: item_shape.to_vec(),
            input_shape: None,
        }
    }

    fn target(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend_from_slice(&self.item_shape);
        s
    }
}

impl<T: Float> Layer<T> for Reshape {
    fn forward(&mut self, x: Tensor<T>, _mode: Mode) -> Tensor<T> {
        self.input_shape = Some(x.shape().to_vec());
        let target = self.target(x.batch());
        x.reshape(&target)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone().reshape(&self.target(x.batch()))
    }

    fn backward(&mut self, grad: Tensor<T>, _param_grads: bool) -> Tensor<T> {
        let shape = self.input_shape.as_ref().expect("reshape backward before forward");
        grad.reshape(shape)
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}
