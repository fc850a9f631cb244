use super::{Layer, Mode};
use crate::{Float, Tensor};

macro_rules! elementwise {
    ($(#[$doc:meta])* $name:ident { $($field:ident: $fty:ty),* }, |$s:ident, $x:ident| $fwd:expr, |$s2:ident, $y:ident| $deriv:expr) => {
        $(#[$doc])*
        #[derive(Clone)]
        pub struct $name<T: Float> {
            $(pub $field: $fty,)*
            output: Option<Tensor<T>>,
        }

        impl<T: Float> $name<T> {
            fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
                let $s = self;
                x.map(|$x| $fwd)
            }
        }

        impl<T: Float> Layer<T> for $name<T> {
            fn forward(&mut self, x: Tensor<T>, _mode: Mode) -> Tensor<T> {
                let y = self.apply(&x);
                self.output = Some(y.clone());
                y
            }

            fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
                self.apply(x)
            }

            fn backward(&mut self, mut grad: Tensor<T>, _param_grads: bool) -> Tensor<T> {
                let out = self.output.as_ref().expect("activation backward before forward");
                let $s2 = &*self;
                for (g, &$y) in grad.data_mut().iter_mut().zip(out.data()) {
                    *g *= $deriv;
                }
                grad
            }

            fn clone_box(&self) -> Box<dyn Layer<T>> {
                Box::new(self.clone())
            }
        }
    };
}

elementwise!(Relu {}, |_s, x| if x > T::zero() { x } else { T::zero() }, |_s, y| if y > T::zero() {
    T::one()
} else {
    T::zero()
});

elementwise!(
    /// `max(x, slope * x)`; the derivative is read off the output sign.
    LeakyRelu { slope: T },
    |s, x| if x > T::zero() { x } else { s.slope * x },
    |s, y| if y > T::zero() { T::one() } else { s.slope }
);

elementwise!(Tanh {}, |_s, x| x.tanh(), |_s, y| T::one() - y * y);

elementwise!(
    Sigmoid {},
    |_s, x| T::one() / (T::one() + (-x).exp()),
    |_s, y| y * (T::one() - y)
);

impl<T: Float> Relu<T> {
    pub fn new() -> Self {
        Self { output: None }
    }
}

impl<T: Float> Default for Relu<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        Self {
            slope: T::lit(slope),
            output: None,
        }
    }
}

impl<T: Float> Tanh<T> {
    pub fn new() -> Self {
        Self { output: None }
    }
}

impl<T: Float> Default for Tanh<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Sigmoid<T> {
    pub fn new() -> Self {
        Self { output: None }
    }
}

impl<T: Float> Default for Sigmoid<T> {
    fn default() -> Self {
        Self::new()
    }
}
