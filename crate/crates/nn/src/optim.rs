use crate::layers::Module;
use crate::{Float, Tensor};

/// Adam with bias correction. Moment buffers follow the module's parameter
/// visiting order, which is fixed per architecture.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the gradients currently stored in `module`.
    pub fn update<M: Module<T> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(self.lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let eps = T::lit(self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_params(&mut |_, p| {
            if ms.len() <= idx {
                ms.push(Tensor::zeros(p.value.shape()));
                vs.push(Tensor::zeros(p.value.shape()));
            }
            let (m, v) = (ms[idx].data_mut(), vs[idx].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
            }
            idx += 1;
        });
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("m.{i:03}"), m.clone()));
            out.push((format!("v.{i:03}"), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: &[(String, Tensor<T>)]) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, t) in tensors {
            if name.starts_with("m.") {
                self.m.push(t.clone());
            } else if name.starts_with("v.") {
                self.v.push(t.clone());
            }
        }
    }
}
