use super::{Layer, Mode, Param, ParamVisitor, TensorVisitor, TensorVisitorMut};
use crate::{Float, Tensor};

/// Per-channel batch normalization over `(B, C, ...)` inputs.
///
/// Train mode normalizes with biased batch statistics and folds the unbiased
/// batch variance into the running estimate; eval mode uses the running
/// estimates only.
#[derive(Clone)]
pub struct BatchNorm<T: Float> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
    cache: Option<Cache<T>>,
}

#[derive(Clone)]
struct Cache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            channels,
            cache: None,
        }
    }

    fn spatial(&self, x: &Tensor<T>) -> usize {
        assert!(x.shape().len() >= 2 && x.dim(1) == self.channels, "batchnorm channel mismatch");
        x.shape()[2..].iter().product()
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[f64], inv_std: &[f64]) -> (Tensor<T>, Tensor<T>) {
        let s = self.spatial(x);
        let mut x_hat = x.clone();
        let mut y = x.clone();
        for (i, (hc, yc)) in x_hat
            .data_mut()
            .chunks_mut(s)
            .zip(y.data_mut().chunks_mut(s))
            .enumerate()
        {
            let c = i % self.channels;
            let (m, is) = (T::lit(mean[c]), T::lit(inv_std[c]));
            let (g, b) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
            for (h, v) in hc.iter_mut().zip(yc.iter_mut()) {
                *h = (*h - m) * is;
                *v = g * *h + b;
            }
        }
        (x_hat, y)
    }

    fn running_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let mean = self.running_mean.data().iter().map(|v| v.to_f64().unwrap()).collect();
        let inv_std = self
            .running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v.to_f64().unwrap() + self.eps).sqrt())
            .collect();
        (mean, inv_std)
    }

    fn batch_stats(&self, x: &Tensor<T>) -> (Vec<f64>, Vec<f64>, usize) {
        let s = self.spatial(x);
        let n = x.batch() * s;
        let mut sum = vec![0.0f64; self.channels];
        for (i, chunk) in x.data().chunks(s).enumerate() {
            sum[i % self.channels] += chunk.iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
        let mut sq = vec![0.0f64; self.channels];
        for (i, chunk) in x.data().chunks(s).enumerate() {
            let c = i % self.channels;
            sq[c] += chunk
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mean[c];
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq.iter().map(|v| v / n as f64).collect();
        (mean, var, n)
    }
}

impl<T: Float> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (mean, inv_std) = match mode {
            Mode::Eval => self.running_stats(),
            Mode::Train => {
                let (mean, var, n) = self.batch_stats(&x);
                assert!(n > 1, "batchnorm in train mode needs more than one value per channel");
                let m = self.momentum;
                let unbias = n as f64 / (n as f64 - 1.0);
                for c in 0..self.channels {
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = T::lit((1.0 - m) * rm.to_f64().unwrap() + m * mean[c]);
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = T::lit((1.0 - m) * rv.to_f64().unwrap() + m * var[c] * unbias);
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                (mean, inv_std)
            }
        };
        let (x_hat, y) = self.normalize(&x, &mean, &inv_std);
        self.cache = Some(Cache {
            x_hat,
            inv_std: inv_std.iter().map(|&v| T::lit(v)).collect(),
            mode,
        });
        y
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (mean, inv_std) = self.running_stats();
        self.normalize(x, &mean, &inv_std).1
    }

    fn backward(&mut self, mut grad: Tensor<T>, param_grads: bool) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("batchnorm backward before forward");
        let s = self.spatial(&cache.x_hat);
        let n = cache.x_hat.batch() * s;
        let c_n = self.channels;
        let mut sum_dy = vec![0.0f64; c_n];
        let mut sum_dy_xhat = vec![0.0f64; c_n];
        for (i, (gc, hc)) in grad.data().chunks(s).zip(cache.x_hat.data().chunks(s)).enumerate() {
            let c = i % c_n;
            for (&g, &h) in gc.iter().zip(hc) {
                let g = g.to_f64().unwrap();
                sum_dy[c] += g;
                sum_dy_xhat[c] += g * h.to_f64().unwrap();
            }
        }
        if param_grads {
            for c in 0..c_n {
                self.gamma.grad.data_mut()[c] += T::lit(sum_dy_xhat[c]);
                self.beta.grad.data_mut()[c] += T::lit(sum_dy[c]);
            }
        }
        let gamma = self.gamma.value.data();
        for (i, (gc, hc)) in grad.data_mut().chunks_mut(s).zip(cache.x_hat.data().chunks(s)).enumerate() {
            let c = i % c_n;
            let scale = gamma[c] * cache.inv_std[c];
            match cache.mode {
                Mode::Eval => gc.iter_mut().for_each(|g| *g *= scale),
                Mode::Train => {
                    let mean_dy = T::lit(sum_dy[c] / n as f64);
                    let mean_dy_xhat = T::lit(sum_dy_xhat[c] / n as f64);
                    for (g, &h) in gc.iter_mut().zip(hc) {
                        *g = scale * (*g - mean_dy - h * mean_dy_xhat);
                    }
                }
            }
        }
        grad
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }

    fn visit_state(&self, f: &mut TensorVisitor<'_, T>) {
        f("gamma", &self.gamma.value);
        f("beta", &self.beta.value);
        f("running_mean", &self.running_mean);
        f("running_var", &self.running_var);
    }

    fn visit_state_mut(&mut self, f: &mut TensorVisitorMut<'_, T>) {
        f("gamma", &mut self.gamma.value);
        f("beta", &mut self.beta.value);
        f("running_mean", &mut self.running_mean);
        f("running_var", &mut self.running_var);
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}
