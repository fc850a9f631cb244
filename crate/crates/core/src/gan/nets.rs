use farsight_nn::layers::{BatchNorm, Conv2d, ConvTranspose2d, LeakyRelu, Linear, Relu, Reshape, Sigmoid, Tanh};
use farsight_nn::layers::{ParamVisitor, TensorVisitor, TensorVisitorMut};
use farsight_nn::pool::grid_max_pool;
use farsight_nn::{Float, Mode, Module, Sequential, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset_io::{seeded_rng, sub_seed, ImageChip};
use crate::error::{ensure, Result};

pub const LATENT_DIM: usize = 100;
pub const CHIP_SIDE: usize = 32;
/// Spatial cells per side of the pooled feature grid.
pub const FEATURE_GRID: usize = 4;

const INIT_STD: f64 = 0.02;

/// Layer widths of the generator/discriminator pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanArch {
    pub latent_dim: usize,
    /// Projection width followed by the two hidden up-convolution widths.
    pub g_channels: [usize; 3],
    /// Widths of the three strided convolutions.
    pub d_channels: [usize; 3],
}

impl Default for GanArch {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            g_channels: [1024, 512, 256],
            d_channels: [256, 512, 1024],
        }
    }
}

impl GanArch {
    /// Every width divided by `divisor`; used for fast tests and gradient checks.
    pub fn scaled_down(divisor: usize) -> Self {
        let d = Self::default();
        Self {
            latent_dim: d.latent_dim,
            g_channels: d.g_channels.map(|c| (c / divisor).max(1)),
            d_channels: d.d_channels.map(|c| (c / divisor).max(1)),
        }
    }

    /// Length of the pooled discriminator feature vector.
    pub fn feature_dim(&self) -> usize {
        FEATURE_GRID * FEATURE_GRID * self.d_channels.iter().sum::<usize>()
    }
}

/// Latent input of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(Vec<f32>);

impl LatentVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        ensure!(values.len() == LATENT_DIM, Invalid, "latent dimension {} != {LATENT_DIM}", values.len());
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }
}

/// `n` standard-normal latent vectors.
pub fn sample_latent(n: usize, seed: u64) -> Vec<LatentVector> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| LatentVector((0..LATENT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()))
        .collect()
}

fn latent_batch(z: &[LatentVector]) -> Tensor<f32> {
    let data = z.iter().flat_map(|v| v.0.iter().copied()).collect();
    Tensor::from_vec(&[z.len(), LATENT_DIM], data)
}

#[derive(Clone)]
pub struct Generator<T: Float = f32> {
    arch: GanArch,
    net: Sequential<T>,
    pub(crate) iterations: u64,
}

impl<T: Float> Generator<T> {
    pub fn new(arch: GanArch, seed: u64) -> Self {
        let mut rng = seeded_rng(sub_seed(seed, 0));
        let [c0, c1, c2] = arch.g_channels;
        let net = Sequential::new()
            .push("project", Linear::new(arch.latent_dim, c0 * 16, false, INIT_STD, &mut rng))
            .push("reshape", Reshape::new(&[c0, 4, 4]))
            .push("bn0", BatchNorm::new(c0))
            .push("relu0", Relu::new())
            .push("up1", ConvTranspose2d::new(c0, c1, 4, 2, 1, false, INIT_STD, &mut rng))
            .push("bn1", BatchNorm::new(c1))
            .push("relu1", Relu::new())
            .push("up2", ConvTranspose2d::new(c1, c2, 4, 2, 1, false, INIT_STD, &mut rng))
            .push("bn2", BatchNorm::new(c2))
            .push("relu2", Relu::new())
            .push("up3", ConvTranspose2d::new(c2, 3, 4, 2, 1, true, INIT_STD, &mut rng))
            .push("tanh", Tanh::new());
        Self {
            arch,
            net,
            iterations: 0,
        }
    }

    pub fn arch(&self) -> GanArch {
        self.arch
    }

    /// Optimizer steps applied so far; zero for a freshly initialized net.
    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    /// `(B, latent_dim)` to `(B, 3, 32, 32)`.
    pub fn forward(&mut self, z: Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(z.item_len(), self.arch.latent_dim, "latent width mismatch");
        self.net.forward(z, mode)
    }

    pub fn infer(&self, z: &Tensor<T>) -> Tensor<T> {
        assert_eq!(z.item_len(), self.arch.latent_dim, "latent width mismatch");
        self.net.infer(z)
    }

    /// Named output of every layer, inference mode.
    pub fn infer_trace(&self, z: &Tensor<T>) -> Vec<(String, Tensor<T>)> {
        self.net.infer_trace(z)
    }

    /// Gradient w.r.t. the latent batch of the last `forward`.
    pub fn backward(&mut self, grad: Tensor<T>, param_grads: bool) -> Tensor<T> {
        self.net.backward(grad, param_grads)
    }
}

impl Generator<f32> {
    /// Inference-mode generation, one chip per latent vector.
    pub fn generate(&self, z: &[LatentVector]) -> Vec<ImageChip> {
        if z.is_empty() {
            return Vec::new();
        }
        ImageChip::unbatch(&self.infer(&latent_batch(z)))
    }
}

impl<T: Float> Module<T> for Generator<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.net.visit_params(f)
    }

    fn visit_state(&self, f: &mut TensorVisitor<'_, T>) {
        self.net.visit_state(f)
    }

    fn visit_state_mut(&mut self, f: &mut TensorVisitorMut<'_, T>) {
        self.net.visit_state_mut(f)
    }
}

#[derive(Clone)]
pub struct Discriminator<T: Float = f32> {
    arch: GanArch,
    blocks: [Sequential<T>; 3],
    head: Sequential<T>,
    pub(crate) iterations: u64,
}

impl<T: Float> Discriminator<T> {
    pub fn new(arch: GanArch, seed: u64) -> Self {
        let mut rng = seeded_rng(sub_seed(seed, 1));
        let [c0, c1, c2] = arch.d_channels;
        let blocks = [
            Sequential::new()
                .push("conv", Conv2d::new(3, c0, 4, 2, 1, true, INIT_STD, &mut rng))
                .push("act", LeakyRelu::new(0.2)),
            Sequential::new()
                .push("conv", Conv2d::new(c0, c1, 4, 2, 1, false, INIT_STD, &mut rng))
                .push("bn", BatchNorm::new(c1))
                .push("act", LeakyRelu::new(0.2)),
            Sequential::new()
                .push("conv", Conv2d::new(c1, c2, 4, 2, 1, false, INIT_STD, &mut rng))
                .push("bn", BatchNorm::new(c2))
                .push("act", LeakyRelu::new(0.2)),
        ];
        let head = Sequential::new()
            .push("fc", Linear::new(c2 * 16, 1, true, INIT_STD, &mut rng))
            .push("sigmoid", Sigmoid::new());
        Self {
            arch,
            blocks,
            head,
            iterations: 0,
        }
    }

    pub fn arch(&self) -> GanArch {
        self.arch
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    fn check_input(x: &Tensor<T>) {
        assert!(
            x.shape().len() == 4 && x.shape()[1..] == [3, CHIP_SIDE, CHIP_SIDE],
            "discriminator expects (B, 3, 32, 32), got {:?}",
            x.shape()
        );
    }

    /// Realness probabilities `(B, 1)`; the block activations are returned
    /// alongside and stay cached for `backward`.
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> (Tensor<T>, Vec<Tensor<T>>) {
        Self::check_input(&x);
        let mut acts = Vec::with_capacity(3);
        let mut h = x;
        for block in &mut self.blocks {
            h = block.forward(h, mode);
            acts.push(h.clone());
        }
        (self.head.forward(h, mode), acts)
    }

    /// Backward from the probability gradient and, optionally, from
    /// gradients on each block activation. Returns the input gradient.
    pub fn backward(&mut self, grad_prob: Option<Tensor<T>>, grad_acts: &[Option<Tensor<T>>], param_grads: bool) -> Tensor<T> {
        let mut g: Option<Tensor<T>> = grad_prob.map(|gp| self.head.backward(gp, param_grads));
        for k in (0..3).rev() {
            let extra = grad_acts.get(k).and_then(|a| a.as_ref());
            let total = match (g.take(), extra) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(b);
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b.clone(),
                (None, None) => continue,
            };
            g = Some(self.blocks[k].backward(total, param_grads));
        }
        g.expect("backward needs at least one gradient")
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        Self::check_input(x);
        let acts = self.infer_activations(x);
        self.head.infer(&acts[2])
    }

    /// Named output of every layer, inference mode.
    pub fn infer_trace(&self, x: &Tensor<T>) -> Vec<(String, Tensor<T>)> {
        Self::check_input(x);
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();
        for (k, block) in self.blocks.iter().enumerate() {
            let input = out.last().map_or(x, |(_, t)| t).clone();
            out.extend(block.infer_trace(&input).into_iter().map(|(n, t)| (format!("block{k}.{n}"), t)));
        }
        let last = out.last().expect("three blocks").1.clone();
        out.extend(self.head.infer_trace(&last).into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    /// Post-activation outputs of the three conv blocks, inference mode.
    pub fn infer_activations(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        Self::check_input(x);
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(3);
        for block in &self.blocks {
            let next = block.infer(acts.last().unwrap_or(x));
            acts.push(next);
        }
        acts
    }
}

/// Concatenated `4x4` grid max-pools of the block activations, one row per
/// batch item, in block order.
pub fn pooled_features<T: Float>(acts: &[Tensor<T>]) -> Tensor<T> {
    let b = acts[0].batch();
    let pooled: Vec<Tensor<T>> = acts.iter().map(|a| grid_max_pool(a, FEATURE_GRID).0).collect();
    let width: usize = pooled.iter().map(|p| p.item_len()).sum();
    let mut out = Vec::with_capacity(b * width);
    for i in 0..b {
        for p in &pooled {
            out.extend_from_slice(p.item(i));
        }
    }
    Tensor::from_vec(&[b, width], out)
}

impl Discriminator<f32> {
    /// Inference-mode realness scores.
    pub fn discriminate(&self, chips: &[&ImageChip]) -> Result<Vec<f32>> {
        for c in chips {
            ensure!(
                c.shape() == (3, CHIP_SIDE, CHIP_SIDE),
                Invalid,
                "discriminator input must be 3x32x32, got {:?}",
                c.shape()
            );
        }
        if chips.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.infer(&ImageChip::batch(chips)).into_data())
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&mut |n, p| f(&format!("block{k}.{n}"), p));
        }
        self.head.visit_params(&mut |n, p| f(&format!("head.{n}"), p));
    }

    fn visit_state(&self, f: &mut TensorVisitor<'_, T>) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.visit_state(&mut |n, t| f(&format!("block{k}.{n}"), t));
        }
        self.head.visit_state(&mut |n, t| f(&format!("head.{n}"), t));
    }

    fn visit_state_mut(&mut self, f: &mut TensorVisitorMut<'_, T>) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_state_mut(&mut |n, t| f(&format!("block{k}.{n}"), t));
        }
        self.head.visit_state_mut(&mut |n, t| f(&format!("head.{n}"), t));
    }
}

/// Copies every state tensor between precisions (used by gradient checks).
pub fn cast_state<A: Float, B: Float, M: Module<B>>(src: &impl Module<A>, dst: &mut M) {
    let tensors: Vec<(String, Tensor<B>)> = src.state().into_iter().map(|(n, t)| (n, t.cast())).collect();
    dst.load_state(&tensors).expect("architectures match");
}
