//! Finite-difference check of the adversarial losses on miniature nets.

use farsight_core::gan::*;
use farsight_nn::gradcheck::{relative_error, spread_coords};
use farsight_nn::{Mode, Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct MiniGan {
    g: Generator<f64>,
    d: Discriminator<f64>,
    real: Tensor<f64>,
    z: Tensor<f64>,
}

impl MiniGan {
    pub fn new(seed: u64) -> Self {
        let arch = GanArch::scaled_down(32);
        let mut g = Generator::<f64>::new(arch, seed);
        let mut d = Discriminator::<f64>::new(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Larger weights than the 0.02 init so the scores move off 0.5.
        d.visit_params(&mut |n, p| {
            if !n.starts_with("head") {
                p.value.data_mut().iter_mut().for_each(|v| *v *= 5.0)
            }
        });
        // Offsets of random sign keep most activation inputs well away from
        // the kink, so few perturbations cross it.
        let offset = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let m: f64 = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        };
        for m in [&mut g as &mut dyn Module<f64>, &mut d] {
            m.visit_state_mut(&mut |n, t| {
                let data = t.data_mut().iter_mut();
                if n.ends_with("running_var") {
                    data.for_each(|v| *v = rng.gen_range(0.5..1.5));
                } else if n.ends_with("running_mean") {
                    data.for_each(|v| *v = rng.gen_range(-0.1..0.1));
                } else if n.ends_with("beta") {
                    data.for_each(|v| *v = offset(&mut rng, 2.0, 3.0));
                } else if n == "block0.conv.bias" {
                    data.for_each(|v| *v = offset(&mut rng, 1.0, 2.0));
                }
            });
        }
        let real = Tensor::from_vec(&[4, 3, 32, 32], (0..4 * 3072).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let z = Tensor::from_vec(&[4, 100], (0..400).map(|_| rng.gen_range(-1.5..1.5)).collect());
        let mut gan = Self { g, d, real, z };
        gan.center_logits();
        gan
    }

    /// Rescales the head so the real and fake logits are centered with unit spread.
    fn center_logits(&mut self) {
        let fake = self.g.infer(&self.z);
        let mut logits = Vec::new();
        for x in [&self.real, &fake] {
            let trace = self.d.infer_trace(x);
            let fc = trace.iter().find(|(n, _)| n == "head.fc").unwrap();
            logits.extend_from_slice(fc.1.data());
        }
        let n = logits.len() as f64;
        let mean = logits.iter().sum::<f64>() / n;
        let std = (logits.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
        self.d.visit_params(&mut |name, p| match name {
            "head.fc.weight" => p.value.data_mut().iter_mut().for_each(|v| *v /= std),
            "head.fc.bias" => p.value.data_mut()[0] = (p.value.data()[0] - mean) / std,
            _ => {}
        });
    }

    /// Sign pattern of every activation input over both score passes.
    /// Central differences are only meaningful between points that share it.
    fn kink_pattern(&self) -> Vec<bool> {
        fn signs(trace: &[(String, Tensor<f64>)], is_act: impl Fn(&str) -> bool, out: &mut Vec<bool>) {
            for w in trace.windows(2).filter(|w| is_act(&w[1].0)) {
                out.extend(w[0].1.data().iter().map(|&v| v > 0.0));
            }
        }
        let mut out = Vec::new();
        let fake = self.g.infer(&self.z);
        signs(&self.g.infer_trace(&self.z), |n| n.starts_with("relu"), &mut out);
        signs(&self.d.infer_trace(&self.real), |n| n.ends_with(".act"), &mut out);
        signs(&self.d.infer_trace(&fake), |n| n.ends_with(".act"), &mut out);
        out
    }

    fn losses(&self) -> GanLosses {
        let fake = self.g.infer(&self.z);
        let pr: Vec<f64> = self.d.infer(&self.real).into_data();
        let pf: Vec<f64> = self.d.infer(&fake).into_data();
        gan_losses(&pr, &pf).unwrap()
    }

    fn d_loss_backward(&mut self) {
        self.d.zero_grad();
        let (pr, _) = self.d.forward(self.real.clone(), Mode::Eval);
        let (gr, _) = d_loss_grads(pr.data(), &[]);
        self.d.backward(Some(Tensor::from_vec(pr.shape(), gr)), &[], true);
        let fake = self.g.infer(&self.z);
        let (pf, _) = self.d.forward(fake, Mode::Eval);
        let (_, gf) = d_loss_grads(&[], pf.data());
        self.d.backward(Some(Tensor::from_vec(pf.shape(), gf)), &[], true);
    }

    fn g_loss_backward(&mut self) {
        self.g.zero_grad();
        let fake = self.g.forward(self.z.clone(), Mode::Eval);
        let (pf, _) = self.d.forward(fake, Mode::Eval);
        let gp = g_loss_grad(pf.data());
        let dx = self.d.backward(Some(Tensor::from_vec(pf.shape(), gp)), &[], false);
        self.g.backward(dx, true);
    }
}

#[derive(Clone, Copy)]
enum Side {
    Gen,
    Disc,
}

fn with_module<R>(gan: &mut MiniGan, side: Side, f: impl FnOnce(&mut dyn Module<f64>) -> R) -> R {
    match side {
        Side::Gen => f(&mut gan.g),
        Side::Disc => f(&mut gan.d),
    }
}

/// Checks every parameter tensor of one side against central differences
/// (step 1e-5). Coordinates whose perturbation flips an activation sign are
/// skipped; at least half of the sampled coordinates must remain. Returns
/// the worst relative error.
fn check_side(gan: &mut MiniGan, side: Side, loss: fn(&GanLosses) -> f64) -> Result<f64, String> {
    let step = 1e-5;
    let mut worst = 0.0f64;
    let names: Vec<(String, usize)> = with_module(gan, side, |m| {
        let mut out = Vec::new();
        m.visit_params(&mut |n, p| out.push((n.to_string(), p.value.len())));
        out
    });
    let base = gan.kink_pattern();
    for (name, len) in names {
        let grads: Vec<f64> = with_module(gan, side, |m| {
            let mut g = Vec::new();
            m.visit_params(&mut |n, p| {
                if n == name {
                    g = p.grad.data().to_vec();
                }
            });
            g
        });
        let set = |gan: &mut MiniGan, i: usize, v: Option<f64>| -> f64 {
            with_module(gan, side, |m| {
                let mut old = 0.0;
                m.visit_params(&mut |n, p| {
                    if n == name {
                        old = p.value.data()[i];
                        if let Some(v) = v {
                            p.value.data_mut()[i] = v;
                        }
                    }
                });
                old
            })
        };
        let coords = spread_coords(len, 24);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for &i in &coords {
            let x0 = set(gan, i, None);
            set(gan, i, Some(x0 + step));
            let (fp, kp) = (loss(&gan.losses()), gan.kink_pattern());
            set(gan, i, Some(x0 - step));
            let (fm, km) = (loss(&gan.losses()), gan.kink_pattern());
            set(gan, i, Some(x0));
            if kp == base && km == base {
                analytic.push(grads[i]);
                numeric.push((fp - fm) / (2.0 * step));
            }
        }
        if 2 * analytic.len() < coords.len() {
            return Err(format!("{name}: only {} of {} coordinates are kink-free", analytic.len(), coords.len()));
        }
        let err = relative_error(&analytic, &numeric);
        if err > 1e-4 {
            return Err(format!("{name}: relative error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst relative error over every parameter tensor of both nets: d_loss
/// w.r.t. the discriminator, g_loss w.r.t. the generator (widths / 32,
/// batch 4, double precision, fixed batch-norm statistics).
pub fn check_gan_gradients(seed: u64) -> Result<f64, String> {
    let mut gan = MiniGan::new(seed);
    let l = gan.losses();
    if !(l.d_loss > 0.01 && l.g_loss > 0.01) {
        return Err(format!("saturated instance {l:?}"));
    }
    gan.d_loss_backward();
    let d = check_side(&mut gan, Side::Disc, |l| l.d_loss)?;
    gan.g_loss_backward();
    let g = check_side(&mut gan, Side::Gen, |l| l.g_loss)?;
    Ok(d.max(g))
}
