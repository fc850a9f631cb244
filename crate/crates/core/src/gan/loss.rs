use crate::error::{ensure, Result};

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub d_loss: f64,
    pub g_loss: f64,
}

fn clip(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Discriminator cross-entropy and the non-saturating generator loss.
pub fn gan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<GanLosses> {
    ensure!(!d_real.is_empty() && !d_fake.is_empty(), Invalid, "empty score batch");
    let real = -mean(d_real.iter().map(|&p| clip(p).ln()), d_real.len());
    let fake = -mean(d_fake.iter().map(|&p| (1.0 - clip(p)).ln()), d_fake.len());
    let g_loss = -mean(d_fake.iter().map(|&p| clip(p).ln()), d_fake.len());
    Ok(GanLosses {
        d_loss: real + fake,
        g_loss,
    })
}

/// `d d_loss / d p` for the real and fake scores. Clipped entries get zero.
pub fn d_loss_grads(d_real: &[f64], d_fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    let inside = |p: f64| (EPS..=1.0 - EPS).contains(&p);
    let real = d_real
        .iter()
        .map(|&p| if inside(p) { -1.0 / (nr * p) } else { 0.0 })
        .collect();
    let fake = d_fake
        .iter()
        .map(|&p| if inside(p) { 1.0 / (nf * (1.0 - p)) } else { 0.0 })
        .collect();
    (real, fake)
}

/// `d g_loss / d p` for the fake scores.
pub fn g_loss_grad(d_fake: &[f64]) -> Vec<f64> {
    let n = d_fake.len() as f64;
    d_fake
        .iter()
        .map(|&p| if (EPS..=1.0 - EPS).contains(&p) { -1.0 / (n * p) } else { 0.0 })
        .collect()
}
