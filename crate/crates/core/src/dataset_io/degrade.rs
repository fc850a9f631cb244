use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{resize_area, resize_bilinear, seeded_rng, ImageChip};
use crate::error::{ensure, Result};

/// Parameters of the simulated viewing distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Fraction of the original resolution kept, in `(0, 1]`.
    pub scale_factor: f64,
    /// Gaussian blur sigma in pixels of the downsampled image.
    pub blur_sigma: f64,
    /// Additive Gaussian noise std, in `[-1, 1]` pixel units.
    pub noise_sigma: f64,
}

impl DegradationSpec {
    pub const IDENTITY: Self = Self {
        scale_factor: 1.0,
        blur_sigma: 0.0,
        noise_sigma: 0.0,
    };

    pub fn new(scale_factor: f64, blur_sigma: f64, noise_sigma: f64) -> Self {
        Self {
            scale_factor,
            blur_sigma,
            noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.scale_factor > 0.0 && self.scale_factor <= 1.0,
            Invalid,
            "scale_factor {} outside (0, 1]",
            self.scale_factor
        );
        ensure!(
            self.blur_sigma >= 0.0 && self.blur_sigma.is_finite(),
            Invalid,
            "blur_sigma must be finite and >= 0"
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            Invalid,
            "noise_sigma must be finite and >= 0"
        );
        Ok(())
    }

    /// Size of the intermediate low-resolution image for an `h x w` input.
    pub fn reduced_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (self.scale_factor * h as f64).ceil() as usize,
            (self.scale_factor * w as f64).ceil() as usize,
        )
    }
}

/// Separable Gaussian blur with replicated borders, radius `ceil(3 sigma)`.
pub fn gaussian_blur(chip: &ImageChip, sigma: f64) -> ImageChip {
    if sigma <= 0.0 {
        return chip.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (c, h, w) = chip.shape();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(c * h * w);
    let mut tmp = vec![0f64; h * w];
    for ch in 0..c {
        let p = chip.plane(ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * p[y * w + at(x as isize + j as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[at(y as isize + j as isize - r, h) * w + x])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    ImageChip::from_clamped(c, h, w, out)
}

/// Simulates a distant view: area-downsample, blur, add seeded noise,
/// bilinearly upsample back to the input size, clamp to `[-1, 1]`.
pub fn degrade(chip: &ImageChip, spec: &DegradationSpec, seed: u64) -> Result<ImageChip> {
    spec.validate()?;
    let (c, h, w) = chip.shape();
    let (rh, rw) = spec.reduced_size(h, w);
    ensure!(rh >= 1 && rw >= 1, Invalid, "scale_factor {} collapses the chip", spec.scale_factor);
    let mut low = resize_area(chip, rh, rw);
    low = gaussian_blur(&low, spec.blur_sigma);
    if spec.noise_sigma > 0.0 {
        let mut rng = seeded_rng(seed);
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        let data = low.data().iter().map(|&v| v + noise.sample(&mut rng) as f32).collect();
        low = ImageChip::from_clamped(c, rh, rw, data);
    }
    Ok(resize_bilinear(&low, h, w))
}
