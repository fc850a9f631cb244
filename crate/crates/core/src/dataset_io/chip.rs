use farsight_nn::Tensor;

use super::CifarRecord;
use crate::error::{ensure, Result};

/// Planar float image, `channels x height x width`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageChip {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageChip {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1 && channels >= 1, Invalid, "empty chip {channels}x{height}x{width}");
        ensure!(
            data.len() == channels * height * width,
            Invalid,
            "chip data length {} != {channels}x{height}x{width}",
            data.len()
        );
        ensure!(
            data.iter().all(|v| (-1.0..=1.0).contains(v)),
            Invalid,
            "chip values must lie in [-1, 1]"
        );
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("valid fill")
    }

    /// Clamps into `[-1, 1]` instead of rejecting out-of-range values.
    pub fn from_clamped(channels: usize, height: usize, width: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        assert!(height >= 1 && width >= 1);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// Sub-image `[y0, y1) x [x0, x1)`.
    pub fn crop(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> Result<Self> {
        ensure!(
            y0 < y1 && x0 < x1 && y1 <= self.height && x1 <= self.width,
            Invalid,
            "crop [{y0},{y1})x[{x0},{x1}) outside {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(self.channels * (y1 - y0) * (x1 - x0));
        for c in 0..self.channels {
            for y in y0..y1 {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x1]);
            }
        }
        Ok(Self {
            channels: self.channels,
            height: y1 - y0,
            width: x1 - x0,
            data,
        })
    }

    /// Overwrites the region whose top-left corner is `(y0, x0)`.
    pub fn paste(&mut self, src: &ImageChip, y0: usize, x0: usize) {
        assert_eq!(src.channels, self.channels);
        assert!(y0 + src.height <= self.height && x0 + src.width <= self.width);
        for c in 0..self.channels {
            for y in 0..src.height {
                let dst = (c * self.height + y0 + y) * self.width + x0;
                let s = (c * src.height + y) * src.width;
                self.data[dst..dst + src.width].copy_from_slice(&src.data[s..s + src.width]);
            }
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Stacks equally shaped chips into a `(B, C, H, W)` batch.
    pub fn batch(chips: &[&ImageChip]) -> Tensor<f32> {
        assert!(!chips.is_empty());
        let (c, h, w) = chips[0].shape();
        let mut data = Vec::with_capacity(chips.len() * c * h * w);
        for chip in chips {
            assert_eq!(chip.shape(), (c, h, w), "batch: chip shape mismatch");
            data.extend_from_slice(&chip.data);
        }
        Tensor::from_vec(&[chips.len(), c, h, w], data)
    }

    /// Splits a `(B, C, H, W)` tensor into chips, clamping into range.
    pub fn unbatch(t: &Tensor<f32>) -> Vec<ImageChip> {
        let (c, h, w) = (t.dim(1), t.dim(2), t.dim(3));
        (0..t.batch()).map(|i| Self::from_clamped(c, h, w, t.item(i).to_vec())).collect()
    }

    pub fn mse(&self, other: &ImageChip) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// `2 * byte / 255 - 1`, shape 3x32x32.
pub fn record_to_chip(rec: &CifarRecord) -> ImageChip {
    let data = rec.pixels().iter().map(|&b| 2.0 * b as f32 / 255.0 - 1.0).collect();
    ImageChip {
        channels: 3,
        height: 32,
        width: 32,
        data,
    }
}

/// Quantizes back to interleaved RGB8: `round(255 * (v + 1) / 2)`.
pub fn chip_to_rgb8(chip: &ImageChip) -> Vec<u8> {
    let (c, h, w) = chip.shape();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = chip.get(ch.min(c - 1), y, x);
                out.push((255.0 * (v + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn rgb8_to_chip(rgb: &[u8], height: usize, width: usize) -> Result<ImageChip> {
    ensure!(rgb.len() == height * width * 3, Data, "rgb buffer length mismatch");
    let mut data = vec![0f32; rgb.len()];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * height * width + i] = 2.0 * px[c] as f32 / 255.0 - 1.0;
        }
    }
    ImageChip::new(3, height, width, data)
}

/// Bilinear interpolation with half-pixel centers and edge clamping.
pub fn resize_bilinear(chip: &ImageChip, height: usize, width: usize) -> ImageChip {
    assert!(height >= 1 && width >= 1);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(height, chip.height);
    let tx = taps(width, chip.width);
    let mut data = Vec::with_capacity(chip.channels * height * width);
    for c in 0..chip.channels {
        let plane = chip.plane(c);
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let p = |y: usize, x: usize| plane[y * chip.width + x];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    ImageChip::from_clamped(chip.channels, height, width, data)
}

/// Per-output weights of a 1-D box filter mapping `inp` samples onto `out`.
fn area_weights(out: usize, inp: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(inp);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then(|| (i, (overlap / scale) as f32))
                })
                .collect()
        })
        .collect()
}

/// Area (box-filter) resampling: every output pixel is the mean of the input
/// area it covers. Separable, width first.
pub fn resize_area(chip: &ImageChip, height: usize, width: usize) -> ImageChip {
    assert!(height >= 1 && width >= 1);
    let wx = area_weights(width, chip.width);
    let wy = area_weights(height, chip.height);
    let mut data = Vec::with_capacity(chip.channels * height * width);
    let mut tmp = vec![0f32; chip.height * width];
    for c in 0..chip.channels {
        let plane = chip.plane(c);
        for y in 0..chip.height {
            for (x, taps) in wx.iter().enumerate() {
                tmp[y * width + x] = taps.iter().map(|&(i, w)| plane[y * chip.width + i] * w).sum();
            }
        }
        for taps in &wy {
            for x in 0..width {
                data.push(taps.iter().map(|&(i, w)| tmp[i * width + x] * w).sum());
            }
        }
    }
    ImageChip::from_clamped(chip.channels, height, width, data)
}
