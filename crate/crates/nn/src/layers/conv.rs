use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Layer, Mode, Param, ParamVisitor, TensorVisitor, TensorVisitorMut};
use crate::tensor::{batch_to_channel_major, channel_major_to_batch};
use crate::{Float, Tensor};

/// Geometry of a 2-D convolution from an `in_h x in_w` map to `out_h x out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(in_h + 2 * pad >= kernel && in_w + 2 * pad >= kernel, "kernel larger than padded input");
        Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        }
    }

    /// Rows of the column matrix: `channels * kernel * kernel`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output positions `lo..hi` along an axis whose input index for kernel
    /// tap `k` lies inside `0..extent`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        // o * stride + k - pad in [0, extent)
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one `(C, H, W)` image into columns `col_offset .. col_offset + P`
/// of a `col_rows x ld` row-major matrix.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T], col_offset: usize, ld: usize) {
    let k = g.kernel;
    let s = g.stride;
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let (y_lo, y_hi) = g.valid_range(ky, g.in_h, g.out_h);
            for kx in 0..k {
                let (x_lo, x_hi) = g.valid_range(kx, g.in_w, g.out_w);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ld + col_offset..row * ld + col_offset + g.positions()];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < y_lo || oy >= y_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ky - g.pad;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    let base = x_lo * s + kx - g.pad;
                    for (j, v) in line[x_lo..x_hi].iter_mut().enumerate() {
                        *v = src[base + j * s];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `(C, H, W)` image.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T], col_offset: usize, ld: usize) {
    let k = g.kernel;
    let s = g.stride;
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let (y_lo, y_hi) = g.valid_range(ky, g.in_h, g.out_h);
            for kx in 0..k {
                let (x_lo, x_hi) = g.valid_range(kx, g.in_w, g.out_w);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ld + col_offset..row * ld + col_offset + g.positions()];
                for oy in y_lo..y_hi {
                    let iy = oy * s + ky - g.pad;
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let base = x_lo * s + kx - g.pad;
                    for (j, &v) in src[oy * g.out_w + x_lo..oy * g.out_w + x_hi].iter().enumerate() {
                        dst[base + j * s] += v;
                    }
                }
            }
        }
    }
}

fn normal_tensor<T: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

pub(crate) fn init_normal<T: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    normal_tensor(shape, std, rng)
}

fn add_channel_bias<T: Float>(y: &mut [T], bias: &[T], s: usize) {
    for (chunk, &b) in y.chunks_mut(s).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_sums<T: Float>(grad: &[T], out: &mut [T], s: usize) {
    let c = out.len();
    for (i, chunk) in grad.chunks(s).enumerate() {
        out[i % c] += chunk.iter().copied().sum::<T>();
    }
}

/// Strided 2-D convolution, weight layout `(out, in, k, k)`.
#[derive(Clone)]
pub struct Conv2d<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<T>, usize, ConvGeom)>,
}

impl<T: Float> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Param::new(normal_tensor(&[out_ch, in_ch, kernel, kernel], std, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_ch]))),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom::new(self.in_ch, h, w, self.kernel, self.stride, self.pad)
    }

    fn run(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>, ConvGeom) {
        assert_eq!(x.shape().len(), 4, "conv2d expects (B, C, H, W)");
        assert_eq!(x.dim(1), self.in_ch, "conv2d channel mismatch");
        let b = x.batch();
        let g = self.geom(x.dim(2), x.dim(3));
        let p = g.positions();
        let kk = g.col_rows();
        let ld = b * p;
        let mut cols = vec![T::zero(); kk * ld];
        for bi in 0..b {
            im2col(x.item(bi), &g, &mut cols, bi * p, ld);
        }
        let mut y_cm = vec![T::zero(); self.out_ch * ld];
        T::gemm(
            self.out_ch,
            kk,
            ld,
            T::one(),
            self.weight.value.data(),
            kk as isize,
            1,
            &cols,
            ld as isize,
            1,
            T::zero(),
            &mut y_cm,
            ld as isize,
            1,
        );
        let mut y = channel_major_to_batch(&y_cm, b, self.out_ch, p);
        if let Some(bias) = &self.bias {
            add_channel_bias(&mut y, bias.value.data(), p);
        }
        (Tensor::from_vec(&[b, self.out_ch, g.out_h, g.out_w], y), cols, g)
    }
}

impl<T: Float> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: Tensor<T>, _mode: Mode) -> Tensor<T> {
        let (y, cols, g) = self.run(&x);
        self.cache = Some((cols, x.batch(), g));
        y
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x).0
    }

    fn backward(&mut self, grad: Tensor<T>, param_grads: bool) -> Tensor<T> {
        let (cols, b, g) = self.cache.as_ref().expect("conv2d backward before forward");
        let (b, g) = (*b, *g);
        let p = g.positions();
        let kk = g.col_rows();
        let ld = b * p;
        let dy_cm = batch_to_channel_major(grad.data(), b, self.out_ch, p);
        if param_grads {
            T::gemm(
                self.out_ch,
                ld,
                kk,
                T::one(),
                &dy_cm,
                ld as isize,
                1,
                cols,
                1,
                ld as isize,
                T::one(),
                self.weight.grad.data_mut(),
                kk as isize,
                1,
            );
            if let Some(bias) = &mut self.bias {
                accumulate_channel_sums(grad.data(), bias.grad.data_mut(), p);
            }
        }
        let mut dcols = vec![T::zero(); kk * ld];
        T::gemm(
            kk,
            self.out_ch,
            ld,
            T::one(),
            self.weight.value.data(),
            1,
            kk as isize,
            &dy_cm,
            ld as isize,
            1,
            T::zero(),
            &mut dcols,
            ld as isize,
            1,
        );
        let mut dx = Tensor::zeros(&[b, self.in_ch, g.in_h, g.in_w]);
        for bi in 0..b {
            col2im(&dcols, &g, dx.item_mut(bi), bi * p, ld);
        }
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

/// Fractionally-strided convolution, weight layout `(in, out, k, k)`.
///
/// Output size is `(H - 1) * stride - 2 * pad + kernel`.
#[derive(Clone)]
pub struct ConvTranspose2d<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<T>, usize, ConvGeom)>,
}

impl<T: Float> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Param::new(normal_tensor(&[in_ch, out_ch, kernel, kernel], std, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_ch]))),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    /// The geometry of the adjoint convolution (output map -> input map).
    pub fn geom(&self, h: usize, w: usize) -> ConvGeom {
        let oh = (h - 1) * self.stride + self.kernel - 2 * self.pad;
        let ow = (w - 1) * self.stride + self.kernel - 2 * self.pad;
        let g = ConvGeom::new(self.out_ch, oh, ow, self.kernel, self.stride, self.pad);
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        g
    }

    fn run(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>, ConvGeom) {
        assert_eq!(x.shape().len(), 4, "conv_transpose2d expects (B, C, H, W)");
        assert_eq!(x.dim(1), self.in_ch, "conv_transpose2d channel mismatch");
        let b = x.batch();
        let g = self.geom(x.dim(2), x.dim(3));
        let p = g.positions();
        let kk = g.col_rows();
        let ld = b * p;
        let x_cm = batch_to_channel_major(x.data(), b, self.in_ch, p);
        let mut cols = vec![T::zero(); kk * ld];
        T::gemm(
            kk,
            self.in_ch,
            ld,
            T::one(),
            self.weight.value.data(),
            1,
            kk as isize,
            &x_cm,
            ld as isize,
            1,
            T::zero(),
            &mut cols,
            ld as isize,
            1,
        );
        let mut y = Tensor::zeros(&[b, self.out_ch, g.in_h, g.in_w]);
        for bi in 0..b {
            col2im(&cols, &g, y.item_mut(bi), bi * p, ld);
        }
        if let Some(bias) = &self.bias {
            add_channel_bias(y.data_mut(), bias.value.data(), g.in_h * g.in_w);
        }
        (y, x_cm, g)
    }
}

impl<T: Float> Layer<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: Tensor<T>, _mode: Mode) -> Tensor<T> {
        let (y, x_cm, g) = self.run(&x);
        self.cache = Some((x_cm, x.batch(), g));
        y
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x).0
    }

    fn backward(&mut self, grad: Tensor<T>, param_grads: bool) -> Tensor<T> {
        let (x_cm, b, g) = self.cache.as_ref().expect("conv_transpose2d backward before forward");
        let (b, g) = (*b, *g);
        let p = g.positions();
        let kk = g.col_rows();
        let ld = b * p;
        let mut dcols = vec![T::zero(); kk * ld];
        for bi in 0..b {
            im2col(grad.item(bi), &g, &mut dcols, bi * p, ld);
        }
        if param_grads {
            T::gemm(
                self.in_ch,
                ld,
                kk,
                T::one(),
                x_cm,
                ld as isize,
                1,
                &dcols,
                1,
                ld as isize,
                T::one(),
                self.weight.grad.data_mut(),
                kk as isize,
                1,
            );
            if let Some(bias) = &mut self.bias {
                accumulate_channel_sums(grad.data(), bias.grad.data_mut(), g.in_h * g.in_w);
            }
        }
        let mut dx_cm = vec![T::zero(); self.in_ch * ld];
        T::gemm(
            self.in_ch,
            kk,
            ld,
            T::one(),
            self.weight.value.data(),
            kk as isize,
            1,
            &dcols,
            ld as isize,
            1,
            T::zero(),
            &mut dx_cm,
            ld as isize,
            1,
        );
        Tensor::from_vec(
            &[b, self.in_ch, g.out_h, g.out_w],
            channel_major_to_batch(&dx_cm, b, self.in_ch, p),
        )
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
