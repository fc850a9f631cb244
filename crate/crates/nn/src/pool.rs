use crate::{Float, Tensor};

/// Max-pools every `(H, W)` plane of a `(B, C, H, W)` tensor onto a
/// `cells x cells` grid of non-overlapping `H/cells x W/cells` windows.
///
/// Returns the pooled tensor and the flat input index of each winner (first
/// maximum in row-major window order).
pub fn grid_max_pool<T: Float>(x: &Tensor<T>, cells: usize) -> (Tensor<T>, Vec<usize>) {
    assert_eq!(x.shape().len(), 4, "grid_max_pool expects (B, C, H, W)");
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert!(
        cells > 0 && h % cells == 0 && w % cells == 0,
        "{h}x{w} map does not tile into a {cells}x{cells} grid"
    );
    let (wh, ww) = (h / cells, w / cells);
    let mut out = Vec::with_capacity(b * c * cells * cells);
    let mut arg = Vec::with_capacity(out.capacity());
    let data = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for gy in 0..cells {
            for gx in 0..cells {
                let mut best = base + gy * wh * w + gx * ww;
                for y in gy * wh..(gy + 1) * wh {
                    for xx in gx * ww..(gx + 1) * ww {
                        let i = base + y * w + xx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::from_vec(&[b, c, cells, cells], out), arg)
}

/// Routes pooled gradients back to the winning input positions.
pub fn grid_max_pool_backward<T: Float>(grad: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Tensor<T> {
    assert_eq!(grad.len(), argmax.len());
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in grad.data().iter().zip(argmax) {
        d[i] += g;
    }
    dx
}
