use farsight_nn::gradcheck::{relative_error, spread_coords};
use farsight_nn::layers::{BatchNorm, Conv2d, ConvTranspose2d, LeakyRelu, Linear, Relu, Sigmoid, Tanh};
use farsight_nn::pool::{grid_max_pool, grid_max_pool_backward};
use farsight_nn::{Layer, Mode, Module, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks input and parameter gradients of `layer` for the objective
/// `sum(r * layer(x))`.
fn check_layer(mut layer: Sequential<f64>, x: Tensor<f64>, mode: Mode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward(x.clone(), mode);
    let r = random(y.shape(), &mut rng);
    layer.zero_grad();
    let dx = layer.backward(r.clone(), true);

    // Eval-mode probes so running statistics stay fixed between evaluations.
    let probe_mode = mode;
    let objective = |l: &mut Sequential<f64>, x: &Tensor<f64>| {
        let mut l2 = l.clone();
        dot(&l2.forward(x.clone(), probe_mode), &r)
    };

    let coords = spread_coords(x.len(), 60);
    let mut xv = x.clone();
    let mut numeric = Vec::new();
    for &i in &coords {
        let x0 = xv.data()[i];
        xv.data_mut()[i] = x0 + 1e-5;
        let fp = objective(&mut layer, &xv);
        xv.data_mut()[i] = x0 - 1e-5;
        let fm = objective(&mut layer, &xv);
        xv.data_mut()[i] = x0;
        numeric.push((fp - fm) / 2e-5);
    }
    let analytic: Vec<f64> = coords.iter().map(|&i| dx.data()[i]).collect();
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-6, "input gradient rel err {err}");

    let mut grads = Vec::new();
    layer.visit_params(&mut |name, p| grads.push((name.to_string(), p.grad.clone(), p.value.len())));
    for (pi, (name, grad, len)) in grads.into_iter().enumerate() {
        let coords = spread_coords(len, 40);
        let mut numeric = Vec::new();
        for &i in &coords {
            let mut vals = [0.0; 2];
            for (slot, delta) in [1e-5, -1e-5].into_iter().enumerate() {
                let mut l2 = layer.clone();
                let mut k = 0;
                l2.visit_params(&mut |_, p| {
                    if k == pi {
                        p.value.data_mut()[i] += delta;
                    }
                    k += 1;
                });
                vals[slot] = dot(&l2.forward(x.clone(), probe_mode), &r);
            }
            numeric.push((vals[0] - vals[1]) / 2e-5);
        }
        let analytic: Vec<f64> = coords.iter().map(|&i| grad.data()[i]).collect();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "param {name} rel err {err}");
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Sequential::new().push("c", Conv2d::<f64>::new(3, 4, 4, 2, 1, true, 0.3, &mut rng));
    check_layer(net, random(&[2, 3, 8, 8], &mut rng), Mode::Train, 2);
    let net = Sequential::new().push("c", Conv2d::<f64>::new(2, 3, 3, 1, 1, false, 0.3, &mut rng));
    check_layer(net, random(&[2, 2, 5, 5], &mut rng), Mode::Train, 3);
}

#[test]
fn conv_transpose2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Sequential::new().push("d", ConvTranspose2d::<f64>::new(4, 3, 4, 2, 1, true, 0.3, &mut rng));
    check_layer(net, random(&[2, 4, 4, 4], &mut rng), Mode::Train, 5);
}

#[test]
fn linear_and_activations_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = Sequential::new()
        .push("fc", Linear::<f64>::new(7, 5, true, 0.5, &mut rng))
        .push("lrelu", LeakyRelu::new(0.2))
        .push("fc2", Linear::<f64>::new(5, 4, true, 0.5, &mut rng))
        .push("tanh", Tanh::new())
        .push("fc3", Linear::<f64>::new(4, 3, false, 0.5, &mut rng))
        .push("sig", Sigmoid::new())
        .push("relu", Relu::new());
    check_layer(net, random(&[3, 7], &mut rng), Mode::Train, 7);
}

#[test]
fn batchnorm_gradients_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bn = BatchNorm::<f64>::new(3);
    for (i, g) in bn.gamma.value.data_mut().iter_mut().enumerate() {
        *g = 0.5 + i as f64;
    }
    bn.running_mean = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]);
    bn.running_var = Tensor::from_vec(&[3], vec![0.5, 1.5, 2.0]);
    let x = random(&[4, 3, 2, 2], &mut rng);
    check_layer(Sequential::new().push("bn", bn.clone()), x.clone(), Mode::Train, 9);
    check_layer(Sequential::new().push("bn", bn), x, Mode::Eval, 10);
}

#[test]
fn grid_pool_backward_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let (y, arg) = grid_max_pool(&x, 4);
    let r = random(y.shape(), &mut rng);
    let dx = grid_max_pool_backward(&r, &arg, x.shape());
    let coords: Vec<usize> = (0..x.len()).collect();
    let mut xv = x.clone();
    let mut numeric = Vec::new();
    for &i in &coords {
        let x0 = xv.data()[i];
        xv.data_mut()[i] = x0 + 1e-7;
        let fp = dot(&grid_max_pool(&xv, 4).0, &r);
        xv.data_mut()[i] = x0 - 1e-7;
        let fm = dot(&grid_max_pool(&xv, 4).0, &r);
        xv.data_mut()[i] = x0;
        numeric.push((fp - fm) / 2e-7);
    }
    assert!(relative_error(dx.data(), &numeric) < 1e-6);
}

/// Direct-summation convolution, independent of the im2col path.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (w.dim(0), w.dim(2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(&[b, o, oh, ow]);
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    y.data_mut()[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn conv_forward_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(k, s, p, h) in &[(4, 2, 1, 8), (3, 1, 1, 5), (3, 2, 1, 7), (1, 1, 0, 3), (5, 2, 2, 9)] {
        let conv = Conv2d::<f64>::new(3, 5, k, s, p, false, 0.5, &mut rng);
        let x = random(&[2, 3, h, h], &mut rng);
        let y = conv.infer(&x);
        let want = naive_conv(&x, &conv.weight.value, s, p);
        assert_eq!(y.shape(), want.shape());
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn transpose_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> when both share one weight tensor.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let conv = Conv2d::<f64>::new(4, 3, 4, 2, 1, false, 0.5, &mut rng);
    let mut tconv = ConvTranspose2d::<f64>::new(3, 4, 4, 2, 1, false, 0.5, &mut rng);
    tconv.weight.value = conv.weight.value.clone();
    let x = random(&[2, 4, 8, 8], &mut rng);
    let y = random(&[2, 3, 4, 4], &mut rng);
    let lhs = dot(&conv.infer(&x), &y);
    let rhs = dot(&x, &tconv.infer(&y));
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    assert_eq!(tconv.infer(&y).shape(), &[2, 4, 8, 8]);
}

#[test]
fn infer_matches_eval_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut net = Sequential::new()
        .push("c", Conv2d::<f32>::new(3, 4, 4, 2, 1, true, 0.2, &mut rng))
        .push("bn", BatchNorm::new(4))
        .push("act", LeakyRelu::new(0.2));
    let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|i| ((i * 37) % 11) as f32 / 11.0).collect());
    net.forward(x.clone(), Mode::Train);
    let a = net.forward(x.clone(), Mode::Eval);
    let b = net.infer(&x);
    assert_eq!(a, b);
}
