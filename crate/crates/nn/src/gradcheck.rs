//! Central finite differences, used as an independent oracle for the
//! hand-written backward passes.

/// Relative error between two gradient blocks: `|a - n| / max(|a|, |n|)`
/// under the Euclidean norm; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each requested coordinate `i`.
///
/// `set` writes a coordinate value into the model and `eval` recomputes the
/// scalar objective from scratch.
pub fn central_differences(
    coords: &[usize],
    step: f64,
    mut get: impl FnMut(usize) -> f64,
    mut set: impl FnMut(usize, f64),
    mut eval: impl FnMut() -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let x0 = get(i);
            set(i, x0 + step);
            let fp = eval();
            set(i, x0 - step);
            let fm = eval();
            set(i, x0);
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Up to `max` coordinate indices spread evenly over `0..len`, always
/// including both ends.
pub fn spread_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..max).map(|i| i * (len - 1) / (max - 1)).collect();
    v.dedup();
    v
}
