//! Finite-difference check of the multibox loss on an eight-box instance.

use farsight_core::dataset_io::GtBox;
use farsight_core::ssd::*;
use farsight_core::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracles;

pub fn random_predictions(d: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let logits = (0..d * CLASS_LOGITS).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let offsets = (0..d * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    (logits, offsets)
}

/// Two truths over a 2x2 map with two boxes per cell.
pub fn tiny_instance(seed: u64) -> (DefaultBoxSet, Vec<GtBox>, MultiboxTargets) {
    let set = build_default_boxes(&[(2, vec![1.0])], 0.3, 0.9).unwrap();
    assert_eq!(set.len(), 8);
    let mut rng = oracles::rng(seed);
    let truths: Vec<GtBox> = [(0.3, 0.25), (0.7, 0.75)]
        .iter()
        .map(|&(cx, cy)| GtBox {
            bbox: BBox::new(cx + rng.gen_range(-0.02..0.02), cy, 0.35, 0.3),
            class_id: rng.gen_range(0..10),
        })
        .collect();
    let m = match_boxes(&truths, &set, 0.5).unwrap();
    let targets = build_targets(&truths, &set, &m).unwrap();
    (set, truths, targets)
}

fn rel(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Worst per-coordinate relative error of the analytic logit and offset
/// gradients against central differences (step 1e-5).
pub fn check_multibox_gradients(seed: u64) -> Result<f64, String> {
    let (_, _, targets) = tiny_instance(seed);
    let mut rng = oracles::rng(100 + seed);
    let (logits, offsets) = random_predictions(8, &mut rng);
    let (_, g) = multibox_loss(&logits, &offsets, &targets, 1.0, 3.0).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let f = |l: &[f64], o: &[f64]| multibox_loss(l, o, &targets, 1.0, 3.0).unwrap().0.total;
    let mut worst = 0.0f64;
    for i in 0..logits.len() {
        let (mut p, mut m) = (logits.clone(), logits.clone());
        p[i] += h;
        m[i] -= h;
        let num = (f(&p, &offsets) - f(&m, &offsets)) / (2.0 * h);
        let e = rel(g.logits[i], num);
        if e > 1e-4 {
            return Err(format!("logit {i}: {} vs {num}", g.logits[i]));
        }
        worst = worst.max(e);
    }
    for i in 0..offsets.len() {
        let (mut p, mut m) = (offsets.clone(), offsets.clone());
        p[i] += h;
        m[i] -= h;
        let num = (f(&logits, &p) - f(&logits, &m)) / (2.0 * h);
        let e = rel(g.offsets[i], num);
        if e > 1e-4 {
            return Err(format!("offset {i}: {} vs {num}", g.offsets[i]));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}
