//! Brute-force reference implementations and random instance generators.

use farsight_core::dataset_io::{seeded_rng, GtBox};
use farsight_core::ssd::{Detection, MatchResult};
use farsight_core::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Box with corners on the 1/64 grid, so every area is exact in `f64`.
pub fn dyadic_box(rng: &mut ChaCha8Rng) -> BBox {
    let a = rng.gen_range(0..64u32);
    let b = rng.gen_range(0..64u32);
    let c = rng.gen_range(0..64u32);
    let d = rng.gen_range(0..64u32);
    let (x0, x1) = (a.min(b), a.max(b) + 1);
    let (y0, y1) = (c.min(d), c.max(d) + 1);
    let s = 1.0 / 64.0;
    BBox::from_corners(x0 as f64 * s, y0 as f64 * s, x1 as f64 * s, y1 as f64 * s)
}

/// IoU from the union measured by coordinate compression: the plane is cut
/// at every edge and each elementary cell covered by either box is summed.
pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    let mut xs = [ca[0], ca[2], cb[0], cb[2]];
    let mut ys = [ca[1], ca[3], cb[1], cb[3]];
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let inside = |c: &[f64; 4], x: f64, y: f64| c[0] <= x && x <= c[2] && c[1] <= y && y <= c[3];
    let mut union = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let (w, h) = (xs[i + 1] - xs[i], ys[j + 1] - ys[j]);
            if w <= 0.0 || h <= 0.0 {
                continue;
            }
            let (mx, my) = ((xs[i] + xs[i + 1]) / 2.0, (ys[j] + ys[j + 1]) / 2.0);
            if inside(&ca, mx, my) || inside(&cb, mx, my) {
                union += w * h;
            }
        }
    }
    let area_a = (ca[2] - ca[0]) * (ca[3] - ca[1]);
    let area_b = (cb[2] - cb[0]) * (cb[3] - cb[1]);
    let inter = area_a + area_b - union;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Exhaustive scan of the three matching rules over a precomputed IoU table
/// `overlaps[t][d]`.
pub fn match_oracle(overlaps: &[Vec<f64>], defaults: usize, tau: f64) -> MatchResult {
    let mut assignment = vec![None; defaults];
    let mut best_default = Vec::new();
    for (t, row) in overlaps.iter().enumerate() {
        let mut candidates: Vec<usize> = (0..defaults).filter(|&d| assignment[d].is_none()).collect();
        candidates.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        let d = candidates[0];
        assignment[d] = Some(t);
        best_default.push(d);
    }
    for (d, slot) in assignment.iter_mut().enumerate() {
        if slot.is_some() || overlaps.is_empty() {
            continue;
        }
        let mut truths: Vec<usize> = (0..overlaps.len()).collect();
        truths.sort_by(|&x, &y| overlaps[y][d].total_cmp(&overlaps[x][d]).then(x.cmp(&y)));
        if overlaps[truths[0]][d] >= tau {
            *slot = Some(truths[0]);
        }
    }
    MatchResult {
        assignment,
        best_default,
    }
}

/// NMS by rank: a detection is kept when no better-ranked kept detection
/// of its class overlaps it above the threshold.
pub fn nms_oracle(dets: &[Detection], iou_thr: f64, top_k: usize, iou: impl Fn(&BBox, &BBox) -> f64) -> Vec<Detection> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; n];
    for (r, &i) in rank.iter().enumerate() {
        keep[r] = (0..r).all(|q| {
            let j = rank[q];
            !keep[q] || dets[j].class_id != dets[i].class_id || iou(&dets[j].bbox, &dets[i].bbox) <= iou_thr
        });
    }
    rank.iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&i, _)| dets[i])
        .take(top_k)
        .collect()
}

pub fn random_detections(n: usize, rng: &mut ChaCha8Rng) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: dyadic_box(rng),
            class_id: rng.gen_range(0..3u8),
            // a coarse grid forces ties
            confidence: rng.gen_range(1..20u32) as f64 / 20.0,
        })
        .collect()
}

pub fn random_truths(n: usize, rng: &mut ChaCha8Rng) -> Vec<GtBox> {
    (0..n)
        .map(|_| GtBox {
            bbox: dyadic_box(rng),
            class_id: rng.gen_range(0..10u8),
        })
        .collect()
}

/// Scalar-loop max over non-overlapping `h/4 x w/4` windows of a `(C, H, W)`
/// map, cell-major within each channel.
pub fn pool_oracle(act: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (wh, ww) = (h / 4, w / 4);
    let mut out = Vec::with_capacity(c * 16);
    for ch in 0..c {
        for i in 0..4 {
            for j in 0..4 {
                let mut m = f32::NEG_INFINITY;
                for y in i * wh..(i + 1) * wh {
                    for x in j * ww..(j + 1) * ww {
                        m = m.max(act[(ch * h + y) * w + x]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed)
}
