use serde::{Deserialize, Serialize};

use crate::dataset_io::GtBox;
use crate::error::{ensure, Result};
use crate::geometry::{iou, BBox};

/// Offset encoding variances for (cx, cy, w, h).
pub const VARIANCES: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// One feature map's share of the default boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapLayout {
    pub grid: usize,
    pub ratios: Vec<f64>,
    pub boxes_per_cell: usize,
    pub scale: f64,
    /// Index of the map's first box in the flat list.
    pub offset: usize,
}

/// Default boxes ordered by (map, row, column, ratio). A ratio-1 entry is
/// followed by its extra box at the geometric-mean scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefaultBoxSet {
    pub boxes: Vec<BBox>,
    pub layout: Vec<MapLayout>,
}

impl DefaultBoxSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Scales interpolated linearly from `s_min` to `s_max` across the maps.
pub fn map_scales(maps: usize, s_min: f64, s_max: f64) -> Vec<f64> {
    if maps == 1 {
        return vec![s_min];
    }
    (0..maps)
        .map(|k| s_min + (s_max - s_min) * k as f64 / (maps - 1) as f64)
        .collect()
}

fn is_square(r: f64) -> bool {
    (r - 1.0).abs() < 1e-12
}

pub fn build_default_boxes(grids: &[(usize, Vec<f64>)], s_min: f64, s_max: f64) -> Result<DefaultBoxSet> {
    ensure!(
        0.0 < s_min && s_min < s_max && s_max <= 1.0,
        Invalid,
        "default-box scales need 0 < s_min < s_max <= 1, got {s_min}, {s_max}"
    );
    ensure!(!grids.is_empty(), Invalid, "no feature maps given");
    for (f, ratios) in grids {
        ensure!(*f >= 1, Invalid, "grid size must be at least 1");
        ensure!(!ratios.is_empty(), Invalid, "each map needs at least one aspect ratio");
        ensure!(
            ratios.iter().all(|r| r.is_finite() && *r > 0.0),
            Invalid,
            "aspect ratios must be positive"
        );
    }
    let scales = map_scales(grids.len(), s_min, s_max);
    let mut boxes = Vec::new();
    let mut layout = Vec::new();
    for (k, (f, ratios)) in grids.iter().enumerate() {
        let s = scales[k];
        let s_next = scales.get(k + 1).copied().unwrap_or(1.0);
        let offset = boxes.len();
        let mut shapes = Vec::new();
        for &r in ratios {
            shapes.push((s * r.sqrt(), s / r.sqrt()));
            if is_square(r) {
                let extra = (s * s_next).sqrt();
                shapes.push((extra, extra));
            }
        }
        for i in 0..*f {
            for j in 0..*f {
                let cx = (j as f64 + 0.5) / *f as f64;
                let cy = (i as f64 + 0.5) / *f as f64;
                boxes.extend(shapes.iter().map(|&(w, h)| BBox::new(cx, cy, w, h).clipped()));
            }
        }
        layout.push(MapLayout {
            grid: *f,
            ratios: ratios.clone(),
            boxes_per_cell: shapes.len(),
            scale: s,
            offset,
        });
    }
    Ok(DefaultBoxSet { boxes, layout })
}

/// Assignment of default boxes to ground truths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Matched truth per default box; `None` is background.
    pub assignment: Vec<Option<usize>>,
    /// Default box claimed by each truth in the forced pass.
    pub best_default: Vec<usize>,
}

impl MatchResult {
    pub fn positives(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

/// Truths claim defaults in index order, each taking its highest-IoU default
/// not already claimed (lowest index on ties). Remaining defaults whose best
/// IoU reaches `tau` go to that truth (lowest truth index on ties); the rest
/// are background.
pub fn match_boxes(truths: &[GtBox], defaults: &DefaultBoxSet, tau: f64) -> Result<MatchResult> {
    ensure!(!defaults.is_empty(), Invalid, "empty default-box set");
    ensure!(tau > 0.0 && tau < 1.0, Invalid, "matching threshold must lie in (0, 1), got {tau}");
    ensure!(
        truths.len() <= defaults.len(),
        Invalid,
        "{} truths exceed {} default boxes",
        truths.len(),
        defaults.len()
    );
    let overlaps: Vec<Vec<f64>> = truths
        .iter()
        .map(|t| defaults.boxes.iter().map(|d| iou(&t.bbox, d)).collect())
        .collect();
    let mut assignment: Vec<Option<usize>> = vec![None; defaults.len()];
    let mut best_default = Vec::with_capacity(truths.len());
    for (t, row) in overlaps.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (d, &v) in row.iter().enumerate() {
            if assignment[d].is_none() && best.is_none_or(|b| v > row[b]) {
                best = Some(d);
            }
        }
        let b = best.expect("more defaults than truths");
        assignment[b] = Some(t);
        best_default.push(b);
    }
    for d in 0..defaults.len() {
        if assignment[d].is_some() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (t, row) in overlaps.iter().enumerate() {
            if best.is_none_or(|(_, v)| row[d] > v) {
                best = Some((t, row[d]));
            }
        }
        if let Some((t, v)) = best {
            if v >= tau {
                assignment[d] = Some(t);
            }
        }
    }
    Ok(MatchResult {
        assignment,
        best_default,
    })
}

pub fn encode_offsets(gt: &BBox, def: &BBox) -> Result<[f64; 4]> {
    ensure!(
        gt.w > 0.0 && gt.h > 0.0 && def.w > 0.0 && def.h > 0.0,
        Invalid,
        "offset encoding needs positive widths and heights"
    );
    Ok([
        (gt.cx - def.cx) / def.w / VARIANCES[0],
        (gt.cy - def.cy) / def.h / VARIANCES[1],
        (gt.w / def.w).ln() / VARIANCES[2],
        (gt.h / def.h).ln() / VARIANCES[3],
    ])
}

pub fn decode_offsets(pred: &[f64; 4], def: &BBox) -> Result<BBox> {
    ensure!(def.w > 0.0 && def.h > 0.0, Invalid, "default box needs positive width and height");
    Ok(BBox::new(
        def.cx + pred[0] * VARIANCES[0] * def.w,
        def.cy + pred[1] * VARIANCES[1] * def.h,
        def.w * (pred[2] * VARIANCES[2]).exp(),
        def.h * (pred[3] * VARIANCES[3]).exp(),
    ))
}
