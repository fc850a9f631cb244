use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};

pub const NMS_IOU: f64 = 0.45;
pub const NMS_TOP_K: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: u8,
    pub confidence: f64,
}

/// Indices sorted by confidence descending, lower index first on ties.
pub(crate) fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy per-class suppression: a detection survives unless a kept box of
/// its class overlaps it with IoU above `iou_thr`. At most `top_k` survive.
pub fn nms(dets: &[Detection], iou_thr: f64, top_k: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in confidence_order(dets) {
        if kept.len() >= top_k {
            break;
        }
        let d = &dets[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_thr)
        {
            kept.push(*d);
        }
    }
    kept
}
