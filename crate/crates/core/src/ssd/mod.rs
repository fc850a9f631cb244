//! Single-shot detector over 128x128 canvases: default boxes, matching,
//! offset coding, multibox loss, NMS, and the conv network.

mod boxes;
mod loss;
mod net;
mod nms;

pub use boxes::{
    build_default_boxes, decode_offsets, encode_offsets, map_scales, match_boxes, DefaultBoxSet, MapLayout,
    MatchResult, VARIANCES,
};
pub use loss::{
    build_targets, multibox_loss, MultiboxGrads, MultiboxLoss, MultiboxTargets, BACKGROUND, CLASS_LOGITS,
    NUM_CLASSES,
};
pub use net::{
    detect, detect_batch, detections_from, scene_targets, train_detector, write_detections_jsonl,
    write_detector_log, DetectorConfig, DetectorLogRow, DetectorNet, DetectorTrainOutput, Predictions,
    CANVAS_SIDE, GRIDS,
};
pub use nms::{nms, Detection, NMS_IOU, NMS_TOP_K};
