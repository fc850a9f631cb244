use crate::dataset_io::GtBox;
use crate::error::{ensure, Result};

use super::boxes::{encode_offsets, DefaultBoxSet, MatchResult};

pub const NUM_CLASSES: usize = 10;
/// Index of the background logit.
pub const BACKGROUND: usize = NUM_CLASSES;
/// Logits per default box.
pub const CLASS_LOGITS: usize = NUM_CLASSES + 1;

/// Per-default training targets derived from a match.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiboxTargets {
    /// Class index per default box, `BACKGROUND` when unmatched.
    pub classes: Vec<usize>,
    /// Encoded offsets; zero for background boxes.
    pub offsets: Vec<[f64; 4]>,
}

impl MultiboxTargets {
    pub fn positives(&self) -> usize {
        self.classes.iter().filter(|&&c| c != BACKGROUND).count()
    }
}

pub fn build_targets(truths: &[GtBox], defaults: &DefaultBoxSet, m: &MatchResult) -> Result<MultiboxTargets> {
    ensure!(
        m.assignment.len() == defaults.len(),
        Invalid,
        "match covers {} boxes, default set has {}",
        m.assignment.len(),
        defaults.len()
    );
    let mut classes = vec![BACKGROUND; defaults.len()];
    let mut offsets = vec![[0.0; 4]; defaults.len()];
    for (d, a) in m.assignment.iter().enumerate() {
        if let Some(t) = *a {
            let truth = truths
                .get(t)
                .ok_or_else(|| crate::Error::Invalid(format!("match refers to missing truth {t}")))?;
            classes[d] = truth.class_id as usize;
            offsets[d] = encode_offsets(&truth.bbox, &defaults.boxes[d])?;
        }
    }
    Ok(MultiboxTargets { classes, offsets })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiboxLoss {
    /// `(conf + alpha * loc) / N`.
    pub total: f64,
    /// Summed cross-entropy over positives and mined negatives.
    pub conf: f64,
    /// Summed smooth-L1 over positive offsets.
    pub loc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Gradients of `MultiboxLoss::total`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiboxGrads {
    pub logits: Vec<f64>,
    pub offsets: Vec<f64>,
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Multibox loss over one canvas.
///
/// `logits` is `D x 11`, `offsets` is `D x 4`, both row-major in default-box
/// order. Negatives are the `floor(neg_ratio * N)` background boxes with the
/// largest background cross-entropy (lower index first on ties).
pub fn multibox_loss(
    logits: &[f64],
    offsets: &[f64],
    targets: &MultiboxTargets,
    alpha: f64,
    neg_ratio: f64,
) -> Result<(MultiboxLoss, MultiboxGrads)> {
    let d = targets.classes.len();
    ensure!(
        logits.len() == d * CLASS_LOGITS && offsets.len() == d * 4,
        Invalid,
        "prediction sizes {}/{} do not fit {d} default boxes",
        logits.len(),
        offsets.len()
    );
    ensure!(alpha >= 0.0 && neg_ratio >= 0.0, Invalid, "alpha and neg_ratio must be non-negative");
    let n = targets.positives();
    ensure!(n > 0, Invalid, "multibox loss needs at least one matched default box");

    let log_p: Vec<Vec<f64>> = logits.chunks(CLASS_LOGITS).map(log_softmax).collect();
    let mut negatives: Vec<usize> = (0..d).filter(|&i| targets.classes[i] == BACKGROUND).collect();
    // stable sort keeps lower indices first among equal losses
    negatives.sort_by(|&a, &b| log_p[a][BACKGROUND].total_cmp(&log_p[b][BACKGROUND]));
    let keep = ((neg_ratio * n as f64).floor() as usize).min(negatives.len());
    negatives.truncate(keep);

    let inv_n = 1.0 / n as f64;
    let mut g_logits = vec![0.0; logits.len()];
    let mut g_offsets = vec![0.0; offsets.len()];
    let mut conf = 0.0;
    let mut loc = 0.0;
    let selected = (0..d).filter(|&i| targets.classes[i] != BACKGROUND).chain(negatives.iter().copied());
    for i in selected {
        let c = targets.classes[i];
        conf -= log_p[i][c];
        for (k, lp) in log_p[i].iter().enumerate() {
            let onehot = if k == c { 1.0 } else { 0.0 };
            g_logits[i * CLASS_LOGITS + k] = (lp.exp() - onehot) * inv_n;
        }
        if c != BACKGROUND {
            for q in 0..4 {
                let (v, dv) = smooth_l1(offsets[i * 4 + q] - targets.offsets[i][q]);
                loc += v;
                g_offsets[i * 4 + q] = alpha * dv * inv_n;
            }
        }
    }
    let total = (conf + alpha * loc) * inv_n;
    ensure!(total.is_finite(), NonFinite, "multibox loss is {total}");
    Ok((
        MultiboxLoss {
            total,
            conf,
            loc,
            positives: n,
            negatives: keep,
        },
        MultiboxGrads {
            logits: g_logits,
            offsets: g_offsets,
        },
    ))
}
