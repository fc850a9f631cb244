//! Detection-rate scoring and the detector-only vs cascade comparison.

mod report;

pub use report::{emit_report, write_rate_plot, ReportFiles};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{run_baseline, run_cascade, CascadeConfig};
use crate::dataset_io::{sub_seed, GtBox, Scene};
use crate::error::{ensure, Error, Result};
use crate::features::LinearClassifier;
use crate::gan::{Discriminator, Generator};
use crate::geometry::iou;
use crate::ssd::{Detection, DetectorNet};

/// Published detection rates of the original pipeline, reported for
/// context only.
pub const PUBLISHED_SSD_ONLY: f64 = 0.355;
pub const PUBLISHED_CASCADE: f64 = 0.807;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thr: f64,
    pub require_class: bool,
    /// Detections below this confidence are ignored.
    pub conf_thr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thr: 0.5,
            require_class: true,
            conf_thr: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.iou_thr > 0.0 && self.iou_thr < 1.0,
            Invalid,
            "iou_thr must lie in (0, 1), got {}",
            self.iou_thr
        );
        ensure!((0.0..=1.0).contains(&self.conf_thr), Invalid, "conf_thr must lie in [0, 1]");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub detection: usize,
    pub truth: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub rate: f64,
    pub matched: usize,
    pub truths: usize,
    /// Detections at or above the confidence threshold.
    pub detections: usize,
    pub pairs: Vec<MatchPair>,
    /// Set when the rate is a convention rather than a measurement.
    pub warning: Option<String>,
}

impl RateResult {
    /// Matched detections over counted detections; 1.0 with none.
    pub fn precision(&self) -> f64 {
        if self.detections == 0 {
            1.0
        } else {
            self.pairs.len() as f64 / self.detections as f64
        }
    }
}

/// Greedy matching in descending confidence (lower index first on ties).
/// Each detection takes the unmatched eligible truth with the highest IoU
/// (lower index first on ties) if that IoU reaches `iou_thr`; with
/// `require_class` only truths of the detection's class are eligible.
pub fn detection_rate(dets: &[Detection], truths: &[GtBox], cfg: &EvalConfig) -> RateResult {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].confidence >= cfg.conf_thr).collect();
    let counted = order.len();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if taken[t] || (cfg.require_class && truth.class_id != d.class_id) {
                continue;
            }
            let v = iou(&d.bbox, &truth.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        if let Some((t, v)) = best {
            if v >= cfg.iou_thr {
                taken[t] = true;
                pairs.push(MatchPair {
                    detection: i,
                    truth: t,
                    iou: v,
                });
            }
        }
    }
    let (rate, warning) = if truths.is_empty() {
        (1.0, Some("no ground-truth objects; rate defined as 1.0".to_string()))
    } else {
        (pairs.len() as f64 / truths.len() as f64, None)
    };
    RateResult {
        rate,
        matched: pairs.len(),
        truths: truths.len(),
        detections: counted,
        pairs,
        warning,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub id: usize,
    pub baseline_rate: f64,
    pub cascade_rate: f64,
    pub truths: usize,
    pub degradation_level: Option<f64>,
    pub baseline_matched: usize,
    pub cascade_matched: usize,
    pub baseline_detections: usize,
    pub cascade_detections: usize,
    pub candidates: usize,
    pub promoted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub baseline: f64,
    pub cascade: f64,
    pub baseline_precision: f64,
    pub cascade_precision: f64,
    pub truths: usize,
    pub baseline_matched: usize,
    pub cascade_matched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: f64,
    pub scenes: usize,
    pub truths: usize,
    pub baseline: f64,
    pub cascade: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub cascade: CascadeConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    /// Scene `i` enhances its candidates with seeds derived from
    /// `sub_seed(projection, i)`.
    pub projection: u64,
    pub scene_projection_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub ssd_only: f64,
    pub dcgan_ssd: f64,
}

impl Default for PublishedReference {
    fn default() -> Self {
        Self {
            ssd_only: PUBLISHED_SSD_ONLY,
            dcgan_ssd: PUBLISHED_CASCADE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config: ComparisonConfig,
    pub seeds: SeedManifest,
    pub scenes: Vec<SceneRow>,
    pub aggregate: Aggregate,
    pub by_degradation: Vec<LevelRow>,
    #[serde(rename = "paper_reference")]
    pub published_reference: PublishedReference,
    pub warnings: Vec<String>,
}

/// The nets shared by both arms.
pub struct Pipeline<'a> {
    pub generator: &'a Generator,
    pub discriminator: &'a Discriminator,
    pub classifier: &'a LinearClassifier,
    pub detector: &'a DetectorNet,
}

fn micro(matched: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        matched as f64 / total as f64
    }
}

/// Runs the detector alone and the cascade on every scene and aggregates
/// micro-averaged detection rates overall and per degradation level.
pub fn run_comparison(
    scenes: &[Scene],
    nets: &Pipeline<'_>,
    cascade_cfg: &CascadeConfig,
    eval_cfg: &EvalConfig,
) -> Result<ComparisonReport> {
    ensure!(!scenes.is_empty(), Invalid, "comparison needs at least one scene");
    cascade_cfg.validate()?;
    eval_cfg.validate()?;
    let seeds: Vec<u64> = (0..scenes.len())
        .map(|i| sub_seed(cascade_cfg.projection.seed, i as u64))
        .collect();
    let evaluated: Vec<(SceneRow, RateResult, RateResult, Vec<String>)> = scenes
        .par_iter()
        .enumerate()
        .map(|(id, scene)| {
            let tag = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("scene {id}: {m}")),
                Error::Invalid(m) => Error::Invalid(format!("scene {id}: {m}")),
                Error::Data(m) => Error::Data(format!("scene {id}: {m}")),
                other => other,
            };
            let baseline = run_baseline(nets.detector, &scene.canvas, eval_cfg.conf_thr).map_err(tag)?;
            let cfg = CascadeConfig {
                projection: crate::enhancer::ProjectionConfig {
                    seed: seeds[id],
                    ..cascade_cfg.projection.clone()
                },
                ..cascade_cfg.clone()
            };
            let trace = run_cascade(
                nets.generator,
                nets.discriminator,
                nets.classifier,
                nets.detector,
                &scene.canvas,
                &cfg,
            )
            .map_err(tag)?;
            let b = detection_rate(&baseline, &scene.truths, eval_cfg);
            let c = detection_rate(&trace.final_detections, &scene.truths, eval_cfg);
            let warnings = b.warning.iter().map(|w| format!("scene {id}: {w}")).collect();
            let row = SceneRow {
                id,
                baseline_rate: b.rate,
                cascade_rate: c.rate,
                truths: scene.truths.len(),
                degradation_level: scene.degradation_level(),
                baseline_matched: b.matched,
                cascade_matched: c.matched,
                baseline_detections: b.detections,
                cascade_detections: c.detections,
                candidates: trace.candidates.len(),
                promoted: trace.promoted().count(),
            };
            Ok((row, b, c, warnings))
        })
        .collect::<Result<_>>()?;

    let truths: usize = evaluated.iter().map(|e| e.0.truths).sum();
    let b_matched: usize = evaluated.iter().map(|e| e.0.baseline_matched).sum();
    let c_matched: usize = evaluated.iter().map(|e| e.0.cascade_matched).sum();
    let b_dets: usize = evaluated.iter().map(|e| e.1.detections).sum();
    let c_dets: usize = evaluated.iter().map(|e| e.2.detections).sum();
    let aggregate = Aggregate {
        baseline: micro(b_matched, truths),
        cascade: micro(c_matched, truths),
        baseline_precision: if b_dets == 0 { 1.0 } else { b_matched as f64 / b_dets as f64 },
        cascade_precision: if c_dets == 0 { 1.0 } else { c_matched as f64 / c_dets as f64 },
        truths,
        baseline_matched: b_matched,
        cascade_matched: c_matched,
    };

    let mut levels: Vec<f64> = evaluated.iter().filter_map(|e| e.0.degradation_level).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let by_degradation = levels
        .into_iter()
        .map(|level| {
            let rows: Vec<&SceneRow> = evaluated
                .iter()
                .map(|e| &e.0)
                .filter(|r| r.degradation_level == Some(level))
                .collect();
            let t: usize = rows.iter().map(|r| r.truths).sum();
            LevelRow {
                level,
                scenes: rows.len(),
                truths: t,
                baseline: micro(rows.iter().map(|r| r.baseline_matched).sum(), t),
                cascade: micro(rows.iter().map(|r| r.cascade_matched).sum(), t),
            }
        })
        .collect();

    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(evaluated.len());
    for (row, _, _, w) in evaluated {
        warnings.extend(w);
        rows.push(row);
    }
    Ok(ComparisonReport {
        config: ComparisonConfig {
            cascade: cascade_cfg.clone(),
            eval: eval_cfg.clone(),
        },
        seeds: SeedManifest {
            projection: cascade_cfg.projection.seed,
            scene_projection_seeds: seeds,
        },
        scenes: rows,
        aggregate,
        by_degradation,
        published_reference: PublishedReference::default(),
        warnings,
    })
}
