use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use farsight_nn::layers::{Conv2d, ParamVisitor, Relu, TensorVisitor, TensorVisitorMut};
use farsight_nn::{Adam, Archive, Mode, Module, Sequential, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{load_adam, load_module, meta_field, push_adam, push_module, read_kind};
use crate::dataset_io::{seeded_rng, sub_seed, ImageChip, Scene};
use crate::error::{ensure, Error, Result};

use super::boxes::{build_default_boxes, decode_offsets, match_boxes, DefaultBoxSet};
use super::loss::{build_targets, multibox_loss, MultiboxTargets, BACKGROUND, CLASS_LOGITS};
use super::nms::{nms, Detection, NMS_IOU, NMS_TOP_K};

pub const CANVAS_SIDE: usize = 128;
/// Side lengths of the three prediction maps.
pub const GRIDS: [usize; 3] = [16, 8, 4];
const HEAD_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// IoU needed for a non-forced default-box match.
    pub tau: f64,
    /// Weight of the localization term.
    pub alpha: f64,
    /// Mined negatives per positive.
    pub neg_ratio: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Aspect ratios used on every map; a ratio of 1 adds a second square box.
    pub ratios: Vec<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            tau: 0.5,
            alpha: 1.0,
            neg_ratio: 3.0,
            s_min: 0.2,
            s_max: 0.9,
            ratios: vec![1.0, 2.0, 0.5],
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Invalid, "batch_size must be at least 1");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Invalid,
            "learning_rate must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Invalid,
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.tau > 0.0 && self.tau < 1.0, Invalid, "tau must lie in (0, 1)");
        ensure!(self.alpha >= 0.0 && self.neg_ratio >= 0.0, Invalid, "alpha and neg_ratio must be non-negative");
        self.default_boxes().map(|_| ())
    }

    pub fn default_boxes(&self) -> Result<DefaultBoxSet> {
        let grids: Vec<(usize, Vec<f64>)> = GRIDS.iter().map(|&f| (f, self.ratios.clone())).collect();
        build_default_boxes(&grids, self.s_min, self.s_max)
    }
}

/// Raw per-box predictions for one canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `D x 11`.
    pub logits: Vec<f64>,
    /// `D x 4`.
    pub offsets: Vec<f64>,
}

/// Strided conv backbone with 3x3 class/offset predictors on the 16x16,
/// 8x8 and 4x4 maps.
#[derive(Clone)]
pub struct DetectorNet {
    config: DetectorConfig,
    defaults: DefaultBoxSet,
    backbone: Sequential<f32>,
    stages: [Sequential<f32>; 2],
    heads: [Sequential<f32>; 3],
    pub(crate) iterations: u64,
}

fn conv_relu(seq: Sequential<f32>, name: &str, conv: Conv2d<f32>) -> Sequential<f32> {
    seq.push(name, conv).push(&format!("{name}_relu"), Relu::new())
}

fn he_std(in_ch: usize, k: usize) -> f64 {
    (2.0 / (in_ch * k * k) as f64).sqrt()
}

impl DetectorNet {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let defaults = config.default_boxes()?;
        let mut rng = seeded_rng(sub_seed(config.seed, 0));
        let mut conv = |i, o, s, std| Conv2d::new(i, o, 3, s, 1, true, std, &mut rng);
        let mut backbone = Sequential::new();
        for (n, (i, o, s)) in [(3, 32, 2), (32, 64, 2), (64, 128, 2), (128, 128, 1)].into_iter().enumerate() {
            backbone = conv_relu(backbone, &format!("conv{n}"), conv(i, o, s, he_std(i, 3)));
        }
        let stages = [
            conv_relu(Sequential::new(), "conv", conv(128, 128, 2, he_std(128, 3))),
            conv_relu(Sequential::new(), "conv", conv(128, 128, 2, he_std(128, 3))),
        ];
        let heads = defaults
            .layout
            .iter()
            .map(|l| Sequential::new().push("pred", conv(128, l.boxes_per_cell * (CLASS_LOGITS + 4), 1, HEAD_STD)))
            .collect::<Vec<_>>()
            .try_into()
            .map_err(|_| Error::Invalid("detector expects three maps".into()))?;
        Ok(Self {
            config,
            defaults,
            backbone,
            stages,
            heads,
            iterations: 0,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn defaults(&self) -> &DefaultBoxSet {
        &self.defaults
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    fn check_input(x: &Tensor<f32>) -> Result<()> {
        ensure!(
            x.shape().len() == 4 && x.shape()[1..] == [3, CANVAS_SIDE, CANVAS_SIDE],
            Invalid,
            "detector expects (B, 3, 128, 128) canvases, got {:?}",
            x.shape()
        );
        Ok(())
    }

    /// Head outputs of the three maps, training path.
    fn forward(&mut self, x: Tensor<f32>, mode: Mode) -> Vec<Tensor<f32>> {
        let m0 = self.backbone.forward(x, mode);
        let m1 = self.stages[0].forward(m0.clone(), mode);
        let m2 = self.stages[1].forward(m1.clone(), mode);
        vec![
            self.heads[0].forward(m0, mode),
            self.heads[1].forward(m1, mode),
            self.heads[2].forward(m2, mode),
        ]
    }

    fn backward(&mut self, grads: Vec<Tensor<f32>>) {
        let mut grads = grads.into_iter();
        let (g0, g1, g2) = (grads.next().unwrap(), grads.next().unwrap(), grads.next().unwrap());
        let d2 = self.heads[2].backward(g2, true);
        let mut d1 = self.heads[1].backward(g1, true);
        d1.add_assign(&self.stages[1].backward(d2, true));
        let mut d0 = self.heads[0].backward(g0, true);
        d0.add_assign(&self.stages[0].backward(d1, true));
        self.backbone.backward(d0, true);
    }

    fn infer_heads(&self, x: &Tensor<f32>) -> Vec<Tensor<f32>> {
        let m0 = self.backbone.infer(x);
        let m1 = self.stages[0].infer(&m0);
        let m2 = self.stages[1].infer(&m1);
        vec![self.heads[0].infer(&m0), self.heads[1].infer(&m1), self.heads[2].infer(&m2)]
    }

    /// Rearranges head outputs into per-box predictions for batch item `b`.
    fn gather(&self, heads: &[Tensor<f32>], b: usize) -> Predictions {
        let d = self.defaults.len();
        let mut logits = vec![0.0; d * CLASS_LOGITS];
        let mut offsets = vec![0.0; d * 4];
        for (l, out) in self.defaults.layout.iter().zip(heads) {
            let (f, nb) = (l.grid, l.boxes_per_cell);
            let plane = f * f;
            let item = out.item(b);
            for cell in 0..plane {
                for r in 0..nb {
                    let idx = l.offset + cell * nb + r;
                    for c in 0..CLASS_LOGITS {
                        logits[idx * CLASS_LOGITS + c] = item[(r * CLASS_LOGITS + c) * plane + cell] as f64;
                    }
                    for q in 0..4 {
                        offsets[idx * 4 + q] = item[(nb * CLASS_LOGITS + r * 4 + q) * plane + cell] as f64;
                    }
                }
            }
        }
        Predictions { logits, offsets }
    }

    /// Inverse of `gather` for gradients.
    fn scatter(&self, heads: &mut [Tensor<f32>], b: usize, logits: &[f64], offsets: &[f64], scale: f64) {
        for (l, out) in self.defaults.layout.iter().zip(heads.iter_mut()) {
            let (f, nb) = (l.grid, l.boxes_per_cell);
            let plane = f * f;
            let item = out.item_mut(b);
            for cell in 0..plane {
                for r in 0..nb {
                    let idx = l.offset + cell * nb + r;
                    for c in 0..CLASS_LOGITS {
                        item[(r * CLASS_LOGITS + c) * plane + cell] = (logits[idx * CLASS_LOGITS + c] * scale) as f32;
                    }
                    for q in 0..4 {
                        item[(nb * CLASS_LOGITS + r * 4 + q) * plane + cell] = (offsets[idx * 4 + q] * scale) as f32;
                    }
                }
            }
        }
    }

    /// Inference-mode per-box predictions.
    pub fn predict(&self, canvas: &ImageChip) -> Result<Predictions> {
        let x = canvas.to_tensor();
        Self::check_input(&x)?;
        Ok(self.gather(&self.infer_heads(&x), 0))
    }

    pub fn to_archive(&self, opt: Option<&Adam<f32>>) -> Archive {
        let meta = json!({
            "config": self.config,
            "iterations": self.iterations,
            "opt_step": opt.map(|o| o.step),
        });
        let mut a = Archive::new("detector", meta);
        push_module(&mut a, "net.", self);
        if let Some(o) = opt {
            push_adam(&mut a, "opt.", o);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<(Self, Option<Adam<f32>>)> {
        let config: DetectorConfig = meta_field(&a.meta, "config")?;
        let mut net = Self::new(config.clone())?;
        load_module(a, "net.", &mut net)?;
        net.iterations = meta_field(&a.meta, "iterations")?;
        let step: Option<u64> = meta_field(&a.meta, "opt_step")?;
        let opt = step.map(|s| {
            let mut o = load_adam(a, "opt.", s);
            o.lr = config.learning_rate;
            o.beta1 = config.beta1;
            o.beta2 = config.beta2;
            o
        });
        Ok((net, opt))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive(None).write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_archive(&read_kind(path, "detector")?)?.0)
    }
}

impl Module<f32> for DetectorNet {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, f32>) {
        self.backbone.visit_params(&mut |n, p| f(&format!("backbone.{n}"), p));
        for (k, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&mut |n, p| f(&format!("stage{}.{n}", k + 1), p));
        }
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.visit_params(&mut |n, p| f(&format!("head{k}.{n}"), p));
        }
    }

    fn visit_state(&self, f: &mut TensorVisitor<'_, f32>) {
        self.backbone.visit_state(&mut |n, t| f(&format!("backbone.{n}"), t));
        for (k, s) in self.stages.iter().enumerate() {
            s.visit_state(&mut |n, t| f(&format!("stage{}.{n}", k + 1), t));
        }
        for (k, h) in self.heads.iter().enumerate() {
            h.visit_state(&mut |n, t| f(&format!("head{k}.{n}"), t));
        }
    }

    fn visit_state_mut(&mut self, f: &mut TensorVisitorMut<'_, f32>) {
        self.backbone.visit_state_mut(&mut |n, t| f(&format!("backbone.{n}"), t));
        for (k, s) in self.stages.iter_mut().enumerate() {
            s.visit_state_mut(&mut |n, t| f(&format!("stage{}.{n}", k + 1), t));
        }
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.visit_state_mut(&mut |n, t| f(&format!("head{k}.{n}"), t));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorLogRow {
    pub iteration: u64,
    pub epoch: usize,
    pub loss: f64,
    pub conf: f64,
    pub loc: f64,
    pub wall_ms: u64,
}

pub fn write_detector_log(path: &Path, rows: &[DetectorLogRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "iteration,epoch,loss,conf,loc,wall_ms").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.iteration, r.epoch, r.loss, r.conf, r.loc, r.wall_ms).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub struct DetectorTrainOutput {
    pub net: DetectorNet,
    pub optimizer: Adam<f32>,
    pub log: Vec<DetectorLogRow>,
}

/// Matches every scene's truths to the default boxes.
pub fn scene_targets(scenes: &[Scene], cfg: &DetectorConfig) -> Result<Vec<MultiboxTargets>> {
    let defaults = cfg.default_boxes()?;
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            ensure!(!s.truths.is_empty(), Data, "scene {i} has no ground-truth objects");
            ensure!(
                s.canvas.shape() == (3, CANVAS_SIDE, CANVAS_SIDE),
                Data,
                "scene {i} canvas is {:?}, expected 3x128x128",
                s.canvas.shape()
            );
            let m = match_boxes(&s.truths, &defaults, cfg.tau)?;
            build_targets(&s.truths, &defaults, &m)
        })
        .collect()
}

/// Adam on the batch-mean multibox loss over seeded shuffles of `scenes`.
/// The last batch of an epoch may be partial.
pub fn train_detector(scenes: &[Scene], cfg: &DetectorConfig) -> Result<DetectorTrainOutput> {
    ensure!(!scenes.is_empty(), Data, "detector training needs at least one scene");
    let targets = scene_targets(scenes, cfg)?;
    let mut net = DetectorNet::new(cfg.clone())?;
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut rng = seeded_rng(sub_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut log = Vec::new();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let chips: Vec<&ImageChip> = batch.iter().map(|&i| &scenes[i].canvas).collect();
            net.zero_grad();
            let heads = net.forward(ImageChip::batch(&chips), Mode::Train);
            let mut grads: Vec<Tensor<f32>> = heads.iter().map(|h| Tensor::zeros(h.shape())).collect();
            let scale = 1.0 / batch.len() as f64;
            let (mut loss, mut conf, mut loc) = (0.0, 0.0, 0.0);
            for (b, &si) in batch.iter().enumerate() {
                let p = net.gather(&heads, b);
                let (l, g) = multibox_loss(&p.logits, &p.offsets, &targets[si], cfg.alpha, cfg.neg_ratio)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => {
                            Error::NonFinite(format!("detector iteration {} (scene {si}): {m}", net.iterations + 1))
                        }
                        other => other,
                    })?;
                net.scatter(&mut grads, b, &g.logits, &g.offsets, scale);
                loss += l.total * scale;
                conf += l.conf / l.positives as f64 * scale;
                loc += l.loc / l.positives as f64 * scale;
            }
            net.backward(grads);
            opt.update(&mut net);
            net.iterations += 1;
            log.push(DetectorLogRow {
                iteration: net.iterations,
                epoch,
                loss,
                conf,
                loc,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
    }
    Ok(DetectorTrainOutput {
        net,
        optimizer: opt,
        log,
    })
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Decodes every non-background box with confidence at least `conf_thr`,
/// clips it to the canvas, and applies NMS.
pub fn detections_from(net: &DetectorNet, p: &Predictions, conf_thr: f64) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (i, row) in p.logits.chunks(CLASS_LOGITS).enumerate() {
        let probs = softmax(row);
        let mut c = 0;
        for k in 1..CLASS_LOGITS {
            if probs[k] > probs[c] {
                c = k;
            }
        }
        if c == BACKGROUND || probs[c] < conf_thr {
            continue;
        }
        let off = [p.offsets[i * 4], p.offsets[i * 4 + 1], p.offsets[i * 4 + 2], p.offsets[i * 4 + 3]];
        let bbox = decode_offsets(&off, &net.defaults.boxes[i])?.clipped();
        if bbox.is_finite() && bbox.w > 0.0 && bbox.h > 0.0 {
            dets.push(Detection {
                bbox,
                class_id: c as u8,
                confidence: probs[c],
            });
        }
    }
    Ok(nms(&dets, NMS_IOU, NMS_TOP_K))
}

pub fn detect(net: &DetectorNet, canvas: &ImageChip, conf_thr: f64) -> Result<Vec<Detection>> {
    detections_from(net, &net.predict(canvas)?, conf_thr)
}

/// `detect` over many canvases in parallel; each canvas is evaluated alone.
pub fn detect_batch(net: &DetectorNet, canvases: &[&ImageChip], conf_thr: f64) -> Result<Vec<Vec<Detection>>> {
    canvases.par_iter().map(|c| detect(net, c, conf_thr)).collect()
}

#[derive(Serialize)]
struct DetectionLine<'a> {
    scene_id: usize,
    #[serde(flatten)]
    det: &'a Detection,
}

/// One JSON object per detection: scene_id, cx, cy, w, h, class_id, confidence.
pub fn write_detections_jsonl(path: &Path, per_scene: &[(usize, Vec<Detection>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (scene_id, dets) in per_scene {
        for det in dets {
            let line = serde_json::to_string(&DetectionLine {
                scene_id: *scene_id,
                det,
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
