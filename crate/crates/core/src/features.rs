//! Discriminator feature probe: 4x4 grid max-pools of the three
//! discriminator blocks, and an L2-penalized multinomial logistic regression
//! fitted on standardized features.

use std::path::Path;

use farsight_nn::{Archive, Float, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{meta_field, read_kind};
use crate::dataset_io::{seeded_rng, ImageChip};
use crate::error::{ensure, Error, Result};
use crate::gan::{pooled_features, Discriminator, CHIP_SIDE};

/// Width of the probe for the full-size discriminator.
pub const FEATURE_DIM: usize = 28672;
/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-6;
const EXTRACT_BATCH: usize = 64;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        ensure!(!values.is_empty(), Invalid, "empty feature vector");
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }
}

fn check_chip(chip: &ImageChip) -> Result<()> {
    ensure!(
        chip.shape() == (3, CHIP_SIDE, CHIP_SIDE),
        Invalid,
        "feature extraction needs a 3x32x32 chip, got {:?}",
        chip.shape()
    );
    Ok(())
}

pub fn extract_features(d: &Discriminator, chip: &ImageChip) -> Result<FeatureVector> {
    Ok(extract_features_batch(d, std::slice::from_ref(chip))?.remove(0))
}

/// Probe vectors for many chips, computed in parallel batches. The result
/// does not depend on the batch split since inference uses running statistics.
pub fn extract_features_batch(d: &Discriminator, chips: &[ImageChip]) -> Result<Vec<FeatureVector>> {
    for c in chips {
        check_chip(c)?;
    }
    let blocks: Vec<Vec<FeatureVector>> = chips
        .par_chunks(EXTRACT_BATCH)
        .map(|chunk| {
            let refs: Vec<&ImageChip> = chunk.iter().collect();
            let pooled = pooled_features(&d.infer_activations(&ImageChip::batch(&refs)));
            (0..chunk.len()).map(|i| FeatureVector(pooled.item(i).to_vec())).collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

/// Outcome of the gradient-descent fit.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// Objective after every accepted iteration, starting at the initial point.
    pub objective_trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LinearFitConfig {
    pub l2_lambda: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub space: FitSpace,
}

/// Coordinates for the descent. `Dual` keeps the weights in the span of the
/// training rows and works through the Gram matrix, which is cheaper when
/// there are fewer examples than feature dimensions.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum FitSpace {
    #[default]
    Auto,
    Primal,
    Dual,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-2,
            tolerance: 1e-4,
            max_iterations: 5000,
            seed: 0,
            space: FitSpace::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    classes: usize,
    dim: usize,
    /// Row-major `classes x dim`.
    weights: Vec<f32>,
    bias: Vec<f32>,
    l2_lambda: f64,
    mean: Vec<f32>,
    std: Vec<f32>,
    pub fit: FitReport,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value, ties to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn l2_lambda(&self) -> f64 {
        self.l2_lambda
    }

    /// Per-dimension training mean and floored standard deviation.
    pub fn scaler(&self) -> (&[f32], &[f32]) {
        (&self.mean, &self.std)
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|&w| (w as f64).powi(2)).sum::<f64>().sqrt()
    }

    fn standardize_into(&self, x: &[f32], out: &mut [f32]) {
        for ((o, &v), (&m, &s)) in out.iter_mut().zip(x).zip(self.mean.iter().zip(&self.std)) {
            *o = (v - m) / s;
        }
    }

    pub fn logits(&self, f: &FeatureVector) -> Result<Vec<f64>> {
        ensure!(
            f.len() == self.dim,
            Invalid,
            "feature dimension {} does not match classifier dimension {}",
            f.len(),
            self.dim
        );
        let mut x = vec![0f32; self.dim];
        self.standardize_into(f.values(), &mut x);
        Ok((0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                let dot: f64 = row.iter().zip(&x).map(|(&w, &v)| w as f64 * v as f64).sum();
                dot + self.bias[c] as f64
            })
            .collect())
    }

    pub fn predict_proba(&self, f: &FeatureVector) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(f)?))
    }

    /// Argmax class and its softmax probability.
    pub fn predict(&self, f: &FeatureVector) -> Result<(u8, f64)> {
        let p = self.predict_proba(f)?;
        let c = argmax(&p);
        Ok((c as u8, p[c]))
    }

    /// Penalized objective of this classifier on a labelled set.
    pub fn objective(&self, features: &[FeatureVector], labels: &[u8]) -> Result<f64> {
        ensure!(features.len() == labels.len() && !features.is_empty(), Invalid, "need equal, non-empty inputs");
        let mut ce = 0.0;
        for (f, &y) in features.iter().zip(labels) {
            let z = self.logits(f)?;
            ensure!((y as usize) < self.classes, Invalid, "label {y} out of range");
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            ce += lse - z[y as usize];
        }
        Ok(ce / features.len() as f64 + self.l2_lambda * self.weight_norm().powi(2))
    }

    pub fn to_archive(&self) -> Archive {
        let meta = json!({
            "classes": self.classes,
            "dim": self.dim,
            "l2_lambda": self.l2_lambda,
            "fit": self.fit,
        });
        let mut a = Archive::new("classifier", meta);
        a.push("weights", Tensor::from_vec(&[self.classes, self.dim], self.weights.clone()));
        a.push("bias", Tensor::from_vec(&[self.classes], self.bias.clone()));
        a.push("scaler.mean", Tensor::from_vec(&[self.dim], self.mean.clone()));
        a.push("scaler.std", Tensor::from_vec(&[self.dim], self.std.clone()));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let classes: usize = meta_field(&a.meta, "classes")?;
        let dim: usize = meta_field(&a.meta, "dim")?;
        let tensor = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = a
                .get(name)
                .ok_or_else(|| Error::Data(format!("classifier checkpoint lacks `{name}`")))?;
            ensure!(t.shape() == shape, Data, "`{name}` has shape {:?}, expected {shape:?}", t.shape());
            Ok(t.data().to_vec())
        };
        let clf = Self {
            classes,
            dim,
            weights: tensor("weights", &[classes, dim])?,
            bias: tensor("bias", &[classes])?,
            l2_lambda: meta_field(&a.meta, "l2_lambda")?,
            mean: tensor("scaler.mean", &[dim])?,
            std: tensor("scaler.std", &[dim])?,
            fit: meta_field(&a.meta, "fit")?,
        };
        ensure!(
            clf.std.iter().all(|&s| s as f64 >= STD_FLOOR * (1.0 - 1e-6)),
            Data,
            "classifier scaler has non-positive deviations"
        );
        ensure!(
            clf.weights.iter().chain(&clf.bias).all(|w| w.is_finite()),
            Data,
            "classifier weights are not finite"
        );
        Ok(clf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&read_kind(path, "classifier")?)
    }
}

/// Standardized design matrix plus labels, row-major `n x d`.
struct Problem {
    x: Vec<f32>,
    labels: Vec<usize>,
    n: usize,
    d: usize,
    k: usize,
}

impl Problem {
    /// Mean cross-entropy of `n x k` logits.
    fn cross_entropy(&self, logits: &[f64]) -> f64 {
        let mut total = 0.0;
        for (row, &y) in logits.chunks(self.k).zip(&self.labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        total / self.n as f64
    }

    /// `(softmax - onehot) / n`, `n x k`.
    fn residual(&self, logits: &[f64]) -> Vec<f64> {
        let inv_n = 1.0 / self.n as f64;
        let mut r = Vec::with_capacity(logits.len());
        for (row, &y) in logits.chunks(self.k).zip(&self.labels) {
            for (c, p) in softmax(row).into_iter().enumerate() {
                r.push((p - if c == y { 1.0 } else { 0.0 }) * inv_n);
            }
        }
        r
    }

    /// `X W^T` for row-major `k x d` weights.
    fn project(&self, w: &[f64]) -> Vec<f64> {
        let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let mut out = vec![0f32; self.n * self.k];
        f32::gemm(
            self.n, self.d, self.k, 1.0, &self.x, self.d as isize, 1, &w32, 1, self.d as isize, 0.0, &mut out,
            self.k as isize, 1,
        );
        out.into_iter().map(f64::from).collect()
    }

    /// `A^T X` for an `n x k` matrix `A`, giving `k x d`.
    fn back_project(&self, a: &[f64]) -> Vec<f64> {
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let mut out = vec![0f32; self.k * self.d];
        f32::gemm(
            self.k, self.n, self.d, 1.0, &a32, 1, self.k as isize, &self.x, self.d as isize, 1, 0.0, &mut out,
            self.d as isize, 1,
        );
        out.into_iter().map(f64::from).collect()
    }
}

/// Coordinates the descent runs in. Both describe the same weight matrix
/// `W`; the gradient step on `W` maps to a step on the coordinates.
trait Space {
    /// Logits without bias for coordinates `theta`, `n x k`.
    fn scores(&self, p: &Problem, theta: &[f64]) -> Vec<f64>;
    /// Gradient in coordinates from the residual.
    fn gradient(&self, p: &Problem, resid: &[f64], theta: &[f64], lambda: f64) -> Vec<f64>;
    /// `<W(a), W(b)>` given `scores(b)`.
    fn inner(&self, a: &[f64], b: &[f64], b_scores: &[f64]) -> f64;
    fn weights(&self, p: &Problem, theta: &[f64]) -> Vec<f64>;
}

/// `theta = W`, `k x d`.
struct Primal;

impl Space for Primal {
    fn scores(&self, p: &Problem, theta: &[f64]) -> Vec<f64> {
        p.project(theta)
    }

    fn gradient(&self, p: &Problem, resid: &[f64], theta: &[f64], lambda: f64) -> Vec<f64> {
        let mut g = p.back_project(resid);
        for (gv, &w) in g.iter_mut().zip(theta) {
            *gv += 2.0 * lambda * w;
        }
        g
    }

    fn inner(&self, a: &[f64], b: &[f64], _b_scores: &[f64]) -> f64 {
        dot(a, b)
    }

    fn weights(&self, _p: &Problem, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }
}

/// `W = A^T X` with `theta = A`, `n x k`; every gradient of the penalized
/// objective stays in the row span of `X`, so iterates started there never
/// leave it. Products go through the Gram matrix `K = X X^T`.
struct Dual {
    gram: Vec<f32>,
}

impl Dual {
    fn new(p: &Problem) -> Self {
        let mut gram = vec![0f32; p.n * p.n];
        f32::gemm(
            p.n, p.d, p.n, 1.0, &p.x, p.d as isize, 1, &p.x, 1, p.d as isize, 0.0, &mut gram, p.n as isize, 1,
        );
        Self { gram }
    }
}

impl Space for Dual {
    fn scores(&self, p: &Problem, theta: &[f64]) -> Vec<f64> {
        let a32: Vec<f32> = theta.iter().map(|&v| v as f32).collect();
        let mut out = vec![0f32; p.n * p.k];
        f32::gemm(
            p.n, p.n, p.k, 1.0, &self.gram, p.n as isize, 1, &a32, p.k as isize, 1, 0.0, &mut out, p.k as isize, 1,
        );
        out.into_iter().map(f64::from).collect()
    }

    fn gradient(&self, _p: &Problem, resid: &[f64], theta: &[f64], lambda: f64) -> Vec<f64> {
        resid.iter().zip(theta).map(|(r, a)| r + 2.0 * lambda * a).collect()
    }

    fn inner(&self, a: &[f64], _b: &[f64], b_scores: &[f64]) -> f64 {
        dot(a, b_scores)
    }

    fn weights(&self, p: &Problem, theta: &[f64]) -> Vec<f64> {
        p.back_project(theta)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Descent {
    weights: Vec<f64>,
    bias: Vec<f64>,
    report: FitReport,
}

/// Gradient descent with Barzilai-Borwein step lengths and Armijo
/// backtracking, so the objective never increases between iterations.
fn descend(p: &Problem, space: &dyn Space, theta0: Vec<f64>, cfg: &LinearFitConfig) -> Result<Descent> {
    let lambda = cfg.l2_lambda;
    let with_bias = |s: &[f64], b: &[f64]| -> Vec<f64> {
        s.chunks(p.k).flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb)).collect()
    };
    let mut theta = theta0;
    let mut b = vec![0f64; p.k];
    let mut s_theta = space.scores(p, &theta);
    let logits = with_bias(&s_theta, &b);
    let mut obj = p.cross_entropy(&logits) + lambda * space.inner(&theta, &theta, &s_theta);
    let mut resid = p.residual(&logits);
    let mut g = space.gradient(p, &resid, &theta, lambda);
    let mut gb = column_sums(&resid, p.k);
    let mut trace = vec![obj];
    let mut alpha = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm;

    loop {
        let s_g = space.scores(p, &g);
        let g2 = space.inner(&g, &g, &s_g) + dot(&gb, &gb);
        grad_norm = g2.max(0.0).sqrt();
        ensure!(obj.is_finite() && grad_norm.is_finite(), NonFinite, "probe objective became {obj}");
        if grad_norm <= cfg.tolerance {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iterations {
            break;
        }
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let t_theta: Vec<f64> = theta.iter().zip(&g).map(|(v, gv)| v - alpha * gv).collect();
            let t_scores: Vec<f64> = s_theta.iter().zip(&s_g).map(|(v, gv)| v - alpha * gv).collect();
            let t_b: Vec<f64> = b.iter().zip(&gb).map(|(v, gv)| v - alpha * gv).collect();
            let t_logits = with_bias(&t_scores, &t_b);
            let t_obj = p.cross_entropy(&t_logits) + lambda * space.inner(&t_theta, &t_theta, &t_scores);
            if t_obj.is_finite() && t_obj <= obj - ARMIJO_C * alpha * g2 {
                accepted = Some((t_theta, t_scores, t_b, t_logits, t_obj));
                break;
            }
            alpha *= 0.5;
        }
        let Some((n_theta, n_scores, n_b, n_logits, n_obj)) = accepted else {
            break;
        };
        resid = p.residual(&n_logits);
        let n_g = space.gradient(p, &resid, &n_theta, lambda);
        let n_gb = column_sums(&resid, p.k);

        // s = -alpha g, y = g' - g
        let cross = space.inner(&n_g, &g, &s_g) + dot(&n_gb, &gb);
        let sy = -alpha * (cross - g2);
        let ss = alpha * alpha * g2;
        alpha = if sy > 0.0 && sy.is_finite() { (ss / sy).clamp(1e-10, 1e10) } else { alpha * 2.0 };

        theta = n_theta;
        s_theta = n_scores;
        b = n_b;
        g = n_g;
        gb = n_gb;
        obj = n_obj;
        trace.push(obj);
        iterations += 1;
    }
    Ok(Descent {
        weights: space.weights(p, &theta),
        bias: b,
        report: FitReport {
            iterations,
            objective: obj,
            grad_norm,
            converged,
            objective_trace: trace,
        },
    })
}

fn column_sums(m: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0f64; k];
    for row in m.chunks(k) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Fits the probe with default tolerances.
pub fn train_linear(features: &[FeatureVector], labels: &[u8], l2_lambda: f64, seed: u64) -> Result<LinearClassifier> {
    train_linear_with(
        features,
        labels,
        &LinearFitConfig {
            l2_lambda,
            seed,
            ..LinearFitConfig::default()
        },
    )
}

/// Standardizes the features and fits L2-penalized multinomial logistic
/// regression by full-batch gradient descent.
pub fn train_linear_with(features: &[FeatureVector], labels: &[u8], cfg: &LinearFitConfig) -> Result<LinearClassifier> {
    ensure!(
        features.len() == labels.len(),
        Invalid,
        "{} features but {} labels",
        features.len(),
        labels.len()
    );
    ensure!(features.len() >= 10, Invalid, "need at least 10 examples, got {}", features.len());
    ensure!(
        cfg.l2_lambda > 0.0 && cfg.l2_lambda.is_finite(),
        Invalid,
        "l2_lambda must be positive, got {}",
        cfg.l2_lambda
    );
    ensure!(cfg.tolerance > 0.0, Invalid, "tolerance must be positive");
    let d = features[0].len();
    ensure!(
        features.iter().all(|f| f.len() == d),
        Invalid,
        "feature vectors have differing dimensions"
    );
    let k = *labels.iter().max().expect("non-empty") as usize + 1;
    let mut seen = vec![false; k];
    for &y in labels {
        seen[y as usize] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Invalid(format!("class {missing} has no training examples")));
    }
    let n = features.len();

    let mut mean64 = vec![0f64; d];
    for f in features {
        for (m, &v) in mean64.iter_mut().zip(f.values()) {
            *m += v as f64;
        }
    }
    mean64.iter_mut().for_each(|m| *m /= n as f64);
    let mut var64 = vec![0f64; d];
    for f in features {
        for ((s, &v), &m) in var64.iter_mut().zip(f.values()).zip(&mean64) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let mut clf = LinearClassifier {
        classes: k,
        dim: d,
        weights: Vec::new(),
        bias: Vec::new(),
        l2_lambda: cfg.l2_lambda,
        mean: mean64.iter().map(|&m| m as f32).collect(),
        std: var64
            .iter()
            .map(|&s| ((s / n as f64).sqrt().max(STD_FLOOR)) as f32)
            .collect(),
        fit: FitReport {
            iterations: 0,
            objective: f64::NAN,
            grad_norm: f64::NAN,
            converged: false,
            objective_trace: Vec::new(),
        },
    };
    let mut x = vec![0f32; n * d];
    for (row, f) in x.chunks_mut(d).zip(features) {
        clf.standardize_into(f.values(), row);
    }
    let problem = Problem {
        x,
        labels: labels.iter().map(|&y| y as usize).collect(),
        n,
        d,
        k,
    };

    let mut rng = seeded_rng(cfg.seed);
    let dual = match cfg.space {
        FitSpace::Auto => n < d,
        FitSpace::Primal => false,
        FitSpace::Dual => true,
    };
    let out = if dual {
        let scale = 0.01 / (n as f64).sqrt();
        let theta0 = (0..n * k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        descend(&problem, &Dual::new(&problem), theta0, cfg)?
    } else {
        let theta0 = (0..k * d).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        descend(&problem, &Primal, theta0, cfg)?
    };
    clf.weights = out.weights.iter().map(|&v| v as f32).collect();
    clf.bias = out.bias.iter().map(|&v| v as f32).collect();
    clf.fit = out.report;
    Ok(clf)
}

pub fn classify_chip(d: &Discriminator, clf: &LinearClassifier, chip: &ImageChip) -> Result<(u8, f64)> {
    clf.predict(&extract_features(d, chip)?)
}

/// Batched `classify_chip`.
pub fn classify_chips(d: &Discriminator, clf: &LinearClassifier, chips: &[ImageChip]) -> Result<Vec<(u8, f64)>> {
    extract_features_batch(d, chips)?.iter().map(|f| clf.predict(f)).collect()
}
