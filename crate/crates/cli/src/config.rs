use std::path::{Path, PathBuf};

use farsight_core::cascade::CascadeConfig;
use farsight_core::dataset_io::{sub_seed, BenchmarkSpec};
use farsight_core::eval::EvalConfig;
use farsight_core::features::LinearFitConfig;
use farsight_core::gan::GanTrainConfig;
use farsight_core::ssd::DetectorConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Where stages find the artifacts of earlier stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Extracted `cifar-10-batches-bin` directory.
    pub cifar_dir: PathBuf,
    pub gan_checkpoint: PathBuf,
    pub classifier_checkpoint: PathBuf,
    pub detector_checkpoint: PathBuf,
    /// Scene archive the detector trains on.
    pub train_scenes: PathBuf,
    /// Scene archive used by `detect` and `compare`.
    pub bench_scenes: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            cifar_dir: "data/cifar-10-batches-bin".into(),
            gan_checkpoint: "runs/gan/gan.ckpt".into(),
            classifier_checkpoint: "runs/classifier/classifier.ckpt".into(),
            detector_checkpoint: "runs/detector/detector.ckpt".into(),
            train_scenes: "runs/train-scenes/scenes".into(),
            bench_scenes: "runs/bench/scenes".into(),
        }
    }
}

/// Sizes of the record subsets each stage reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training records for the GAN; 0 uses the whole training split.
    pub gan_records: usize,
    /// Training records the linear probe is fitted on.
    pub classifier_train: usize,
    /// Test records the probe is scored on.
    pub classifier_test: usize,
    /// Records written per training batch file by `fetch-data --surrogate`.
    pub surrogate_per_batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            gan_records: 0,
            classifier_train: 10_000,
            classifier_test: 10_000,
            surrogate_per_batch: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, every component seed is derived from this one.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub data: DataConfig,
    pub gan: GanTrainConfig,
    pub classifier: LinearFitConfig,
    /// Scenes the detector is trained on, composed from the training split.
    pub train_scenes: BenchmarkSpec,
    /// Evaluation scenes, composed from the test split.
    pub bench: BenchmarkSpec,
    pub detector: DetectorConfig,
    /// Also holds the projection settings used by `enhance`.
    pub cascade: CascadeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: Paths::default(),
            data: DataConfig::default(),
            gan: GanTrainConfig::default(),
            classifier: LinearFitConfig::default(),
            train_scenes: BenchmarkSpec {
                scenes: 2000,
                base_seed: 1_000_000,
                ..BenchmarkSpec::default()
            },
            bench: BenchmarkSpec::default(),
            detector: DetectorConfig::default(),
            cascade: CascadeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Rewrites every component seed from the global one.
    pub fn apply_global_seed(&mut self) {
        let Some(seed) = self.seed else { return };
        self.gan.seed = sub_seed(seed, 0);
        self.classifier.seed = sub_seed(seed, 1);
        self.detector.seed = sub_seed(seed, 2);
        self.cascade.projection.seed = sub_seed(seed, 3);
        // scene seeds are consecutive, so keep the two ranges apart
        self.train_scenes.base_seed = sub_seed(seed, 4) >> 2;
        self.bench.base_seed = (sub_seed(seed, 5) >> 2) | (1 << 62);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.gan.validate()?;
        self.train_scenes.validate()?;
        self.bench.validate()?;
        self.detector.validate()?;
        self.cascade.validate()?;
        self.eval.validate()?;
        if self.classifier.l2_lambda <= 0.0 {
            return Err(CliError::Usage("classifier.l2_lambda must be positive".into()));
        }
        Ok(())
    }
}
