//! A small but fully trained pipeline for cascade and comparison tests.

use farsight_core::dataset_io::synthetic::surrogate_records;
use farsight_core::dataset_io::{compose_benchmark, record_to_chip, BenchmarkSpec, Scene};
use farsight_core::enhancer::ProjectionConfig;
use farsight_core::eval::Pipeline;
use farsight_core::features::{extract_features_batch, train_linear, LinearClassifier};
use farsight_core::gan::{train_gan, Discriminator, GanArch, GanTrainConfig, Generator};
use farsight_core::ssd::{train_detector, DetectorConfig, DetectorNet};
use std::sync::OnceLock;

pub struct MiniPipeline {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub classifier: LinearClassifier,
    pub detector: DetectorNet,
    pub scenes: Vec<Scene>,
}

impl MiniPipeline {
    /// Built once per test binary.
    pub fn shared() -> &'static Self {
        static CELL: OnceLock<MiniPipeline> = OnceLock::new();
        CELL.get_or_init(Self::build)
    }

    pub fn build() -> Self {
        let records = surrogate_records(120, 21);
        let gan_cfg = GanTrainConfig {
            batch_size: 24,
            epochs: 1,
            arch: GanArch::scaled_down(32),
            ..Default::default()
        };
        let ck = train_gan(&records, &gan_cfg, None).unwrap().checkpoint;
        let chips: Vec<_> = records.iter().map(record_to_chip).collect();
        let labels: Vec<u8> = records.iter().map(|r| r.label()).collect();
        let feats = extract_features_batch(&ck.discriminator, &chips).unwrap();
        let classifier = train_linear(&feats, &labels, 1e-1, 0).unwrap();
        let spec = BenchmarkSpec {
            scenes: 6,
            base_seed: 40,
            ..BenchmarkSpec::default()
        };
        let scenes = compose_benchmark(&records, &spec).unwrap();
        let det_cfg = DetectorConfig {
            batch_size: 2,
            epochs: 15,
            ..DetectorConfig::default()
        };
        let detector = train_detector(&scenes, &det_cfg).unwrap().net;
        Self {
            generator: ck.generator,
            discriminator: ck.discriminator,
            classifier,
            detector,
            scenes,
        }
    }

    pub fn nets(&self) -> Pipeline<'_> {
        Pipeline {
            generator: &self.generator,
            discriminator: &self.discriminator,
            classifier: &self.classifier,
            detector: &self.detector,
        }
    }
}

pub fn quick_projection() -> ProjectionConfig {
    ProjectionConfig {
        steps: 3,
        step_size: 0.5,
        restarts: 1,
        ..ProjectionConfig::default()
    }
}
