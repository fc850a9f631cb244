use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use farsight_core::dataset_io::synthetic::surrogate_records;
use farsight_core::dataset_io::{
    chip_to_rgb8, compose_benchmark, load_cifar10, load_cifar10_split, read_scene_archive, record_to_chip, rgb8_to_chip,
    serialize_cifar10, sub_seed, write_scene_archive, CifarRecord, CifarSplit, ImageChip,
};
use farsight_core::enhancer::enhance_chip_detailed;
use farsight_core::eval::{detection_rate, emit_report, run_comparison, ComparisonReport, Pipeline};
use farsight_core::features::{classify_chips, extract_features_batch, train_linear_with, LinearClassifier};
use farsight_core::gan::{self, write_gan_log, GanCheckpoint};
use farsight_core::ssd::{self, detect_batch, write_detections_jsonl, write_detector_log, DetectorNet};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_error, CliError};
use crate::manifest::Recorder;
use crate::{Common, Split};

pub const CIFAR_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
const CIFAR_SUBDIR: &str = "cifar-10-batches-bin";
/// Present in a data directory written by `fetch-data --surrogate`.
const SURROGATE_MARKER: &str = "SURROGATE";

/// A resolved stage: config, output directory and manifest recorder.
struct Stage {
    cfg: RunConfig,
    out: PathBuf,
    rec: Recorder,
}

fn resolve(common: &Common, name: &str, default_out: &str, edit: impl FnOnce(&mut RunConfig)) -> Result<Stage, CliError> {
    if common.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    // the global pool can only be configured once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(common.workers).build_global();
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    cfg.apply_global_seed();
    edit(&mut cfg);
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(default_out));
    fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    let mut rec = Recorder::new(name, &cfg, common.workers);
    if let Some(path) = &common.config {
        rec.input(path)?;
    }
    Ok(Stage { cfg, out, rec })
}

fn load_split(stage: &mut Stage, split: CifarSplit) -> Result<Vec<CifarRecord>, CliError> {
    let dir = stage.cfg.paths.cifar_dir.clone();
    let records = load_cifar10_split(&dir, split)?;
    for f in split.files() {
        stage.rec.input(&dir.join(f))?;
    }
    if dir.join(SURROGATE_MARKER).exists() {
        stage.rec.note(format!("{} holds procedural surrogate records, not CIFAR-10", dir.display()));
    }
    Ok(records)
}

fn take_first(mut records: Vec<CifarRecord>, n: usize) -> Vec<CifarRecord> {
    if n > 0 {
        records.truncate(n);
    }
    records
}

fn load_gan(stage: &mut Stage, path: &Path) -> Result<GanCheckpoint, CliError> {
    stage.rec.input(path)?;
    Ok(GanCheckpoint::load(path)?)
}

pub fn fetch_data(common: &Common, surrogate: bool, per_batch: Option<usize>, url: &str) -> Result<(), CliError> {
    let mut stage = resolve(common, "fetch-data", "data", |c| {
        if let Some(n) = per_batch {
            c.data.surrogate_per_batch = n;
        }
    })?;
    let dir = stage.out.join(CIFAR_SUBDIR);
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    if surrogate {
        let n = stage.cfg.data.surrogate_per_batch;
        if n == 0 {
            return Err(CliError::Usage("--per-batch must be positive".into()));
        }
        let seed = stage.cfg.seed.unwrap_or(0);
        let files = CifarSplit::Train.files().into_iter().chain(CifarSplit::Test.files());
        for (i, name) in files.enumerate() {
            let path = dir.join(&name);
            let bytes = serialize_cifar10(&surrogate_records(n, sub_seed(seed, i as u64)));
            fs::write(&path, bytes).map_err(|e| io_error(&path, e))?;
            stage.rec.output(&path)?;
        }
        let marker = dir.join(SURROGATE_MARKER);
        fs::write(&marker, "procedural surrogate records, not CIFAR-10\n").map_err(|e| io_error(&marker, e))?;
        stage.rec.note("surrogate data written in the CIFAR-10 binary layout");
        println!("wrote {} surrogate records per batch to {}", n, dir.display());
    } else {
        let bytes = stage.rec.time("download", || download(url))?;
        stage.rec.note(format!("downloaded {url}, sha256 {:x}", Sha256::digest(&bytes)));
        let mut archive = tar::Archive::new(flate2::read::GzDecoder::new(bytes.as_slice()));
        archive
            .unpack(&stage.out)
            .map_err(|e| CliError::Data(format!("extracting {url}: {e}")))?;
        for name in CifarSplit::Train.files().into_iter().chain(CifarSplit::Test.files()) {
            let path = dir.join(name);
            load_cifar10(&path)?;
            stage.rec.output(&path)?;
        }
        println!("extracted CIFAR-10 to {}", dir.display());
    }
    stage.rec.finish(&stage.out)?;
    Ok(())
}

fn download(url: &str) -> Result<Vec<u8>, CliError> {
    let resp = ureq::get(url)
        .call()
        .map_err(|e| CliError::Data(format!("download {url}: {e}")))?;
    let mut bytes = Vec::new();
    resp.into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| CliError::Data(format!("download {url}: {e}")))?;
    Ok(bytes)
}

pub struct GanOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub records: Option<usize>,
}

pub fn train_gan(common: &Common, o: GanOverrides) -> Result<(), CliError> {
    let mut stage = resolve(common, "train-gan", "runs/gan", |c| {
        if let Some(v) = o.epochs {
            c.gan.epochs = v;
        }
        if let Some(v) = o.batch_size {
            c.gan.batch_size = v;
        }
        if let Some(v) = o.lr {
            c.gan.learning_rate = v;
        }
        if let Some(v) = o.records {
            c.data.gan_records = v;
        }
    })?;
    let records = take_first(load_split(&mut stage, CifarSplit::Train)?, stage.cfg.data.gan_records);
    let ckpt_dir = stage.out.join("checkpoints");
    let cfg = stage.cfg.gan.clone();
    let output = stage
        .rec
        .time("train", || gan::train_gan(&records, &cfg, Some(&ckpt_dir)))?;
    let ckpt = stage.out.join("gan.ckpt");
    output.checkpoint.save(&ckpt)?;
    let log = stage.out.join("gan_log.csv");
    write_gan_log(&log, &output.log)?;
    stage.rec.output(&ckpt)?;
    stage.rec.output(&log)?;
    let last = output.log.last();
    println!(
        "trained {} iterations on {} records; final d_loss {:.4} g_loss {:.4}",
        output.checkpoint.iteration(),
        records.len(),
        last.map_or(f64::NAN, |r| r.d_loss),
        last.map_or(f64::NAN, |r| r.g_loss)
    );
    stage.rec.finish(&stage.out)?;
    Ok(())
}

pub fn train_classifier(
    common: &Common,
    gan_path: Option<PathBuf>,
    train: Option<usize>,
    test: Option<usize>,
    lambda: Option<f64>,
) -> Result<(), CliError> {
    let mut stage = resolve(common, "train-classifier", "runs/classifier", |c| {
        if let Some(p) = gan_path {
            c.paths.gan_checkpoint = p;
        }
        if let Some(v) = train {
            c.data.classifier_train = v;
        }
        if let Some(v) = test {
            c.data.classifier_test = v;
        }
        if let Some(v) = lambda {
            c.classifier.l2_lambda = v;
        }
    })?;
    let path = stage.cfg.paths.gan_checkpoint.clone();
    let gan = load_gan(&mut stage, &path)?;
    let train_recs = take_first(load_split(&mut stage, CifarSplit::Train)?, stage.cfg.data.classifier_train);
    let test_recs = take_first(load_split(&mut stage, CifarSplit::Test)?, stage.cfg.data.classifier_test);
    let d = &gan.discriminator;
    let chips: Vec<ImageChip> = train_recs.iter().map(record_to_chip).collect();
    let labels: Vec<u8> = train_recs.iter().map(|r| r.label()).collect();
    let features = stage.rec.time("extract", || extract_features_batch(d, &chips))?;
    let fit_cfg = stage.cfg.classifier;
    let clf = stage.rec.time("fit", || train_linear_with(&features, &labels, &fit_cfg))?;
    let train_acc = accuracy(&clf, &features, &labels);
    let test_chips: Vec<ImageChip> = test_recs.iter().map(record_to_chip).collect();
    let predicted = stage.rec.time("score", || classify_chips(d, &clf, &test_chips))?;
    let hits = predicted.iter().zip(&test_recs).filter(|(p, r)| p.0 == r.label()).count();
    let test_acc = hits as f64 / test_recs.len().max(1) as f64;

    let ckpt = stage.out.join("classifier.ckpt");
    clf.save(&ckpt)?;
    let metrics = stage.out.join("classifier_metrics.json");
    let text = serde_json::to_string_pretty(&json!({
        "train_records": train_recs.len(),
        "test_records": test_recs.len(),
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "fit": clf.fit,
    }))?;
    fs::write(&metrics, text + "\n").map_err(|e| io_error(&metrics, e))?;
    stage.rec.output(&ckpt)?;
    stage.rec.output(&metrics)?;
    println!("train accuracy {train_acc:.4}, test accuracy {test_acc:.4}");
    stage.rec.finish(&stage.out)?;
    Ok(())
}

fn accuracy(clf: &LinearClassifier, features: &[farsight_core::features::FeatureVector], labels: &[u8]) -> f64 {
    let hits = features
        .iter()
        .zip(labels)
        .filter(|(f, &l)| clf.predict(f).is_ok_and(|p| p.0 == l))
        .count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn compose_bench(common: &Common, split: Split, scenes: Option<usize>) -> Result<(), CliError> {
    let default_out = match split {
        Split::Test => "runs/bench",
        Split::Train => "runs/train-scenes",
    };
    let mut stage = resolve(common, "compose-bench", default_out, |c| {
        if let Some(n) = scenes {
            match split {
                Split::Test => c.bench.scenes = n,
                Split::Train => c.train_scenes.scenes = n,
            }
        }
    })?;
    let (records, spec) = match split {
        Split::Test => (load_split(&mut stage, CifarSplit::Test)?, stage.cfg.bench.clone()),
        Split::Train => (load_split(&mut stage, CifarSplit::Train)?, stage.cfg.train_scenes.clone()),
    };
    let composed = stage.rec.time("compose", || compose_benchmark(&records, &spec))?;
    let dir = stage.out.join("scenes");
    write_scene_archive(&dir, &composed)?;
    stage.rec.output(&dir)?;
    let objects: usize = composed.iter().map(|s| s.truths.len()).sum();
    println!("composed {} scenes with {} objects into {}", composed.len(), objects, dir.display());
    stage.rec.finish(&stage.out)?;
    Ok(())
}

fn load_scenes(stage: &mut Stage, dir: &Path) -> Result<Vec<farsight_core::dataset_io::Scene>, CliError> {
    let scenes = read_scene_archive(dir)?;
    if scenes.is_empty() {
        return Err(CliError::Data(format!("{} holds no scenes", dir.display())));
    }
    stage.rec.input(dir)?;
    Ok(scenes)
}

pub fn train_detector(
    common: &Common,
    scenes_dir: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
) -> Result<(), CliError> {
    let mut stage = resolve(common, "train-detector", "runs/detector", |c| {
        if let Some(p) = scenes_dir {
            c.paths.train_scenes = p;
        }
        if let Some(v) = epochs {
            c.detector.epochs = v;
        }
        if let Some(v) = batch_size {
            c.detector.batch_size = v;
        }
        if let Some(v) = lr {
            c.detector.learning_rate = v;
        }
    })?;
    let path = stage.cfg.paths.train_scenes.clone();
    let scenes = load_scenes(&mut stage, &path)?;
    let cfg = stage.cfg.detector.clone();
    let output = stage.rec.time("train", || ssd::train_detector(&scenes, &cfg))?;
    let ckpt = stage.out.join("detector.ckpt");
    output.net.to_archive(Some(&output.optimizer)).write(&ckpt).map_err(farsight_core::Error::from)?;
    let log = stage.out.join("detector_log.csv");
    write_detector_log(&log, &output.log)?;
    stage.rec.output(&ckpt)?;
    stage.rec.output(&log)?;
    println!(
        "trained {} iterations on {} scenes; final loss {:.4}",
        output.net.iterations(),
        scenes.len(),
        output.log.last().map_or(f64::NAN, |r| r.loss)
    );
    stage.rec.finish(&stage.out)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<ImageChip, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(rgb8_to_chip(img.as_raw(), h as usize, w as usize)?)
}

fn write_png(path: &Path, chip: &ImageChip) -> Result<(), CliError> {
    image::save_buffer_with_format(
        path,
        &chip_to_rgb8(chip),
        chip.width() as u32,
        chip.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn enhance(
    common: &Common,
    gan_path: Option<PathBuf>,
    inputs: &[PathBuf],
    steps: Option<usize>,
    restarts: Option<usize>,
) -> Result<(), CliError> {
    let mut stage = resolve(common, "enhance", "runs/enhance", |c| {
        if let Some(p) = gan_path {
            c.paths.gan_checkpoint = p;
        }
        if let Some(v) = steps {
            c.cascade.projection.steps = v;
        }
        if let Some(v) = restarts {
            c.cascade.projection.restarts = v;
        }
    })?;
    let path = stage.cfg.paths.gan_checkpoint.clone();
    let gan = load_gan(&mut stage, &path)?;
    let mut results = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        stage.rec.input(input)?;
        let chip = read_png(input)?;
        let mut projection = stage.cfg.cascade.projection.clone();
        projection.seed = projection.seed.wrapping_add(i as u64);
        let (enhanced, result) = stage.rec.time("project", || {
            enhance_chip_detailed(&gan.generator, Some(&gan.discriminator), &chip, &projection)
        })?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("chip{i}"));
        let path = stage.out.join(format!("{stem}_enhanced.png"));
        write_png(&path, &enhanced)?;
        stage.rec.output(&path)?;
        results.push(json!({
            "input": input,
            "output": path,
            "seed": projection.seed,
            "initial_loss": result.as_ref().map(|r| r.initial_loss),
            "final_loss": result.as_ref().map(|r| r.final_loss),
        }));
    }
    let summary = stage.out.join("enhance.json");
    fs::write(&summary, serde_json::to_string_pretty(&results)? + "\n").map_err(|e| io_error(&summary, e))?;
    stage.rec.output(&summary)?;
    println!("enhanced {} chips into {}", inputs.len(), stage.out.display());
    stage.rec.finish(&stage.out)?;
    Ok(())
}

pub fn detect(
    common: &Common,
    detector: Option<PathBuf>,
    scenes_dir: Option<PathBuf>,
    conf: Option<f64>,
) -> Result<(), CliError> {
    let mut stage = resolve(common, "detect", "runs/detect", |c| {
        if let Some(p) = detector {
            c.paths.detector_checkpoint = p;
        }
        if let Some(p) = scenes_dir {
            c.paths.bench_scenes = p;
        }
        if let Some(v) = conf {
            c.eval.conf_thr = v;
        }
    })?;
    let det_path = stage.cfg.paths.detector_checkpoint.clone();
    stage.rec.input(&det_path)?;
    let net = DetectorNet::load(&det_path)?;
    let path = stage.cfg.paths.bench_scenes.clone();
    let scenes = load_scenes(&mut stage, &path)?;
    let canvases: Vec<&ImageChip> = scenes.iter().map(|s| &s.canvas).collect();
    let thr = stage.cfg.eval.conf_thr;
    let dets = stage.rec.time("detect", || detect_batch(&net, &canvases, thr))?;
    let (mut matched, mut truths) = (0, 0);
    for (d, s) in dets.iter().zip(&scenes) {
        let r = detection_rate(d, &s.truths, &stage.cfg.eval);
        matched += r.matched;
        truths += r.truths;
    }
    let per_scene: Vec<(usize, Vec<ssd::Detection>)> = dets.into_iter().enumerate().collect();
    let path = stage.out.join("detections.jsonl");
    write_detections_jsonl(&path, &per_scene)?;
    stage.rec.output(&path)?;
    let count: usize = per_scene.iter().map(|(_, d)| d.len()).sum();
    println!("{count} detections over {} scenes; detection rate {matched}/{truths}", scenes.len());
    stage.rec.finish(&stage.out)?;
    Ok(())
}

pub struct CompareOverrides {
    pub gan: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub scenes_dir: Option<PathBuf>,
    pub steps: Option<usize>,
    pub restarts: Option<usize>,
    pub t_rescore: Option<f64>,
}

pub fn compare(common: &Common, o: CompareOverrides) -> Result<(), CliError> {
    let mut stage = resolve(common, "compare", "runs/compare", |c| {
        if let Some(p) = o.gan {
            c.paths.gan_checkpoint = p;
        }
        if let Some(p) = o.classifier {
            c.paths.classifier_checkpoint = p;
        }
        if let Some(p) = o.detector {
            c.paths.detector_checkpoint = p;
        }
        if let Some(p) = o.scenes_dir {
            c.paths.bench_scenes = p;
        }
        if let Some(v) = o.steps {
            c.cascade.projection.steps = v;
        }
        if let Some(v) = o.restarts {
            c.cascade.projection.restarts = v;
        }
        if let Some(v) = o.t_rescore {
            c.cascade.t_rescore = v;
        }
    })?;
    let paths = stage.cfg.paths.clone();
    let gan = load_gan(&mut stage, &paths.gan_checkpoint)?;
    stage.rec.input(&paths.classifier_checkpoint)?;
    let classifier = LinearClassifier::load(&paths.classifier_checkpoint)?;
    stage.rec.input(&paths.detector_checkpoint)?;
    let detector = DetectorNet::load(&paths.detector_checkpoint)?;
    let scenes = load_scenes(&mut stage, &paths.bench_scenes)?;
    let nets = Pipeline {
        generator: &gan.generator,
        discriminator: &gan.discriminator,
        classifier: &classifier,
        detector: &detector,
    };
    let (cascade, eval) = (stage.cfg.cascade.clone(), stage.cfg.eval.clone());
    let report = stage.rec.time("compare", || run_comparison(&scenes, &nets, &cascade, &eval))?;
    let files = emit_report(&report, &stage.out)?;
    for p in [&files.json, &files.csv, &files.plot] {
        stage.rec.output(p)?;
    }
    print_summary(&report);
    stage.rec.finish(&stage.out)?;
    Ok(())
}

fn print_summary(r: &ComparisonReport) {
    let a = &r.aggregate;
    println!(
        "detector only: {:.3} ({}/{})   cascade: {:.3} ({}/{})",
        a.baseline, a.baseline_matched, a.truths, a.cascade, a.cascade_matched, a.truths
    );
    for l in &r.by_degradation {
        println!("  scale {:.3}: {:.3} -> {:.3} over {} objects", l.level, l.baseline, l.cascade, l.truths);
    }
    println!(
        "published reference: {:.3} -> {:.3}",
        r.published_reference.ssd_only, r.published_reference.dcgan_ssd
    );
}

pub fn report(common: &Common, input: &Path) -> Result<(), CliError> {
    let mut stage = resolve(common, "report", "runs/report", |_| {})?;
    stage.rec.input(input)?;
    let text = fs::read_to_string(input).map_err(|e| io_error(input, e))?;
    let report: ComparisonReport = serde_json::from_str(&text)?;
    let files = emit_report(&report, &stage.out)?;
    for p in [&files.json, &files.csv, &files.plot] {
        stage.rec.output(p)?;
    }
    print_summary(&report);
    stage.rec.finish(&stage.out)?;
    Ok(())
}
