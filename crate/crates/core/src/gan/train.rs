use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use farsight_nn::{Adam, Archive, Mode, Module, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{d_loss_grads, g_loss_grad, gan_losses, Discriminator, GanArch, Generator};
use crate::checkpoint::{load_adam, load_module, meta_field, push_adam, push_module, read_kind};
use crate::dataset_io::{record_to_chip, seeded_rng, sub_seed, CifarRecord, ImageChip};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables periodic
    /// checkpoints (the final one is always written when a directory is set).
    pub checkpoint_every: usize,
    pub arch: GanArch,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 72,
            epochs: 25,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            checkpoint_every: 500,
            arch: GanArch::default(),
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 2, Invalid, "batch_size must be at least 2, got {}", self.batch_size);
        ensure!(self.epochs >= 1, Invalid, "epochs must be at least 1");
        ensure!(self.learning_rate > 0.0, Invalid, "learning_rate must be positive");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Invalid,
            "Adam decay rates must lie in [0, 1)"
        );
        Ok(())
    }

    pub fn iterations_per_epoch(&self, records: usize) -> usize {
        records / self.batch_size
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLogRow {
    pub iteration: u64,
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub mean_d_real: f64,
    pub mean_d_fake: f64,
    pub wall_ms: u64,
}

pub fn write_gan_log(path: &Path, rows: &[GanLogRow]) -> Result<()> {
    let mut out = String::from("iteration,epoch,d_loss,g_loss,mean_d_real,mean_d_fake,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration, r.epoch, r.d_loss, r.g_loss, r.mean_d_real, r.mean_d_fake, r.wall_ms
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Everything needed to resume or reuse a training run.
#[derive(Clone)]
pub struct GanCheckpoint {
    pub config: GanTrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
}

impl GanCheckpoint {
    pub fn iteration(&self) -> u64 {
        self.generator.iterations
    }

    pub fn to_archive(&self) -> Archive {
        let meta = json!({
            "iteration": self.iteration(),
            "config": self.config,
            "arch": self.generator.arch(),
            "g_opt_step": self.g_opt.step,
            "d_opt_step": self.d_opt.step,
        });
        let mut a = Archive::new("gan", meta);
        push_module(&mut a, "g.", &self.generator);
        push_module(&mut a, "d.", &self.discriminator);
        push_adam(&mut a, "g_opt.", &self.g_opt);
        push_adam(&mut a, "d_opt.", &self.d_opt);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: GanTrainConfig = meta_field(&a.meta, "config")?;
        let arch: GanArch = meta_field(&a.meta, "arch")?;
        let iteration: u64 = meta_field(&a.meta, "iteration")?;
        let mut generator = Generator::new(arch, 0);
        let mut discriminator = Discriminator::new(arch, 0);
        load_module(a, "g.", &mut generator)?;
        load_module(a, "d.", &mut discriminator)?;
        generator.iterations = iteration;
        discriminator.iterations = iteration;
        let mut g_opt = load_adam(a, "g_opt.", meta_field(&a.meta, "g_opt_step")?);
        let mut d_opt = load_adam(a, "d_opt.", meta_field(&a.meta, "d_opt_step")?);
        for opt in [&mut g_opt, &mut d_opt] {
            opt.lr = config.learning_rate;
            opt.beta1 = config.beta1;
            opt.beta2 = config.beta2;
        }
        Ok(Self {
            config,
            generator,
            discriminator,
            g_opt,
            d_opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&read_kind(path, "gan")?)
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("gan_{iteration:06}.fsa"))
}

pub struct GanTrainOutput {
    pub checkpoint: GanCheckpoint,
    pub log: Vec<GanLogRow>,
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_grad(shape: &[usize], g: Vec<f64>) -> Tensor<f32> {
    Tensor::from_vec(shape, g.into_iter().map(|v| v as f32).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Alternating discriminator/generator updates over seeded shuffles of
/// `records`. The final partial batch of each epoch is dropped.
///
/// When `checkpoint_dir` is set, checkpoints are written every
/// `checkpoint_every` iterations and after the last one.
pub fn train_gan(records: &[CifarRecord], cfg: &GanTrainConfig, checkpoint_dir: Option<&Path>) -> Result<GanTrainOutput> {
    cfg.validate()?;
    ensure!(
        records.len() >= cfg.batch_size,
        Data,
        "{} records cannot fill one batch of {}",
        records.len(),
        cfg.batch_size
    );
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let chips: Vec<ImageChip> = records.iter().map(record_to_chip).collect();
    let mut state = GanCheckpoint {
        config: cfg.clone(),
        generator: Generator::new(cfg.arch, cfg.seed),
        discriminator: Discriminator::new(cfg.arch, cfg.seed),
        g_opt: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2),
        d_opt: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2),
    };
    let mut rng = seeded_rng(sub_seed(cfg.seed, 2));
    let per_epoch = cfg.iterations_per_epoch(records.len());
    let latent = cfg.arch.latent_dim;
    let b = cfg.batch_size;
    let start = Instant::now();
    let mut log = Vec::with_capacity(per_epoch * cfg.epochs);
    let mut order: Vec<usize> = (0..records.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(b).take(per_epoch) {
            let GanCheckpoint {
                generator: g,
                discriminator: d,
                g_opt,
                d_opt,
                ..
            } = &mut state;
            let real_chips: Vec<&ImageChip> = batch.iter().map(|&i| &chips[i]).collect();
            let real = ImageChip::batch(&real_chips);
            let z = Tensor::from_vec(&[b, latent], (0..b * latent).map(|_| StandardNormal.sample(&mut rng)).collect());

            // discriminator step: real and fake halves are separate batches
            d.zero_grad();
            let (p_real, _) = d.forward(real, Mode::Train);
            let p_real64 = to_f64(&p_real);
            let (grad_real, _) = d_loss_grads(&p_real64, &[]);
            d.backward(Some(to_grad(p_real.shape(), grad_real)), &[], true);
            let fake = g.forward(z, Mode::Train);
            let (p_fake, _) = d.forward(fake.clone(), Mode::Train);
            let p_fake64 = to_f64(&p_fake);
            let (_, grad_fake) = d_loss_grads(&[], &p_fake64);
            d.backward(Some(to_grad(p_fake.shape(), grad_fake)), &[], true);
            d_opt.update(d);

            // generator step against the updated discriminator
            g.zero_grad();
            let (pg, _) = d.forward(fake, Mode::Train);
            let pg64 = to_f64(&pg);
            let dx = d.backward(Some(to_grad(pg.shape(), g_loss_grad(&pg64))), &[], false);
            g.backward(dx, true);
            g_opt.update(g);
            g.iterations += 1;
            d.iterations += 1;

            let d_loss = gan_losses(&p_real64, &p_fake64)?.d_loss;
            let g_loss = gan_losses(&p_real64, &pg64)?.g_loss;
            let iteration = g.iterations;
            if !(d_loss.is_finite() && g_loss.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "GAN iteration {iteration} (epoch {epoch}): d_loss={d_loss}, g_loss={g_loss}"
                )));
            }
            log.push(GanLogRow {
                iteration,
                epoch,
                d_loss,
                g_loss,
                mean_d_real: mean(&p_real64),
                mean_d_fake: mean(&p_fake64),
                wall_ms: start.elapsed().as_millis() as u64,
            });
            if let Some(dir) = checkpoint_dir {
                if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every as u64 == 0 {
                    state.save(&checkpoint_path(dir, iteration))?;
                }
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        let path = checkpoint_path(dir, state.iteration());
        if !path.exists() {
            state.save(&path)?;
        }
    }
    Ok(GanTrainOutput { checkpoint: state, log })
}
