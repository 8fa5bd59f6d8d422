//! Two-phase training.
//!
//! Phase 1 fits the segmentor and generator on the segmentation and L1
//! terms. Phase 2 alternates discriminator steps with joint steps on the
//! full objective. The step counter runs across both phases, and all
//! randomness comes from two seeded streams stored in every checkpoint,
//! so a resumed run replays the uninterrupted one exactly.

mod adam;
mod checkpoint;
mod example;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{Adam, AdamHyper};
pub use checkpoint::{Checkpoint, Optimizers, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use example::{example_for_box, expanded_box, training_example, Batch, TrainingExample};

use crate::error::{Error, Result};
use crate::losses::{
    full_loss, gan_d_loss, gan_g_loss, l1_batch, scalar, segm_terms, LossBreakdown, LossWeights,
};
use crate::netarch::{
    compose_batch, discriminator_forward_batch, generator_forward_batch, init_params,
    segmentor_forward_batch, NetConfig, NetParams,
};
use crate::rng::{stream, streams};
use crate::scenegen::{load_sample, DatasetManifest, Sample, Split};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.spck";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Region {
    /// Every pixel of the painted patch.
    Patch,
    /// Pixels of the ground-truth full object only.
    Object,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_segmentor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub device: String,
    /// Steps between checkpoint writes; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Box expansion ratio range per side.
    pub expand: [f64; 2],
    /// Discriminator steps per joint step in phase 2.
    pub d_steps: usize,
    pub saturating_generator: bool,
    pub l1_region: L1Region,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_steps: 300,
            phase2_steps: 300,
            batch_size: 8,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            lr_segmentor: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            device: "cpu".into(),
            checkpoint_every: 0,
            expand: [0.1, 0.3],
            d_steps: 1,
            saturating_generator: false,
            l1_region: L1Region::Patch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        let [lo, hi] = self.expand;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad(format!(
                "train.expand {:?} must be an ordered range within [0, 1]",
                self.expand
            ));
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_segmentor", self.lr_segmentor),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("train.{name} = {v} must be finite and nonnegative"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("train.{name} = {v} must lie in [0, 1)"));
            }
        }
        if self.d_steps == 0 {
            return bad("train.d_steps must be positive".into());
        }
        if self.device != "cpu" {
            return bad(format!(
                "train.device {:?} is not available; only \"cpu\" is supported",
                self.device
            ));
        }
        self.weights.validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// One line of the metrics log; deterministic given config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub phase: u8,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.jsonl` and checkpoints.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stops once this many total steps are complete.
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepLog>,
}

/// Fresh state for a run of `cfg`.
pub fn initial_checkpoint(cfg: &TrainConfig, net: &NetConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let params = init_params(net, &mut stream(cfg.seed, streams::INIT))?;
    let optim = Optimizers {
        segmentor: Adam::new(cfg.hyper(cfg.lr_segmentor), &params.segmentor)?,
        generator: Adam::new(cfg.hyper(cfg.lr_generator), &params.generator)?,
        discriminator: Adam::new(cfg.hyper(cfg.lr_discriminator), &params.discriminator)?,
    };
    Ok(Checkpoint {
        net: net.clone(),
        params,
        optim,
        step: 0,
        data_rng: stream(cfg.seed, streams::DATA),
        noise_rng: stream(cfg.seed, streams::NOISE),
        train_hash: cfg.digest(),
    })
}

/// Loads and validates every sample of `split`.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    manifest
        .sample_indices(split)
        .into_iter()
        .map(|i| load_sample(manifest, i))
        .collect()
}

pub fn train(
    cfg: &TrainConfig,
    net: &NetConfig,
    manifest: &DatasetManifest,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    let samples = load_split(manifest, Split::Train)?;
    train_on_samples(cfg, net, &samples, opts)
}

/// SHA-256 over all parameter values, in group and name order.
pub fn params_digest(params: &NetParams) -> Result<String> {
    let mut h = Sha256::new();
    for (group, g) in params.groups() {
        for (name, values) in g.snapshot()? {
            h.update(group.as_bytes());
            h.update(name.as_bytes());
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { step, what },
        other => other,
    }
}

fn draw_batch(
    cfg: &TrainConfig,
    net: &NetConfig,
    samples: &[Sample],
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let range = (cfg.expand[0], cfg.expand[1]);
    let mut examples = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let i = rng.random_range(0..samples.len());
        match training_example(&samples[i], net, range, rng) {
            Ok(ex) => examples.push(ex),
            Err(e @ (Error::DegenerateBox(_) | Error::EmptyCrop(..) | Error::InvalidValue(_))) => {
                log::warn!("skipping training sample {i}: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    Batch::new(&examples, net)
}

/// Forward pass shared by both phases.
struct Forward {
    segm: crate::losses::SegmTerms,
    m_input: Tensor,
    paint: Tensor,
    l1: Tensor,
}

fn forward(cfg: &TrainConfig, ck: &mut Checkpoint, batch: &Batch) -> Result<Forward> {
    let net = &ck.net;
    let seg = segmentor_forward_batch(&ck.params, net, &batch.input, &batch.boxes)?;
    let segm = segm_terms(&batch.gt_full, &seg.o, &batch.sv_region, &batch.si_region)?;
    let m_input = compose_batch(
        &batch.paint_image,
        &seg.upsampled,
        &batch.paint_visible,
        true,
    )?;
    let paint = generator_forward_batch(&ck.params, net, &m_input, Some(&mut ck.noise_rng))?;
    let region = match cfg.l1_region {
        L1Region::Patch => None,
        L1Region::Object => Some(&batch.paint_full),
    };
    let l1 = l1_batch(&paint, &batch.paint_target, region)?;
    Ok(Forward {
        segm,
        m_input,
        paint,
        l1,
    })
}

fn breakdown(
    f: &Forward,
    gan_g: Option<&Tensor>,
    gan_d: f64,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut b = LossBreakdown {
        bg_bce: scalar(&f.segm.bg)?,
        sv_bce: scalar(&f.segm.sv)?,
        si_bce: scalar(&f.segm.si)?,
        gan_g: match gan_g {
            Some(g) => scalar(g)?,
            None => 0.0,
        },
        gan_d,
        l1: scalar(&f.l1)?,
        total: 0.0,
    };
    b.total = b.recompute_total(w);
    Ok(b)
}

fn phase1_step(cfg: &TrainConfig, ck: &mut Checkpoint, batch: &Batch) -> Result<LossBreakdown> {
    let f = forward(cfg, ck, batch)?;
    let loss = full_loss(&f.segm, None, &f.l1, &cfg.weights)?;
    let grads = loss.backward()?;
    ck.optim.segmentor.step(&ck.params.segmentor, &grads)?;
    ck.optim.generator.step(&ck.params.generator, &grads)?;
    breakdown(&f, None, 0.0, &cfg.weights)
}

fn phase2_step(cfg: &TrainConfig, ck: &mut Checkpoint, batch: &Batch) -> Result<LossBreakdown> {
    let f = forward(cfg, ck, batch)?;
    let net = ck.net.clone();
    let cond = f.m_input.detach();
    let fake = f.paint.detach();
    let mut gan_d = 0.0;
    for _ in 0..cfg.d_steps {
        let d_real = discriminator_forward_batch(&ck.params, &net, &cond, &batch.paint_target)?;
        let d_fake = discriminator_forward_batch(&ck.params, &net, &cond, &fake)?;
        let loss = gan_d_loss(&d_real, &d_fake)?;
        gan_d = scalar(&loss)?;
        let grads = loss.backward()?;
        ck.optim
            .discriminator
            .step(&ck.params.discriminator, &grads)?;
    }
    let d_fake = discriminator_forward_batch(&ck.params, &net, &f.m_input, &f.paint)?;
    let gan_g = gan_g_loss(&d_fake, cfg.saturating_generator)?;
    let loss = full_loss(&f.segm, Some(&gan_g), &f.l1, &cfg.weights)?;
    let grads = loss.backward()?;
    ck.optim.segmentor.step(&ck.params.segmentor, &grads)?;
    ck.optim.generator.step(&ck.params.generator, &grads)?;
    breakdown(&f, Some(&gan_g), gan_d, &cfg.weights)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn train_on_samples(
    cfg: &TrainConfig,
    net: &NetConfig,
    samples: &[Sample],
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    let mut ck = match opts.resume {
        Some(ck) => {
            if ck.train_hash != cfg.digest() {
                return Err(Error::Mismatch(
                    "checkpoint was written by a run with a different training config".into(),
                ));
            }
            if &ck.net != net {
                return Err(Error::Mismatch(
                    "checkpoint network config differs from the requested one".into(),
                ));
            }
            ck
        }
        None => initial_checkpoint(cfg, net)?,
    };
    let end = opts.stop_after.unwrap_or(u64::MAX).min(cfg.total_steps());
    if ck.step < end && samples.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let metrics = opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    let mut history = Vec::new();

    while ck.step < end {
        let step = ck.step;
        let batch = draw_batch(cfg, net, samples, &mut ck.data_rng)?;
        let phase = if step < cfg.phase1_steps { 1 } else { 2 };
        let losses = if phase == 1 {
            phase1_step(cfg, &mut ck, &batch)
        } else {
            phase2_step(cfg, &mut ck, &batch)
        }
        .map_err(|e| with_step(e, step))?;
        if !losses.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "loss".into(),
            });
        }
        ck.step += 1;
        let entry = StepLog {
            step,
            phase,
            losses,
        };
        if let Some(path) = &metrics {
            append_line(path, &serde_json::to_string(&entry)?)?;
        }
        if step % 50 == 0 {
            log::info!(
                "step {step} phase {phase}: total {:.4} segm {:.4} l1 {:.4} gan_g {:.4} gan_d {:.4}",
                losses.total,
                losses.segm(&cfg.weights),
                losses.l1,
                losses.gan_g,
                losses.gan_d
            );
        }
        history.push(entry);
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && ck.step % cfg.checkpoint_every == 0 {
                ck.save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        ck.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        history,
    })
}
