//! Supervised training, instance adaptation and evaluation.
//!
//! All three training entry points share one loop: draw clean crops, add
//! fresh Gaussian noise, run a batched forward/backward pass and take an
//! optimizer step. Every random draw comes from a generator seeded by
//! `(seed, epoch, batch)`, so runs are reproducible and independent of the
//! thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::image_io::{add_awgn, load_image, psnr, ImagePlane, NoiseSpec};
use crate::net::{
    backward_batch, denoise, forward_batch, mse_loss, save_model, ArchDescriptor, ModelParams, NetError, Prepared,
};
use crate::nn::{Mode, NnError, Optimizer, OptimizerKind};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no training images")]
    EmptyDataset,
    #[error("non-finite {what} at epoch {epoch}, step {step}{}", checkpoint.as_ref().map(|p| format!("; last good model saved to {}", p.display())).unwrap_or_default())]
    NonFinite {
        what: String,
        epoch: usize,
        step: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("adaptation target changed between epochs")]
    TargetChanged,
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Net(e.into())
    }
}

/// Noise level on the 8-bit scale: fixed, or drawn uniformly per crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaSpec {
    Fixed(f64),
    Range { low: f64, high: f64 },
}

impl SigmaSpec {
    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            SigmaSpec::Fixed(s) => s,
            SigmaSpec::Range { low, high } => rng.random_range(low..=high),
        }
    }

    /// Level used for validation images.
    pub fn nominal(&self) -> f64 {
        match *self {
            SigmaSpec::Fixed(s) => s,
            SigmaSpec::Range { low, high } => 0.5 * (low + high),
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let ok = match *self {
            SigmaSpec::Fixed(s) => s >= 0.0 && s.is_finite(),
            SigmaSpec::Range { low, high } => low >= 0.0 && low <= high && high.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("bad noise level {self:?}")))
        }
    }
}

impl std::fmt::Display for SigmaSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SigmaSpec::Fixed(s) => write!(f, "{s}"),
            SigmaSpec::Range { low, high } => write!(f, "{low}..{high}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// One epoch is one pass over the training images, one crop per image.
    pub epochs: usize,
    /// Crops per optimizer step, each from a different image.
    pub batch_images: usize,
    pub crop_size: usize,
    pub sigma: SigmaSpec,
    pub adam_lr: f64,
    pub sgd_lr: f64,
    /// Fraction of the epochs run with Adam before switching to SGD.
    pub switch_fraction: f64,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_images: 4,
            crop_size: 64,
            sigma: SigmaSpec::Fixed(25.0),
            adam_lr: 1e-2,
            sgd_lr: 1e-3,
            switch_fraction: 0.8,
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, arch: &ArchDescriptor) -> Result<(), TrainError> {
        self.sigma.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.adam_lr > 0.0 && self.sgd_lr > 0.0) {
            return bad(format!("learning rates must be positive ({}, {})", self.adam_lr, self.sgd_lr));
        }
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return bad(format!("switch fraction {} outside [0, 1]", self.switch_fraction));
        }
        if self.batch_images == 0 {
            return bad("batch size must be positive".into());
        }
        if self.crop_size < 2 * arch.patch_side {
            return bad(format!(
                "crop size {} is below twice the patch side {}",
                self.crop_size, arch.patch_side
            ));
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint interval must be positive".into());
        }
        Ok(())
    }

    /// First epoch (0-based) trained with SGD.
    pub fn switch_epoch(&self) -> usize {
        (self.switch_fraction * self.epochs as f64).round() as usize
    }

    /// `key = value` lines describing the resolved configuration.
    pub fn describe(&self) -> Vec<String> {
        vec![
            format!("epochs = {}", self.epochs),
            format!("batch_images = {}", self.batch_images),
            format!("crop_size = {}", self.crop_size),
            format!("sigma = {}", self.sigma),
            format!("adam_lr = {}", self.adam_lr),
            format!("sgd_lr = {}", self.sgd_lr),
            format!("switch_fraction = {}", self.switch_fraction),
            format!("seed = {}", self.seed),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub epochs: usize,
    /// Noise level of the input, 8-bit scale.
    pub sigma: f64,
    pub learning_rate: f64,
    pub crop_size: usize,
    /// Random crops drawn per epoch in internal adaptation. External
    /// adaptation takes one crop per related image instead.
    pub crops_per_epoch: usize,
    pub batch_images: usize,
    /// Fine-tune through the running batch-norm statistics instead of batch
    /// statistics, leaving them unchanged.
    pub freeze_batch_norm: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 5,
            sigma: 25.0,
            learning_rate: 1e-3,
            crop_size: 64,
            crops_per_epoch: 16,
            batch_images: 4,
            freeze_batch_norm: true,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, arch: &ArchDescriptor) -> Result<(), TrainError> {
        SigmaSpec::Fixed(self.sigma).validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_images == 0 || self.crops_per_epoch == 0 {
            return Err(TrainError::Config("batch and crop counts must be positive".into()));
        }
        if self.crop_size < 2 * arch.patch_side {
            return Err(TrainError::Config(format!(
                "crop size {} is below twice the patch side {}",
                self.crop_size, arch.patch_side
            )));
        }
        Ok(())
    }

    pub fn describe(&self) -> Vec<String> {
        vec![
            format!("epochs = {}", self.epochs),
            format!("sigma = {}", self.sigma),
            format!("learning_rate = {}", self.learning_rate),
            format!("crop_size = {}", self.crop_size),
            format!("crops_per_epoch = {}", self.crops_per_epoch),
            format!("batch_images = {}", self.batch_images),
            format!("freeze_batch_norm = {}", self.freeze_batch_norm),
            format!("seed = {}", self.seed),
        ]
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based; epoch 0 is the untrained model.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with the given comment lines first, then `epoch,step,loss,val_psnr`.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut s = String::new();
        for c in comments {
            let _ = writeln!(s, "# {c}");
        }
        s.push_str("epoch,step,loss,val_psnr\n");
        for r in &self.records {
            let v = r.val_psnr.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{:.9e},{}", r.epoch, r.step, r.loss, v);
        }
        s
    }
}

/// SplitMix64 finalizer over three words.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn batch_rng(seed: u64, epoch: usize, batch: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, epoch as u64 + 1, batch as u64 + 1))
}

/// A uniformly placed `size x size` window (clipped to the image).
pub fn random_crop(img: &ImagePlane, size: usize, rng: &mut impl Rng) -> ImagePlane {
    let (h, w) = (size.min(img.height), size.min(img.width));
    let top = rng.random_range(0..=img.height - h);
    let left = rng.random_range(0..=img.width - w);
    img.crop(top, left, h, w)
}

type Sample = (ImagePlane, ImagePlane);

fn noisy_sample(clean: ImagePlane, sigma: f64, rng: &mut impl RngCore) -> Sample {
    let noisy = add_awgn(
        &clean,
        NoiseSpec {
            sigma,
            seed: rng.next_u64(),
        },
    );
    (noisy, clean)
}

struct Plan<'a, T> {
    epochs: usize,
    /// `(epoch, optimizer)` switch points, first at epoch 0.
    phases: Vec<(usize, OptimizerKind, f64)>,
    bn_mode: Mode,
    batches: &'a mut dyn FnMut(usize) -> Vec<Vec<Sample>>,
    validate: Option<&'a dyn Fn(&ModelParams<T>) -> Result<f64, NetError>>,
    checkpoint_every: Option<usize>,
    checkpoint_dir: Option<&'a Path>,
    after_epoch: &'a mut dyn FnMut(&EpochRecord, &ModelParams<T>) -> Result<(), TrainError>,
}

/// Loss, gradients and batch statistics of one batch; gradients are left in the model.
pub fn batch_gradient<T: Real>(
    model: &mut ModelParams<T>,
    samples: &[Sample],
    mode: Mode,
) -> Result<(f64, crate::net::BnUpdates<T>), TrainError> {
    let arch = model.arch;
    let items = samples
        .iter()
        .map(|(noisy, _)| Prepared::<T>::new(noisy, &arch))
        .collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<ImagePlane> = samples.iter().map(|(_, c)| c.clone()).collect();
    model.zero_grads();
    let (out, trace, stats) = forward_batch(model, &items, mode)?;
    let (loss, d) = mse_loss(&out, &targets)?;
    if loss.is_finite() {
        backward_batch(model, &items, &trace, &d)?;
    }
    Ok((loss, stats))
}

fn run<T: Real>(model: &mut ModelParams<T>, plan: Plan<'_, T>) -> Result<TrainLog, TrainError> {
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut opt: Option<(usize, Optimizer<T>)> = None;
    for epoch in 0..plan.epochs {
        let phase = plan.phases.iter().rposition(|(start, _, _)| *start <= epoch).unwrap_or(0);
        if opt.as_ref().map(|(p, _)| *p) != Some(phase) {
            let (_, kind, lr) = plan.phases[phase];
            opt = Some((phase, Optimizer::new(kind, lr)));
        }
        let optimizer = &mut opt.as_mut().expect("set above").1;
        let mut total = 0.0;
        let batches = (plan.batches)(epoch);
        let count = batches.len();
        for samples in batches {
            let (loss, stats) = batch_gradient(model, &samples, plan.bn_mode)?;
            let fail = |what: String, good: &ModelParams<T>| {
                let checkpoint = plan.checkpoint_dir.and_then(|dir| {
                    let p = dir.join("last_good.lidia");
                    save_model(good, &p).ok().map(|_| p)
                });
                TrainError::NonFinite {
                    what,
                    epoch: epoch + 1,
                    step,
                    checkpoint,
                }
            };
            if !loss.is_finite() {
                return Err(fail("loss".into(), model));
            }
            let last_good = model.clone();
            if let Err(NnError::NonFiniteGradient(name)) = optimizer.step(model) {
                return Err(fail(format!("gradient in {name}"), &last_good));
            }
            model.apply_bn_stats(&stats);
            if !model.is_finite() {
                return Err(fail("parameters".into(), &last_good));
            }
            total += loss;
            step += 1;
        }
        let val_psnr = match plan.validate {
            Some(f) => Some(f(model)?),
            None => None,
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            step,
            loss: total / count.max(1) as f64,
            val_psnr,
        };
        (plan.after_epoch)(&rec, model)?;
        if let (Some(every), Some(dir)) = (plan.checkpoint_every, plan.checkpoint_dir) {
            if (epoch + 1) % every == 0 {
                save_model(model, &dir.join(format!("epoch_{:04}.lidia", epoch + 1)))?;
            }
        }
        log.records.push(rec);
    }
    Ok(log)
}

fn mean_psnr<T: Real>(model: &ModelParams<T>, pairs: &[(ImagePlane, ImagePlane)]) -> Result<f64, NetError> {
    let mut s = 0.0;
    for (noisy, clean) in pairs {
        s += psnr(&denoise(model, noisy)?, clean)?;
    }
    Ok(s / pairs.len() as f64)
}

/// Noisy copies of `images` with one fixed noise draw each.
pub fn fixed_noisy_pairs(images: &[ImagePlane], sigma: f64, seed: u64) -> Vec<(ImagePlane, ImagePlane)> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let noisy = add_awgn(
                img,
                NoiseSpec {
                    sigma,
                    seed: derive_seed(seed, 0, i as u64),
                },
            );
            (noisy, img.clone())
        })
        .collect()
}

/// Trains a freshly initialized model on clean `images`.
///
/// `validation` images get one fixed noise draw at the nominal level and are
/// denoised after every epoch. `progress` sees every epoch record.
pub fn train_universal<T: Real>(
    arch: ArchDescriptor,
    cfg: &TrainConfig,
    images: &[ImagePlane],
    validation: &[ImagePlane],
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelParams<T>, TrainLog), TrainError> {
    let model = ModelParams::init(arch, cfg.seed);
    train_model(model, cfg, images, validation, progress)
}

/// Continues training `model` with the universal recipe.
pub fn train_model<T: Real>(
    mut model: ModelParams<T>,
    cfg: &TrainConfig,
    images: &[ImagePlane],
    validation: &[ImagePlane],
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelParams<T>, TrainLog), TrainError> {
    let arch = model.arch;
    cfg.validate(&arch)?;
    if images.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_channels(&arch, images)?;
    check_channels(&arch, validation)?;
    let val = fixed_noisy_pairs(validation, cfg.sigma.nominal(), derive_seed(cfg.seed, u64::MAX, 0));
    let validate = |m: &ModelParams<T>| mean_psnr(m, &val);
    let mut batches = |epoch: usize| {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut batch_rng(cfg.seed, epoch, usize::MAX - 1));
        order
            .chunks(cfg.batch_images)
            .enumerate()
            .map(|(b, idx)| {
                let mut rng = batch_rng(cfg.seed, epoch, b);
                idx.iter()
                    .map(|&i| {
                        let crop = random_crop(&images[i], cfg.crop_size, &mut rng);
                        let sigma = cfg.sigma.draw(&mut rng);
                        noisy_sample(crop, sigma, &mut rng)
                    })
                    .collect()
            })
            .collect()
    };
    let mut after = |r: &EpochRecord, _: &ModelParams<T>| {
        progress(r);
        Ok(())
    };
    let log = run(
        &mut model,
        Plan {
            epochs: cfg.epochs,
            phases: vec![
                (0, OptimizerKind::adam(), cfg.adam_lr),
                (cfg.switch_epoch(), OptimizerKind::sgd(), cfg.sgd_lr),
            ],
            bn_mode: Mode::Train,
            batches: &mut batches,
            validate: (!val.is_empty()).then_some(&validate as &dyn Fn(&ModelParams<T>) -> Result<f64, NetError>),
            checkpoint_every: cfg.checkpoint_every,
            checkpoint_dir: cfg.checkpoint_dir.as_deref(),
            after_epoch: &mut after,
        },
    )?;
    Ok((model, log))
}

fn check_channels(arch: &ArchDescriptor, images: &[ImagePlane]) -> Result<(), TrainError> {
    match images.iter().find(|i| i.channels != arch.channels) {
        Some(i) => Err(NetError::Channels {
            model: arch.channels,
            image: i.channels,
        }
        .into()),
        None => Ok(()),
    }
}

fn adapt_plan_mode(cfg: &AdaptConfig) -> Mode {
    if cfg.freeze_batch_norm {
        Mode::Eval
    } else {
        Mode::Train
    }
}

/// Fine-tunes a copy of `model` on clean images related to the input.
/// Each epoch takes one random crop per image with fresh noise.
pub fn adapt_external<T: Real>(
    model: &ModelParams<T>,
    cfg: &AdaptConfig,
    related: &[ImagePlane],
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelParams<T>, TrainLog), TrainError> {
    cfg.validate(&model.arch)?;
    if related.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_channels(&model.arch, related)?;
    let mut adapted = model.clone();
    let mut batches = |epoch: usize| {
        let idx: Vec<usize> = (0..related.len()).collect();
        idx.chunks(cfg.batch_images)
            .enumerate()
            .map(|(b, idx)| {
                let mut rng = batch_rng(cfg.seed, epoch, b);
                idx.iter()
                    .map(|&i| noisy_sample(random_crop(&related[i], cfg.crop_size, &mut rng), cfg.sigma, &mut rng))
                    .collect()
            })
            .collect()
    };
    let mut after = |r: &EpochRecord, _: &ModelParams<T>| {
        progress(r);
        Ok(())
    };
    let log = run(
        &mut adapted,
        Plan {
            epochs: cfg.epochs,
            phases: vec![(0, OptimizerKind::adam(), cfg.learning_rate)],
            bn_mode: adapt_plan_mode(cfg),
            batches: &mut batches,
            validate: None,
            checkpoint_every: None,
            checkpoint_dir: None,
            after_epoch: &mut after,
        },
    )?;
    Ok((adapted, log))
}

/// Outcome of internal adaptation.
#[derive(Clone, Debug)]
pub struct InternalAdaptation<T> {
    pub model: ModelParams<T>,
    /// Output of the original model; the fixed training target.
    pub universal: ImagePlane,
    /// Output of the adapted model.
    pub image: ImagePlane,
    pub log: TrainLog,
}

/// FNV-1a over the bit patterns of the samples.
pub fn checksum(img: &ImagePlane) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in &img.data {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Fine-tunes a copy of `model` to map `target + noise` back to `target`,
/// where `target` is the original model's output on `noisy`, then
/// denoises `noisy` again with the adapted copy.
pub fn adapt_internal<T: Real>(
    model: &ModelParams<T>,
    noisy: &ImagePlane,
    cfg: &AdaptConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<InternalAdaptation<T>, TrainError> {
    cfg.validate(&model.arch)?;
    let target = denoise(model, noisy)?;
    let sum = checksum(&target);
    let mut adapted = model.clone();
    let mut batches = |epoch: usize| {
        (0..cfg.crops_per_epoch.div_ceil(cfg.batch_images))
            .map(|b| {
                let mut rng = batch_rng(cfg.seed, epoch, b);
                let count = cfg.batch_images.min(cfg.crops_per_epoch - b * cfg.batch_images);
                (0..count)
                    .map(|_| noisy_sample(random_crop(&target, cfg.crop_size, &mut rng), cfg.sigma, &mut rng))
                    .collect()
            })
            .collect()
    };
    let mut after = |r: &EpochRecord, _: &ModelParams<T>| {
        progress(r);
        if checksum(&target) != sum {
            return Err(TrainError::TargetChanged);
        }
        Ok(())
    };
    let log = run(
        &mut adapted,
        Plan {
            epochs: cfg.epochs,
            phases: vec![(0, OptimizerKind::adam(), cfg.learning_rate)],
            bn_mode: adapt_plan_mode(cfg),
            batches: &mut batches,
            validate: None,
            checkpoint_every: None,
            checkpoint_dir: None,
            after_epoch: &mut after,
        },
    )?;
    let image = if cfg.epochs == 0 {
        target.clone()
    } else {
        denoise(&adapted, noisy)?
    };
    Ok(InternalAdaptation {
        model: adapted,
        universal: target,
        image,
        log,
    })
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr_noisy: f64,
    pub psnr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `(name, reason)` for inputs that could not be used.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        (!self.rows.is_empty()).then(|| self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len() as f64)
    }

    /// Per-image rows, then a `mean` row. Runtimes are wall-clock and only
    /// written when `timing` is set, so that default output is reproducible.
    pub fn to_csv(&self, comments: &[String], timing: bool) -> String {
        let mut s = String::new();
        for c in comments {
            let _ = writeln!(s, "# {c}");
        }
        for (name, why) in &self.skipped {
            let _ = writeln!(s, "# skipped {name}: {why}");
        }
        s.push_str(if timing {
            "image,psnr_noisy,psnr,seconds\n"
        } else {
            "image,psnr_noisy,psnr\n"
        });
        for r in &self.rows {
            let _ = write!(s, "{},{:.6},{:.6}", r.name, r.psnr_noisy, r.psnr);
            if timing {
                let _ = write!(s, ",{:.3}", r.seconds);
            }
            s.push('\n');
        }
        if let Some(m) = self.mean_psnr() {
            let noisy = self.rows.iter().map(|r| r.psnr_noisy).sum::<f64>() / self.rows.len() as f64;
            let _ = write!(s, "mean,{noisy:.6},{m:.6}");
            if timing {
                let _ = write!(s, ",{:.3}", self.rows.iter().map(|r| r.seconds).sum::<f64>());
            }
            s.push('\n');
        }
        s
    }
}

/// Noise seed of the `index`-th evaluation image.
pub fn eval_noise_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 0, index as u64)
}

/// Adds noise to each clean image (seeded by `(seed, index)`), denoises it
/// and reports PSNR before and after.
pub fn evaluate<T: Real>(
    model: &ModelParams<T>,
    images: &[(String, ImagePlane)],
    sigma: f64,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    let mut report = EvalReport::default();
    for (i, (name, clean)) in images.iter().enumerate() {
        if clean.channels != model.arch.channels {
            report.skipped.push((name.clone(), format!("{} channels", clean.channels)));
            continue;
        }
        let noisy = add_awgn(
            clean,
            NoiseSpec {
                sigma,
                seed: eval_noise_seed(seed, i),
            },
        );
        let start = Instant::now();
        let out = denoise(model, &noisy)?;
        let seconds = start.elapsed().as_secs_f64();
        report.rows.push(EvalRow {
            name: name.clone(),
            psnr_noisy: psnr(&noisy, clean).map_err(NetError::from)?,
            psnr: psnr(&out, clean).map_err(NetError::from)?,
            seconds,
        });
    }
    Ok(report)
}

/// [`evaluate`] over image files; unreadable files are skipped and listed.
pub fn evaluate_files<T: Real>(
    model: &ModelParams<T>,
    paths: &[PathBuf],
    sigma: f64,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        match load_image(p) {
            Ok(img) => images.push((name, img)),
            Err(e) => skipped.push((name, e.to_string())),
        }
    }
    let mut report = evaluate(model, &images, sigma, seed)?;
    skipped.append(&mut report.skipped);
    report.skipped = skipped;
    Ok(report)
}
