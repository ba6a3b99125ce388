//! Alternating generator/discriminator optimization: hyperparameter presets,
//! the linear learning-rate schedule, batch assembly from paired samples,
//! single training steps, and the epoch driver with CSV logging,
//! checkpointing, and resume.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{encode_semantic_onehot, make_pairs, Dataset};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, MaskMode};
use crate::losses::{
    adversarial_g_loss, bce_with_logits, l1_loss, masked_l1, perceptual_loss, FeatureExtractor,
    LossWeights,
};
use crate::metrics::{fid, fid_features, fit_stats};
use crate::nn::{Adam, Mode, Params, Scalar};
use crate::rng::derive;

/// Known preset names, in the order they are documented.
pub const PRESETS: [&str; 3] = ["synthetic", "market-like", "fashion-like"];

/// Discriminator targets with label smoothing on (real, fake).
pub const SMOOTH_LABELS: (f64, f64) = (0.9, 0.1);

/// Training hyperparameters. [`TrainConfig::preset`] builds the three named
/// presets; a config file then overrides individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Preset the remaining defaults were drawn from.
    pub preset: String,
    pub epochs: usize,
    /// Last epoch trained at the base rate; later epochs decay linearly to 0.
    pub decay_start: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// Train the discriminator against 0.9/0.1 targets instead of 1/0.
    pub label_smoothing: bool,
    /// Ablation: drop the perceptual term from the generator objective.
    pub disable_perceptual: bool,
    /// Ablation: replace the pose-mask input channels with all-ones. The
    /// dataset's masks are then never read, including for evaluation rows.
    pub disable_mask: bool,
    /// Seed of the frozen extractor behind the perceptual loss.
    pub extractor_seed: u64,
    /// Seed of the separate frozen extractor behind the per-epoch FID row.
    pub fid_extractor_seed: u64,
    /// Training pairs drawn per epoch; 0 uses every ordered pair each epoch.
    pub pairs_per_epoch: usize,
    /// Held-out pairs for the per-epoch evaluation row (at least 2).
    pub eval_pairs: usize,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset("synthetic").expect("synthetic preset exists")
    }
}

impl TrainConfig {
    /// The named hyperparameter bundles. `market-like` and `fashion-like`
    /// mirror the published schedules (base rate 2e-4, decay start 300/500,
    /// batch 32/8, loss weights 10,15,5 / 15,1,5); `synthetic` scales the
    /// schedule down to desk size and tilts the objective toward pixel
    /// reconstruction, which dominates quality at 32x32.
    pub fn preset(name: &str) -> Result<Self> {
        let synthetic = TrainConfig {
            preset: name.to_string(),
            epochs: 30,
            decay_start: 21,
            batch_size: 8,
            learning_rate: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights {
                adversarial: 0.2,
                l1: 15.0,
                perceptual: 5.0,
            },
            label_smoothing: true,
            disable_perceptual: false,
            disable_mask: false,
            extractor_seed: 7001,
            fid_extractor_seed: 9001,
            pairs_per_epoch: 640,
            eval_pairs: 32,
            checkpoint_every: 10,
            seed: 1,
        };
        match name {
            "synthetic" => Ok(synthetic),
            "market-like" => Ok(TrainConfig {
                epochs: 600,
                decay_start: 300,
                batch_size: 32,
                learning_rate: 2e-4,
                weights: LossWeights {
                    adversarial: 10.0,
                    l1: 15.0,
                    perceptual: 5.0,
                },
                pairs_per_epoch: 0,
                eval_pairs: 64,
                checkpoint_every: 50,
                ..synthetic
            }),
            "fashion-like" => Ok(TrainConfig {
                epochs: 1000,
                decay_start: 500,
                batch_size: 8,
                learning_rate: 2e-4,
                weights: LossWeights {
                    adversarial: 15.0,
                    l1: 1.0,
                    perceptual: 5.0,
                },
                pairs_per_epoch: 0,
                eval_pairs: 64,
                checkpoint_every: 50,
                ..synthetic
            }),
            other => Err(Error::Config(format!(
                "unknown training preset {other:?}; expected one of {PRESETS:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !PRESETS.contains(&self.preset.as_str()) {
            return Err(Error::Config(format!(
                "unknown training preset {:?}; expected one of {PRESETS:?}",
                self.preset
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.decay_start > self.epochs {
            return Err(Error::Config(format!(
                "decay_start {} exceeds epochs {}",
                self.decay_start, self.epochs
            )));
        }
        for (name, w) in [
            ("adversarial", self.weights.adversarial),
            ("l1", self.weights.l1),
            ("perceptual", self.weights.perceptual),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be nonnegative, got {w}"
                )));
            }
        }
        if self.eval_pairs < 2 {
            return Err(Error::Config(format!(
                "eval_pairs must be at least 2 (FID needs two samples), got {}",
                self.eval_pairs
            )));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: the base rate through `decay_start`, then a
/// straight line hitting 0 at the final epoch. With `decay_start >= epochs-1`
/// the decay segment is empty and the rate stays at base.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} out of range for a {}-epoch schedule",
            cfg.epochs
        )));
    }
    if epoch <= cfg.decay_start {
        Ok(cfg.learning_rate)
    } else {
        let remaining = (cfg.epochs - 1 - epoch) as f64;
        let span = (cfg.epochs - 1 - cfg.decay_start) as f64;
        Ok(cfg.learning_rate * remaining / span)
    }
}

/// One assembled training batch.
///
/// `appearance` stacks source image (3), source pose mask (1), and one-hot
/// source parsing (labels); `semantic` stacks target pose mask (1) and
/// one-hot target parsing (labels).
pub struct Batch<S> {
    pub appearance: Array4<S>,
    pub semantic: Array4<S>,
    pub source_image: Array4<S>,
    pub target_image: Array4<S>,
    pub target_mask: Array4<S>,
}

/// Builds model inputs for `pairs` of (source, target) sample indices.
/// With `disable_mask` every mask channel (and the returned target mask) is
/// all-ones and the dataset's mask pixels are never read.
pub fn assemble_batch<S: Scalar>(
    ds: &Dataset,
    pairs: &[(usize, usize)],
    disable_mask: bool,
) -> Result<Batch<S>> {
    let n = pairs.len();
    let (labels, h, w) = (ds.labels, ds.height, ds.width);
    let mut appearance = Array4::<S>::zeros((n, 4 + labels, h, w));
    let mut semantic = Array4::<S>::zeros((n, 1 + labels, h, w));
    let mut source_image = Array4::<S>::zeros((n, 3, h, w));
    let mut target_image = Array4::<S>::zeros((n, 3, h, w));
    let mut target_mask = Array4::<S>::zeros((n, 1, h, w));
    let one = S::one();
    for (bi, &(si, ti)) in pairs.iter().enumerate() {
        let src = &ds.samples[si];
        let tgt = &ds.samples[ti];
        let src_onehot = encode_semantic_onehot(&src.parsing, labels, &ds.records[si].stem)?;
        let tgt_onehot = encode_semantic_onehot(&tgt.parsing, labels, &ds.records[ti].stem)?;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let sv = S::from_f64(src.image[[c, y, x]] as f64);
                    let tv = S::from_f64(tgt.image[[c, y, x]] as f64);
                    appearance[[bi, c, y, x]] = sv;
                    source_image[[bi, c, y, x]] = sv;
                    target_image[[bi, c, y, x]] = tv;
                }
                let (sm, tm) = if disable_mask {
                    (one, one)
                } else {
                    (
                        S::from_f64(src.mask[[y, x]] as f64),
                        S::from_f64(tgt.mask[[y, x]] as f64),
                    )
                };
                appearance[[bi, 3, y, x]] = sm;
                semantic[[bi, 0, y, x]] = tm;
                target_mask[[bi, 0, y, x]] = tm;
                for l in 0..labels {
                    appearance[[bi, 4 + l, y, x]] = S::from_f64(src_onehot[[l, y, x]] as f64);
                    semantic[[bi, 1 + l, y, x]] = S::from_f64(tgt_onehot[[l, y, x]] as f64);
                }
            }
        }
    }
    Ok(Batch {
        appearance,
        semantic,
        source_image,
        target_image,
        target_mask,
    })
}

/// Loss components of one training step, as logged to the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub adv_d: f64,
    pub adv_g: f64,
    pub l1: f64,
    pub perc: f64,
    pub full: f64,
}

fn ensure_finite(value: f64, term: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            step,
        })
    }
}

/// Discriminator ascent step: real pair is (source, target), fake pair is
/// (target, generated). Returns the summed discriminator loss.
pub fn discriminator_step<S: Scalar>(
    disc: &mut Discriminator<S>,
    opt_d: &mut Adam<S>,
    batch: &Batch<S>,
    fake: &Array4<S>,
    labels: (f64, f64),
    lr: f64,
    step: usize,
) -> Result<f64> {
    disc.zero_grads();
    let z_real = disc.forward_logits(&batch.source_image, &batch.target_image, Mode::Train)?;
    let (loss_real, g_real) = bce_with_logits(&z_real, labels.0);
    disc.backward_logits(&g_real);
    let z_fake = disc.forward_logits(&batch.target_image, fake, Mode::Train)?;
    let (loss_fake, g_fake) = bce_with_logits(&z_fake, labels.1);
    disc.backward_logits(&g_fake);
    let adv_d = loss_real + loss_fake;
    ensure_finite(adv_d, "adv_d", step)?;
    opt_d.step(lr, |f| disc.visit_params("d", f));
    Ok(adv_d)
}

/// Generator descent step on the weighted objective. `fake` must come from a
/// `Mode::Train` generator forward this step, so the backward cache is live.
/// Returns `(adv_g, l1, perc, full)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_step<S: Scalar>(
    gen: &mut Generator<S>,
    disc: &mut Discriminator<S>,
    opt_g: &mut Adam<S>,
    extractor: Option<&mut FeatureExtractor<S>>,
    batch: &Batch<S>,
    fake: &Array4<S>,
    weights: &LossWeights,
    lr: f64,
    step: usize,
) -> Result<(f64, f64, f64, f64)> {
    let z_fake = disc.forward_logits(&batch.target_image, fake, Mode::Train)?;
    let (adv_g, g_logits) = adversarial_g_loss(&z_fake);
    let alpha = S::from_f64(weights.adversarial);
    let mut g_image = disc.backward_logits(&g_logits.mapv(|v| v * alpha));

    let (l1, g_l1) = l1_loss(fake, &batch.target_image);
    let (perc, g_perc) = match extractor {
        Some(ext) => perceptual_loss(ext, fake, &batch.target_image),
        None => (0.0, Array4::zeros(fake.dim())),
    };
    let full = weights.combine(adv_g, l1, perc);
    ensure_finite(adv_g, "adv_g", step)?;
    ensure_finite(l1, "l1", step)?;
    ensure_finite(perc, "perc", step)?;
    ensure_finite(full, "full", step)?;

    let beta = S::from_f64(weights.l1);
    let gamma = S::from_f64(weights.perceptual);
    ndarray::Zip::from(&mut g_image)
        .and(&g_l1)
        .and(&g_perc)
        .for_each(|t, &a, &b| *t = *t + beta * a + gamma * b);

    gen.zero_grads();
    gen.backward(&g_image);
    opt_g.step(lr, |f| gen.visit_params("g", f));
    Ok((adv_g, l1, perc, full))
}

/// One alternating update: discriminator first, then the generator against
/// the updated discriminator. One generator forward serves both halves.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Scalar>(
    gen: &mut Generator<S>,
    disc: &mut Discriminator<S>,
    opt_g: &mut Adam<S>,
    opt_d: &mut Adam<S>,
    extractor: Option<&mut FeatureExtractor<S>>,
    batch: &Batch<S>,
    weights: &LossWeights,
    label_smoothing: bool,
    lr: f64,
    step: usize,
) -> Result<StepRecord> {
    let fake = gen.forward(&batch.appearance, &batch.semantic, MaskMode::Learned, Mode::Train)?;
    let labels = if label_smoothing {
        SMOOTH_LABELS
    } else {
        (1.0, 0.0)
    };
    let adv_d = discriminator_step(disc, opt_d, batch, &fake, labels, lr, step)?;
    let (adv_g, l1, perc, full) =
        generator_step(gen, disc, opt_g, extractor, batch, &fake, weights, lr, step)?;
    Ok(StepRecord {
        adv_d,
        adv_g,
        l1,
        perc,
        full,
    })
}

/// One `epoch,masked_l1,fid` evaluation row.
#[derive(Debug, Clone, Copy)]
pub struct EvalRecord {
    pub epoch: usize,
    pub masked_l1: f64,
    pub fid: f64,
}

/// Everything [`train`] needs. `config_echo` is the resolved run-config text
/// embedded into checkpoints; `resume` continues from a saved checkpoint.
pub struct TrainSession<'a> {
    pub train: &'a TrainConfig,
    pub generator: &'a GeneratorConfig,
    pub discriminator: &'a DiscriminatorConfig,
    pub dataset: &'a Dataset,
    pub eval_dataset: Option<&'a Dataset>,
    pub out_dir: &'a Path,
    pub config_echo: &'a str,
    pub resume: Option<&'a Path>,
}

pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub eval_csv: PathBuf,
    pub steps: usize,
    pub last_step: Option<StepRecord>,
    pub first_eval: Option<EvalRecord>,
    pub last_eval: Option<EvalRecord>,
}

fn save_state<S: Scalar>(
    path: &Path,
    epochs_done: usize,
    step: usize,
    echo: &str,
    gen: &mut Generator<S>,
    disc: &mut Discriminator<S>,
    opt_g: &Adam<S>,
    opt_d: &Adam<S>,
) -> Result<()> {
    let mut ckpt = Checkpoint::new(CheckpointMeta::new(epochs_done, step, echo));
    ckpt.pack_model("g", gen);
    ckpt.pack_model("d", disc);
    ckpt.pack_adam("adam_g", opt_g);
    ckpt.pack_adam("adam_d", opt_d);
    ckpt.save(path)
}

fn eval_row<S: Scalar>(
    gen: &mut Generator<S>,
    fid_ext: &mut FeatureExtractor<S>,
    ds: &Dataset,
    probe: &[(usize, usize)],
    disable_mask: bool,
    epoch: usize,
) -> Result<EvalRecord> {
    let batch = assemble_batch::<S>(ds, probe, disable_mask)?;
    let fake = gen.generate(&batch.appearance, &batch.semantic)?;
    let masked = masked_l1(&fake, &batch.target_image, &batch.target_mask);
    let gen_stats = fit_stats(&fid_features(fid_ext, &fake))?;
    let real_stats = fit_stats(&fid_features(fid_ext, &batch.target_image))?;
    Ok(EvalRecord {
        epoch,
        masked_l1: masked,
        fid: fid(&gen_stats, &real_stats)?,
    })
}

/// Runs the full schedule: per-epoch pair shuffling, alternating updates,
/// per-step loss rows in `metrics.csv`, per-epoch held-out rows in
/// `eval.csv`, cadence checkpoints, and a final checkpoint. Resuming from a
/// checkpoint continues the exact trajectory of an uninterrupted run.
pub fn train<S: Scalar>(s: &TrainSession<'_>) -> Result<TrainReport> {
    let cfg = s.train;
    cfg.validate()?;
    if s.dataset.labels != s.generator.labels {
        return Err(Error::Config(format!(
            "dataset has {} semantic labels but the generator is configured for {}",
            s.dataset.labels, s.generator.labels
        )));
    }
    let all_pairs = make_pairs(s.dataset)?;
    fs::create_dir_all(s.out_dir).map_err(|e| Error::io(s.out_dir, e))?;

    let mut gen = Generator::<S>::new(s.generator, &mut derive(cfg.seed, "init/generator"))?;
    let mut disc =
        Discriminator::<S>::new(s.discriminator, &mut derive(cfg.seed, "init/discriminator"))?;
    let mut opt_g = Adam::<S>::new(cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::<S>::new(cfg.beta1, cfg.beta2);
    let mut extractor =
        (!cfg.disable_perceptual).then(|| FeatureExtractor::<S>::new(3, cfg.extractor_seed));

    let mut start_epoch = 0usize;
    let mut step = 0usize;
    if let Some(path) = s.resume {
        let ckpt = Checkpoint::load(path)?;
        ckpt.unpack_model("g", &mut gen)?;
        ckpt.unpack_model("d", &mut disc)?;
        ckpt.unpack_adam("adam_g", &mut opt_g)?;
        ckpt.unpack_adam("adam_d", &mut opt_d)?;
        start_epoch = ckpt.meta.epoch;
        step = ckpt.meta.step;
        if start_epoch >= cfg.epochs {
            return Err(Error::Config(format!(
                "checkpoint {} already covers {} epochs of a {}-epoch schedule",
                path.display(),
                start_epoch,
                cfg.epochs
            )));
        }
        log::info!(
            "resuming from {} at epoch {start_epoch}, step {step}",
            path.display()
        );
    }

    let probe = match s.eval_dataset {
        Some(ds) => {
            let mut pairs = make_pairs(ds)?;
            // Seeded subsample so the probe spans identities instead of
            // taking whichever identity enumerates first.
            pairs.shuffle(&mut derive(cfg.seed, "eval/probe"));
            pairs.truncate(cfg.eval_pairs);
            if pairs.len() < 2 {
                return Err(Error::Data(format!(
                    "evaluation split provides {} pair(s); the per-epoch FID row needs at least 2",
                    pairs.len()
                )));
            }
            Some((ds, pairs))
        }
        None => None,
    };
    let mut fid_ext = probe
        .as_ref()
        .map(|_| FeatureExtractor::<S>::new(3, cfg.fid_extractor_seed));

    let metrics_csv = s.out_dir.join("metrics.csv");
    let eval_csv = s.out_dir.join("eval.csv");
    let mut mlog = BufWriter::new(
        fs::File::create(&metrics_csv).map_err(|e| Error::io(&metrics_csv, e))?,
    );
    writeln!(mlog, "step,epoch,lr,adv_d,adv_g,l1,perc,full").map_err(|e| Error::io(&metrics_csv, e))?;
    let mut elog =
        BufWriter::new(fs::File::create(&eval_csv).map_err(|e| Error::io(&eval_csv, e))?);
    writeln!(elog, "epoch,masked_l1,fid").map_err(|e| Error::io(&eval_csv, e))?;

    let mut last_step = None;
    let mut first_eval = None;
    let mut last_eval = None;

    for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(cfg, epoch)?;
        let mut order = all_pairs.clone();
        order.shuffle(&mut derive(cfg.seed, &format!("pairs/{epoch}")));
        if cfg.pairs_per_epoch > 0 && order.len() > cfg.pairs_per_epoch {
            order.truncate(cfg.pairs_per_epoch);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble_batch::<S>(s.dataset, chunk, cfg.disable_mask)?;
            step += 1;
            let rec = train_step(
                &mut gen,
                &mut disc,
                &mut opt_g,
                &mut opt_d,
                extractor.as_mut(),
                &batch,
                &cfg.weights,
                cfg.label_smoothing,
                lr,
                step,
            )?;
            writeln!(
                mlog,
                "{step},{epoch},{lr},{},{},{},{},{}",
                rec.adv_d, rec.adv_g, rec.l1, rec.perc, rec.full
            )
            .map_err(|e| Error::io(&metrics_csv, e))?;
            last_step = Some(rec);
        }

        if let Some((ds, pairs)) = &probe {
            let ext = fid_ext.as_mut().expect("probe implies extractor");
            let row = eval_row(&mut gen, ext, ds, pairs, cfg.disable_mask, epoch)?;
            writeln!(elog, "{},{},{}", row.epoch, row.masked_l1, row.fid)
                .map_err(|e| Error::io(&eval_csv, e))?;
            if first_eval.is_none() {
                first_eval = Some(row);
            }
            last_eval = Some(row);
        }

        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
            let path = s.out_dir.join(format!("checkpoint_epoch{done:04}.ckpt"));
            save_state(
                &path,
                done,
                step,
                s.config_echo,
                &mut gen,
                &mut disc,
                &opt_g,
                &opt_d,
            )?;
            log::info!("saved {}", path.display());
        }
    }

    let final_checkpoint = s.out_dir.join("checkpoint_final.ckpt");
    save_state(
        &final_checkpoint,
        cfg.epochs,
        step,
        s.config_echo,
        &mut gen,
        &mut disc,
        &opt_g,
        &opt_d,
    )?;
    mlog.flush().map_err(|e| Error::io(&metrics_csv, e))?;
    elog.flush().map_err(|e| Error::io(&eval_csv, e))?;

    Ok(TrainReport {
        final_checkpoint,
        metrics_csv,
        eval_csv,
        steps: step,
        last_step,
        first_eval,
        last_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, synth_generate, SynthConfig};

    fn tiny_synth(dir: &Path) -> (Dataset, Dataset) {
        let cfg = SynthConfig {
            train_identities: 2,
            test_identities: 1,
            poses_per_identity: 2,
            height: 32,
            width: 32,
            labels: 18,
            seed: 7,
            background_variation: 0.25,
        };
        synth_generate(&cfg, dir).unwrap();
        (
            load_dataset(dir, "train").unwrap(),
            load_dataset(dir, "test").unwrap(),
        )
    }

    fn tiny_models<S: Scalar>(
        labels: usize,
        seed: u64,
    ) -> (Generator<S>, Discriminator<S>, Adam<S>, Adam<S>) {
        let gcfg = GeneratorConfig {
            labels,
            base_channels: 4,
            blocks: 1,
            norm: "instance".into(),
        };
        let dcfg = DiscriminatorConfig {
            base_channels: 4,
            residual_blocks: 1,
            norm: "instance".into(),
        };
        let gen = Generator::new(&gcfg, &mut derive(seed, "init/generator")).unwrap();
        let disc = Discriminator::new(&dcfg, &mut derive(seed, "init/discriminator")).unwrap();
        (gen, disc, Adam::new(0.5, 0.999), Adam::new(0.5, 0.999))
    }

    #[test]
    fn presets_echo_documented_values() {
        let market = TrainConfig::preset("market-like").unwrap();
        assert_eq!(market.batch_size, 32);
        assert_eq!(market.epochs, 600);
        assert_eq!(market.decay_start, 300);
        assert_eq!(market.learning_rate, 2e-4);
        assert_eq!(market.beta1, 0.5);
        assert_eq!(market.beta2, 0.999);
        assert_eq!(
            (
                market.weights.adversarial,
                market.weights.l1,
                market.weights.perceptual
            ),
            (10.0, 15.0, 5.0)
        );

        let fashion = TrainConfig::preset("fashion-like").unwrap();
        assert_eq!(fashion.batch_size, 8);
        assert_eq!(fashion.epochs, 1000);
        assert_eq!(fashion.decay_start, 500);
        assert_eq!(
            (
                fashion.weights.adversarial,
                fashion.weights.l1,
                fashion.weights.perceptual
            ),
            (15.0, 1.0, 5.0)
        );

        let synth = TrainConfig::default();
        assert_eq!(synth.preset, "synthetic");
        assert_eq!(synth.epochs, 30);
        assert_eq!(synth.decay_start, 21);
        synth.validate().unwrap();

        match TrainConfig::preset("imagenet") {
            Err(Error::Config(msg)) => assert!(msg.contains("imagenet")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let market = TrainConfig::preset("market-like").unwrap();
        assert_eq!(lr_schedule(&market, 0).unwrap(), 2e-4);
        assert_eq!(lr_schedule(&market, 300).unwrap(), 2e-4);
        assert_eq!(lr_schedule(&market, 599).unwrap(), 0.0);

        let mut prev = f64::INFINITY;
        for e in 0..market.epochs {
            let lr = lr_schedule(&market, e).unwrap();
            assert!(lr <= prev, "schedule increased at epoch {e}");
            prev = lr;
        }

        // Exact midpoint of the synthetic decay segment: half the base rate.
        let synth = TrainConfig::default();
        let mid = (synth.decay_start + synth.epochs - 1) / 2;
        assert!((lr_schedule(&synth, mid).unwrap() - synth.learning_rate / 2.0).abs() < 1e-18);

        match lr_schedule(&synth, synth.epochs) {
            Err(Error::Config(_)) => {}
            other => panic!("expected out-of-range error, got {other:?}"),
        }

        // Empty decay segment: constant at base, final epoch included.
        let flat = TrainConfig {
            decay_start: 4,
            epochs: 4,
            ..TrainConfig::default()
        };
        for e in 0..4 {
            assert_eq!(lr_schedule(&flat, e).unwrap(), flat.learning_rate);
        }
    }

    #[test]
    fn assembled_batch_has_expected_channels() {
        let dir = tempfile::tempdir().unwrap();
        let (train_ds, _) = tiny_synth(dir.path());
        let pairs = make_pairs(&train_ds).unwrap();
        let batch = assemble_batch::<f32>(&train_ds, &pairs[..2], false).unwrap();

        assert_eq!(batch.appearance.dim(), (2, 4 + 18, 32, 32));
        assert_eq!(batch.semantic.dim(), (2, 1 + 18, 32, 32));
        assert_eq!(batch.source_image.dim(), (2, 3, 32, 32));
        assert_eq!(batch.target_image.dim(), (2, 3, 32, 32));
        assert_eq!(batch.target_mask.dim(), (2, 1, 32, 32));

        let (si, ti) = pairs[0];
        for y in 0..32 {
            for x in 0..32 {
                // One-hot channels sum to exactly 1 at every position.
                let sum_app: f32 = (0..18).map(|l| batch.appearance[[0, 4 + l, y, x]]).sum();
                let sum_sem: f32 = (0..18).map(|l| batch.semantic[[0, 1 + l, y, x]]).sum();
                assert_eq!(sum_app, 1.0);
                assert_eq!(sum_sem, 1.0);
                // Mask channels mirror the stored masks.
                assert_eq!(
                    batch.appearance[[0, 3, y, x]],
                    train_ds.samples[si].mask[[y, x]] as f32
                );
                assert_eq!(
                    batch.semantic[[0, 0, y, x]],
                    train_ds.samples[ti].mask[[y, x]] as f32
                );
                assert_eq!(
                    batch.target_mask[[0, 0, y, x]],
                    train_ds.samples[ti].mask[[y, x]] as f32
                );
            }
        }
    }

    #[test]
    fn disable_mask_never_reads_mask_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (train_ds, _) = tiny_synth(dir.path());
        let pairs = make_pairs(&train_ds).unwrap();

        // Poison every mask; with the ablation on, nothing may change.
        let mut poisoned = load_dataset(dir.path(), "train").unwrap();
        for s in &mut poisoned.samples {
            s.mask.fill(0);
        }

        let clean = assemble_batch::<f32>(&train_ds, &pairs[..2], true).unwrap();
        let dirty = assemble_batch::<f32>(&poisoned, &pairs[..2], true).unwrap();
        assert_eq!(clean.appearance, dirty.appearance);
        assert_eq!(clean.semantic, dirty.semantic);
        assert_eq!(clean.target_mask, dirty.target_mask);
        assert!(clean.target_mask.iter().all(|&v| v == 1.0));
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(clean.appearance[[0, 3, y, x]], 1.0);
                assert_eq!(clean.semantic[[0, 0, y, x]], 1.0);
            }
        }

        // End to end: identical loss records on poisoned data.
        let weights = TrainConfig::default().weights;
        let mut records = Vec::new();
        for ds in [&train_ds, &poisoned] {
            let (mut gen, mut disc, mut og, mut od) = tiny_models::<f32>(18, 5);
            let batch = assemble_batch::<f32>(ds, &pairs[..2], true).unwrap();
            let rec = train_step(
                &mut gen, &mut disc, &mut og, &mut od, None, &batch, &weights, true, 1e-4, 1,
            )
            .unwrap();
            records.push(rec);
        }
        assert_eq!(records[0], records[1]);
    }

    #[test]
    fn train_step_is_deterministic_and_ablates_perceptual() {
        let dir = tempfile::tempdir().unwrap();
        let (train_ds, _) = tiny_synth(dir.path());
        let pairs = make_pairs(&train_ds).unwrap();
        let batch = assemble_batch::<f32>(&train_ds, &pairs[..2], false).unwrap();
        let weights = TrainConfig::default().weights;

        let mut records = Vec::new();
        for _ in 0..2 {
            let (mut gen, mut disc, mut og, mut od) = tiny_models::<f32>(18, 9);
            let mut ext = FeatureExtractor::<f32>::new(3, 7001);
            let rec = train_step(
                &mut gen,
                &mut disc,
                &mut og,
                &mut od,
                Some(&mut ext),
                &batch,
                &weights,
                true,
                1e-4,
                1,
            )
            .unwrap();
            records.push(rec);
        }
        assert_eq!(records[0], records[1]);
        assert!(records[0].perc > 0.0);
        assert!(records[0].full.is_finite());

        let (mut gen, mut disc, mut og, mut od) = tiny_models::<f32>(18, 9);
        let rec = train_step(
            &mut gen, &mut disc, &mut og, &mut od, None, &batch, &weights, true, 1e-4, 1,
        )
        .unwrap();
        assert_eq!(rec.perc, 0.0);
        assert_eq!(rec.adv_d, records[0].adv_d);
    }

    #[test]
    fn tiny_lr_generator_step_does_not_increase_full_loss() {
        let dir = tempfile::tempdir().unwrap();
        let (train_ds, _) = tiny_synth(dir.path());
        let pairs = make_pairs(&train_ds).unwrap();
        let batch = assemble_batch::<f64>(&train_ds, &pairs[..2], false).unwrap();
        let weights = TrainConfig::default().weights;
        let (mut gen, mut disc, mut og, _) = tiny_models::<f64>(18, 13);
        let mut ext = FeatureExtractor::<f64>::new(3, 7001);

        let mut fulls = Vec::new();
        for step in 1..=2 {
            let fake = gen
                .forward(&batch.appearance, &batch.semantic, MaskMode::Learned, Mode::Train)
                .unwrap();
            let (_, _, _, full) = generator_step(
                &mut gen,
                &mut disc,
                &mut og,
                Some(&mut ext),
                &batch,
                &fake,
                &weights,
                1e-7,
                step,
            )
            .unwrap();
            fulls.push(full);
        }
        assert!(
            fulls[1] <= fulls[0] + 1e-10,
            "full loss rose from {} to {} under a tiny step",
            fulls[0],
            fulls[1]
        );
    }

    #[test]
    fn nonfinite_losses_are_reported_with_their_term() {
        let dir = tempfile::tempdir().unwrap();
        let (train_ds, _) = tiny_synth(dir.path());
        let pairs = make_pairs(&train_ds).unwrap();
        let batch = assemble_batch::<f32>(&train_ds, &pairs[..2], false).unwrap();
        let weights = TrainConfig::default().weights;
        let (mut gen, mut disc, mut og, mut od) = tiny_models::<f32>(18, 17);
        gen.visit_params("g", &mut |slot| slot.value.fill(f32::NAN));
        match train_step(
            &mut gen, &mut disc, &mut og, &mut od, None, &batch, &weights, true, 1e-4, 42,
        ) {
            Err(Error::NonFinite { term, step }) => {
                assert_eq!(step, 42);
                assert!(!term.is_empty());
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn training_runs_resumes_and_reproduces() {
        let data_dir = tempfile::tempdir().unwrap();
        let (train_ds, test_ds) = tiny_synth(data_dir.path());

        let gcfg = GeneratorConfig {
            labels: 18,
            base_channels: 4,
            blocks: 1,
            norm: "instance".into(),
        };
        let dcfg = DiscriminatorConfig {
            base_channels: 4,
            residual_blocks: 1,
            norm: "instance".into(),
        };
        let tcfg = TrainConfig {
            epochs: 2,
            decay_start: 1,
            batch_size: 2,
            pairs_per_epoch: 0,
            eval_pairs: 2,
            checkpoint_every: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let echo = "preset = \"synthetic\"\n";

        let run = |out: &Path, resume: Option<&Path>| {
            train::<f32>(&TrainSession {
                train: &tcfg,
                generator: &gcfg,
                discriminator: &dcfg,
                dataset: &train_ds,
                eval_dataset: Some(&test_ds),
                out_dir: out,
                config_echo: echo,
                resume,
            })
            .unwrap()
        };

        let dir_a = tempfile::tempdir().unwrap();
        let report_a = run(dir_a.path(), None);
        assert_eq!(report_a.steps, 4); // 4 pairs / batch 2 = 2 steps x 2 epochs
        assert!(report_a.final_checkpoint.exists());
        let metrics_a = fs::read_to_string(&report_a.metrics_csv).unwrap();
        let eval_a = fs::read_to_string(&report_a.eval_csv).unwrap();
        assert!(metrics_a.starts_with("step,epoch,lr,adv_d,adv_g,l1,perc,full\n"));
        assert!(eval_a.starts_with("epoch,masked_l1,fid\n"));
        assert_eq!(metrics_a.lines().count(), 1 + 4);
        assert_eq!(eval_a.lines().count(), 1 + 2);
        assert!(report_a.last_eval.unwrap().fid.is_finite());

        // Bit-identical rerun.
        let dir_b = tempfile::tempdir().unwrap();
        let report_b = run(dir_b.path(), None);
        assert_eq!(metrics_a, fs::read_to_string(&report_b.metrics_csv).unwrap());
        assert_eq!(eval_a, fs::read_to_string(&report_b.eval_csv).unwrap());
        assert_eq!(
            fs::read(&report_a.final_checkpoint).unwrap(),
            fs::read(&report_b.final_checkpoint).unwrap()
        );

        // Resume from the mid-run checkpoint and land on the same trajectory.
        let mid = dir_a.path().join("checkpoint_epoch0001.ckpt");
        assert!(mid.exists());
        let dir_c = tempfile::tempdir().unwrap();
        let report_c = run(dir_c.path(), Some(&mid));
        assert_eq!(report_c.steps, 4);
        assert_eq!(
            fs::read(&report_a.final_checkpoint).unwrap(),
            fs::read(&report_c.final_checkpoint).unwrap()
        );
        let metrics_c = fs::read_to_string(&report_c.metrics_csv).unwrap();
        let tail_a: Vec<&str> = metrics_a.lines().skip(3).collect(); // header + epoch-0 rows
        let tail_c: Vec<&str> = metrics_c.lines().skip(1).collect();
        assert_eq!(tail_a, tail_c);
        let eval_c = fs::read_to_string(&report_c.eval_csv).unwrap();
        let eval_tail_a: Vec<&str> = eval_a.lines().skip(2).collect();
        let eval_tail_c: Vec<&str> = eval_c.lines().skip(1).collect();
        assert_eq!(eval_tail_a, eval_tail_c);
    }
}
