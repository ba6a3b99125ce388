//! Command-line entry point: dataset synthesis, training, generation,
//! quality evaluation, and the re-identification experiments, all driven by
//! one layered configuration with a resolved echo per run.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::{concatenate, Array3, Array4, Axis};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{self, RunConfig};
use crate::data::io::save_image;
use crate::data::{load_dataset, make_pairs, synth_generate, Dataset};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::FeatureExtractor;
use crate::metrics::{fid, fid_features, fit_stats, lpips, mask_lpips};
use crate::reid::{augment, reid_protocol, train_ide, ProtocolSummary};
use crate::rng::derive;
use crate::trainer::{self, TrainSession};

#[derive(Debug, Parser)]
#[command(
    name = "san",
    about = "Pose-guided person image generation: synthesis, training, evaluation, re-identification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,

    /// Run configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set train.epochs=5. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Output directory of this command (overrides the configured path).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Seed override for this command's random stream.
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Cmd {
    /// Render the synthetic person dataset.
    Synth,
    /// Train the generator and discriminator.
    Train,
    /// Write side-by-side source/target/output image sheets.
    Generate,
    /// Score generated images: FID, LPIPS, and masked LPIPS.
    Evaluate,
    /// Train the identity classifier and save its checkpoint.
    ReidTrain,
    /// Run the multi-seed retrieval protocol.
    ReidEval,
    /// Write an augmented copy of the dataset using the generator.
    Augment,
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Applies `--out` and `--seed` to the fields the command actually reads.
fn apply_overrides(
    cfg: &mut RunConfig,
    cmd: Cmd,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    if let Some(out) = out {
        let out = out.to_string_lossy().into_owned();
        match cmd {
            Cmd::Synth => cfg.paths.data = out,
            Cmd::Train => cfg.paths.run = out,
            Cmd::Augment => cfg.paths.augmented = out,
            Cmd::Generate | Cmd::Evaluate | Cmd::ReidTrain | Cmd::ReidEval => {
                cfg.paths.report = out
            }
        }
    }
    if let Some(seed) = seed {
        match cmd {
            Cmd::Synth => cfg.synth.seed = seed,
            Cmd::Train => cfg.train.seed = seed,
            Cmd::Evaluate => cfg.metrics.extractor_seed = seed,
            Cmd::ReidTrain | Cmd::ReidEval => cfg.reid.seed = seed,
            Cmd::Augment => cfg.protocol.augment_seed = seed,
            Cmd::Generate => {
                return Err(Error::Config(
                    "generation is deterministic given the checkpoint; --seed has no effect here"
                        .into(),
                ))
            }
        }
    }
    Ok(())
}

/// The directory a command writes its artifacts (and config echo) into.
fn out_dir(cfg: &RunConfig, cmd: Cmd) -> PathBuf {
    PathBuf::from(match cmd {
        Cmd::Synth => &cfg.paths.data,
        Cmd::Train => &cfg.paths.run,
        Cmd::Augment => &cfg.paths.augmented,
        Cmd::Generate | Cmd::Evaluate | Cmd::ReidTrain | Cmd::ReidEval => &cfg.paths.report,
    })
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.sets)?;
    apply_overrides(&mut cfg, cli.command, cli.out.as_deref(), cli.seed)?;
    let out = out_dir(&cfg, cli.command);
    config::write_echo(&cfg, &out)?;
    match cli.command {
        Cmd::Synth => cmd_synth(&cfg),
        Cmd::Train => cmd_train(&cfg),
        Cmd::Generate => cmd_generate(&cfg, &out),
        Cmd::Evaluate => cmd_evaluate(&cfg, &out),
        Cmd::ReidTrain => cmd_reid_train(&cfg, &out),
        Cmd::ReidEval => cmd_reid_eval(&cfg, &out),
        Cmd::Augment => cmd_augment(&cfg, &out),
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    synth_generate(&cfg.synth, Path::new(&cfg.paths.data))?;
    println!(
        "dataset written to {} ({} train / {} test identities, {} poses each)",
        cfg.paths.data,
        cfg.synth.train_identities,
        cfg.synth.test_identities,
        cfg.synth.poses_per_identity
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = Path::new(&cfg.paths.data);
    let train_ds = load_dataset(data, "train")?;
    let eval_ds = load_dataset(data, "test")?;
    let echo = config::to_toml(cfg)?;
    let session = TrainSession {
        train: &cfg.train,
        generator: &cfg.generator,
        discriminator: &cfg.discriminator,
        dataset: &train_ds,
        eval_dataset: Some(&eval_ds),
        out_dir: Path::new(&cfg.paths.run),
        config_echo: &echo,
        resume: None,
    };
    let report = trainer::train::<f32>(&session)?;
    println!(
        "trained {} steps; final checkpoint {}",
        report.steps,
        report.final_checkpoint.display()
    );
    if let (Some(first), Some(last)) = (&report.first_eval, &report.last_eval) {
        println!("held-out masked L1: {} -> {}", first.masked_l1, last.masked_l1);
        println!("held-out FID: {} -> {}", first.fid, last.fid);
    }
    Ok(())
}

/// Rebuilds the generator described by the configuration and loads the
/// checkpoint's weights into it.
fn load_generator(cfg: &RunConfig) -> Result<Generator<f32>> {
    let path = cfg.paths.checkpoint_path();
    let ckpt = Checkpoint::load(&path)?;
    let mut gen = Generator::new(&cfg.generator, &mut derive(0, "cli/load"))?;
    ckpt.unpack_model("g", &mut gen)?;
    Ok(gen)
}

/// Runs the generator over `pairs` in bounded chunks. Returns
/// (generated, source, target, target mask), each stacked along axis 0.
fn synthesize(
    gen: &mut Generator<f32>,
    ds: &Dataset,
    pairs: &[(usize, usize)],
) -> Result<(Array4<f32>, Array4<f32>, Array4<f32>, Array4<f32>)> {
    let mut fake = Vec::new();
    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut mask = Vec::new();
    for chunk in pairs.chunks(8) {
        let batch = trainer::assemble_batch::<f32>(ds, chunk, false)?;
        fake.push(gen.generate(&batch.appearance, &batch.semantic)?);
        source.push(batch.source_image);
        target.push(batch.target_image);
        mask.push(batch.target_mask);
    }
    let stack = |parts: &[Array4<f32>]| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        concatenate(Axis(0), &views).expect("chunks share trailing dimensions")
    };
    Ok((stack(&fake), stack(&source), stack(&target), stack(&mask)))
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(Path::new(&cfg.paths.data), &cfg.generate.split)?;
    let mut pairs = make_pairs(&ds)?;
    pairs.truncate(cfg.generate.pairs);
    let mut gen = load_generator(cfg)?;
    let (fake, source, target, _) = synthesize(&mut gen, &ds, &pairs)?;
    let (h, w) = (ds.height, ds.width);
    for (i, &(s, t)) in pairs.iter().enumerate() {
        let mut sheet = Array3::<f32>::zeros((3, h, 3 * w));
        for (panel, img) in [&source, &target, &fake].iter().enumerate() {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        sheet[[c, y, panel * w + x]] = img[[i, c, y, x]];
                    }
                }
            }
        }
        let name = format!(
            "sheet_{i:03}_{}_to_{}.png",
            ds.records[s].stem, ds.records[t].stem
        );
        save_image(&out.join(name), &sheet)?;
    }
    println!(
        "{} sheets (source | target | output) written to {}",
        pairs.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluateReport {
    fid: f64,
    lpips_mean: f64,
    mask_lpips_mean: f64,
    n_pairs: usize,
    extractor_seed: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialize report: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(Path::new(&cfg.paths.data), "test")?;
    let mut pairs = make_pairs(&ds)?;
    pairs.truncate(cfg.metrics.pairs);
    let mut gen = load_generator(cfg)?;
    let (fake, _, target, mask) = synthesize(&mut gen, &ds, &pairs)?;

    let mut ext = FeatureExtractor::<f32>::new(3, cfg.metrics.extractor_seed);
    let fake_stats = fit_stats(&fid_features(&mut ext, &fake))?;
    let real_stats = fit_stats(&fid_features(&mut ext, &target))?;
    let report = EvaluateReport {
        fid: fid(&fake_stats, &real_stats)?,
        lpips_mean: mean(&lpips(&mut ext, &fake, &target)?),
        mask_lpips_mean: mean(&mask_lpips(&mut ext, &fake, &target, &mask)?),
        n_pairs: pairs.len(),
        extractor_seed: cfg.metrics.extractor_seed,
    };
    let path = out.join("evaluate.json");
    write_json(&path, &report)?;
    println!(
        "fid {} | lpips {} | masked lpips {} over {} pairs -> {}",
        report.fid,
        report.lpips_mean,
        report.mask_lpips_mean,
        report.n_pairs,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReidTrainReport {
    accuracy: f64,
    identities: usize,
    embed_dim: usize,
    checkpoint: String,
}

fn cmd_reid_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(Path::new(&cfg.paths.data), "train")?;
    let (mut model, accuracy) = train_ide::<f32>(&ds, &cfg.reid)?;
    let ckpt_path = out.join("reid.ckpt");
    let mut ckpt = Checkpoint::new(CheckpointMeta::new(cfg.reid.epochs, 0, config::to_toml(cfg)?));
    ckpt.pack_model("reid", &mut model);
    ckpt.save(&ckpt_path)?;
    let report = ReidTrainReport {
        accuracy,
        identities: model.classes(),
        embed_dim: model.embed_dim(),
        checkpoint: ckpt_path.to_string_lossy().into_owned(),
    };
    let path = out.join("reid_train.json");
    write_json(&path, &report)?;
    println!(
        "identity classifier: train accuracy {} over {} identities -> {}",
        report.accuracy,
        report.identities,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReidEvalReport<'a> {
    alpha: usize,
    seeds: &'a [u64],
    #[serde(flatten)]
    summary: &'a ProtocolSummary,
}

fn cmd_reid_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = Path::new(&cfg.paths.data);
    let train_ds = load_dataset(data, "train")?;
    let test_ds = load_dataset(data, "test")?;
    let summary = reid_protocol::<f32>(
        &train_ds,
        &test_ds,
        &cfg.reid,
        &cfg.protocol.metric,
        &cfg.protocol.seeds,
    )?;
    let path = out.join("reid_eval.json");
    write_json(
        &path,
        &ReidEvalReport {
            alpha: cfg.protocol.alpha,
            seeds: &cfg.protocol.seeds,
            summary: &summary,
        },
    )?;
    println!(
        "{} retrieval over {} seeds: rank-1 {} | mAP {} -> {}",
        summary.metric_kind,
        cfg.protocol.seeds.len(),
        summary.rank1,
        summary.map,
        path.display()
    );
    Ok(())
}

fn cmd_augment(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.paths.augmented == cfg.paths.data {
        return Err(Error::Config(
            "paths.augmented must differ from paths.data; augmentation never rewrites its input"
                .into(),
        ));
    }
    let data = Path::new(&cfg.paths.data);
    let train_ds = load_dataset(data, "train")?;
    let test_ds = load_dataset(data, "test")?;
    let mut gen = load_generator(cfg)?;
    let manifest = augment(
        &mut gen,
        &train_ds,
        &out.join("train"),
        cfg.protocol.alpha,
        cfg.protocol.augment_seed,
    )?;
    // The test split is copied verbatim: factor 1 never synthesizes.
    augment(&mut gen, &test_ds, &out.join("test"), 1, cfg.protocol.augment_seed)?;
    let synthetic = manifest.records.iter().filter(|r| r.synthetic).count();
    println!(
        "augmented dataset written to {}: {} train records ({} synthetic), {} test records",
        out.display(),
        manifest.records.len(),
        synthetic,
        test_ds.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_override_targets_the_command_output() {
        for (cmd, field) in [
            (Cmd::Synth, "data"),
            (Cmd::Train, "run"),
            (Cmd::Generate, "report"),
            (Cmd::Evaluate, "report"),
            (Cmd::ReidTrain, "report"),
            (Cmd::ReidEval, "report"),
            (Cmd::Augment, "augmented"),
        ] {
            let mut cfg = RunConfig::default();
            apply_overrides(&mut cfg, cmd, Some(Path::new("x")), None).unwrap();
            let got = match field {
                "data" => &cfg.paths.data,
                "run" => &cfg.paths.run,
                "augmented" => &cfg.paths.augmented,
                _ => &cfg.paths.report,
            };
            assert_eq!(got, "x", "{cmd:?}");
            assert_eq!(out_dir(&cfg, cmd), Path::new("x"), "{cmd:?}");
        }
    }

    #[test]
    fn seed_override_targets_the_command_stream() {
        let mut cfg = RunConfig::default();
        apply_overrides(&mut cfg, Cmd::Synth, None, Some(7)).unwrap();
        assert_eq!(cfg.synth.seed, 7);
        apply_overrides(&mut cfg, Cmd::Train, None, Some(8)).unwrap();
        assert_eq!(cfg.train.seed, 8);
        apply_overrides(&mut cfg, Cmd::Evaluate, None, Some(9)).unwrap();
        assert_eq!(cfg.metrics.extractor_seed, 9);
        apply_overrides(&mut cfg, Cmd::ReidTrain, None, Some(10)).unwrap();
        assert_eq!(cfg.reid.seed, 10);
        apply_overrides(&mut cfg, Cmd::Augment, None, Some(11)).unwrap();
        assert_eq!(cfg.protocol.augment_seed, 11);

        match apply_overrides(&mut cfg, Cmd::Generate, None, Some(12)) {
            Err(Error::Config(msg)) => assert!(msg.contains("deterministic")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn cli_parses_common_flags() {
        let cli = Cli::parse_from([
            "san",
            "train",
            "--config",
            "c.toml",
            "--set",
            "train.epochs=2",
            "--set",
            "train.decay_start=1",
            "--out",
            "runs/a",
            "--seed",
            "3",
        ]);
        assert_eq!(cli.command, Cmd::Train);
        assert_eq!(cli.config.as_deref(), Some(Path::new("c.toml")));
        assert_eq!(cli.sets.len(), 2);
        assert_eq!(cli.out.as_deref(), Some(Path::new("runs/a")));
        assert_eq!(cli.seed, Some(3));
    }
}
