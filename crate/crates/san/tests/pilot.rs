//! Temporary calibration runs. Not part of the suite.

use std::path::Path;
use std::time::Instant;

use san::config::RunConfig;
use san::data::{load_dataset, synth_generate};
use san::trainer::{train, TrainSession};

#[test]
#[ignore]
fn pilot_synthetic_preset() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let t0 = Instant::now();
    synth_generate(&cfg.synth, &data).unwrap();
    println!("synth: {:.1}s", t0.elapsed().as_secs_f64());

    let train_ds = load_dataset(&data, "train").unwrap();
    let eval_ds = load_dataset(&data, "test").unwrap();
    let t0 = Instant::now();
    let report = train::<f32>(&TrainSession {
        train: &cfg.train,
        generator: &cfg.generator,
        discriminator: &cfg.discriminator,
        dataset: &train_ds,
        eval_dataset: Some(&eval_ds),
        out_dir: &dir.path().join("run"),
        config_echo: "pilot",
        resume: None,
    })
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let first = report.first_eval.unwrap();
    let last = report.last_eval.unwrap();
    println!(
        "train: {:.1}s total, {:.2}s/step over {} steps",
        secs,
        secs / report.steps as f64,
        report.steps
    );
    println!(
        "masked_l1: {} -> {} (ratio {:.3})",
        first.masked_l1,
        last.masked_l1,
        last.masked_l1 / first.masked_l1
    );
    println!(
        "fid: {} -> {} (ratio {:.3})",
        first.fid,
        last.fid,
        last.fid / first.fid
    );
    let eval = std::fs::read_to_string(dir.path().join("run/eval.csv")).unwrap();
    println!("eval.csv:\n{eval}");

    // Post-train diagnostics: fit-vs-generalization and per-part breakdown.
    let mut gen = Generator::<f32>::new(&cfg.generator, &mut derive(0, "diag")).unwrap();
    Checkpoint::load(&report.final_checkpoint)
        .unwrap()
        .unpack_model("g", &mut gen)
        .unwrap();
    for (name, ds) in [("train", &train_ds), ("test", &eval_ds)] {
        let mut pairs = san::data::make_pairs(ds).unwrap();
        use rand::seq::SliceRandom;
        pairs.shuffle(&mut derive(7, "diag/probe"));
        pairs.truncate(48);
        let batch = assemble_batch::<f32>(ds, &pairs, false).unwrap();
        let fake = gen.generate(&batch.appearance, &batch.semantic).unwrap();
        let model = masked_l1(&fake, &batch.target_image, &batch.target_mask);
        let copy_src = masked_l1(&batch.source_image, &batch.target_image, &batch.target_mask);
        println!("{name}-probe masked_l1: model {model:.4}, copy-source {copy_src:.4}");
        if name == "test" {
            let (n, _, h, w) = batch.target_image.dim();
            for (part, labels) in [
                ("torso", vec![5u8]),
                ("head", vec![13]),
                ("arms", vec![14, 15]),
                ("legs", vec![16, 17]),
                ("bag", vec![11]),
            ] {
                let mut m = ndarray::Array4::<f32>::zeros((n, 1, h, w));
                for (bi, &(_, ti)) in pairs.iter().enumerate() {
                    let parsing = &ds.samples[ti].parsing;
                    for y in 0..h {
                        for x in 0..w {
                            if labels.contains(&parsing[[y, x]]) {
                                m[[bi, 0, y, x]] = 1.0;
                            }
                        }
                    }
                }
                let pixels: f32 = m.sum();
                println!(
                    "  {part}: masked_l1 {:.4} over {} px",
                    masked_l1(&fake, &batch.target_image, &m),
                    pixels
                );
            }
        }
    }
}

use san::checkpoint::Checkpoint;
use san::generator::Generator;
use san::losses::masked_l1;
use san::rng::derive;
use san::trainer::assemble_batch;

/// Train one arm at a reduced schedule and measure final held-out masked l1
/// with ground-truth masks (inputs still honor the arm's mask ablation).
fn arm_final_masked_l1(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    seed: u64,
    disable_mask: bool,
    blocks: usize,
) -> f64 {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    cfg.train.disable_mask = disable_mask;
    cfg.generator.blocks = blocks;
    let train_ds = load_dataset(data, "train").unwrap();
    let report = train::<f32>(&TrainSession {
        train: &cfg.train,
        generator: &cfg.generator,
        discriminator: &cfg.discriminator,
        dataset: &train_ds,
        eval_dataset: None,
        out_dir: out,
        config_echo: "pilot",
        resume: None,
    })
    .unwrap();

    let test_ds = load_dataset(data, "test").unwrap();
    let mut probe = san::data::make_pairs(&test_ds).unwrap();
    {
        use rand::seq::SliceRandom;
        probe.shuffle(&mut derive(7, "gate/probe"));
    }
    probe.truncate(48);
    let inputs = assemble_batch::<f32>(&test_ds, &probe, disable_mask).unwrap();
    let truth = assemble_batch::<f32>(&test_ds, &probe, false).unwrap();
    let ckpt = Checkpoint::load(&report.final_checkpoint).unwrap();
    let mut gen = Generator::<f32>::new(&cfg.generator, &mut derive(0, "pilot/load")).unwrap();
    ckpt.unpack_model("g", &mut gen).unwrap();
    let fake = gen.generate(&inputs.appearance, &inputs.semantic).unwrap();
    masked_l1(&fake, &truth.target_image, &truth.target_mask)
}

fn reduced_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 10;
    cfg.train.decay_start = 7;
    cfg.train.pairs_per_epoch = 192;
    cfg.train.checkpoint_every = 0;
    cfg
}

#[test]
#[ignore]
fn pilot_ablation_arms() {
    let cfg = reduced_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_generate(&cfg.synth, &data).unwrap();
    let t0 = Instant::now();
    for (label, disable) in [("full", false), ("no-mask", true)] {
        let mut vals = Vec::new();
        for seed in [11u64, 12, 13] {
            let out = dir.path().join(format!("{label}-{seed}"));
            vals.push(arm_final_masked_l1(&cfg, &data, &out, seed, disable, 5));
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        println!("{label}: {vals:?} mean {mean:.4}");
    }
    println!("elapsed {:.0}s", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn pilot_sab_sweep() {
    let cfg = reduced_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_generate(&cfg.synth, &data).unwrap();
    let t0 = Instant::now();
    for blocks in [1usize, 3, 5] {
        let mut vals = Vec::new();
        for seed in [11u64, 12, 13] {
            let out = dir.path().join(format!("t{blocks}-{seed}"));
            vals.push(arm_final_masked_l1(&cfg, &data, &out, seed, false, blocks));
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        println!("T={blocks}: {vals:?} mean {mean:.4}");
    }
    println!("elapsed {:.0}s", t0.elapsed().as_secs_f64());
}
