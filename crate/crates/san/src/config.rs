//! Run configuration: one TOML file covering every command, layered as
//! preset defaults ← config file ← `--set` overrides, with unknown keys
//! rejected and a resolved echo written so any run can be reproduced from a
//! single file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::reid::ReidConfig;
use crate::trainer::TrainConfig;

/// File name of the resolved-configuration echo written by every command.
pub const ECHO_FILE: &str = "resolved.toml";

/// Where a run reads and writes, relative to the working directory unless
/// absolute. Keeping paths in the configuration makes the echo sufficient to
/// replay a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset root holding `train/` and `test/` splits.
    pub data: String,
    /// Training output directory: checkpoints and metrics CSVs.
    pub run: String,
    /// Checkpoint consumed by generation, evaluation, and augmentation;
    /// empty selects `<run>/checkpoint_final.ckpt`.
    pub checkpoint: String,
    /// Output root of the augmented dataset.
    pub augmented: String,
    /// Output directory for JSON reports and image sheets.
    pub report: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data".into(),
            run: "run".into(),
            checkpoint: String::new(),
            augmented: "data-aug".into(),
            report: "report".into(),
        }
    }
}

impl PathsConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            Path::new(&self.run).join("checkpoint_final.ckpt")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }
}

/// Settings of the standalone quality evaluation (FID, LPIPS, masked LPIPS).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Seed of the frozen feature extractor behind FID and LPIPS.
    pub extractor_seed: u64,
    /// Held-out (source, target) pairs scored per evaluation.
    pub pairs: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            extractor_seed: 9001,
            pairs: 64,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs < 2 {
            return Err(Error::Config(format!(
                "metrics.pairs must be at least 2 (FID needs two samples), got {}",
                self.pairs
            )));
        }
        Ok(())
    }
}

/// Settings of the qualitative image sheets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SheetConfig {
    /// Number of (source, target) pairs rendered, in pair order.
    pub pairs: usize,
    /// Dataset split the pairs come from.
    pub split: String,
}

impl Default for SheetConfig {
    fn default() -> Self {
        SheetConfig {
            pairs: 8,
            split: "test".into(),
        }
    }
}

impl SheetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::Config("generate.pairs must be at least 1".into()));
        }
        if !["train", "test"].contains(&self.split.as_str()) {
            return Err(Error::Config(format!(
                "generate.split must be \"train\" or \"test\", got {:?}",
                self.split
            )));
        }
        Ok(())
    }
}

/// Re-identification protocol settings on top of the classifier
/// hyperparameters in [`ReidConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Retrieval distance: `euclidean` or `kissme`.
    pub metric: String,
    /// Records per original after augmentation; 1 disables synthesis.
    pub alpha: usize,
    /// Seeds aggregated by the evaluation protocol.
    pub seeds: Vec<u64>,
    /// Seed of the augmentation pose draw.
    pub augment_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            metric: "euclidean".into(),
            alpha: 2,
            seeds: vec![1, 2, 3],
            augment_seed: 5,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !["euclidean", "kissme"].contains(&self.metric.as_str()) {
            return Err(Error::Config(format!(
                "protocol.metric must be \"euclidean\" or \"kissme\", got {:?}",
                self.metric
            )));
        }
        if self.alpha == 0 {
            return Err(Error::Config("protocol.alpha must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("protocol.seeds must not be empty".into()));
        }
        Ok(())
    }
}

/// The complete configuration of a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub generate: SheetConfig,
    pub reid: ReidConfig,
    pub protocol: ProtocolConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        self.generate.validate()?;
        self.reid.validate()?;
        self.protocol.validate()
    }
}

/// Parses a `--set key.path=value` override. The value is read as a TOML
/// literal where possible, so `5`, `1.5`, `true`, and `[1, 2]` keep their
/// types; anything that does not parse becomes a plain string.
pub fn parse_set(arg: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!(
            "override {arg:?} has an empty key segment"
        )));
    }
    Ok((path, parse_toml_literal(raw.trim())))
}

fn parse_toml_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").expect("parsed assignment has the key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value, arg: &str) -> Result<()> {
    let (head, rest) = path.split_first().expect("path segments checked nonempty");
    if rest.is_empty() {
        table.insert(head.clone(), value);
        return Ok(());
    }
    let child = table
        .entry(head.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match child {
        toml::Value::Table(t) => set_path(t, rest, value, arg),
        _ => Err(Error::Config(format!(
            "override {arg:?} descends into {head:?}, which is not a table"
        ))),
    }
}

/// Deep merge: tables combine key-wise, any other value is replaced.
fn merge(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves the configuration of a run. The training preset named by the
/// file or overrides supplies the training defaults; the file is layered on
/// top; `--set` overrides win last. Unknown keys are rejected.
pub fn load(config_path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut user = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::MissingFile { path: p.into() }
                } else {
                    Error::io(p, e)
                }
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for arg in sets {
        let (path, value) = parse_set(arg)?;
        set_path(&mut user, &path, value, arg)?;
    }

    let preset = match user.get("train").and_then(|t| t.get("preset")) {
        Some(toml::Value::String(name)) => name.clone(),
        Some(other) => {
            return Err(Error::Config(format!(
                "train.preset must be a string, got {other}"
            )))
        }
        None => TrainConfig::default().preset,
    };
    let base = RunConfig {
        train: TrainConfig::preset(&preset)?,
        ..RunConfig::default()
    };
    let mut merged = toml::Value::try_from(&base)
        .map_err(|e| Error::Config(format!("serialize default configuration: {e}")))?;
    merge(&mut merged, toml::Value::Table(user));
    let cfg: RunConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes a configuration; parsing the result reproduces it exactly.
pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("serialize configuration: {e}")))
}

/// Writes the resolved-configuration echo into `dir` and returns its path.
pub fn write_echo(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(ECHO_FILE);
    fs::write(&path, to_toml(cfg)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_sources_give_defaults() {
        let cfg = load(None, &[]).unwrap();
        assert_eq!(to_toml(&cfg).unwrap(), to_toml(&RunConfig::default()).unwrap());
        assert_eq!(cfg.train.preset, "synthetic");
        assert_eq!(cfg.paths.checkpoint_path(), Path::new("run/checkpoint_final.ckpt"));
    }

    #[test]
    fn preset_file_and_sets_layer_in_order() {
        let (_d, path) = write_config(
            "[train]\npreset = \"market-like\"\nepochs = 10\ndecay_start = 5\n\n[paths]\ndata = \"elsewhere\"\n",
        );
        let cfg = load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.train.epochs, 10); // file beats preset
        assert_eq!(cfg.train.batch_size, 32); // preset beats built-in default
        assert_eq!(cfg.train.weights.adversarial, 10.0);
        assert_eq!(cfg.paths.data, "elsewhere");

        let cfg = load(Some(&path), &["train.epochs=4".into(), "train.decay_start=2".into()])
            .unwrap();
        assert_eq!(cfg.train.epochs, 4); // set beats file

        let cfg = load(None, &["train.preset=fashion-like".into()]).unwrap();
        assert_eq!(cfg.train.weights.l1, 1.0);
        assert_eq!(cfg.train.epochs, 1000);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_d, path) = write_config("[train]\nepohcs = 3\n");
        match load(Some(&path), &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("epohcs"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        let (_d, path) = write_config("[nonsense]\nx = 1\n");
        match load(Some(&path), &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("nonsense"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        match load(None, &["train.epohcs=3".into()]) {
            Err(Error::Config(msg)) => assert!(msg.contains("epohcs"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn set_values_keep_toml_types() {
        let (path, v) = parse_set("train.epochs=5").unwrap();
        assert_eq!(path, ["train", "epochs"]);
        assert_eq!(v, toml::Value::Integer(5));
        let (_, v) = parse_set("train.learning_rate=2e-4").unwrap();
        assert_eq!(v, toml::Value::Float(2e-4));
        let (_, v) = parse_set("train.label_smoothing=false").unwrap();
        assert_eq!(v, toml::Value::Boolean(false));
        let (_, v) = parse_set("protocol.seeds=[4, 5]").unwrap();
        assert_eq!(
            v,
            toml::Value::Array(vec![toml::Value::Integer(4), toml::Value::Integer(5)])
        );
        let (_, v) = parse_set("train.preset=market-like").unwrap();
        assert_eq!(v, toml::Value::String("market-like".into()));

        for bad in ["no-equals", "=5", "a..b=1", ".x=1"] {
            match parse_set(bad) {
                Err(Error::Config(_)) => {}
                other => panic!("expected config error for {bad:?}, got {other:?}"),
            }
        }
        match load(None, &["train=5".into(), "train.epochs=3".into()]) {
            Err(Error::Config(msg)) => assert!(msg.contains("not a table"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_types_and_bad_values_are_config_errors() {
        match load(None, &["train.epochs=red".into()]) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
        match load(None, &["train.preset=unknown".into()]) {
            Err(Error::Config(msg)) => assert!(msg.contains("preset"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        match load(None, &["metrics.pairs=1".into()]) {
            Err(Error::Config(msg)) => assert!(msg.contains("metrics.pairs"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        match load(None, &["protocol.metric=cosine".into()]) {
            Err(Error::Config(msg)) => assert!(msg.contains("cosine"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        match load(None, &["protocol.alpha=0".into()]) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
        match load(Some(Path::new("/nonexistent/run.toml")), &[]) {
            Err(Error::MissingFile { path }) => {
                assert!(path.to_string_lossy().contains("nonexistent"))
            }
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn echo_reproduces_the_run_and_is_stable() {
        let (_d, path) = write_config("[train]\npreset = \"market-like\"\n[synth]\nseed = 9\n");
        let sets = [
            "train.epochs=6".into(),
            "train.decay_start=3".into(),
            "paths.run=r2".into(),
        ];
        let cfg = load(Some(&path), &sets).unwrap();

        let out = tempfile::tempdir().unwrap();
        let echo1 = write_echo(&cfg, out.path()).unwrap();
        let bytes1 = fs::read(&echo1).unwrap();
        let echo2 = write_echo(&cfg, out.path()).unwrap();
        assert_eq!(bytes1, fs::read(&echo2).unwrap());

        let replay = load(Some(&echo1), &[]).unwrap();
        assert_eq!(to_toml(&replay).unwrap(), to_toml(&cfg).unwrap());
        assert_eq!(replay.train.epochs, 6);
        assert_eq!(replay.train.batch_size, 32);
        assert_eq!(replay.synth.seed, 9);
        assert_eq!(replay.paths.run, "r2");
        assert_eq!(replay.paths.checkpoint_path(), Path::new("r2/checkpoint_final.ckpt"));
    }
}
