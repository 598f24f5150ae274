//! Command implementations behind the binary: train models, build
//! corrupted test sets, run strategy comparisons, sweep the augmentation
//! budget. Every command writes its resolved configuration next to (and
//! inside) its outputs.

use crate::adapt::Strategy;
use crate::config::{DataSource, RunConfig};
use crate::data::{self, CorruptionSpec, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{self, RunResult};
use crate::nn::{load_checkpoint, Model, TrainConfig};
use crate::rng::{self, stream};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Flag overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Apply CLI overrides; the result is the resolved config embedded in
/// every output.
pub fn resolve(mut cfg: RunConfig, over: &Overrides) -> RunConfig {
    if let Some(seed) = over.seed {
        cfg.run.seed = seed;
    }
    if let Some(p) = over.parallelism {
        cfg.run.parallelism = p;
    }
    if let Some(out) = &over.out {
        cfg.run.out_dir = out.clone();
    }
    cfg
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run.out_dir.clone();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_resolved_config(cfg: &RunConfig, dir: &Path, name: &str) -> Result<()> {
    fs::write(dir.join(name), cfg.to_toml())?;
    Ok(())
}

// ── dataset construction ────────────────────────────────────────────

fn synthetic_split(cfg: &RunConfig, which: u64, per_class: usize, split: Split) -> Result<Dataset> {
    let seed = rng::derive(cfg.run.seed, stream::DATA_GEN, which);
    let mut ds = data::generate_synthetic(
        cfg.data.classes,
        per_class,
        cfg.data.image_size,
        seed,
    )?;
    ds.split = split;
    Ok(ds)
}

pub fn build_train_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => synthetic_split(cfg, 0, cfg.data.train_per_class, Split::Train),
        DataSource::Idx => {
            let (imgs, labels) = match (&cfg.data.train_images, &cfg.data.train_labels) {
                (Some(i), Some(l)) => (i, l),
                _ => {
                    return Err(Error::Config(
                        "idx source needs data.train_images and data.train_labels".into(),
                    ))
                }
            };
            let mut ds = data::load_idx(imgs, labels, cfg.data.classes)?;
            ds.split = Split::Train;
            Ok(ds)
        }
        DataSource::Cifar => {
            let path = cfg.data.cifar_train.as_ref().ok_or_else(|| {
                Error::Config("cifar source needs data.cifar_train".into())
            })?;
            let mut ds = data::load_cifar_binary(path, cfg.data.classes)?;
            ds.split = Split::Train;
            Ok(ds)
        }
    }
}

pub fn build_test_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => {
            synthetic_split(cfg, 1, cfg.data.test_per_class, Split::TestClean)
        }
        DataSource::Idx => {
            let (imgs, labels) = match (&cfg.data.test_images, &cfg.data.test_labels) {
                (Some(i), Some(l)) => (i, l),
                _ => {
                    return Err(Error::Config(
                        "idx source needs data.test_images and data.test_labels".into(),
                    ))
                }
            };
            data::load_idx(imgs, labels, cfg.data.classes)
        }
        DataSource::Cifar => {
            let path = cfg.data.cifar_test.as_ref().ok_or_else(|| {
                Error::Config("cifar source needs data.cifar_test".into())
            })?;
            data::load_cifar_binary(path, cfg.data.classes)
        }
    }
}

// ── train ───────────────────────────────────────────────────────────

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub final_train_accuracy: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutputs> {
    let model_sec = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::Config("train needs a [model] section".into()))?;
    let train_sec = cfg.train.clone().unwrap_or_default();
    let dir = ensure_out_dir(cfg)?;
    write_resolved_config(cfg, &dir, "train.config.toml")?;

    let train_set = build_train_dataset(cfg)?;
    let heldout = build_test_dataset(cfg)?;
    if model_sec.classes != train_set.num_classes {
        return Err(Error::Config(format!(
            "model declares {} classes but the dataset has {}",
            model_sec.classes, train_set.num_classes
        )));
    }

    let mut model = Model::<f32>::init(&model_sec.to_model_config(), cfg.run.seed)?;
    let tc = TrainConfig {
        epochs: train_sec.epochs,
        lr: train_sec.lr,
        momentum: train_sec.momentum,
        batch_size: train_sec.batch_size,
        augment: train_sec.augment,
        seed: cfg.run.seed,
    };
    let history = crate::nn::train_supervised(&mut model, &train_set, Some(&heldout), &tc)?;

    let ckpt_path = dir.join(&train_sec.checkpoint);
    model.save(&ckpt_path)?;

    let hist_path = dir.join(&train_sec.history);
    let mut out = String::new();
    for line in cfg.to_toml().lines() {
        writeln!(out, "# {line}").expect("string write");
    }
    out.push_str("epoch,train_loss,train_accuracy,heldout_loss,heldout_accuracy\n");
    for h in &history {
        writeln!(
            out,
            "{},{},{},{},{}",
            h.epoch,
            h.train_loss,
            h.train_accuracy,
            h.heldout_loss.unwrap_or(f64::NAN),
            h.heldout_accuracy.unwrap_or(f64::NAN)
        )
        .expect("string write");
    }
    fs::write(&hist_path, out)?;

    Ok(TrainOutputs {
        checkpoint: ckpt_path,
        history: hist_path,
        final_train_accuracy: history.last().map(|h| h.train_accuracy).unwrap_or(0.0),
    })
}

// ── eval ────────────────────────────────────────────────────────────

fn locate_checkpoint(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let adapt = cfg.adapt.clone().unwrap_or_default();
    let direct = adapt.checkpoint.clone();
    if direct.exists() {
        return Ok(direct);
    }
    let in_out = dir.join(&adapt.checkpoint);
    if in_out.exists() {
        return Ok(in_out);
    }
    Err(Error::Config(format!(
        "checkpoint not found at {} or {}",
        direct.display(),
        in_out.display()
    )))
}

/// Every (strategy x corruption x severity) cell requested by the config,
/// plus one clean row per strategy, written as one CSV. When the plain
/// baseline is among the strategies and a corruption grid was evaluated, a
/// normalized corruption summary is written alongside.
pub fn cmd_eval(cfg: &RunConfig) -> Result<PathBuf> {
    let adapt = cfg
        .adapt
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs an [adapt] section".into()))?;
    if adapt.strategies.is_empty() {
        return Err(Error::Config("adapt.strategies must be non-empty".into()));
    }
    let dir = ensure_out_dir(cfg)?;
    write_resolved_config(cfg, &dir, "eval.config.toml")?;
    let model = load_checkpoint(&locate_checkpoint(cfg, &dir)?)?;
    let policy = cfg.augment.to_policy()?;
    let clean = build_test_dataset(cfg)?;
    if model.num_classes() != clean.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the dataset has {}",
            model.num_classes(),
            clean.num_classes
        )));
    }

    let mut shifted = Vec::new();
    if let Some(corrupt_sec) = &cfg.corrupt {
        corrupt_sec.validate()?;
        let corrupt_seed = corrupt_sec.seed.unwrap_or(cfg.run.seed);
        for &kind in &corrupt_sec.kinds {
            for &severity in &corrupt_sec.severities {
                let spec = CorruptionSpec::new(kind, severity, corrupt_seed)?;
                shifted.push(data::corrupt(&clean, &spec)?);
            }
        }
    }

    let mut results: Vec<RunResult> = Vec::new();
    for &strategy in &adapt.strategies {
        let run_cfg = adapt.to_adaptation_config(strategy);
        results.push(eval::evaluate(
            &model,
            &clean,
            &run_cfg,
            &policy,
            cfg.run.seed,
            cfg.run.parallelism,
        )?);
        for ds in &shifted {
            results.push(eval::evaluate(
                &model,
                ds,
                &run_cfg,
                &policy,
                cfg.run.seed,
                cfg.run.parallelism,
            )?);
        }
    }

    let csv_path = dir.join("results.csv");
    eval::write_results(&csv_path, &results, &cfg.to_toml())?;

    // normalized corruption summary against the unadapted baseline
    if !shifted.is_empty() && adapt.strategies.contains(&Strategy::None) {
        let reference: Vec<RunResult> = results
            .iter()
            .filter(|r| r.strategy == Strategy::None && r.corruption.is_some())
            .cloned()
            .collect();
        let mut out = String::new();
        for line in cfg.to_toml().lines() {
            writeln!(out, "# {line}").expect("string write");
        }
        out.push_str("strategy,avg_corruption_error,normalized_mce\n");
        for &strategy in &adapt.strategies {
            let grid: Vec<RunResult> = results
                .iter()
                .filter(|r| r.strategy == strategy && r.corruption.is_some())
                .cloned()
                .collect();
            let summary = eval::corruption_error_summary(&grid, Some(&reference))?;
            writeln!(
                out,
                "{},{},{}",
                strategy,
                summary.unnormalized_avg_error,
                summary.normalized_mce.map(|v| v.to_string()).unwrap_or_else(|| "nan".into())
            )
            .expect("string write");
        }
        fs::write(dir.join("mce.csv"), out)?;
    }
    Ok(csv_path)
}

// ── sweep ───────────────────────────────────────────────────────────

pub fn cmd_sweep(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let adapt = cfg.adapt.clone().unwrap_or_default();
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs a [sweep] section".into()))?;
    if sweep.b_values.is_empty() {
        return Err(Error::Config("sweep.b_values must be non-empty".into()));
    }
    let dir = ensure_out_dir(cfg)?;
    write_resolved_config(cfg, &dir, "sweep.config.toml")?;
    let model = load_checkpoint(&locate_checkpoint(cfg, &dir)?)?;
    let policy = cfg.augment.to_policy()?;
    let clean = build_test_dataset(cfg)?;

    let dataset = match (sweep.corruption, sweep.severity) {
        (Some(kind), severity) => {
            let spec = CorruptionSpec::new(
                kind,
                severity.unwrap_or(3),
                cfg.corrupt.as_ref().and_then(|c| c.seed).unwrap_or(cfg.run.seed),
            )?;
            data::corrupt(&clean, &spec)?
        }
        (None, _) => clean,
    };

    let run_cfg = adapt.to_adaptation_config(sweep.strategy);
    let results = eval::sweep_b(
        &model,
        &dataset,
        &run_cfg,
        &policy,
        &sweep.b_values,
        cfg.run.seed,
        cfg.run.parallelism,
    )?;

    let csv_path = dir.join("sweep.csv");
    eval::write_results(&csv_path, &results, &cfg.to_toml())?;
    let series_path = dir.join("sweep_series.csv");
    eval::write_sweep_series(&series_path, &results, &cfg.to_toml())?;
    Ok((csv_path, series_path))
}

// ── corrupt ─────────────────────────────────────────────────────────

/// Export one IDX image file per (kind, severity) cell plus a shared label
/// file; labels are corruption-invariant.
pub fn cmd_corrupt(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corrupt_sec = cfg
        .corrupt
        .as_ref()
        .ok_or_else(|| Error::Config("corrupt needs a [corrupt] section".into()))?;
    corrupt_sec.validate()?;
    let dir = ensure_out_dir(cfg)?;
    write_resolved_config(cfg, &dir, "corrupt.config.toml")?;
    let clean = build_test_dataset(cfg)?;
    let corrupt_seed = corrupt_sec.seed.unwrap_or(cfg.run.seed);

    data::write_idx_labels(&dir.join("test_labels.idx"), &clean.labels)?;
    let mut written = Vec::new();
    for &kind in &corrupt_sec.kinds {
        for &severity in &corrupt_sec.severities {
            let spec = CorruptionSpec::new(kind, severity, corrupt_seed)?;
            let shifted = data::corrupt(&clean, &spec)?;
            let path = dir.join(format!("test_shifted_{kind}_s{severity}_images.idx"));
            data::write_idx_images(&path, &shifted.images)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ttr-cli-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_config(out: &Path) -> RunConfig {
        let text = format!(
            r#"
[run]
seed = 3
out_dir = "{}"

[model]
arch = "conv_small"
input = [1, 16, 16]
classes = 3
conv_channels = [4, 8]

[data]
classes = 3
train_per_class = 15
test_per_class = 4
image_size = 16

[train]
epochs = 2

[adapt]
strategies = ["none", "bn_only", "memo"]
b = 4
eta = 0.002

[corrupt]
kinds = ["gaussian_noise", "contrast"]
severities = [2, 4]
"#,
            out.display()
        );
        toml::from_str(&text).unwrap()
    }

    #[test]
    fn train_then_eval_then_corrupt_pipeline() {
        let dir = tmp_dir("pipeline");
        let cfg = tiny_config(&dir);

        let outputs = cmd_train(&cfg).unwrap();
        assert!(outputs.checkpoint.exists());
        let hist = fs::read_to_string(&outputs.history).unwrap();
        assert!(hist.contains("epoch,train_loss"));
        assert!(hist.starts_with("# "));

        let csv = cmd_eval(&cfg).unwrap();
        let rows = eval::read_results(&csv).unwrap();
        // 3 strategies x (1 clean + 2 kinds x 2 severities)
        assert_eq!(rows.len(), 3 * 5);
        assert!(dir.join("mce.csv").exists());

        let files = cmd_corrupt(&cfg).unwrap();
        assert_eq!(files.len(), 4, "one IDX image file per (kind, severity)");
        for f in &files {
            assert!(f.exists());
        }
        assert!(dir.join("test_labels.idx").exists());

        // byte-identical regeneration under the same seed
        let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
        let files2 = cmd_corrupt(&cfg).unwrap();
        for (f, b) in files2.iter().zip(before) {
            assert_eq!(fs::read(f).unwrap(), b);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn eval_without_checkpoint_is_config_error() {
        let dir = tmp_dir("nockpt");
        let cfg = tiny_config(&dir);
        let err = cmd_eval(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn train_twice_same_seed_identical_checkpoints() {
        let dir = tmp_dir("twice");
        let cfg = tiny_config(&dir);
        let a = cmd_train(&cfg).unwrap();
        let bytes_a = fs::read(&a.checkpoint).unwrap();
        let b = cmd_train(&cfg).unwrap();
        let bytes_b = fs::read(&b.checkpoint).unwrap();
        assert_eq!(bytes_a, bytes_b);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tmp_dir("override");
        let cfg = tiny_config(&dir);
        let over = Overrides { seed: Some(99), parallelism: Some(2), out: Some(dir.join("alt")) };
        let resolved = resolve(cfg, &over);
        assert_eq!(resolved.run.seed, 99);
        assert_eq!(resolved.run.parallelism, 2);
        assert_eq!(resolved.run.out_dir, dir.join("alt"));
        fs::remove_dir_all(&dir).ok();
    }
}
