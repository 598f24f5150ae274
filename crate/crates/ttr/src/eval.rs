//! Evaluation harness: run a strategy over a test split episodically,
//! aggregate error and corruption metrics, sweep the augmentation budget,
//! and emit machine-readable CSV.
//!
//! Per-point work fans out across the thread pool with one model clone and
//! one derived seed per point, so results are identical at any parallelism
//! degree; only the timing fields vary. Stream-based adaptation runs
//! sequentially by construction.

use crate::adapt::{adapt_predict, tent_adapt, AdaptationConfig, EvalRecord, Strategy};
use crate::augment::AugmentationPolicy;
use crate::data::{CorruptionKind, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{BnView, Model};
use crate::parallel;
use crate::rng::{self, stream};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Aggregated outcome of one (strategy, dataset) run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub strategy: Strategy,
    pub dataset_tag: String,
    pub corruption: Option<(CorruptionKind, u8)>,
    pub records: Vec<EvalRecord>,
    pub error_pct: f64,
    pub mean_sec_per_point: f64,
    pub config: AdaptationConfig,
    pub seed: u64,
    /// Points that fell back to an unadapted prediction.
    pub flagged_points: usize,
}

fn dataset_tag(ds: &Dataset) -> (String, Option<(CorruptionKind, u8)>) {
    match &ds.split {
        Split::Train => ("train".into(), None),
        Split::TestClean => ("test_clean".into(), None),
        Split::TestShifted { kind, severity } => {
            (format!("test_shifted_{kind}_s{severity}"), Some((*kind, *severity)))
        }
    }
}

/// Evaluate one strategy over a dataset. Deterministic given
/// (model, dataset, config, seed) regardless of `parallelism`; per-point
/// failures are flagged in their records, never aborting the run.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &Dataset,
    cfg: &AdaptationConfig,
    policy: &AugmentationPolicy,
    seed: u64,
    parallelism: usize,
) -> Result<RunResult> {
    cfg.validate()?;
    let (tag, corruption) = dataset_tag(dataset);
    let records: Vec<EvalRecord> = if cfg.strategy == Strategy::TentBatch {
        let (_, records) = tent_adapt(model, dataset, cfg)?;
        records
    } else {
        parallel::map_indexed(dataset.len(), parallelism, |i| {
            let point_seed = rng::derive(seed, stream::EVAL_POINT, i as u64);
            let start = Instant::now();
            let outcome = adapt_predict(
                model,
                &dataset.images[i],
                dataset.labels[i],
                i,
                cfg,
                policy,
                point_seed,
            );
            let mut record = match outcome {
                Ok((_, record, _)) => record,
                Err(_) => {
                    // structural failure: report the eval-mode prediction
                    let pred = crate::nn::batch_from_images::<f32>(&[&dataset.images[i]])
                        .and_then(|b| model.logits(&b, BnView::Eval))
                        .map(|l| crate::nn::predict_rows(&l)[0])
                        .unwrap_or(0);
                    EvalRecord {
                        index: i,
                        true_label: dataset.labels[i],
                        predicted: pred,
                        loss_before: f64::NAN,
                        loss_after: f64::NAN,
                        marginal_entropy: f64::NAN,
                        seconds: 0.0,
                        strategy: cfg.strategy,
                        adapted: false,
                        flagged: true,
                    }
                }
            };
            record.seconds = start.elapsed().as_secs_f64();
            record
        })
    };

    let total = records.len();
    let correct = records.iter().filter(|r| r.predicted == r.true_label).count();
    let flagged_points = records.iter().filter(|r| r.flagged).count();
    let error_pct = if total == 0 {
        0.0
    } else {
        100.0 * (1.0 - correct as f64 / total as f64)
    };
    let mean_sec_per_point = if total == 0 {
        0.0
    } else {
        records.iter().map(|r| r.seconds).sum::<f64>() / total as f64
    };
    Ok(RunResult {
        strategy: cfg.strategy,
        dataset_tag: tag,
        corruption,
        records,
        error_pct,
        mean_sec_per_point,
        config: cfg.clone(),
        seed,
        flagged_points,
    })
}

// ── corruption summary ──────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct KindSummary {
    pub kind: CorruptionKind,
    pub error_sum: f64,
    pub reference_sum: Option<f64>,
    /// 100 * error_sum / reference_sum, when a usable reference exists.
    pub normalized: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CorruptionSummary {
    /// Mean error over every (kind, severity) cell.
    pub unnormalized_avg_error: f64,
    /// Mean of per-kind normalized errors over included kinds.
    pub normalized_mce: Option<f64>,
    pub per_kind: Vec<KindSummary>,
    /// Kinds excluded from the normalized mean because the reference error
    /// sum was zero.
    pub excluded_kinds: Vec<CorruptionKind>,
}

fn grid_of(results: &[RunResult]) -> Result<Vec<(CorruptionKind, u8, f64)>> {
    let mut cells = Vec::new();
    for r in results {
        match r.corruption {
            Some((kind, severity)) => cells.push((kind, severity, r.error_pct)),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "corruption summary needs shifted splits, got '{}'",
                    r.dataset_tag
                )))
            }
        }
    }
    Ok(cells)
}

/// Average corruption error over a complete (kind x severity) grid, plus
/// the reference-normalized mean when a reference grid is supplied.
pub fn corruption_error_summary(
    results: &[RunResult],
    reference: Option<&[RunResult]>,
) -> Result<CorruptionSummary> {
    let cells = grid_of(results)?;
    if cells.is_empty() {
        return Err(Error::InvalidArgument("corruption summary of zero results".into()));
    }
    let kinds: BTreeSet<CorruptionKind> = cells.iter().map(|c| c.0).collect();
    let severities: BTreeSet<u8> = cells.iter().map(|c| c.1).collect();
    let mut missing = Vec::new();
    for &k in &kinds {
        for &s in &severities {
            if !cells.iter().any(|c| c.0 == k && c.1 == s) {
                missing.push(format!("({k}, {s})"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "incomplete corruption grid; missing cells: {}",
            missing.join(", ")
        )));
    }
    let ref_cells = match reference {
        Some(rr) => {
            let rc = grid_of(rr)?;
            for &k in &kinds {
                for &s in &severities {
                    if !rc.iter().any(|c| c.0 == k && c.1 == s) {
                        return Err(Error::InvalidArgument(format!(
                            "reference grid missing cell ({k}, {s})"
                        )));
                    }
                }
            }
            Some(rc)
        }
        None => None,
    };

    let unnormalized_avg_error = cells.iter().map(|c| c.2).sum::<f64>() / cells.len() as f64;
    let mut per_kind = Vec::new();
    let mut excluded_kinds = Vec::new();
    let mut normalized_values = Vec::new();
    for &k in &kinds {
        let error_sum: f64 = cells.iter().filter(|c| c.0 == k).map(|c| c.2).sum();
        let reference_sum = ref_cells
            .as_ref()
            .map(|rc| rc.iter().filter(|c| c.0 == k).map(|c| c.2).sum::<f64>());
        let normalized = match reference_sum {
            Some(rs) if rs > 0.0 => {
                let v = 100.0 * error_sum / rs;
                normalized_values.push(v);
                Some(v)
            }
            Some(_) => {
                eprintln!("warning: reference error sum for {k} is zero; kind excluded from normalized mean");
                excluded_kinds.push(k);
                None
            }
            None => None,
        };
        per_kind.push(KindSummary { kind: k, error_sum, reference_sum, normalized });
    }
    let normalized_mce = if reference.is_some() && !normalized_values.is_empty() {
        Some(normalized_values.iter().sum::<f64>() / normalized_values.len() as f64)
    } else {
        None
    };
    Ok(CorruptionSummary { unnormalized_avg_error, normalized_mce, per_kind, excluded_kinds })
}

// ── augmentation-budget sweep ───────────────────────────────────────

/// One run per B value under a shared seed, so the augmentation draws for a
/// smaller budget are a prefix of those for a larger one.
pub fn sweep_b(
    model: &Model<f32>,
    dataset: &Dataset,
    cfg: &AdaptationConfig,
    policy: &AugmentationPolicy,
    b_values: &[usize],
    seed: u64,
    parallelism: usize,
) -> Result<Vec<RunResult>> {
    if b_values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one B value".into()));
    }
    b_values
        .iter()
        .map(|&b| {
            let mut c = cfg.clone();
            c.b = b;
            evaluate(model, dataset, &c, policy, seed, parallelism)
        })
        .collect()
}

// ── CSV output ──────────────────────────────────────────────────────

pub const RESULTS_HEADER: &str =
    "strategy,dataset,corruption,severity,B,eta,N,steps,error_pct,sec_per_point,seed";

fn fmt_prior(n: f64) -> String {
    if n.is_infinite() {
        "inf".into()
    } else {
        format!("{n}")
    }
}

/// Write results as UTF-8 comma-separated rows with a '.' decimal point.
/// `preamble` lines (typically the resolved run config) are embedded as
/// '#'-prefixed comments before the header.
pub fn write_results(path: &Path, results: &[RunResult], preamble: &str) -> Result<()> {
    let mut out = String::new();
    for line in preamble.lines() {
        writeln!(out, "# {line}").expect("string write");
    }
    out.push_str(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        let (ckind, csev) = match r.corruption {
            Some((k, s)) => (k.to_string(), s),
            None => ("none".into(), 0),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.strategy,
            r.dataset_tag,
            ckind,
            csev,
            r.config.b,
            r.config.eta,
            fmt_prior(r.config.prior_strength),
            r.config.steps,
            r.error_pct,
            r.mean_sec_per_point,
            r.seed
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parsed results row (stringly typed; used for round trips and plots).
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub strategy: String,
    pub dataset: String,
    pub corruption: String,
    pub severity: u8,
    pub b: usize,
    pub eta: f64,
    pub prior: String,
    pub steps: usize,
    pub error_pct: f64,
    pub sec_per_point: f64,
    pub seed: u64,
}

/// Read a results CSV, skipping '#' comment lines.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != RESULTS_HEADER {
                return Err(Error::DataFormat(format!("unexpected results header: {line}")));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::DataFormat(format!("bad results row: {line}")));
        }
        let parse_err = |what: &str| Error::DataFormat(format!("bad {what} in row: {line}"));
        rows.push(ResultRow {
            strategy: f[0].into(),
            dataset: f[1].into(),
            corruption: f[2].into(),
            severity: f[3].parse().map_err(|_| parse_err("severity"))?,
            b: f[4].parse().map_err(|_| parse_err("B"))?,
            eta: f[5].parse().map_err(|_| parse_err("eta"))?,
            prior: f[6].into(),
            steps: f[7].parse().map_err(|_| parse_err("steps"))?,
            error_pct: f[8].parse().map_err(|_| parse_err("error_pct"))?,
            sec_per_point: f[9].parse().map_err(|_| parse_err("sec_per_point"))?,
            seed: f[10].parse().map_err(|_| parse_err("seed"))?,
        });
    }
    Ok(rows)
}

/// (B, seconds-per-point, error) series for efficiency/accuracy plots.
pub fn write_sweep_series(path: &Path, results: &[RunResult], preamble: &str) -> Result<()> {
    let mut out = String::new();
    for line in preamble.lines() {
        writeln!(out, "# {line}").expect("string write");
    }
    out.push_str("B,sec_per_point,error_pct\n");
    for r in results {
        writeln!(out, "{},{},{}", r.config.b, r.mean_sec_per_point, r.error_pct)
            .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{corrupt, generate_synthetic, CorruptionSpec};
    use crate::nn::{ArchKind, ModelConfig, TrainConfig};

    fn fixture() -> (Model<f32>, Dataset) {
        let cfg = ModelConfig {
            arch: ArchKind::ConvSmall,
            input: [1, 16, 16],
            num_classes: 3,
            conv_channels: vec![4, 8],
            hidden: vec![],
        };
        let mut model = Model::<f32>::init(&cfg, 5).unwrap();
        let train = generate_synthetic(3, 20, 16, 50).unwrap();
        crate::nn::train_supervised(
            &mut model,
            &train,
            None,
            &TrainConfig { epochs: 3, seed: 1, ..Default::default() },
        )
        .unwrap();
        let mut test = generate_synthetic(3, 6, 16, 51).unwrap();
        test.split = Split::TestClean;
        (model, test)
    }

    fn run_cfg(strategy: Strategy) -> AdaptationConfig {
        AdaptationConfig { strategy, b: 4, eta: 0.002, ..Default::default() }
    }

    #[test]
    fn plain_strategy_matches_eval_error() {
        let (model, test) = fixture();
        let r = evaluate(&model, &test, &run_cfg(Strategy::None), &AugmentationPolicy::default(), 3, 1)
            .unwrap();
        // naive recount
        let correct = r.records.iter().filter(|x| x.predicted == x.true_label).count();
        let expect = 100.0 * (1.0 - correct as f64 / test.len() as f64);
        assert_eq!(r.error_pct, expect);
        assert_eq!(r.records.len(), test.len());
        assert_eq!(r.dataset_tag, "test_clean");
    }

    #[test]
    fn parallelism_does_not_change_outcomes() {
        let (model, test) = fixture();
        let cfg = run_cfg(Strategy::Memo);
        let policy = AugmentationPolicy::default();
        let a = evaluate(&model, &test, &cfg, &policy, 7, 1).unwrap();
        let b = evaluate(&model, &test, &cfg, &policy, 7, 8).unwrap();
        assert_eq!(a.error_pct, b.error_pct);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.predicted, y.predicted, "point {}", x.index);
            assert_eq!(x.loss_before, y.loss_before);
            assert_eq!(x.loss_after, y.loss_after);
        }
    }

    #[test]
    fn memo_zero_eta_equals_bn_only_run() {
        let (model, test) = fixture();
        let policy = AugmentationPolicy::default();
        let memo0 = AdaptationConfig { eta: 0.0, ..run_cfg(Strategy::Memo) };
        let bn = run_cfg(Strategy::BnOnly);
        let a = evaluate(&model, &test, &memo0, &policy, 5, 1).unwrap();
        let b = evaluate(&model, &test, &bn, &policy, 5, 1).unwrap();
        assert_eq!(a.error_pct, b.error_pct);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.predicted, y.predicted);
        }
    }

    #[test]
    fn mce_self_normalization_is_100() {
        let (model, test) = fixture();
        let policy = AugmentationPolicy::default();
        let mut grid = Vec::new();
        for sev in [1u8, 2] {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, sev, 9).unwrap();
            let shifted = corrupt(&test, &spec).unwrap();
            grid.push(evaluate(&model, &shifted, &run_cfg(Strategy::None), &policy, 2, 1).unwrap());
        }
        let summary = corruption_error_summary(&grid, Some(&grid)).unwrap();
        if grid.iter().any(|r| r.error_pct > 0.0) {
            assert_eq!(summary.normalized_mce, Some(100.0));
        } else {
            assert!(summary.excluded_kinds.contains(&CorruptionKind::GaussianNoise));
        }
    }

    #[test]
    fn mce_worked_example() {
        // 2 kinds x 1 severity, errors (20, 40) vs reference (40, 40):
        // (50 + 100) / 2 = 75
        let (model, test) = fixture();
        let policy = AugmentationPolicy::default();
        let base = evaluate(&model, &test, &run_cfg(Strategy::None), &policy, 1, 1).unwrap();
        let mk = |kind, error: f64| {
            let mut r = base.clone();
            r.corruption = Some((kind, 1));
            r.dataset_tag = format!("test_shifted_{kind}_s1");
            r.error_pct = error;
            r
        };
        let results = vec![mk(CorruptionKind::GaussianNoise, 20.0), mk(CorruptionKind::Contrast, 40.0)];
        let reference = vec![mk(CorruptionKind::GaussianNoise, 40.0), mk(CorruptionKind::Contrast, 40.0)];
        let s = corruption_error_summary(&results, Some(&reference)).unwrap();
        assert_eq!(s.normalized_mce, Some(75.0));
        assert_eq!(s.unnormalized_avg_error, 30.0);

        // all errors zero -> unnormalized average zero
        let zeros = vec![mk(CorruptionKind::GaussianNoise, 0.0), mk(CorruptionKind::Contrast, 0.0)];
        let s = corruption_error_summary(&zeros, None).unwrap();
        assert_eq!(s.unnormalized_avg_error, 0.0);
    }

    #[test]
    fn incomplete_grid_lists_missing_cells() {
        let (model, test) = fixture();
        let policy = AugmentationPolicy::default();
        let base = evaluate(&model, &test, &run_cfg(Strategy::None), &policy, 1, 1).unwrap();
        let mk = |kind, sev| {
            let mut r = base.clone();
            r.corruption = Some((kind, sev));
            r
        };
        let results = vec![
            mk(CorruptionKind::GaussianNoise, 1),
            mk(CorruptionKind::GaussianNoise, 2),
            mk(CorruptionKind::Contrast, 1),
        ];
        let err = corruption_error_summary(&results, None).unwrap_err().to_string();
        assert!(err.contains("missing") && err.contains("contrast") && err.contains("2"), "{err}");
    }

    #[test]
    fn sweep_returns_one_result_per_b() {
        let (model, test) = fixture();
        let policy = AugmentationPolicy::default();
        let cfg = run_cfg(Strategy::Memo);
        let single = sweep_b(&model, &test, &cfg, &policy, &[1], 4, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].config.b, 1);
        let both = sweep_b(&model, &test, &cfg, &policy, &[1, 4], 4, 1).unwrap();
        assert_eq!(both.len(), 2);
        assert_eq!(both[1].config.b, 4);
        assert!(sweep_b(&model, &test, &cfg, &policy, &[], 4, 1).is_err());
    }

    #[test]
    fn results_csv_round_trips() {
        let (model, test) = fixture();
        let policy = AugmentationPolicy::default();
        let r1 = evaluate(&model, &test, &run_cfg(Strategy::None), &policy, 2, 1).unwrap();
        let r2 = evaluate(&model, &test, &run_cfg(Strategy::BnOnly), &policy, 2, 1).unwrap();
        let r3 = evaluate(&model, &test, &run_cfg(Strategy::Tta), &policy, 2, 1).unwrap();

        let dir = std::env::temp_dir().join(format!("ttr-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("results.csv");
        let results = vec![r1, r2, r3];
        write_results(&path, &results, "seed = 2\nstrategy_count = 3").unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2 + 1 + 3, "preamble + header + rows");
        assert!(text.starts_with("# seed = 2\n"));

        let rows = read_results(&path).unwrap();
        assert_eq!(rows.len(), 3);
        for (row, r) in rows.iter().zip(&results) {
            assert_eq!(row.strategy, r.strategy.to_string());
            assert_eq!(row.error_pct, r.error_pct);
            assert_eq!(row.sec_per_point, r.mean_sec_per_point);
            assert_eq!(row.b, r.config.b);
            assert_eq!(row.prior, "16");
        }

        // empty results -> header-only (plus preamble)
        let empty = dir.join("empty.csv");
        write_results(&empty, &[], "").unwrap();
        let text = std::fs::read_to_string(&empty).unwrap();
        assert_eq!(text, format!("{RESULTS_HEADER}\n"));
        assert!(read_results(&empty).unwrap().is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sweep_series_is_numeric_csv() {
        let (model, test) = fixture();
        let policy = AugmentationPolicy::default();
        let cfg = run_cfg(Strategy::Tta);
        let results = sweep_b(&model, &test, &cfg, &policy, &[1, 2], 3, 1).unwrap();
        let dir = std::env::temp_dir().join(format!("ttr-series-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("series.csv");
        write_sweep_series(&path, &results, "").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("B,sec_per_point,error_pct"));
        for line in lines {
            for field in line.split(',') {
                field.parse::<f64>().unwrap();
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pristine_model_is_bit_unchanged_by_evaluate() {
        let (model, test) = fixture();
        let before = model.payload();
        let policy = AugmentationPolicy::default();
        for strategy in [Strategy::Memo, Strategy::Tta, Strategy::BnOnly, Strategy::TentBatch] {
            let mut cfg = run_cfg(strategy);
            cfg.tent_batch_size = 3;
            evaluate(&model, &test, &cfg, &policy, 6, 1).unwrap();
            assert_eq!(model.payload(), before, "{strategy} mutated the pristine model");
        }
    }
}
