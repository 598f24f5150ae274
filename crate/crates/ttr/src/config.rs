//! Declarative run configuration: a flat TOML document with explicit
//! schema validation. Unknown keys are rejected, and every command embeds
//! the resolved document (after CLI overrides) in its outputs so any run
//! can be reproduced from what it wrote.

use crate::adapt::{FinalStats, StatsSource, Strategy, UpdateRuleKind};
use crate::augment::{AugKind, AugOp, AugmentationPolicy};
use crate::data::CorruptionKind;
use crate::error::{Error, Result};
use crate::nn::{ArchKind, ModelConfig, ParamFilter};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt: Option<CorruptSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// 0 means all available threads.
    #[serde(default)]
    pub parallelism: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_seed() -> u64 {
    0
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, parallelism: 0, out_dir: default_out_dir() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchKind,
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_channels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        let mut cfg = match self.arch {
            ArchKind::ConvSmall => ModelConfig::conv_small(self.input, self.classes),
            ArchKind::MlpBn => ModelConfig::mlp_bn(self.input, self.classes),
        };
        if let Some(c) = &self.conv_channels {
            cfg.conv_channels = c.clone();
        }
        if let Some(h) = &self.hidden {
            cfg.hidden = h.clone();
        }
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
    Cifar,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_source")]
    pub source: DataSource,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cifar_train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cifar_test: Option<PathBuf>,
}

fn default_source() -> DataSource {
    DataSource::Synthetic
}

fn default_classes() -> usize {
    4
}

fn default_train_per_class() -> usize {
    500
}

fn default_test_per_class() -> usize {
    150
}

fn default_image_size() -> usize {
    28
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            classes: default_classes(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            image_size: default_image_size(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            cifar_train: None,
            cifar_test: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "default_history")]
    pub history: PathBuf,
}

fn default_epochs() -> usize {
    12
}

fn default_lr() -> f64 {
    0.05
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    32
}

fn default_true() -> bool {
    true
}

fn default_checkpoint() -> PathBuf {
    PathBuf::from("model.ckpt")
}

fn default_history() -> PathBuf {
    PathBuf::from("history.csv")
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            lr: default_lr(),
            momentum: default_momentum(),
            batch_size: default_batch_size(),
            augment: true,
            checkpoint: default_checkpoint(),
            history: default_history(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "default_aug_kind")]
    pub kind: AugKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops: Option<Vec<AugOp>>,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_severity")]
    pub severity: u32,
}

fn default_aug_kind() -> AugKind {
    AugKind::AugmixLite
}

fn default_chains() -> usize {
    3
}

fn default_depth() -> usize {
    3
}

fn default_alpha() -> f64 {
    1.0
}

fn default_severity() -> u32 {
    3
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            kind: default_aug_kind(),
            ops: None,
            chains: default_chains(),
            depth: default_depth(),
            alpha: default_alpha(),
            severity: default_severity(),
        }
    }
}

impl AugmentSection {
    pub fn to_policy(&self) -> Result<AugmentationPolicy> {
        if self.chains == 0 || self.depth == 0 {
            return Err(Error::Config("augment chains and depth must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("augment alpha must be positive, got {}", self.alpha)));
        }
        if !(1..=10).contains(&self.severity) {
            return Err(Error::Config(format!(
                "augment severity must be in 1..=10, got {}",
                self.severity
            )));
        }
        let mut policy = AugmentationPolicy {
            kind: self.kind,
            chains: self.chains,
            depth: self.depth,
            alpha: self.alpha,
            severity: self.severity,
            ..Default::default()
        };
        if let Some(ops) = &self.ops {
            if ops.is_empty() {
                return Err(Error::Config("augment op set must not be empty".into()));
            }
            policy.ops = ops.clone();
        }
        Ok(policy)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_update_rule")]
    pub update_rule: UpdateRuleKind,
    #[serde(default = "default_rho")]
    pub momentum_rho: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_prior")]
    pub prior_strength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_fraction: Option<f64>,
    #[serde(default = "default_filter")]
    pub param_filter: ParamFilter,
    #[serde(default = "default_true")]
    pub episodic: bool,
    #[serde(default = "default_tent_batch")]
    pub tent_batch_size: usize,
    #[serde(default = "default_stats_source")]
    pub stats_source: StatsSource,
    #[serde(default = "default_final_stats")]
    pub final_stats: FinalStats,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::None, Strategy::BnOnly, Strategy::Tta, Strategy::Memo]
}

fn default_b() -> usize {
    32
}

fn default_eta() -> f64 {
    0.005
}

fn default_steps() -> usize {
    1
}

fn default_update_rule() -> UpdateRuleKind {
    UpdateRuleKind::Sgd
}

fn default_rho() -> f64 {
    0.9
}

fn default_prior() -> f64 {
    16.0
}

fn default_filter() -> ParamFilter {
    ParamFilter::All
}

fn default_tent_batch() -> usize {
    64
}

fn default_stats_source() -> StatsSource {
    StatsSource::AugmentedBatch
}

fn default_final_stats() -> FinalStats {
    FinalStats::Reuse
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            strategies: default_strategies(),
            b: default_b(),
            eta: default_eta(),
            steps: default_steps(),
            update_rule: default_update_rule(),
            momentum_rho: default_rho(),
            weight_decay: 0.0,
            prior_strength: default_prior(),
            threshold_fraction: None,
            param_filter: default_filter(),
            episodic: true,
            tent_batch_size: default_tent_batch(),
            stats_source: default_stats_source(),
            final_stats: default_final_stats(),
            checkpoint: default_checkpoint(),
        }
    }
}

impl AdaptSection {
    pub fn to_adaptation_config(&self, strategy: Strategy) -> crate::adapt::AdaptationConfig {
        crate::adapt::AdaptationConfig {
            strategy,
            b: self.b,
            eta: self.eta,
            steps: self.steps,
            update_rule: self.update_rule,
            momentum_rho: self.momentum_rho,
            weight_decay: self.weight_decay,
            prior_strength: self.prior_strength,
            threshold_fraction: self.threshold_fraction,
            param_filter: self.param_filter,
            episodic: self.episodic,
            tent_batch_size: self.tent_batch_size,
            stats_source: self.stats_source,
            final_stats: self.final_stats,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptSection {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<CorruptionKind>,
    #[serde(default = "default_severities")]
    pub severities: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_kinds() -> Vec<CorruptionKind> {
    vec![CorruptionKind::GaussianNoise]
}

fn default_severities() -> Vec<u8> {
    vec![1, 2, 3, 4, 5]
}

impl CorruptSection {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.severities.is_empty() {
            return Err(Error::Config("corrupt kinds and severities must be non-empty".into()));
        }
        for &s in &self.severities {
            if !(1..=5).contains(&s) {
                return Err(Error::Config(format!("corrupt severity {s} outside 1..=5")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_sweep_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_b_values")]
    pub b_values: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<u8>,
}

fn default_sweep_strategy() -> Strategy {
    Strategy::Memo
}

fn default_b_values() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32, 64, 128]
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Serialize the resolved document for embedding in outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unserializable config: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_paper_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        let adapt = AdaptSection::default();
        assert_eq!(adapt.b, 32);
        assert_eq!(adapt.eta, 0.005);
        assert_eq!(adapt.prior_strength, 16.0);
        assert_eq!(adapt.steps, 1);
        assert_eq!(cfg.run.seed, 0);
        assert_eq!(cfg.data.classes, 4);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = toml::from_str::<RunConfig>("[run]\nfoo = 1\n").unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
        let err = toml::from_str::<RunConfig>("[wibble]\n").unwrap_err().to_string();
        assert!(err.contains("wibble"), "{err}");
    }

    #[test]
    fn infinite_prior_parses() {
        let cfg: RunConfig = toml::from_str("[adapt]\nprior_strength = inf\n").unwrap();
        assert!(cfg.adapt.unwrap().prior_strength.is_infinite());
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "[run]\nseed = 9\n\n[adapt]\nb = 16\neta = 0.001\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        let emitted = cfg.to_toml();
        let back: RunConfig = toml::from_str(&emitted).unwrap();
        assert_eq!(back.run.seed, 9);
        assert_eq!(back.adapt.unwrap().b, 16);
    }

    #[test]
    fn augment_section_validation() {
        let bad = AugmentSection { severity: 11, ..Default::default() };
        assert!(bad.to_policy().is_err());
        let bad = AugmentSection { alpha: 0.0, ..Default::default() };
        assert!(bad.to_policy().is_err());
        let bad = AugmentSection { ops: Some(vec![]), ..Default::default() };
        assert!(bad.to_policy().is_err());
        let ok = AugmentSection::default().to_policy().unwrap();
        assert_eq!(ok.chains, 3);
    }

    #[test]
    fn corrupt_section_validation() {
        let ok = CorruptSection {
            kinds: vec![CorruptionKind::Contrast],
            severities: vec![1, 5],
            seed: None,
        };
        assert!(ok.validate().is_ok());
        let bad = CorruptSection { severities: vec![0], ..ok.clone() };
        assert!(bad.validate().is_err());
        let bad = CorruptSection { kinds: vec![], ..ok };
        assert!(bad.validate().is_err());
    }
}
