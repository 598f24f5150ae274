//! Adapt-then-predict procedures and their objectives.
//!
//! The core procedure clones the pretrained model for one test point,
//! samples B augmented copies, optionally blends each BN layer's statistics
//! with batch statistics of the forward pass, takes gradient steps on the
//! entropy of the marginal (averaged) output distribution over the copies,
//! and predicts on the original point. Alternative objectives (per-copy
//! conditional entropy, pairwise cross entropy), a non-adaptive augmented
//! ensemble, BN-statistics-only adaptation, and stream-based batch entropy
//! minimization serve as baselines and ablations.

use crate::augment::{sample_augmentations, AugmentationPolicy, Image};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{batch_from_images, BnStats, BnView, Model, ParamFilter};
use crate::tensor::{argmax, Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Epsilon rule for probability logs: p log p is treated as 0 at p <= eps.
pub const PROB_EPS: f64 = 1e-12;

/// Rounding slack at the threshold-gate boundary so that a fraction of 1.0
/// never adapts even when the entropy estimate rounds up to log C.
const GATE_SLACK: f64 = 1e-9;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// ── configuration ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Memo,
    Tta,
    CeSinglePoint,
    Pce,
    TentBatch,
    BnOnly,
    None,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Memo => "memo",
            Strategy::Tta => "tta",
            Strategy::CeSinglePoint => "ce_single_point",
            Strategy::Pce => "pce",
            Strategy::TentBatch => "tent_batch",
            Strategy::BnOnly => "bn_only",
            Strategy::None => "none",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRuleKind {
    Sgd,
    SgdMomentum,
    AdaptiveMoments,
}

/// Where the mixed BN statistics are estimated from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    AugmentedBatch,
    OriginalPoint,
}

/// Statistics used for the final prediction on the original point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStats {
    /// Reuse the statistics estimated for the adaptation forward pass.
    Reuse,
    /// Re-estimate from the original point with the adapted model.
    Recompute,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub strategy: Strategy,
    /// Number of augmented copies per test point.
    pub b: usize,
    /// Learning rate; 0 turns the update into a no-op.
    pub eta: f64,
    pub steps: usize,
    pub update_rule: UpdateRuleKind,
    pub momentum_rho: f64,
    /// Decoupled weight decay for the adaptive-moments rule.
    pub weight_decay: f64,
    /// BN prior strength N: weight N/(N+1) on training statistics.
    /// Infinity disables mixing (pure training statistics).
    pub prior_strength: f64,
    /// Skip adaptation when the loss is at or below this fraction of log C.
    pub threshold_fraction: Option<f64>,
    pub param_filter: ParamFilter,
    pub episodic: bool,
    pub tent_batch_size: usize,
    pub stats_source: StatsSource,
    pub final_stats: FinalStats,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            strategy: Strategy::Memo,
            b: 32,
            eta: 0.005,
            steps: 1,
            update_rule: UpdateRuleKind::Sgd,
            momentum_rho: 0.9,
            weight_decay: 0.0,
            prior_strength: 16.0,
            threshold_fraction: None,
            param_filter: ParamFilter::All,
            episodic: true,
            tent_batch_size: 64,
            stats_source: StatsSource::AugmentedBatch,
            final_stats: FinalStats::Reuse,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::Config("B must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.prior_strength < 0.0 || self.prior_strength.is_nan() {
            return Err(Error::Config(format!(
                "prior_strength must be non-negative or inf, got {}",
                self.prior_strength
            )));
        }
        if let Some(t) = self.threshold_fraction {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!(
                    "threshold_fraction must be in (0, 1], got {t}"
                )));
            }
        }
        if self.strategy == Strategy::Pce && self.b < 2 {
            return Err(Error::Config("pairwise cross entropy needs B >= 2".into()));
        }
        if self.strategy == Strategy::TentBatch && self.tent_batch_size == 0 {
            return Err(Error::Config("tent_batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

// ── distributions and scalar objective values ───────────────────────

/// Probability vector over C classes.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDistribution {
    pub p: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Numeric(format!("invalid probability vector {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::Numeric(format!("probabilities sum to {s}, not 1: {p:?}")));
        }
        Ok(CategoricalDistribution { p })
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }
}

/// Shannon entropy with the epsilon rule, after renormalizing so that
/// float round-off cannot push the value past log C.
pub fn entropy64(p: &[f64]) -> f64 {
    let s: f64 = p.iter().sum();
    if s <= 0.0 {
        return 0.0;
    }
    -p.iter()
        .map(|&v| {
            let q = v / s;
            if q > PROB_EPS {
                q * q.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Cross entropy H(p, q) with the epsilon rule on q.
pub fn cross_entropy64(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(&pv, &qv)| pv * qv.max(PROB_EPS).ln()).sum::<f64>()
}

/// Row-wise f64 probabilities of an (N,C) f32 logits tensor.
fn prob_rows64(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    crate::nn::softmax_rows(logits)
        .into_iter()
        .map(|row| row.into_iter().map(|v| v as f64).collect())
        .collect()
}

fn mean_distribution(rows: &[Vec<f64>]) -> Vec<f64> {
    let c = rows[0].len();
    let mut out = vec![0.0; c];
    for row in rows {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

/// Scalar objective values from per-copy probability rows.
fn objective_value(obj: Objective, rows: &[Vec<f64>]) -> f64 {
    match obj {
        Objective::Marginal => entropy64(&mean_distribution(rows)),
        Objective::Conditional => {
            rows.iter().map(|r| entropy64(r)).sum::<f64>() / rows.len() as f64
        }
        Objective::Pairwise => {
            let b = rows.len();
            let mut total = 0.0;
            for (i, pi) in rows.iter().enumerate() {
                for (j, pj) in rows.iter().enumerate() {
                    if i != j {
                        total += cross_entropy64(pi, pj);
                    }
                }
            }
            total / (b * (b - 1)) as f64
        }
    }
}

// ── differentiable objectives on the tape ───────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Marginal,
    Conditional,
    Pairwise,
}

/// Entropy of the averaged distribution: H(mean over rows of `probs`).
pub fn marginal_entropy_on_tape<F: Element>(tape: &mut Tape<F>, probs: Var) -> Result<Var> {
    let pbar = tape.mean_axis0(probs)?;
    let lp = tape.log_clamped(pbar, F::from_f64(PROB_EPS));
    let pl = tape.mul(pbar, lp)?;
    let s = tape.sum_all(pl);
    Ok(tape.scale(s, -F::one()))
}

/// Mean per-row entropy: (1/B) sum_i H(p_i).
pub fn conditional_entropy_on_tape<F: Element>(tape: &mut Tape<F>, probs: Var) -> Result<Var> {
    let b = tape.shape(probs)[0];
    let lp = tape.log_clamped(probs, F::from_f64(PROB_EPS));
    let pl = tape.mul(probs, lp)?;
    let s = tape.sum_all(pl);
    Ok(tape.scale(s, -F::one() / F::from_usize(b)))
}

/// Mean cross entropy over ordered pairs of distinct rows:
/// (1/(B(B-1))) sum_i sum_{j != i} H(p_i, p_j).
pub fn pairwise_cross_entropy_on_tape<F: Element>(tape: &mut Tape<F>, probs: Var) -> Result<Var> {
    let b = tape.shape(probs)[0];
    if b < 2 {
        return Err(Error::InvalidArgument(
            "pairwise cross entropy needs at least 2 rows".into(),
        ));
    }
    let lp = tape.log_clamped(probs, F::from_f64(PROB_EPS));
    // sum_{i,j} p_i . ln p_j factorizes over column sums; subtracting the
    // diagonal leaves the i != j part
    let col_p = tape.sum_axis0(probs)?;
    let col_l = tape.sum_axis0(lp)?;
    let cross = tape.mul(col_p, col_l)?;
    let cross_all = tape.sum_all(cross);
    let diag = tape.mul(probs, lp)?;
    let diag_sum = tape.sum_all(diag);
    let neg = tape.sub(diag_sum, cross_all)?;
    Ok(tape.scale(neg, F::one() / F::from_usize(b * (b - 1))))
}

pub fn objective_on_tape<F: Element>(tape: &mut Tape<F>, probs: Var, obj: Objective) -> Result<Var> {
    match obj {
        Objective::Marginal => marginal_entropy_on_tape(tape, probs),
        Objective::Conditional => conditional_entropy_on_tape(tape, probs),
        Objective::Pairwise => pairwise_cross_entropy_on_tape(tape, probs),
    }
}

// ── model-level operations ──────────────────────────────────────────

/// Mixed BN statistics for one test point under prior strength N,
/// estimated from `batch` (the augmented copies or the point itself).
pub fn single_point_bn_stats<F: Element>(
    model: &Model<F>,
    batch: &Tensor<F>,
    prior_n: f64,
) -> Result<Vec<BnStats<F>>> {
    Ok(model
        .mixed_bn_stats(batch, prior_n)?
        .into_iter()
        .map(|m| m.mixed)
        .collect())
}

/// Average predictive distribution over augmented copies (the augmented
/// ensemble that both the non-adaptive baseline and the adaptation
/// objective estimate).
pub fn marginal_distribution(
    model: &Model<f32>,
    augmented: &[Image],
    view: BnView<f32>,
) -> Result<CategoricalDistribution> {
    if augmented.is_empty() {
        return Err(Error::InvalidArgument("marginal distribution needs B >= 1 copies".into()));
    }
    let batch = batch_from_images::<f32>(&augmented.iter().collect::<Vec<_>>())?;
    let logits = model.logits(&batch, view)?;
    let rows = prob_rows64(&logits);
    CategoricalDistribution::new(mean_distribution(&rows))
}

/// Marginal entropy of the model on augmented copies (scalar value).
pub fn marginal_entropy_loss(
    model: &Model<f32>,
    augmented: &[Image],
    view: BnView<f32>,
) -> Result<f64> {
    let dist = marginal_distribution(model, augmented, view)?;
    let h = entropy64(&dist.p);
    if !h.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite marginal entropy; distribution {:?}",
            dist.p
        )));
    }
    Ok(h)
}

/// Mean per-copy entropy of the model on augmented copies (scalar value).
pub fn conditional_entropy_loss(
    model: &Model<f32>,
    augmented: &[Image],
    view: BnView<f32>,
) -> Result<f64> {
    let batch = batch_from_images::<f32>(&augmented.iter().collect::<Vec<_>>())?;
    let logits = model.logits(&batch, view)?;
    Ok(objective_value(Objective::Conditional, &prob_rows64(&logits)))
}

/// Mean pairwise cross entropy of the model on augmented copies.
pub fn pairwise_cross_entropy_loss(
    model: &Model<f32>,
    augmented: &[Image],
    view: BnView<f32>,
) -> Result<f64> {
    if augmented.len() < 2 {
        return Err(Error::InvalidArgument("pairwise cross entropy needs B >= 2".into()));
    }
    let batch = batch_from_images::<f32>(&augmented.iter().collect::<Vec<_>>())?;
    let logits = model.logits(&batch, view)?;
    Ok(objective_value(Objective::Pairwise, &prob_rows64(&logits)))
}

// ── update rules ────────────────────────────────────────────────────

/// Optimizer state for one adaptation episode (or one online stream).
pub struct Optimizer<F: Element> {
    kind: UpdateRuleKind,
    rho: F,
    weight_decay: F,
    velocity: Vec<Vec<F>>,
    m1: Vec<Vec<F>>,
    m2: Vec<Vec<F>>,
    t: i32,
}

impl<F: Element> Optimizer<F> {
    pub fn new(cfg: &AdaptationConfig, param_sizes: &[usize]) -> Self {
        let zeros = |on: bool| -> Vec<Vec<F>> {
            if on {
                param_sizes.iter().map(|&n| vec![F::zero(); n]).collect()
            } else {
                Vec::new()
            }
        };
        Optimizer {
            kind: cfg.update_rule,
            rho: F::from_f64(cfg.momentum_rho),
            weight_decay: F::from_f64(cfg.weight_decay),
            velocity: zeros(cfg.update_rule == UpdateRuleKind::SgdMomentum),
            m1: zeros(cfg.update_rule == UpdateRuleKind::AdaptiveMoments),
            m2: zeros(cfg.update_rule == UpdateRuleKind::AdaptiveMoments),
            t: 0,
        }
    }

    /// Apply one update G(theta, eta, grads) in place, consuming the `grad`
    /// slots populated by the backward pass. Parameters without gradients
    /// (filtered out or unreachable) are untouched except for decoupled
    /// weight decay, which applies to every adapted parameter.
    pub fn step(&mut self, params: Vec<&mut Tensor<F>>, eta: f64) {
        let eta = F::from_f64(eta);
        self.t += 1;
        for (idx, p) in params.into_iter().enumerate() {
            let Some(grad) = p.grad.take() else { continue };
            match self.kind {
                UpdateRuleKind::Sgd => {
                    for (pv, &g) in p.data_mut().iter_mut().zip(&grad) {
                        *pv = *pv - eta * g;
                    }
                }
                UpdateRuleKind::SgdMomentum => {
                    let v = &mut self.velocity[idx];
                    for ((pv, vv), &g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                        *vv = self.rho * *vv + g;
                        *pv = *pv - eta * *vv;
                    }
                }
                UpdateRuleKind::AdaptiveMoments => {
                    let b1 = F::from_f64(ADAM_BETA1);
                    let b2 = F::from_f64(ADAM_BETA2);
                    let eps = F::from_f64(ADAM_EPS);
                    let c1 = F::one() - F::from_f64(ADAM_BETA1.powi(self.t));
                    let c2 = F::one() - F::from_f64(ADAM_BETA2.powi(self.t));
                    let decay = F::one() - eta * self.weight_decay;
                    let m1 = &mut self.m1[idx];
                    let m2 = &mut self.m2[idx];
                    for (i, (pv, &g)) in p.data_mut().iter_mut().zip(&grad).enumerate() {
                        m1[i] = b1 * m1[i] + (F::one() - b1) * g;
                        m2[i] = b2 * m2[i] + (F::one() - b2) * g * g;
                        let mhat = m1[i] / c1;
                        let vhat = m2[i] / c2;
                        *pv = *pv * decay - eta * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

// ── per-point adaptation ────────────────────────────────────────────

/// Outcome row for one test point.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub index: usize,
    pub true_label: usize,
    pub predicted: usize,
    /// Strategy objective before any update.
    pub loss_before: f64,
    /// Strategy objective re-evaluated on the same augmentations and
    /// statistics after the update(s); equals `loss_before` when nothing
    /// was adapted.
    pub loss_after: f64,
    /// Marginal entropy estimate before adaptation.
    pub marginal_entropy: f64,
    pub seconds: f64,
    pub strategy: Strategy,
    /// Whether any gradient update was applied.
    pub adapted: bool,
    /// Set when a numeric failure forced the unadapted fallback.
    pub flagged: bool,
}

impl Strategy {
    fn objective(self) -> Option<Objective> {
        match self {
            Strategy::Memo => Some(Objective::Marginal),
            Strategy::CeSinglePoint => Some(Objective::Conditional),
            Strategy::Pce => Some(Objective::Pairwise),
            _ => None,
        }
    }
}

struct AugForward {
    tape: Tape<f32>,
    bound: crate::nn::Bound,
    probs: Var,
    loss: Var,
    rows: Vec<Vec<f64>>,
}

fn forward_objective(
    model: &Model<f32>,
    aug_batch: &Tensor<f32>,
    stats: Option<&[BnStats<f32>]>,
    filter: ParamFilter,
    obj: Objective,
) -> Result<AugForward> {
    let mut tape = Tape::new();
    let x = tape.constant(aug_batch);
    let bound = model.bind(&mut tape, filter);
    let view = match stats {
        Some(s) => BnView::Mixed(s),
        None => BnView::Eval,
    };
    let logits = model.forward_bound(&mut tape, x, &bound, view)?;
    let probs = tape.softmax(logits)?;
    let loss = objective_on_tape(&mut tape, probs, obj)?;
    let logits_t = tape.to_tensor(logits);
    let rows = prob_rows64(&logits_t);
    Ok(AugForward { tape, bound, probs, loss, rows })
}

/// Adapt a clone of the model on one test point and predict on the
/// original input. Returns (prediction, record, adapted model); the given
/// model is untouched. Numeric failures fall back to the unadapted
/// prediction with the record flagged.
pub fn adapt_predict(
    model: &Model<f32>,
    x: &Image,
    true_label: usize,
    index: usize,
    cfg: &AdaptationConfig,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<(usize, EvalRecord, Model<f32>)> {
    cfg.validate()?;
    let mut record = EvalRecord {
        index,
        true_label,
        predicted: 0,
        loss_before: 0.0,
        loss_after: 0.0,
        marginal_entropy: 0.0,
        seconds: 0.0,
        strategy: cfg.strategy,
        adapted: false,
        flagged: false,
    };
    let x_batch = batch_from_images::<f32>(&[x])?;
    let c = model.num_classes();

    // plain evaluation: no augmentation, no statistics adaptation
    if cfg.strategy == Strategy::None {
        let logits = model.logits(&x_batch, BnView::Eval)?;
        let rows = prob_rows64(&logits);
        record.predicted = argmax(&rows[0]);
        record.marginal_entropy = entropy64(&rows[0]);
        record.loss_before = record.marginal_entropy;
        record.loss_after = record.loss_before;
        return Ok((record.predicted, record, model.clone()));
    }

    let augmented = sample_augmentations(x, cfg.b, policy, seed)?;
    let aug_batch = batch_from_images::<f32>(&augmented.iter().collect::<Vec<_>>())?;

    // mixed BN statistics for this point (None when the prior is infinite)
    let stats: Option<Vec<BnStats<f32>>> = if cfg.prior_strength.is_finite() {
        let src = match cfg.stats_source {
            StatsSource::AugmentedBatch => &aug_batch,
            StatsSource::OriginalPoint => &x_batch,
        };
        Some(single_point_bn_stats(model, src, cfg.prior_strength)?)
    } else {
        None
    };
    let mut adapted_model = model.clone();

    match cfg.strategy.objective() {
        None => {
            // tta / bn_only: no parameter updates
            let aug_view = match &stats {
                Some(s) => BnView::Mixed(s),
                None => BnView::Eval,
            };
            let logits = model.logits(&aug_batch, aug_view)?;
            let rows = prob_rows64(&logits);
            let pbar = mean_distribution(&rows);
            record.marginal_entropy = entropy64(&pbar);
            record.loss_before = record.marginal_entropy;
            record.loss_after = record.loss_before;
            record.predicted = match cfg.strategy {
                Strategy::Tta => argmax(&pbar),
                _ => {
                    // bn_only predicts on the original point under the
                    // adapted statistics
                    let final_view = match &stats {
                        Some(s) => BnView::Mixed(s),
                        None => BnView::Eval,
                    };
                    let l = model.logits(&x_batch, final_view)?;
                    crate::nn::predict_rows(&l)[0]
                }
            };
        }
        Some(obj) => {
            let mut pass =
                forward_objective(model, &aug_batch, stats.as_deref(), cfg.param_filter, obj)?;
            record.marginal_entropy = objective_value(Objective::Marginal, &pass.rows);
            record.loss_before = objective_value(obj, &pass.rows);
            record.loss_after = record.loss_before;

            if !record.loss_before.is_finite() {
                record.flagged = true;
            }

            let gate_open = match cfg.threshold_fraction {
                Some(t) => record.loss_before > t * (c as f64).ln() + GATE_SLACK,
                None => true,
            };

            if gate_open && !record.flagged {
                let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
                let mut optimizer = Optimizer::new(cfg, &sizes);
                for step in 0..cfg.steps {
                    if step > 0 {
                        pass = forward_objective(
                            &adapted_model,
                            &aug_batch,
                            stats.as_deref(),
                            cfg.param_filter,
                            obj,
                        )?;
                        if !tape_loss_finite(&pass) {
                            record.flagged = true;
                            break;
                        }
                    }
                    pass.tape.backward(pass.loss)?;
                    if !adapted_model.write_grads(&pass.tape, &pass.bound) {
                        record.flagged = true;
                        break;
                    }
                    optimizer.step(adapted_model.params_mut(), cfg.eta);
                    record.adapted = true;
                }
                if record.adapted {
                    // re-evaluate the objective with the same augmentations
                    // and the same statistics
                    let after = forward_objective(
                        &adapted_model,
                        &aug_batch,
                        stats.as_deref(),
                        cfg.param_filter,
                        obj,
                    )?;
                    record.loss_after = objective_value(obj, &after.rows);
                }
            }

            let final_stats_vec: Option<Vec<BnStats<f32>>> = match (cfg.final_stats, &stats) {
                (FinalStats::Recompute, Some(_)) => {
                    Some(single_point_bn_stats(&adapted_model, &x_batch, cfg.prior_strength)?)
                }
                _ => stats.clone(),
            };
            let final_view = match &final_stats_vec {
                Some(s) => BnView::Mixed(s),
                None => BnView::Eval,
            };
            let logits = adapted_model.logits(&x_batch, final_view)?;
            record.predicted = crate::nn::predict_rows(&logits)[0];
        }
    }
    Ok((record.predicted, record, adapted_model))
}

fn tape_loss_finite(pass: &AugForward) -> bool {
    pass.tape.scalar_value(pass.loss).is_finite() && pass.tape.value(pass.probs).iter().all(|v| v.is_finite())
}

/// The augmented-ensemble baseline: argmax of the marginal distribution,
/// sharing the forward setup (statistics included) with the adaptive path.
pub fn tta_predict(
    model: &Model<f32>,
    x: &Image,
    cfg: &AdaptationConfig,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<usize> {
    let mut tta_cfg = cfg.clone();
    tta_cfg.strategy = Strategy::Tta;
    let (pred, _, _) = adapt_predict(model, x, 0, 0, &tta_cfg, policy, seed)?;
    Ok(pred)
}

// ── stream-based batch adaptation ───────────────────────────────────

/// Entropy minimization over batches of raw test points with
/// batch-statistics BN. Episodic mode resets to the pristine model after
/// every batch; online mode carries parameters and optimizer state across
/// the stream.
pub fn tent_adapt(
    model: &Model<f32>,
    stream: &Dataset,
    cfg: &AdaptationConfig,
) -> Result<(Vec<usize>, Vec<EvalRecord>)> {
    cfg.validate()?;
    if stream.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let indices: Vec<usize> = (0..stream.len()).collect();
    let mut predictions = Vec::with_capacity(stream.len());
    let mut records = Vec::with_capacity(stream.len());

    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut online_model = model.clone();
    let mut online_opt = Optimizer::new(cfg, &sizes);

    for chunk in indices.chunks(cfg.tent_batch_size) {
        let start = std::time::Instant::now();
        let (preds, mut recs) = if cfg.episodic {
            let mut m = model.clone();
            let mut opt = Optimizer::new(cfg, &sizes);
            tent_batch_step(&mut m, &mut opt, stream, chunk, cfg)?
        } else {
            tent_batch_step(&mut online_model, &mut online_opt, stream, chunk, cfg)?
        };
        let per_point = start.elapsed().as_secs_f64() / chunk.len() as f64;
        for r in &mut recs {
            r.seconds = per_point;
        }
        predictions.extend(preds);
        records.extend(recs);
    }
    Ok((predictions, records))
}

fn tent_batch_step(
    model: &mut Model<f32>,
    optimizer: &mut Optimizer<f32>,
    stream: &Dataset,
    chunk: &[usize],
    cfg: &AdaptationConfig,
) -> Result<(Vec<usize>, Vec<EvalRecord>)> {
    let images: Vec<&Image> = chunk.iter().map(|&i| &stream.images[i]).collect();
    let batch = batch_from_images::<f32>(&images)?;

    let mut tape = Tape::new();
    let x = tape.constant(&batch);
    let bound = model.bind(&mut tape, cfg.param_filter);
    let logits = model.forward_bound(&mut tape, x, &bound, BnView::Batch)?;
    let probs = tape.softmax(logits)?;
    let loss = conditional_entropy_on_tape(&mut tape, probs)?;
    let logits_t = tape.to_tensor(logits);
    let rows = prob_rows64(&logits_t);
    let loss_before = objective_value(Objective::Conditional, &rows);
    let marginal = objective_value(Objective::Marginal, &rows);

    // one update per batch
    let mut adapted = false;
    let mut flagged = !loss_before.is_finite();
    if !flagged {
        tape.backward(loss)?;
        if model.write_grads(&tape, &bound) {
            optimizer.step(model.params_mut(), cfg.eta);
            adapted = true;
        } else {
            flagged = true;
        }
    }

    // predict on the same batch with batch statistics after adaptation
    let post_logits = model.logits(&batch, BnView::Batch)?;
    let post_rows = prob_rows64(&post_logits);
    let loss_after = if adapted {
        objective_value(Objective::Conditional, &post_rows)
    } else {
        loss_before
    };
    let preds: Vec<usize> = post_rows.iter().map(|r| argmax(r)).collect();
    let records = chunk
        .iter()
        .zip(&preds)
        .map(|(&i, &p)| EvalRecord {
            index: i,
            true_label: stream.labels[i],
            predicted: p,
            loss_before,
            loss_after,
            marginal_entropy: marginal,
            seconds: 0.0,
            strategy: Strategy::TentBatch,
            adapted,
            flagged,
        })
        .collect();
    Ok((preds, records))
}
