//! Classifier models with batch normalization, supervised training, and
//! checkpoint persistence.
//!
//! Two reference architectures cover the adaptation study: `conv_small`
//! (conv->BN->ReLU->pool blocks plus a linear head) for image inputs and
//! `mlp_bn` (affine+BN+ReLU hidden layers) for flat inputs. A forward pass
//! normalizes each BN layer with running statistics (eval), current batch
//! statistics (batch/train), or caller-supplied statistics (mixed); mixed
//! statistics come from [`Model::mixed_bn_stats`], which blends batch and
//! running moments under a prior strength.

use crate::augment::Image;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{argmax, Element, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    ConvSmall,
    MlpBn,
}

/// Architecture descriptor; also the checkpoint's self-description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// (channels, height, width)
    pub input: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_conv_channels() -> Vec<usize> {
    vec![8, 16, 32]
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl ModelConfig {
    pub fn conv_small(input: [usize; 3], num_classes: usize) -> Self {
        ModelConfig {
            arch: ArchKind::ConvSmall,
            input,
            num_classes,
            conv_channels: default_conv_channels(),
            hidden: default_hidden(),
        }
    }

    pub fn mlp_bn(input: [usize; 3], num_classes: usize) -> Self {
        ModelConfig {
            arch: ArchKind::MlpBn,
            input,
            num_classes,
            conv_channels: default_conv_channels(),
            hidden: default_hidden(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Layer<F: Element> {
    Conv { weight: Tensor<F>, bias: Tensor<F>, pad: usize },
    Linear { weight: Tensor<F>, bias: Tensor<F> },
    BatchNorm { gamma: Tensor<F>, beta: Tensor<F>, running_mean: Tensor<F>, running_var: Tensor<F> },
    Relu,
    MaxPool { k: usize, stride: usize },
    Flatten,
}

/// Per-channel first and second moments of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<F: Element> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Batch moments of a forward pass together with their blend against the
/// training moments.
#[derive(Clone, Debug)]
pub struct BnMixture<F: Element> {
    pub test: BnStats<F>,
    pub mixed: BnStats<F>,
}

/// Which statistics BN layers normalize with.
#[derive(Clone, Copy)]
pub enum BnView<'a, F: Element> {
    /// Running statistics accumulated during training.
    Eval,
    /// Statistics of the current batch (differentiable through the moments).
    Batch,
    /// Caller-supplied statistics, one entry per BN layer.
    Mixed(&'a [BnStats<F>]),
}

/// Which parameters receive gradients during adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamFilter {
    All,
    NormAffineOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamFilter {
    pub fn selects(self, role: ParamRole) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::NormAffineOnly => {
                matches!(role, ParamRole::NormScale | ParamRole::NormShift)
            }
        }
    }
}

/// Tape bindings of the model parameters, aligned with [`Model::params`].
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Training metadata carried into checkpoints.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub seed: u64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Model<F: Element> {
    pub config: ModelConfig,
    pub(crate) layers: Vec<Layer<F>>,
    pub meta: TrainMeta,
}

impl<F: Element> Model<F> {
    /// Variance-scaled fan-in initialization; biases zero, BN scale one,
    /// shift zero, running stats (0, 1).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model<F>> {
        let mut rng = rng::rng(seed, stream::INIT, 0);
        let mut normal = |n: usize, fan_in: usize| -> Tensor<F> {
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<F> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    F::from_f64(z * std)
                })
                .collect();
            Tensor::from_vec(data)
        };
        let bn = |c: usize| Layer::BatchNorm {
            gamma: Tensor::full(vec![c], F::one()),
            beta: Tensor::zeros(vec![c]),
            running_mean: Tensor::zeros(vec![c]),
            running_var: Tensor::full(vec![c], F::one()),
        };

        let [c_in, h, w] = config.input;
        let mut layers = Vec::new();
        match config.arch {
            ArchKind::ConvSmall => {
                if config.conv_channels.is_empty() {
                    return Err(Error::Config("conv_small needs at least one conv block".into()));
                }
                let mut c_prev = c_in;
                let (mut sh, mut sw) = (h, w);
                for &c_out in &config.conv_channels {
                    let fan_in = c_prev * 9;
                    let mut weight = normal(c_out * c_prev * 9, fan_in);
                    weight = reshaped(weight, vec![c_out, c_prev, 3, 3]);
                    layers.push(Layer::Conv { weight, bias: Tensor::zeros(vec![c_out]), pad: 1 });
                    layers.push(bn(c_out));
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool { k: 2, stride: 2 });
                    sh = (sh - 2) / 2 + 1;
                    sw = (sw - 2) / 2 + 1;
                    if sh == 0 || sw == 0 {
                        return Err(Error::Config(format!(
                            "input {h}x{w} too small for {} conv blocks",
                            config.conv_channels.len()
                        )));
                    }
                    c_prev = c_out;
                }
                layers.push(Layer::Flatten);
                let flat = c_prev * sh * sw;
                let weight = reshaped(normal(flat * config.num_classes, flat), vec![flat, config.num_classes]);
                layers.push(Layer::Linear { weight, bias: Tensor::zeros(vec![config.num_classes]) });
            }
            ArchKind::MlpBn => {
                layers.push(Layer::Flatten);
                let mut f_prev = c_in * h * w;
                for &hdim in &config.hidden {
                    let weight = reshaped(normal(f_prev * hdim, f_prev), vec![f_prev, hdim]);
                    layers.push(Layer::Linear { weight, bias: Tensor::zeros(vec![hdim]) });
                    layers.push(bn(hdim));
                    layers.push(Layer::Relu);
                    f_prev = hdim;
                }
                let weight = reshaped(normal(f_prev * config.num_classes, f_prev), vec![f_prev, config.num_classes]);
                layers.push(Layer::Linear { weight, bias: Tensor::zeros(vec![config.num_classes]) });
            }
        }
        Ok(Model { config: config.clone(), layers, meta: TrainMeta::default() })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    // ── parameter access ────────────────────────────────────────────

    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_roles(&self) -> Vec<ParamRole> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { .. } | Layer::Linear { .. } => {
                    out.push(ParamRole::Weight);
                    out.push(ParamRole::Bias);
                }
                Layer::BatchNorm { .. } => {
                    out.push(ParamRole::NormScale);
                    out.push(ParamRole::NormShift);
                }
                _ => {}
            }
        }
        out
    }

    /// BN running statistics (buffers, not learnable parameters), one
    /// (mean, var) pair per BN layer.
    pub fn bn_buffers(&self) -> Vec<(&Tensor<F>, &Tensor<F>)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { running_mean, running_var, .. } => {
                    Some((running_mean, running_var))
                }
                _ => None,
            })
            .collect()
    }

    pub fn num_bn_layers(&self) -> usize {
        self.bn_buffers().len()
    }

    /// Flat little-endian f32 serialization of parameters and BN buffers in
    /// declaration order.
    pub fn payload(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.extend(weight.data().iter().map(|v| v.as_f32()));
                    out.extend(bias.data().iter().map(|v| v.as_f32()));
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    out.extend(gamma.data().iter().map(|v| v.as_f32()));
                    out.extend(beta.data().iter().map(|v| v.as_f32()));
                    out.extend(running_mean.data().iter().map(|v| v.as_f32()));
                    out.extend(running_var.data().iter().map(|v| v.as_f32()));
                }
                _ => {}
            }
        }
        out
    }

    fn load_payload(&mut self, values: &[f32]) -> Result<()> {
        let mut i = 0;
        let fill = |t: &mut Tensor<F>, i: &mut usize| -> Result<()> {
            let n = t.numel();
            if *i + n > values.len() {
                return Err(Error::CheckpointArch(format!(
                    "payload too short: needed {} more values at offset {}",
                    n,
                    *i
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&values[*i..*i + n]) {
                *dst = F::from_f32(src);
            }
            *i += n;
            Ok(())
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    fill(weight, &mut i)?;
                    fill(bias, &mut i)?;
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    fill(gamma, &mut i)?;
                    fill(beta, &mut i)?;
                    fill(running_mean, &mut i)?;
                    fill(running_var, &mut i)?;
                }
                _ => {}
            }
        }
        if i != values.len() {
            return Err(Error::CheckpointArch(format!(
                "payload has {} values but the architecture declares {}",
                values.len(),
                i
            )));
        }
        Ok(())
    }

    /// Cast the whole model to another element width (used by the 64-bit
    /// gradient-check mode).
    pub fn cast<G: Element>(&self) -> Model<G> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { weight, bias, pad } => Layer::Conv {
                    weight: weight.cast(),
                    bias: bias.cast(),
                    pad: *pad,
                },
                Layer::Linear { weight, bias } => Layer::Linear {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => Layer::BatchNorm {
                    gamma: gamma.cast(),
                    beta: beta.cast(),
                    running_mean: running_mean.cast(),
                    running_var: running_var.cast(),
                },
                Layer::Relu => Layer::Relu,
                Layer::MaxPool { k, stride } => Layer::MaxPool { k: *k, stride: *stride },
                Layer::Flatten => Layer::Flatten,
            })
            .collect();
        Model { config: self.config.clone(), layers, meta: self.meta.clone() }
    }

    // ── forward ─────────────────────────────────────────────────────

    /// Bind every parameter onto the tape; gradient flags follow the filter.
    pub fn bind(&self, tape: &mut Tape<F>, filter: ParamFilter) -> Bound {
        let roles = self.param_roles();
        let vars = self
            .params()
            .iter()
            .zip(roles)
            .map(|(p, role)| tape.leaf(p, filter.selects(role)))
            .collect();
        Bound { vars }
    }

    fn check_input(&self, batch: &Tensor<F>) -> Result<()> {
        let [c, h, w] = self.config.input;
        let s = batch.shape();
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w || s[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: s.to_vec(),
                rhs: vec![0, c, h, w],
            });
        }
        Ok(())
    }

    /// Forward a bound model. Returns the logits var; batch-mode BN moments
    /// are readable off the tape afterwards via the returned stat vars.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        bound: &Bound,
        view: BnView<F>,
    ) -> Result<Var> {
        self.walk(tape, x, bound, view, &mut Vec::new())
    }

    /// Inference convenience: constants-only binding, fresh tape,
    /// detached logits.
    pub fn logits(&self, batch: &Tensor<F>, view: BnView<F>) -> Result<Tensor<F>> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let bound = self.bind(&mut tape, ParamFilter::NormAffineOnly);
        // gradients are never taken here; the filter only affects flags
        let out = self.walk(&mut tape, x, &bound, view, &mut Vec::new())?;
        Ok(tape.to_tensor(out))
    }

    fn walk(
        &self,
        tape: &mut Tape<F>,
        input: Var,
        bound: &Bound,
        view: BnView<F>,
        batch_moments: &mut Vec<BnStats<F>>,
    ) -> Result<Var> {
        if let BnView::Mixed(stats) = view {
            if stats.len() != self.num_bn_layers() {
                return Err(Error::InvalidArgument(format!(
                    "mixed statistics cover {} BN layers, model has {}",
                    stats.len(),
                    self.num_bn_layers()
                )));
            }
        }
        let mut x = input;
        let mut pi = 0; // param cursor
        let mut bi = 0; // BN layer cursor
        for layer in &self.layers {
            match layer {
                Layer::Conv { pad, .. } => {
                    let w = bound.vars[pi];
                    let b = bound.vars[pi + 1];
                    pi += 2;
                    x = tape.conv2d(x, w, b, *pad, 1)?;
                }
                Layer::Linear { .. } => {
                    let w = bound.vars[pi];
                    let b = bound.vars[pi + 1];
                    pi += 2;
                    let xw = tape.matmul(x, w)?;
                    x = tape.add(xw, b)?;
                }
                Layer::BatchNorm { running_mean, running_var, .. } => {
                    let gamma = bound.vars[pi];
                    let beta = bound.vars[pi + 1];
                    pi += 2;
                    let (mean, var) = match view {
                        BnView::Eval => {
                            (tape.constant(running_mean), tape.constant(running_var))
                        }
                        BnView::Batch => {
                            let (m, v) = batch_moments_on_tape(tape, x)?;
                            batch_moments.push(BnStats {
                                mean: tape.value(m).to_vec(),
                                var: tape.value(v).to_vec(),
                            });
                            (m, v)
                        }
                        BnView::Mixed(stats) => {
                            let st = &stats[bi];
                            if st.mean.len() != running_mean.numel() {
                                return Err(Error::InvalidArgument(format!(
                                    "mixed statistics for BN layer {} cover {} channels, layer has {}",
                                    bi,
                                    st.mean.len(),
                                    running_mean.numel()
                                )));
                            }
                            let m = tape.constant(&Tensor::from_vec(st.mean.clone()));
                            let v = tape.constant(&Tensor::from_vec(st.var.clone()));
                            (m, v)
                        }
                    };
                    bi += 1;
                    x = bn_normalize(tape, x, mean, var, gamma, beta)?;
                }
                Layer::Relu => {
                    x = tape.relu(x);
                }
                Layer::MaxPool { k, stride } => {
                    x = tape.max_pool2d(x, *k, *stride)?;
                }
                Layer::Flatten => {
                    x = tape.flatten_batch(x)?;
                }
            }
        }
        Ok(x)
    }

    /// Batch-statistics forward that also updates the running moments by
    /// exponential moving average. Used by supervised training only.
    pub fn forward_train(&mut self, tape: &mut Tape<F>, batch: &Tensor<F>) -> Result<(Var, Bound)> {
        self.check_input(batch)?;
        let x = tape.constant(batch);
        let bound = self.bind(tape, ParamFilter::All);
        let mut moments = Vec::new();
        let out = self.walk(tape, x, &bound, BnView::Batch, &mut moments)?;
        let m = F::from_f64(BN_MOMENTUM);
        let keep = F::one() - m;
        let mut mi = 0;
        for layer in &mut self.layers {
            if let Layer::BatchNorm { running_mean, running_var, .. } = layer {
                let stats = &moments[mi];
                mi += 1;
                for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok((out, bound))
    }

    /// One statistics-collection pass: at each BN layer, estimate the batch
    /// moments of its input, blend them with the training moments under
    /// prior strength `n` (weight n/(n+1) on training), normalize with the
    /// blend, and continue. `n = inf` reproduces eval statistics; `n = 0`
    /// uses pure batch statistics.
    pub fn mixed_bn_stats(&self, batch: &Tensor<F>, prior_n: f64) -> Result<Vec<BnMixture<F>>> {
        self.check_input(batch)?;
        if prior_n < 0.0 || prior_n.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "prior strength must be non-negative or inf, got {prior_n}"
            )));
        }
        let (w_train, w_test) = if prior_n.is_infinite() {
            (F::one(), F::zero())
        } else {
            (
                F::from_f64(prior_n / (prior_n + 1.0)),
                F::from_f64(1.0 / (prior_n + 1.0)),
            )
        };
        let mut tape = Tape::new();
        let x0 = tape.constant(batch);
        let bound = self.bind(&mut tape, ParamFilter::NormAffineOnly);
        let mut mixtures = Vec::new();

        let mut x = x0;
        let mut pi = 0;
        for layer in &self.layers {
            match layer {
                Layer::Conv { pad, .. } => {
                    let w = bound.vars[pi];
                    let b = bound.vars[pi + 1];
                    pi += 2;
                    x = tape.conv2d(x, w, b, *pad, 1)?;
                }
                Layer::Linear { .. } => {
                    let w = bound.vars[pi];
                    let b = bound.vars[pi + 1];
                    pi += 2;
                    let xw = tape.matmul(x, w)?;
                    x = tape.add(xw, b)?;
                }
                Layer::BatchNorm { running_mean, running_var, .. } => {
                    let gamma = bound.vars[pi];
                    let beta = bound.vars[pi + 1];
                    pi += 2;
                    let (m, v) = batch_moments_on_tape(&mut tape, x)?;
                    let test = BnStats { mean: tape.value(m).to_vec(), var: tape.value(v).to_vec() };
                    let mixed = BnStats {
                        mean: running_mean
                            .data()
                            .iter()
                            .zip(&test.mean)
                            .map(|(&tr, &te)| w_train * tr + w_test * te)
                            .collect(),
                        var: running_var
                            .data()
                            .iter()
                            .zip(&test.var)
                            .map(|(&tr, &te)| w_train * tr + w_test * te)
                            .collect(),
                    };
                    let mvar = tape.constant(&Tensor::from_vec(mixed.mean.clone()));
                    let vvar = tape.constant(&Tensor::from_vec(mixed.var.clone()));
                    x = bn_normalize(&mut tape, x, mvar, vvar, gamma, beta)?;
                    mixtures.push(BnMixture { test, mixed });
                }
                Layer::Relu => {
                    x = tape.relu(x);
                }
                Layer::MaxPool { k, stride } => {
                    x = tape.max_pool2d(x, *k, *stride)?;
                }
                Layer::Flatten => {
                    x = tape.flatten_batch(x)?;
                }
            }
        }
        Ok(mixtures)
    }

    /// Copy gradients off the tape into each parameter's `grad` slot.
    /// Returns false if any gradient is non-finite (and leaves grads unset).
    pub fn write_grads(&mut self, tape: &Tape<F>, bound: &Bound) -> bool {
        let grads: Vec<Option<Vec<F>>> = bound
            .vars
            .iter()
            .map(|v| tape.grad(*v).map(|g| g.to_vec()))
            .collect();
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return false;
            }
        }
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            p.grad = g;
        }
        true
    }

    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }

    // ── checkpoints ─────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta { config: self.config.clone(), meta: self.meta.clone() };
        let meta_json = serde_json::to_vec(&meta)
            .map_err(|e| Error::InvalidArgument(format!("descriptor serialization: {e}")))?;
        let payload = self.payload();
        let mut out = Vec::with_capacity(20 + meta_json.len() + payload.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta_json);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TTRCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    meta: TrainMeta,
}

/// Load a checkpoint saved by [`Model::save`]; bad magic, unsupported
/// version, truncation and architecture/payload disagreement each produce
/// their own diagnostic.
pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| Error::CheckpointMagic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)
        .map_err(|_| Error::CheckpointTruncated("missing version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, supported: CHECKPOINT_VERSION });
    }
    f.read_exact(&mut u32buf)
        .map_err(|_| Error::CheckpointTruncated("missing descriptor length".into()))?;
    let meta_len = u32::from_le_bytes(u32buf) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    f.read_exact(&mut meta_buf)
        .map_err(|_| Error::CheckpointTruncated("descriptor shorter than declared".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::CheckpointArch(format!("unreadable descriptor: {e}")))?;
    f.read_exact(&mut u32buf)
        .map_err(|_| Error::CheckpointTruncated("missing payload length".into()))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut payload_buf = vec![0u8; count * 4];
    f.read_exact(&mut payload_buf)
        .map_err(|_| Error::CheckpointTruncated(format!("payload shorter than {count} values")))?;
    let values: Vec<f32> = payload_buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut model = Model::<f32>::init(&meta.config, 0)?;
    model.meta = meta.meta;
    model.load_payload(&values)?;
    Ok(model)
}

fn reshaped<F: Element>(t: Tensor<F>, shape: Vec<usize>) -> Tensor<F> {
    Tensor::new(shape, t.data().to_vec()).expect("reshape numel preserved")
}

/// Batch per-channel moments of an activation on the tape: rank-4 inputs
/// reduce over batch and spatial axes, rank-2 over the batch axis. The
/// variance is the biased second central moment.
fn batch_moments_on_tape<F: Element>(tape: &mut Tape<F>, x: Var) -> Result<(Var, Var)> {
    let rank = tape.shape(x).len();
    if rank == 4 {
        let mean = tape.mean_per_channel(x)?;
        let neg = tape.scale(mean, -F::one());
        let centered = tape.add_channel(x, neg)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_per_channel(sq)?;
        Ok((mean, var))
    } else if rank == 2 {
        let mean = tape.mean_axis0(x)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_axis0(sq)?;
        Ok((mean, var))
    } else {
        Err(Error::ShapeMismatch { op: "batch_norm", lhs: tape.shape(x).to_vec(), rhs: vec![] })
    }
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
fn bn_normalize<F: Element>(
    tape: &mut Tape<F>,
    x: Var,
    mean: Var,
    var: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let eps = F::from_f64(BN_EPS);
    let veps = tape.add_const(var, eps);
    let std = tape.sqrt(veps)?;
    let ones = tape.constant(&Tensor::full(vec![tape.shape(std)[0]], F::one()));
    let inv = tape.div(ones, std)?;
    let rank = tape.shape(x).len();
    if rank == 4 {
        let negm = tape.scale(mean, -F::one());
        let centered = tape.add_channel(x, negm)?;
        let xn = tape.mul_channel(centered, inv)?;
        let scaled = tape.mul_channel(xn, gamma)?;
        tape.add_channel(scaled, beta)
    } else {
        let centered = tape.sub(x, mean)?;
        let xn = tape.mul(centered, inv)?;
        let scaled = tape.mul(xn, gamma)?;
        tape.add(scaled, beta)
    }
}

// ── batching and prediction helpers ─────────────────────────────────

/// Stack images into an (N,C,H,W) batch tensor.
pub fn batch_from_images<F: Element>(images: &[&Image]) -> Result<Tensor<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::ShapeMismatch {
                op: "batch_from_images",
                lhs: vec![c, h, w],
                rhs: vec![img.channels, img.height, img.width],
            });
        }
        data.extend(img.data.iter().map(|&v| F::from_f32(v)));
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

pub fn image_batch<F: Element>(images: &[Image]) -> Result<Tensor<F>> {
    batch_from_images::<F>(&images.iter().collect::<Vec<_>>())
}

/// Row-wise softmax of a logits tensor, stabilized by max subtraction.
pub fn softmax_rows<F: Element>(logits: &Tensor<F>) -> Vec<Vec<F>> {
    let c = *logits.shape().last().expect("non-empty shape");
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let exps: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
            let s = exps.iter().fold(F::zero(), |a, &b| a + b);
            exps.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Argmax class per row of a logits tensor; ties break to the lowest index.
pub fn predict_rows<F: Element>(logits: &Tensor<F>) -> Vec<usize> {
    let c = *logits.shape().last().expect("non-empty shape");
    logits.data().chunks_exact(c).map(argmax).collect()
}

// ── supervised training ─────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Crop-with-padding plus horizontal flip, the standard training recipe.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 12, lr: 0.05, momentum: 0.9, batch_size: 32, augment: true, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub heldout_loss: Option<f64>,
    pub heldout_accuracy: Option<f64>,
}

/// Mean cross-entropy and accuracy of eval-mode predictions on a dataset.
pub fn evaluate_clean<F: Element>(model: &Model<F>, data: &Dataset) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut idx = 0;
    while idx < data.len() {
        let end = (idx + 64).min(data.len());
        let refs: Vec<&Image> = data.images[idx..end].iter().collect();
        let batch = batch_from_images::<F>(&refs)?;
        let logits = model.logits(&batch, BnView::Eval)?;
        let c = model.num_classes();
        for (row, &label) in logits.data().chunks_exact(c).zip(&data.labels[idx..end]) {
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(F::zero(), |a, &b| a + (b - m).exp()).ln() + m;
            loss -= (row[label] - lse).as_f64();
            if argmax(row) == label {
                correct += 1;
            }
        }
        idx = end;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Train with SGD + momentum on cross-entropy; deterministic under the
/// config seed. Returns per-epoch history.
pub fn train_supervised(
    model: &mut Model<f32>,
    train: &Dataset,
    heldout: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let c = model.num_classes();
    let n = train.len();
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let lr = cfg.lr as f32;
    let rho = cfg.momentum as f32;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::rng(cfg.seed, stream::TRAIN, epoch as u64);
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        train_augment(&train.images[i], cfg.seed, (epoch * n + i) as u64)
                    } else {
                        train.images[i].clone()
                    }
                })
                .collect();
            let batch = image_batch::<f32>(&images)?;
            let mut onehot = Tensor::zeros(vec![chunk.len(), c]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.data_mut()[r * c + train.labels[i]] = 1.0;
            }

            let mut tape = Tape::new();
            let (logits, bound) = model.forward_train(&mut tape, &batch)?;
            let ls = tape.log_softmax(logits)?;
            let oh = tape.constant(&onehot);
            let picked = tape.mul(ls, oh)?;
            let total = tape.sum_all(picked);
            let loss = tape.scale(total, -1.0 / chunk.len() as f32);
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            epoch_loss += loss_val as f64 * chunk.len() as f64;
            for (row, &i) in tape.value(logits).chunks_exact(c).zip(chunk.iter()) {
                if argmax(row) == train.labels[i] {
                    epoch_correct += 1;
                }
            }

            tape.backward(loss)?;
            if !model.write_grads(&tape, &bound) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {epoch}, batch {batch_idx}"
                )));
            }
            for (p, v) in model.params_mut().into_iter().zip(velocity.iter_mut()) {
                if let Some(g) = p.grad.take() {
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                        *vv = rho * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
        }

        let (heldout_loss, heldout_accuracy) = match heldout {
            Some(ds) => {
                let (l, a) = evaluate_clean(model, ds)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / n as f64,
            train_accuracy: epoch_correct as f64 / n as f64,
            heldout_loss,
            heldout_accuracy,
        });
    }

    model.meta = TrainMeta {
        epochs: cfg.epochs,
        seed: cfg.seed,
        train_accuracy: history.last().map(|h| h.train_accuracy).unwrap_or(0.0),
    };
    Ok(history)
}

/// Crop-with-padding (replicate borders) plus horizontal flip.
fn train_augment(img: &Image, seed: u64, index: u64) -> Image {
    let mut rng = rng::rng(seed, stream::TRAIN, index.wrapping_add(0x5eed));
    let pad = (img.width / 8).max(2);
    let off_y = rng.gen_range(0..=2 * pad);
    let off_x = rng.gen_range(0..=2 * pad);
    let mut out = crate::augment::pad_crop(img, pad, off_y, off_x);
    if rng.gen_bool(0.5) {
        out = crate::augment::hflip(&out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn small_conv() -> Model<f32> {
        let cfg = ModelConfig {
            arch: ArchKind::ConvSmall,
            input: [1, 16, 16],
            num_classes: 3,
            conv_channels: vec![4, 8],
            hidden: vec![],
        };
        Model::init(&cfg, 7).unwrap()
    }

    fn probe_batch(n: usize, seed: u64) -> Tensor<f32> {
        let ds = generate_synthetic(3, n.div_ceil(3), 16, seed).unwrap();
        let refs: Vec<&Image> = ds.images.iter().take(n).collect();
        batch_from_images(&refs).unwrap()
    }

    #[test]
    fn zeroed_head_gives_uniform_softmax() {
        let mut model = small_conv();
        if let Some(Layer::Linear { weight, bias }) = model.layers.last_mut() {
            for v in weight.data_mut() {
                *v = 0.0;
            }
            for v in bias.data_mut() {
                *v = 0.0;
            }
        }
        let logits = model.logits(&probe_batch(4, 1), BnView::Eval).unwrap();
        for &v in logits.data() {
            assert_eq!(v, 0.0);
        }
        for row in softmax_rows(&logits) {
            for p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = small_conv();
        let batch = probe_batch(5, 2);
        let a = model.logits(&batch, BnView::Eval).unwrap();
        let b = model.logits(&batch, BnView::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mixed_with_training_stats_equals_eval_exactly() {
        let model = small_conv();
        let batch = probe_batch(4, 3);
        let stats: Vec<BnStats<f32>> = model
            .bn_buffers()
            .iter()
            .map(|(m, v)| BnStats { mean: m.data().to_vec(), var: v.data().to_vec() })
            .collect();
        let eval = model.logits(&batch, BnView::Eval).unwrap();
        let mixed = model.logits(&batch, BnView::Mixed(&stats)).unwrap();
        assert_eq!(eval.data(), mixed.data());
    }

    #[test]
    fn prior_strength_limits() {
        let mut model = small_conv();
        // train one step so running stats move off their init
        let ds = generate_synthetic(3, 8, 16, 5).unwrap();
        train_supervised(&mut model, &ds, None, &TrainConfig { epochs: 1, ..Default::default() })
            .unwrap();
        let batch = probe_batch(6, 9);

        let inf = model.mixed_bn_stats(&batch, f64::INFINITY).unwrap();
        for (mix, (rm, rv)) in inf.iter().zip(model.bn_buffers()) {
            assert_eq!(mix.mixed.mean, rm.data());
            assert_eq!(mix.mixed.var, rv.data());
        }

        let zero = model.mixed_bn_stats(&batch, 0.0).unwrap();
        for mix in &zero {
            assert_eq!(mix.mixed.mean, mix.test.mean);
            assert_eq!(mix.mixed.var, mix.test.var);
        }
    }

    #[test]
    fn mixed_stats_channel_mismatch_rejected() {
        let model = small_conv();
        let batch = probe_batch(2, 4);
        let mut stats: Vec<BnStats<f32>> = model
            .bn_buffers()
            .iter()
            .map(|(m, v)| BnStats { mean: m.data().to_vec(), var: v.data().to_vec() })
            .collect();
        stats[0].mean.pop();
        let err = model.logits(&batch, BnView::Mixed(&stats)).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");

        stats.pop();
        let err = model.logits(&batch, BnView::Mixed(&stats)).unwrap_err().to_string();
        assert!(err.contains("BN layers"), "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let model = small_conv();
        let logits = model.logits(&probe_batch(6, 6), BnView::Batch).unwrap();
        for row in softmax_rows(&logits) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
        }
    }

    #[test]
    fn bn_eval_mode_is_affine_per_channel() {
        // eval BN is y = s * x + t with s = gamma / sqrt(var + eps) and
        // t = beta - s * mu; verify the forward numerically against that line
        let cfg = ModelConfig {
            arch: ArchKind::MlpBn,
            input: [2, 1, 1],
            num_classes: 2,
            conv_channels: vec![],
            hidden: vec![],
        };
        let model = Model::<f32> {
            config: cfg,
            layers: vec![
                Layer::Flatten,
                Layer::BatchNorm {
                    gamma: Tensor::new(vec![2], vec![1.5, -0.5]).unwrap(),
                    beta: Tensor::new(vec![2], vec![0.2, 1.0]).unwrap(),
                    running_mean: Tensor::new(vec![2], vec![0.3, -0.1]).unwrap(),
                    running_var: Tensor::new(vec![2], vec![0.8, 2.0]).unwrap(),
                },
            ],
            meta: TrainMeta::default(),
        };
        let batch = Tensor::new(vec![3, 2, 1, 1], vec![0.1, 0.9, -1.2, 0.4, 2.0, -0.7]).unwrap();
        let out = model.logits(&batch, BnView::Eval).unwrap();
        let gamma = [1.5f32, -0.5];
        let beta = [0.2f32, 1.0];
        let mu = [0.3f32, -0.1];
        let var = [0.8f32, 2.0];
        for (i, &x) in batch.data().iter().enumerate() {
            let ch = i % 2;
            let s = gamma[ch] / (var[ch] + BN_EPS as f32).sqrt();
            let t = beta[ch] - s * mu[ch];
            let expected = s * x + t;
            assert!(
                (out.data()[i] - expected).abs() < 1e-5,
                "channel {ch}: {} vs affine {expected}",
                out.data()[i]
            );
        }
    }

    #[test]
    fn every_parameter_reachable_from_training_loss() {
        let mut model = small_conv();
        let ds = generate_synthetic(3, 4, 16, 8).unwrap();
        let refs: Vec<&Image> = ds.images.iter().collect();
        let batch = batch_from_images::<f32>(&refs).unwrap();
        let mut onehot = Tensor::zeros(vec![ds.len(), 3]);
        for (r, &l) in ds.labels.iter().enumerate() {
            onehot.data_mut()[r * 3 + l] = 1.0;
        }
        let mut tape = Tape::new();
        let (logits, bound) = model.forward_train(&mut tape, &batch).unwrap();
        let ls = tape.log_softmax(logits).unwrap();
        let oh = tape.constant(&onehot);
        let picked = tape.mul(ls, oh).unwrap();
        let total = tape.sum_all(picked);
        let loss = tape.scale(total, -1.0 / ds.len() as f32);
        tape.backward(loss).unwrap();
        assert!(model.write_grads(&tape, &bound));
        for (p, role) in model.params().iter().zip(model.param_roles()) {
            let g = p.grad.as_ref().unwrap_or_else(|| panic!("missing grad for {role:?}"));
            assert_eq!(g.len(), p.numel());
        }
    }

    #[test]
    fn zero_epochs_leaves_model_identical() {
        let mut model = small_conv();
        let before = model.payload();
        let ds = generate_synthetic(3, 4, 16, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        train_supervised(&mut model, &ds, None, &cfg).unwrap();
        assert_eq!(model.payload(), before);
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let ds = generate_synthetic(3, 10, 16, 4).unwrap();
        let cfg = TrainConfig { epochs: 2, seed: 11, ..Default::default() };
        let mut a = small_conv();
        let mut b = small_conv();
        train_supervised(&mut a, &ds, None, &cfg).unwrap();
        train_supervised(&mut b, &ds, None, &cfg).unwrap();
        assert_eq!(a.payload(), b.payload());
    }

    #[test]
    fn training_separates_a_separable_set() {
        // flat two-class set split by mean intensity; a logistic-regression
        // oracle fully separates it, and the MLP must reach 99% quickly
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut rng = crate::rng::rng_from(31);
        for i in 0..80 {
            let class = i % 2;
            let base: f32 = if class == 0 {
                rng.gen_range(0.05..0.35)
            } else {
                rng.gen_range(0.65..0.95)
            };
            let data: Vec<f32> = (0..256).map(|_| (base + rng.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0)).collect();
            images.push(Image::new(1, 16, 16, data).unwrap());
            labels.push(class);
        }
        let ds = Dataset {
            images,
            labels,
            num_classes: 2,
            split: crate::data::Split::Train,
            provenance: "separable".into(),
        };

        // oracle: logistic regression on raw pixels via plain GD
        let mut w = vec![0.0f64; 256];
        let mut b = 0.0f64;
        for _ in 0..2000 {
            let mut gw = vec![0.0f64; 256];
            let mut gb = 0.0f64;
            for (img, &y) in ds.images.iter().zip(&ds.labels) {
                let z: f64 = img.data.iter().zip(&w).map(|(&x, &wi)| x as f64 * wi).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - y as f64;
                for (g, &x) in gw.iter_mut().zip(&img.data) {
                    *g += err * x as f64;
                }
                gb += err;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= 0.5 * g / ds.len() as f64;
            }
            b -= 0.5 * gb / ds.len() as f64;
        }
        let oracle_correct = ds
            .images
            .iter()
            .zip(&ds.labels)
            .filter(|(img, &y)| {
                let z: f64 =
                    img.data.iter().zip(&w).map(|(&x, &wi)| x as f64 * wi).sum::<f64>() + b;
                (z > 0.0) as usize == y
            })
            .count();
        assert_eq!(oracle_correct, ds.len(), "oracle must fully separate");

        let cfg = ModelConfig {
            arch: ArchKind::MlpBn,
            input: [1, 16, 16],
            num_classes: 2,
            conv_channels: vec![],
            hidden: vec![16],
        };
        let mut model = Model::<f32>::init(&cfg, 3).unwrap();
        let tc = TrainConfig { epochs: 20, lr: 0.05, augment: false, seed: 5, ..Default::default() };
        let history = train_supervised(&mut model, &ds, Some(&ds), &tc).unwrap();
        let final_acc = history.last().unwrap().train_accuracy;
        assert!(final_acc >= 0.99, "train accuracy {final_acc}");
    }

    #[test]
    fn heldout_loss_decreases_with_training() {
        let train = generate_synthetic(3, 30, 16, 21).unwrap();
        let heldout = generate_synthetic(3, 10, 16, 22).unwrap();
        let mut model = small_conv();
        let (init_loss, _) = evaluate_clean(&model, &heldout).unwrap();
        let cfg = TrainConfig { epochs: 4, seed: 2, ..Default::default() };
        train_supervised(&mut model, &train, Some(&heldout), &cfg).unwrap();
        let (final_loss, _) = evaluate_clean(&model, &heldout).unwrap();
        assert!(
            final_loss < init_loss,
            "heldout loss did not decrease: {init_loss} -> {final_loss}"
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = std::env::temp_dir().join(format!("ttr-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let mut model = small_conv();
        let ds = generate_synthetic(3, 6, 16, 13).unwrap();
        train_supervised(&mut model, &ds, None, &TrainConfig { epochs: 1, ..Default::default() })
            .unwrap();
        model.save(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model.payload(), loaded.payload());
        assert_eq!(model.meta.epochs, loaded.meta.epochs);

        let probes = probe_batch(10, 17);
        let a = model.logits(&probes, BnView::Eval).unwrap();
        let b = loaded.logits(&probes, BnView::Eval).unwrap();
        assert_eq!(a.data(), b.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_error_paths_are_distinct() {
        let dir = std::env::temp_dir().join(format!("ttr-ckpt-err-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let good = dir.join("good.ckpt");
        let model = small_conv();
        model.save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();

        // corrupt magic
        let bad_magic = dir.join("bad_magic.ckpt");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(load_checkpoint(&bad_magic), Err(Error::CheckpointMagic)));

        // future version
        let bad_version = dir.join("v2.ckpt");
        let mut b = bytes.clone();
        b[8..12].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&bad_version, &b).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_version),
            Err(Error::CheckpointVersion { found: 2, .. })
        ));

        // truncation
        let trunc = dir.join("trunc.ckpt");
        std::fs::write(&trunc, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&trunc), Err(Error::CheckpointTruncated(_))));

        // architecture/payload mismatch: declare one fewer value
        let mismatch = dir.join("mismatch.ckpt");
        let meta_len = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
        let count_off = 16 + meta_len;
        let count = u32::from_le_bytes(bytes[count_off..count_off + 4].try_into().unwrap());
        let mut b = bytes.clone();
        b[count_off..count_off + 4].copy_from_slice(&(count - 1).to_le_bytes());
        b.truncate(b.len() - 4);
        std::fs::write(&mismatch, &b).unwrap();
        assert!(matches!(load_checkpoint(&mismatch), Err(Error::CheckpointArch(_))));

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn non_finite_loss_aborts_with_location() {
        let mut model = small_conv();
        // a NaN parameter poisons the loss on the first batch
        if let Some(Layer::Linear { weight, .. }) = model.layers.last_mut() {
            weight.data_mut()[0] = f32::NAN;
        }
        let ds = generate_synthetic(3, 4, 16, 2).unwrap();
        let cfg = TrainConfig { epochs: 1, augment: false, ..Default::default() };
        let err = train_supervised(&mut model, &ds, None, &cfg).unwrap_err().to_string();
        assert!(err.contains("epoch 0"), "{err}");
    }
}
