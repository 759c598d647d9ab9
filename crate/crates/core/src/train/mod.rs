//! Training loop: full-precision forward on shadow weights, loss, then
//! binarize, backward through the binarized weights, and an SGD-with-momentum
//! update of the shadow weights.

mod backprop;
mod loss;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backprop::{
    backward_binary_layer, backward_network, binarize_shadows, shadow_gradient, ste_gradient, BackwardConfig,
    BinarizedWeights, BinaryLayerGrads, GradientRule,
};
pub use loss::{argmax_rows, cross_entropy_loss};

use crate::error::{Error, Result};
use crate::nn::{forward_network, forward_recording, Mode, NetworkSpec, Params, SlotKind};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Half-width of the straight-through region for `Sign`.
    pub clip_threshold: f64,
    pub gradient_rule: GradientRule,
    /// Clamp binarized-layer shadow weights to `[-t, t]` after each update.
    pub clip_shadow: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.95,
            decay_factor: 0.1,
            decay_every: 10,
            batch_size: 16,
            epochs: 30,
            clip_threshold: 1.0,
            gradient_rule: GradientRule::ScaledSte,
            clip_shadow: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: &str| Err(Error::invalid("train_config", detail.to_string()));
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return bad("decay_every and batch_size must be positive");
        }
        if !(self.clip_threshold.is_finite() && self.clip_threshold > 0.0) {
            return bad("clip_threshold must be positive");
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch index.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        step_decay(self.lr0, self.decay_factor, self.decay_every, epoch)
    }

    pub fn backward(&self) -> BackwardConfig {
        BackwardConfig {
            clip_threshold: self.clip_threshold,
            rule: self.gradient_rule,
        }
    }
}

/// `lr0 · 0.1^⌊epoch/10⌋`, built by repeated multiplication so that the
/// decayed values are the exact products `lr0·0.1`, `lr0·0.1·0.1`, ...
pub fn lr_schedule(epoch: usize, lr0: f64) -> f64 {
    step_decay(lr0, 0.1, 10, epoch)
}

fn step_decay(lr0: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    (0..epoch / every).fold(lr0, |lr, _| lr * factor)
}

/// A labelled training set: `features` is `[U, C, H, W]`, one label per row.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 4 || features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "labeled_set",
                format!("features {:?} with {} labels", features.shape(), labels.len()),
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let rows: Vec<_> = indices.iter().map(|&i| self.features.slice_outer(i)).collect();
        Ok((Tensor::stack_outer(&rows)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Shadow weights; binarized layers hold their full-precision values.
    pub params: Params<f32>,
    pub velocity: Vec<Tensor<f32>>,
    pub learning_rate: f64,
    /// Zero-based index of the next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(spec: &NetworkSpec, params: Params<f32>, config: &TrainConfig, seed: u64) -> Result<Self> {
        if params.has_packed() {
            return Err(Error::ModeMismatch("training needs dense shadow weights, got packed signs".into()));
        }
        let velocity = spec.slots().iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Ok(Self {
            params,
            velocity,
            learning_rate: config.learning_rate(0),
            epoch: 0,
            step: 0,
            seed,
        })
    }
}

/// `v ← μ·v + g`, `W ← W − η·v` with `η = state.learning_rate`.
pub fn sgd_momentum_step(state: &mut TrainState, grads: &[Tensor<f32>], momentum: f32) -> Result<()> {
    if grads.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!("{} gradients for {} slots", grads.len(), state.velocity.len()),
        ));
    }
    let lr = state.learning_rate as f32;
    for (i, (g, v)) in grads.iter().zip(state.velocity.iter_mut()).enumerate() {
        if g.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("slot {i}: gradient {:?} vs parameter {:?}", g.shape(), v.shape()),
            ));
        }
        let w = state.params.dense_mut(i)?;
        for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *wv -= lr * *vv;
        }
    }
    state.step += 1;
    Ok(())
}

/// Order of operations within one training step, for instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Loss,
    Binarize,
    Backward,
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
}

/// One optimization step on a batch.
pub fn train_step(
    state: &mut TrainState,
    spec: &NetworkSpec,
    inputs: &Tensor<f32>,
    labels: &[usize],
    config: &TrainConfig,
    mut trace: Option<&mut Vec<Phase>>,
) -> Result<StepMetrics> {
    let mut mark = |p| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(p);
        }
    };
    let (out, tape) = forward_recording(spec, &state.params, inputs)?;
    mark(Phase::Forward);
    let (loss, grad_logits) = cross_entropy_loss(&out.logits, labels)?;
    mark(Phase::Loss);
    if !loss.is_finite() {
        return Err(Error::Divergence {
            epoch: state.epoch,
            step: state.step,
        });
    }
    let binarized = binarize_shadows(spec, &state.params)?;
    mark(Phase::Binarize);
    let grads = backward_network(spec, &state.params, &binarized, &tape, &grad_logits, config.backward())?;
    mark(Phase::Backward);
    if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence {
            epoch: state.epoch,
            step: state.step,
        });
    }
    sgd_momentum_step(state, &grads, config.momentum as f32)?;
    if config.clip_shadow {
        let t = config.clip_threshold as f32;
        for (i, slot) in spec.slots().iter().enumerate() {
            if slot.kind == SlotKind::BinaryConv {
                for w in state.params.dense_mut(i)?.data_mut() {
                    *w = w.clamp(-t, t);
                }
            }
        }
    }
    mark(Phase::Update);
    let correct = argmax_rows(&out.logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(StepMetrics {
        loss: loss as f64,
        correct,
        samples: labels.len(),
    })
}

/// Summary of one epoch. `accuracy` is the running training accuracy of
/// the full-precision forward passes used for the updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={} loss={:.6} accuracy={:.4}",
            self.epoch, self.learning_rate, self.loss, self.accuracy
        )
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs one epoch over a deterministically shuffled copy of `data`.
pub fn train_epoch(
    state: &mut TrainState,
    spec: &NetworkSpec,
    data: &LabeledSet,
    config: &TrainConfig,
) -> Result<EpochRecord> {
    if data.is_empty() {
        return Err(Error::Empty { op: "train_epoch" });
    }
    state.learning_rate = config.learning_rate(state.epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(state.seed, state.epoch)));

    let (mut loss_sum, mut correct) = (0.0, 0);
    for chunk in order.chunks(config.batch_size) {
        let (x, y) = data.batch(chunk)?;
        let m = train_step(state, spec, &x, &y, config, None)?;
        loss_sum += m.loss * m.samples as f64;
        correct += m.correct;
    }
    let record = EpochRecord {
        epoch: state.epoch + 1,
        learning_rate: state.learning_rate,
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    };
    state.epoch += 1;
    Ok(record)
}

/// Trains for `config.epochs` epochs, reporting each epoch to `on_epoch`.
pub fn train(
    state: &mut TrainState,
    spec: &NetworkSpec,
    data: &LabeledSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let mut history = Vec::with_capacity(config.epochs);
    while state.epoch < config.epochs {
        let record = train_epoch(state, spec, data, config)?;
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// Classification accuracy of `params` on `data` in the given mode.
pub fn accuracy<T: Real>(spec: &NetworkSpec, params: &Params<T>, data: &LabeledSet, mode: Mode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty { op: "accuracy" });
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, y) = data.batch(chunk)?;
        let out = forward_network(spec, params, &x.cast::<T>(), mode)?;
        correct += argmax_rows(&out.logits).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Analytic and finite-difference derivatives of the loss for one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    pub slot: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares backprop against central differences on up to `count` sampled
/// parameters of the non-binarized slots, in f64. Binarized layers are
/// frozen at `W̃`, which makes the loss differentiable everywhere else.
pub fn gradient_check(
    spec: &NetworkSpec,
    params: &Params<f32>,
    data: &LabeledSet,
    count: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<GradSample>> {
    use crate::nn::Weights;
    use rand::Rng;

    let mut p64: Params<f64> = params.cast();
    let slots = spec.slots();
    for (i, slot) in slots.iter().enumerate() {
        if slot.kind == SlotKind::BinaryConv {
            let w = BinarizedWeights::from_shadow(p64.dense(i)?)?;
            p64.set(i, Weights::Dense(w.dense));
        }
    }
    let frozen = frozen_spec(spec)?;
    let x = data.features.cast::<f64>();
    let loss_of = |p: &Params<f64>| -> Result<f64> {
        let out = forward_network(&frozen, p, &x, Mode::FullPrecision)?;
        Ok(cross_entropy_loss(&out.logits, &data.labels)?.0)
    };
    let (out, tape) = forward_recording(&frozen, &p64, &x)?;
    let (_, grad_logits) = cross_entropy_loss(&out.logits, &data.labels)?;
    let none = vec![None; slots.len()];
    let grads = backward_network(&frozen, &p64, &none, &tape, &grad_logits, BackwardConfig::default())?;

    let candidates: Vec<(usize, usize)> = slots
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind != SlotKind::BinaryConv)
        .flat_map(|(i, s)| (0..s.numel()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = if candidates.len() <= count {
        candidates
    } else {
        (0..count).map(|_| candidates[rng.random_range(0..candidates.len())]).collect()
    };
    let mut samples = Vec::with_capacity(picks.len());
    for (slot, index) in picks {
        let orig = p64.dense(slot)?.data()[index];
        p64.dense_mut(slot)?.data_mut()[index] = orig + eps;
        let hi = loss_of(&p64)?;
        p64.dense_mut(slot)?.data_mut()[index] = orig - eps;
        let lo = loss_of(&p64)?;
        p64.dense_mut(slot)?.data_mut()[index] = orig;
        samples.push(GradSample {
            slot,
            index,
            analytic: grads[slot].data()[index],
            numeric: (hi - lo) / (2.0 * eps),
        });
    }
    Ok(samples)
}

/// Same architecture with binarized convolutions treated as plain ones.
fn frozen_spec(spec: &NetworkSpec) -> Result<NetworkSpec> {
    use crate::nn::LayerSpec;
    let layers = spec
        .layers()
        .iter()
        .map(|l| match *l {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                binarized: false,
            },
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
                activation,
                ..
            } => LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
                activation,
                binarized: false,
            },
            ref other => other.clone(),
        })
        .collect();
    NetworkSpec::new(spec.input(), layers, spec.embedding_dim(), spec.num_classes())
}
