use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::binary_conv::binary_conv2d_forward;
use super::spec::{Activation, LayerSpec, NetworkSpec, SlotKind};
use crate::binarize::BinaryFilterBank;
use crate::error::{Error, Result};
use crate::tensor::{
    self, conv2d_with_plan, global_average_pool, linear_reference, max_pool, ConvGeometry,
    ConvPlan, PoolKind, Real, Shape4, Tensor,
};

/// Storage for one parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights<T = f32> {
    Dense(Tensor<T>),
    /// Packed signs and scales; only valid for binary conv slots.
    Packed(BinaryFilterBank),
}

/// Parameter tensors in [`NetworkSpec::slots`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T = f32> {
    slots: Vec<Weights<T>>,
}

impl<T: Real> Params<T> {
    /// Checks every slot against the network's slot layout.
    pub fn new(spec: &NetworkSpec, slots: Vec<Weights<T>>) -> Result<Self> {
        let layout = spec.slots();
        if layout.len() != slots.len() {
            return Err(Error::ModeMismatch(format!(
                "spec has {} parameter slots, got {}",
                layout.len(),
                slots.len()
            )));
        }
        for (slot, w) in layout.iter().zip(&slots) {
            let shape = match w {
                Weights::Dense(t) => t.shape().to_vec(),
                Weights::Packed(bank) if slot.kind == SlotKind::BinaryConv => bank.shape().to_vec(),
                Weights::Packed(_) => {
                    return Err(Error::ModeMismatch(format!(
                        "{} is a {} slot and cannot hold packed signs",
                        slot.name,
                        slot.kind.name()
                    )))
                }
            };
            if shape != slot.shape {
                return Err(Error::shape(
                    "params",
                    format!("{} expects {:?}, got {shape:?}", slot.name, slot.shape),
                ));
            }
        }
        Ok(Self { slots })
    }

    /// Uniform `[−b, b]` with `b = sqrt(1 / fan_in)`; biases zero; PReLU
    /// slopes at their configured initial value.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prelu_inits = prelu_init_slopes(spec);
        let mut prelu_iter = prelu_inits.into_iter();
        let slots = spec
            .slots()
            .iter()
            .map(|slot| {
                let data: Vec<T> = match slot.kind {
                    SlotKind::LinearBias => vec![T::zero(); slot.numel()],
                    SlotKind::PreluSlope => {
                        vec![T::from_f32(prelu_iter.next().expect("one init per slope slot"))]
                    }
                    _ => {
                        let b = (1.0 / slot.fan_in() as f64).sqrt();
                        (0..slot.numel())
                            .map(|_| T::from_f64(rng.random_range(-b..=b)))
                            .collect()
                    }
                };
                Weights::Dense(Tensor::from_parts(slot.shape.clone(), data))
            })
            .collect();
        Self { slots }
    }

    pub fn slots(&self) -> &[Weights<T>] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, i: usize) -> &Weights<T> {
        &self.slots[i]
    }

    pub fn dense(&self, i: usize) -> Result<&Tensor<T>> {
        match &self.slots[i] {
            Weights::Dense(t) => Ok(t),
            Weights::Packed(_) => Err(Error::ModeMismatch(format!(
                "slot {i} holds packed signs; full-precision weights are required"
            ))),
        }
    }

    pub fn dense_mut(&mut self, i: usize) -> Result<&mut Tensor<T>> {
        match &mut self.slots[i] {
            Weights::Dense(t) => Ok(t),
            Weights::Packed(_) => Err(Error::ModeMismatch(format!(
                "slot {i} holds packed signs; full-precision weights are required"
            ))),
        }
    }

    pub fn set(&mut self, i: usize, w: Weights<T>) {
        self.slots[i] = w;
    }

    pub fn has_packed(&self) -> bool {
        self.slots.iter().any(|w| matches!(w, Weights::Packed(_)))
    }

    /// Replaces every dense binary-conv slot with its packed sign/scale bank.
    pub fn binarized(&self, spec: &NetworkSpec) -> Result<Params<T>> {
        let slots = spec
            .slots()
            .iter()
            .zip(&self.slots)
            .map(|(slot, w)| match (slot.kind, w) {
                (SlotKind::BinaryConv, Weights::Dense(t)) => {
                    Ok(Weights::Packed(BinaryFilterBank::from_weights(t)?))
                }
                _ => Ok(w.clone()),
            })
            .collect::<Result<_>>()?;
        Ok(Params { slots })
    }

    /// Converts dense slots to another scalar type; packed slots are kept.
    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            slots: self
                .slots
                .iter()
                .map(|w| match w {
                    Weights::Dense(t) => Weights::Dense(t.cast()),
                    Weights::Packed(b) => Weights::Packed(b.clone()),
                })
                .collect(),
        }
    }
}

fn prelu_init_slopes(spec: &NetworkSpec) -> Vec<f32> {
    let mut out = Vec::new();
    for layer in spec.layers() {
        match *layer {
            LayerSpec::Prelu { init_slope } => out.push(init_slope),
            LayerSpec::ResidualBlock {
                activation: Activation::Prelu,
                ..
            } => out.extend([super::spec::PRELU_INIT_SLOPE; 2]),
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Every layer runs on dense (shadow) weights.
    FullPrecision,
    /// Binarized layers run the multiplication-free kernel on sign banks;
    /// dense binary slots are binarized on the fly.
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T = f32> {
    /// L2-normalized, `[N, embedding_dim]`.
    pub embedding: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Activations cached by a recording forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape<T = f32> {
    pub(crate) layers: Vec<Option<LayerCache<T>>>,
    /// Trunk output before normalization.
    pub(crate) pre_norm: Option<Tensor<T>>,
    pub(crate) embedding: Option<Tensor<T>>,
}

impl<T> Tape<T> {
    pub fn empty(layers: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| None).collect(),
            pre_norm: None,
            embedding: None,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Debug, Clone)]
pub(crate) enum LayerCache<T> {
    Conv {
        input: Tensor<T>,
    },
    Linear {
        input: Tensor<T>,
    },
    Activation {
        input: Tensor<T>,
    },
    Block {
        input: Tensor<T>,
        conv1_out: Tensor<T>,
        act1_out: Tensor<T>,
        sum: Tensor<T>,
    },
    GlobalAverage {
        input_shape: Vec<usize>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

/// Runs the network without recording activations.
pub fn forward_network<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    run_forward(spec, params, input, mode, None)
}

/// Full-precision forward that records what the backward pass needs.
pub fn forward_recording<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    input: &Tensor<T>,
) -> Result<(ForwardOutput<T>, Tape<T>)> {
    let mut tape = Tape::empty(spec.layers().len());
    let out = run_forward(spec, params, input, Mode::FullPrecision, Some(&mut tape))?;
    Ok((out, tape))
}

fn run_forward<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    input: &Tensor<T>,
    mode: Mode,
    mut tape: Option<&mut Tape<T>>,
) -> Result<ForwardOutput<T>> {
    if params.len() != spec.slots().len() {
        return Err(Error::ModeMismatch(format!(
            "parameter set has {} slots, spec needs {}",
            params.len(),
            spec.slots().len()
        )));
    }
    let [c, h, w] = spec.input();
    match input.shape() {
        [_, ic, ih, iw] if [*ic, *ih, *iw] == [c, h, w] => {}
        s => {
            return Err(Error::shape(
                "forward_network",
                format!("input {s:?} does not match spec input [N, {c}, {h}, {w}]"),
            ))
        }
    }
    let ranges = spec.layer_slot_ranges();
    let mut x = input.clone();
    for (i, (layer, range)) in spec.layers().iter().zip(ranges).enumerate() {
        let slot = range.start;
        let (y, cache) = layer_forward(layer, params, slot, x, mode, tape.is_some())?;
        if let (Some(t), Some(cache)) = (tape.as_deref_mut(), cache) {
            t.layers[i] = Some(cache);
        }
        x = y;
    }
    let n = input.shape()[0];
    let pre_norm = x.reshape(&[n, spec.embedding_dim()])?;
    let embedding = l2_normalize_rows(&pre_norm);
    let (cw, cb) = spec.classifier_slots();
    let scaled = tensor::scale(&embedding, T::from_f64(spec.logit_scale()));
    let logits = linear_reference(&scaled, params.dense(cw)?, Some(params.dense(cb)?))?;
    if let Some(t) = tape {
        t.pre_norm = Some(pre_norm);
        t.embedding = Some(embedding.clone());
    }
    Ok(ForwardOutput { embedding, logits })
}

pub(crate) const NORM_EPS: f64 = 1e-12;

pub(crate) fn l2_normalize_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.shape()[1];
    let eps = T::from_f64(NORM_EPS);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        out.extend(row.iter().map(|&v| v / norm));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn conv_forward<T: Real>(
    params: &Params<T>,
    slot: usize,
    x: &Tensor<T>,
    geom: ConvGeometry,
    binarized: bool,
    mode: Mode,
) -> Result<Tensor<T>> {
    match (params.get(slot), mode, binarized) {
        (Weights::Dense(w), Mode::FullPrecision, _) | (Weights::Dense(w), Mode::Binary, false) => {
            let plan = ConvPlan::new("conv2d", Shape4::of(x, "conv2d")?, w.shape(), geom)?;
            Ok(conv2d_with_plan(&plan, x, w))
        }
        (Weights::Dense(w), Mode::Binary, true) => {
            let bank = BinaryFilterBank::from_weights(w)?;
            binary_conv2d_forward(x, &bank, geom.stride, geom.padding)
        }
        (Weights::Packed(bank), Mode::Binary, true) => {
            binary_conv2d_forward(x, bank, geom.stride, geom.padding)
        }
        (Weights::Packed(_), _, _) => Err(Error::ModeMismatch(format!(
            "slot {slot} holds packed signs; the full-precision forward needs shadow weights"
        ))),
    }
}

pub(crate) fn activation_forward<T: Real>(
    params: &Params<T>,
    slot: Option<usize>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    match slot {
        None => Ok(tensor::relu(x)),
        Some(s) => Ok(tensor::prelu(x, params.dense(s)?.data()[0])),
    }
}

/// Slot indices inside a residual block, in layout order.
pub(crate) struct BlockSlots {
    pub conv1: usize,
    pub slope1: Option<usize>,
    pub conv2: usize,
    pub shortcut: Option<usize>,
    pub slope2: Option<usize>,
}

impl BlockSlots {
    pub fn new(start: usize, activation: Activation, projected: bool) -> Self {
        let prelu = activation == Activation::Prelu;
        let mut next = start;
        let mut take = |present: bool| {
            present.then(|| {
                next += 1;
                next - 1
            })
        };
        let conv1 = take(true).unwrap();
        let slope1 = take(prelu);
        let conv2 = take(true).unwrap();
        let shortcut = take(projected);
        let slope2 = take(prelu);
        Self {
            conv1,
            slope1,
            conv2,
            shortcut,
            slope2,
        }
    }
}

fn layer_forward<T: Real>(
    layer: &LayerSpec,
    params: &Params<T>,
    slot: usize,
    x: Tensor<T>,
    mode: Mode,
    record: bool,
) -> Result<(Tensor<T>, Option<LayerCache<T>>)> {
    let keep = |t: Tensor<T>| if record { Some(t) } else { None };
    Ok(match *layer {
        LayerSpec::Conv2d {
            stride,
            padding,
            binarized,
            ..
        } => {
            let y = conv_forward(params, slot, &x, ConvGeometry::new(stride, padding), binarized, mode)?;
            (y, keep(x).map(|input| LayerCache::Conv { input }))
        }
        LayerSpec::Linear { bias, .. } => {
            let b = if bias { Some(params.dense(slot + 1)?) } else { None };
            let y = linear_reference(&x, params.dense(slot)?, b)?;
            (y, keep(x).map(|input| LayerCache::Linear { input }))
        }
        LayerSpec::Relu => (tensor::relu(&x), keep(x).map(|input| LayerCache::Activation { input })),
        LayerSpec::Prelu { .. } => {
            let y = activation_forward(params, Some(slot), &x)?;
            (y, keep(x).map(|input| LayerCache::Activation { input }))
        }
        LayerSpec::ResidualBlock {
            in_channels,
            out_channels,
            stride,
            activation,
            binarized,
        } => {
            let projected = in_channels != out_channels || stride != 1;
            let s = BlockSlots::new(slot, activation, projected);
            let conv1_out = conv_forward(params, s.conv1, &x, ConvGeometry::new(stride, 1), binarized, mode)?;
            let act1_out = activation_forward(params, s.slope1, &conv1_out)?;
            let conv2_out = conv_forward(params, s.conv2, &act1_out, ConvGeometry::new(1, 1), binarized, mode)?;
            let shortcut = match s.shortcut {
                Some(p) => conv_forward(params, p, &x, ConvGeometry::new(stride, 0), false, mode)?,
                None => x.clone(),
            };
            let sum = tensor::add(&conv2_out, &shortcut)?;
            let y = activation_forward(params, s.slope2, &sum)?;
            let cache = record.then(|| LayerCache::Block {
                input: x,
                conv1_out,
                act1_out,
                sum,
            });
            (y, cache)
        }
        LayerSpec::Pool(PoolKind::GlobalAverage) => {
            let y = global_average_pool(&x)?;
            let input_shape = x.shape().to_vec();
            (y, record.then_some(LayerCache::GlobalAverage { input_shape }))
        }
        LayerSpec::Pool(PoolKind::Max(k)) => {
            let (y, argmax) = max_pool(&x, k)?;
            let input_shape = x.shape().to_vec();
            (y, record.then_some(LayerCache::MaxPool { input_shape, argmax }))
        }
        LayerSpec::Flatten => {
            let input_shape = x.shape().to_vec();
            let n = input_shape[0];
            let d = x.numel() / n;
            (x.reshape(&[n, d])?, record.then_some(LayerCache::Flatten { input_shape }))
        }
    })
}
