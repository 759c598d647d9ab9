//! Backward pass for the binary-weight network.
//!
//! Activations come from the full-precision forward. Gradients with respect
//! to layer inputs are propagated through the binarized weights `W̃ = a·B`,
//! and the gradient reaching a binarized layer's shadow weights is
//!
//! ```text
//! ∂C/∂Wᵢ = ∂C/∂W̃ᵢ · (1/n + 1{|Wᵢ| ≤ t} · a)
//! ```
//!
//! where the indicator is the straight-through estimate of `∂Sign/∂W` and
//! `a` is the filter's scale ([`GradientRule::ScaledSte`]). The alternative
//! [`GradientRule::PassThrough`] drops the `1/n` and `a` factors and keeps
//! only the clipped pass-through.

use std::fmt;
use std::str::FromStr;

use crate::binarize::binarize_dense;
use crate::error::{Error, Result};
use crate::nn::{Activation, BlockSlots, LayerCache, LayerSpec, NetworkSpec, Params, SlotKind, Tape, NORM_EPS};
use crate::tensor::{
    self, conv2d_input_grad, conv2d_weight_grad, linear_backward, ConvGeometry, PoolKind, Real, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientRule {
    /// `g̃ · (1/n + 1{|W| ≤ t} · a)`.
    #[default]
    ScaledSte,
    /// `g̃ · 1{|W| ≤ t}`.
    PassThrough,
}

impl fmt::Display for GradientRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientRule::ScaledSte => "scaled_ste",
            GradientRule::PassThrough => "pass_through",
        })
    }
}

impl FromStr for GradientRule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scaled_ste" => Ok(GradientRule::ScaledSte),
            "pass_through" => Ok(GradientRule::PassThrough),
            _ => Err(format!("expected scaled_ste or pass_through, got `{s}`")),
        }
    }
}

/// Straight-through estimate for `Sign`: the upstream gradient where
/// `|preimage| ≤ threshold`, zero elsewhere.
pub fn ste_gradient<T: Real>(upstream: &Tensor<T>, preimage: &Tensor<T>, threshold: T) -> Result<Tensor<T>> {
    if upstream.shape() != preimage.shape() {
        return Err(Error::shape(
            "ste_gradient",
            format!("{:?} vs {:?}", upstream.shape(), preimage.shape()),
        ));
    }
    let data = upstream
        .data()
        .iter()
        .zip(preimage.data())
        .map(|(&g, &r)| if r.abs() <= threshold { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(upstream.shape().to_vec(), data))
}

/// `W̃ = a·B` and the per-filter scales of one binarized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedWeights<T> {
    pub dense: Tensor<T>,
    pub scales: Vec<T>,
}

impl<T: Real> BinarizedWeights<T> {
    pub fn from_shadow(w: &Tensor<T>) -> Result<Self> {
        let (dense, scales) = binarize_dense(w)?;
        Ok(Self { dense, scales })
    }
}

/// Binarizes every binary-conv slot of a parameter set (`None` elsewhere).
pub fn binarize_shadows<T: Real>(spec: &NetworkSpec, params: &Params<T>) -> Result<Vec<Option<BinarizedWeights<T>>>> {
    spec.slots()
        .iter()
        .enumerate()
        .map(|(i, slot)| match slot.kind {
            SlotKind::BinaryConv => BinarizedWeights::from_shadow(params.dense(i)?).map(Some),
            _ => Ok(None),
        })
        .collect()
}

/// Maps `∂C/∂W̃` to the shadow-weight gradient.
pub fn shadow_gradient<T: Real>(
    grad_binarized: &Tensor<T>,
    shadow: &Tensor<T>,
    scales: &[T],
    threshold: T,
    rule: GradientRule,
) -> Result<Tensor<T>> {
    let ste = ste_gradient(grad_binarized, shadow, threshold)?;
    let filters = scales.len();
    let n = shadow.numel() / filters;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut out = Vec::with_capacity(shadow.numel());
    for f in 0..filters {
        let g = &grad_binarized.data()[f * n..][..n];
        let s = &ste.data()[f * n..][..n];
        match rule {
            GradientRule::ScaledSte => out.extend(g.iter().zip(s).map(|(&gi, &si)| gi * inv_n + si * scales[f])),
            GradientRule::PassThrough => out.extend_from_slice(s),
        }
    }
    Ok(Tensor::from_parts(shadow.shape().to_vec(), out))
}

#[derive(Debug, Clone)]
pub struct BinaryLayerGrads<T> {
    pub grad_input: Tensor<T>,
    /// `∂C/∂W̃`, the weight gradient evaluated at the binarized weights.
    pub grad_binarized: Tensor<T>,
    pub grad_shadow: Tensor<T>,
}

/// Backward through one binarized convolution: input gradients use `W̃`
/// rather than the shadow weights, then the shadow gradient applies the
/// configured [`GradientRule`].
pub fn backward_binary_layer<T: Real>(
    geom: ConvGeometry,
    shadow: &Tensor<T>,
    binarized: &BinarizedWeights<T>,
    cached_input: &Tensor<T>,
    upstream: &Tensor<T>,
    threshold: T,
    rule: GradientRule,
) -> Result<BinaryLayerGrads<T>> {
    if binarized.dense.shape() != shadow.shape() {
        return Err(Error::shape(
            "backward_binary_layer",
            format!("W̃ {:?} vs W {:?}", binarized.dense.shape(), shadow.shape()),
        ));
    }
    let grad_input = conv2d_input_grad(cached_input.shape(), &binarized.dense, upstream, geom.stride, geom.padding)?;
    let grad_binarized = conv2d_weight_grad(cached_input, shadow.shape(), upstream, geom.stride, geom.padding)?;
    let grad_shadow = shadow_gradient(&grad_binarized, shadow, &binarized.scales, threshold, rule)?;
    Ok(BinaryLayerGrads {
        grad_input,
        grad_binarized,
        grad_shadow,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardConfig {
    pub clip_threshold: f64,
    pub rule: GradientRule,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        Self {
            clip_threshold: 1.0,
            rule: GradientRule::ScaledSte,
        }
    }
}

struct Ctx<'a, T: Real> {
    params: &'a Params<T>,
    binarized: &'a [Option<BinarizedWeights<T>>],
    grads: Vec<Option<Tensor<T>>>,
    cfg: BackwardConfig,
}

impl<T: Real> Ctx<'_, T> {
    fn accumulate(&mut self, slot: usize, g: Tensor<T>) {
        match &mut self.grads[slot] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            None => self.grads[slot] = Some(g),
        }
    }

    fn conv(&mut self, slot: usize, geom: ConvGeometry, binarized: bool, input: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let shadow = self.params.dense(slot)?;
        if binarized {
            let bw = self.binarized[slot].as_ref().ok_or_else(|| {
                Error::ModeMismatch(format!("slot {slot} is binarized but no W̃ was supplied"))
            })?;
            let out = backward_binary_layer(
                geom,
                shadow,
                bw,
                input,
                g,
                T::from_f64(self.cfg.clip_threshold),
                self.cfg.rule,
            )?;
            self.accumulate(slot, out.grad_shadow);
            Ok(out.grad_input)
        } else {
            let gin = conv2d_input_grad(input.shape(), shadow, g, geom.stride, geom.padding)?;
            let gw = conv2d_weight_grad(input, shadow.shape(), g, geom.stride, geom.padding)?;
            self.accumulate(slot, gw);
            Ok(gin)
        }
    }

    fn activation(&mut self, slope: Option<usize>, input: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        match slope {
            None => Ok(Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(input.data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect(),
            )),
            Some(s) => {
                let a = self.params.dense(s)?.data()[0];
                let mut ga = T::zero();
                let data = g
                    .data()
                    .iter()
                    .zip(input.data())
                    .map(|(&gv, &x)| {
                        if x >= T::zero() {
                            gv
                        } else {
                            ga += gv * x;
                            gv * a
                        }
                    })
                    .collect();
                self.accumulate(s, Tensor::from_parts(vec![1], vec![ga]));
                Ok(Tensor::from_parts(g.shape().to_vec(), data))
            }
        }
    }
}

/// Gradients of the loss for every parameter slot, given the tape of a
/// full-precision forward and the gradient at the logits. Binary-conv slots
/// receive shadow-weight gradients.
pub fn backward_network<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    binarized: &[Option<BinarizedWeights<T>>],
    tape: &Tape<T>,
    grad_logits: &Tensor<T>,
    cfg: BackwardConfig,
) -> Result<Vec<Tensor<T>>> {
    let slots = spec.slots();
    if tape.len() != spec.layers().len() || binarized.len() != slots.len() {
        return Err(Error::ModeMismatch("tape or binarized weights do not match the network".into()));
    }
    let missing = |layer| Error::MissingCache { layer };
    let mut ctx = Ctx {
        params,
        binarized,
        grads: vec![None; slots.len()],
        cfg,
    };

    // classifier
    let embedding = tape.embedding.as_ref().ok_or_else(|| missing(spec.layers().len()))?;
    let pre_norm = tape.pre_norm.as_ref().ok_or_else(|| missing(spec.layers().len()))?;
    let (cw, cb) = spec.classifier_slots();
    let s = T::from_f64(spec.logit_scale());
    let (g_scaled, g_w, g_b) = linear_backward(&tensor::scale(embedding, s), params.dense(cw)?, grad_logits)?;
    ctx.accumulate(cw, g_w);
    ctx.accumulate(cb, g_b);
    let g_emb = tensor::scale(&g_scaled, s);

    let mut g = normalize_backward(pre_norm, embedding, &g_emb);

    let ranges = spec.layer_slot_ranges();
    for (i, layer) in spec.layers().iter().enumerate().rev() {
        let cache = tape.layers[i].as_ref().ok_or_else(|| missing(i))?;
        let slot = ranges[i].start;
        g = layer_backward(&mut ctx, layer, slot, cache, &g)?;
    }

    slots
        .iter()
        .zip(ctx.grads)
        .map(|(slot, g)| Ok(g.unwrap_or_else(|| Tensor::zeros(&slot.shape))))
        .collect()
}

fn normalize_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let d = x.shape()[1];
    let eps = T::from_f64(NORM_EPS);
    let mut out = Vec::with_capacity(x.numel());
    for ((xr, yr), gr) in x.data().chunks_exact(d).zip(y.data().chunks_exact(d)).zip(g.data().chunks_exact(d)) {
        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm <= eps {
            out.extend(gr.iter().map(|&gv| gv / eps));
            continue;
        }
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norm));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn layer_backward<T: Real>(
    ctx: &mut Ctx<'_, T>,
    layer: &LayerSpec,
    slot: usize,
    cache: &LayerCache<T>,
    g: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mismatch = || Error::ModeMismatch(format!("cached activation does not match layer kind {}", layer.kind_name()));
    match (layer, cache) {
        (
            &LayerSpec::Conv2d {
                stride,
                padding,
                binarized,
                ..
            },
            LayerCache::Conv { input },
        ) => ctx.conv(slot, ConvGeometry::new(stride, padding), binarized, input, g),
        (&LayerSpec::Linear { bias, .. }, LayerCache::Linear { input }) => {
            let (gin, gw, gb) = linear_backward(input, ctx.params.dense(slot)?, g)?;
            ctx.accumulate(slot, gw);
            if bias {
                ctx.accumulate(slot + 1, gb);
            }
            Ok(gin)
        }
        (LayerSpec::Relu, LayerCache::Activation { input }) => ctx.activation(None, input, g),
        (LayerSpec::Prelu { .. }, LayerCache::Activation { input }) => ctx.activation(Some(slot), input, g),
        (
            &LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
                activation,
                binarized,
            },
            LayerCache::Block {
                input,
                conv1_out,
                act1_out,
                sum,
            },
        ) => {
            let s = BlockSlots::new(slot, activation, in_channels != out_channels || stride != 1);
            debug_assert_eq!(s.slope1.is_some(), activation == Activation::Prelu);
            let g_sum = ctx.activation(s.slope2, sum, g)?;
            let g_act1 = ctx.conv(s.conv2, ConvGeometry::new(1, 1), binarized, act1_out, &g_sum)?;
            let g_conv1 = ctx.activation(s.slope1, conv1_out, &g_act1)?;
            let g_main = ctx.conv(s.conv1, ConvGeometry::new(stride, 1), binarized, input, &g_conv1)?;
            let g_short = match s.shortcut {
                Some(p) => ctx.conv(p, ConvGeometry::new(stride, 0), false, input, &g_sum)?,
                None => g_sum,
            };
            tensor::add(&g_main, &g_short)
        }
        (LayerSpec::Pool(PoolKind::GlobalAverage), LayerCache::GlobalAverage { input_shape }) => {
            let area = input_shape[2] * input_shape[3];
            let inv = T::from_f64(1.0 / area as f64);
            let data = g
                .data()
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv * inv, area))
                .collect();
            Ok(Tensor::from_parts(input_shape.clone(), data))
        }
        (LayerSpec::Pool(PoolKind::Max(_)), LayerCache::MaxPool { input_shape, argmax }) => {
            let mut gin = Tensor::zeros(input_shape);
            for (&idx, &gv) in argmax.iter().zip(g.data()) {
                gin.data_mut()[idx] += gv;
            }
            Ok(gin)
        }
        (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => g.clone().reshape(input_shape),
        _ => Err(mismatch()),
    }
}
