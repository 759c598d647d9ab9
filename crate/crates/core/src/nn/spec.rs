use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, PoolKind};

pub const DEFAULT_EMBEDDING_DIM: usize = 128;
pub const PRELU_INIT_SLOPE: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Prelu,
}

impl Activation {
    fn layer(self) -> LayerSpec {
        match self {
            Activation::Relu => LayerSpec::Relu,
            Activation::Prelu => LayerSpec::Prelu {
                init_slope: PRELU_INIT_SLOPE,
            },
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Prelu => "prelu",
        })
    }
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Activation::Relu),
            "prelu" => Ok(Activation::Prelu),
            _ => Err(format!("expected relu or prelu, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Bias-free convolution; `binarized` selects the sign/scale path.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        binarized: bool,
    },
    /// Always full precision.
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Relu,
    /// Single trainable slope shared across the layer.
    Prelu { init_slope: f32 },
    /// `act(conv2(act(conv1(x))) + shortcut(x))` with 3×3 convs. The
    /// shortcut is the identity, or a full-precision 1×1 projection when the
    /// channel count or stride changes.
    ResidualBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        activation: Activation,
        binarized: bool,
    },
    Pool(PoolKind),
    Flatten,
}

impl LayerSpec {
    pub fn binary_conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            binarized: true,
        }
    }

    pub fn float_conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            binarized: false,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { binarized: true, .. } => "binary_conv2d",
            LayerSpec::Conv2d { .. } => "float_conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::Prelu { .. } => "prelu",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::Pool(_) => "pool",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_binarized(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { binarized: true, .. } | LayerSpec::ResidualBlock { binarized: true, .. }
        )
    }
}

/// Activation shape between layers (batch axis excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(d) => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    FloatConv,
    BinaryConv,
    LinearWeight,
    LinearBias,
    PreluSlope,
}

impl SlotKind {
    pub fn code(self) -> u8 {
        match self {
            SlotKind::FloatConv => 1,
            SlotKind::BinaryConv => 2,
            SlotKind::LinearWeight => 3,
            SlotKind::LinearBias => 4,
            SlotKind::PreluSlope => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => SlotKind::FloatConv,
            2 => SlotKind::BinaryConv,
            3 => SlotKind::LinearWeight,
            4 => SlotKind::LinearBias,
            5 => SlotKind::PreluSlope,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SlotKind::FloatConv => "float_conv",
            SlotKind::BinaryConv => "binary_conv",
            SlotKind::LinearWeight => "linear_weight",
            SlotKind::LinearBias => "linear_bias",
            SlotKind::PreluSlope => "prelu_slope",
        }
    }
}

/// One trainable tensor in the network's parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub kind: SlotKind,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Inputs feeding one output unit, used for initialization bounds.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            SlotKind::FloatConv | SlotKind::BinaryConv => self.shape[1..].iter().product(),
            SlotKind::LinearWeight => self.shape[1],
            SlotKind::LinearBias | SlotKind::PreluSlope => 1,
        }
    }
}

/// Fixed multiplier on the unit-norm embedding before the classifier.
/// Without it the logits of a unit vector span too small a range for the
/// softmax to sharpen at the default learning rate.
pub const DEFAULT_LOGIT_SCALE: f64 = 8.0;

/// Validated architecture: a trunk ending in an `embedding_dim` vector, which
/// is L2-normalized, multiplied by `logit_scale`, and fed to a
/// full-precision classifier with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    embedding_dim: usize,
    num_classes: usize,
    logit_scale: f64,
}

impl NetworkSpec {
    pub fn new(
        input: [usize; 3],
        layers: Vec<LayerSpec>,
        embedding_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let spec = Self {
            input,
            layers,
            embedding_dim,
            num_classes,
            logit_scale: DEFAULT_LOGIT_SCALE,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_logit_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid("network", format!("logit_scale must be positive, got {scale}")));
        }
        self.logit_scale = scale;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::shape("network", format!("input {:?} has a zero extent", self.input)));
        }
        if self.embedding_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("network", "embedding_dim and num_classes must be >= 1"));
        }
        let shapes = self.activation_shapes()?;
        let last = *shapes.last().expect("input shape is always present");
        if last != ActShape::Flat(self.embedding_dim) {
            return Err(Error::shape(
                "network",
                format!(
                    "trunk ends in {last:?}, expected a flat vector of embedding_dim {}",
                    self.embedding_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn input(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    /// Shape entering each layer, followed by the trunk output.
    pub fn activation_shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input;
        let mut shape = ActShape::Map { c, h, w };
        let mut shapes = vec![shape];
        for (i, layer) in self.layers.iter().enumerate() {
            shape = next_shape(shape, layer).map_err(|detail| {
                Error::shape("network", format!("layer {i} ({}): {detail}", layer.kind_name()))
            })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Every parameter tensor in execution order; the classifier comes last.
    pub fn slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer_slots(i, layer, &mut slots);
        }
        slots.push(ParamSlot {
            name: "classifier.weight".into(),
            kind: SlotKind::LinearWeight,
            shape: vec![self.num_classes, self.embedding_dim],
        });
        slots.push(ParamSlot {
            name: "classifier.bias".into(),
            kind: SlotKind::LinearBias,
            shape: vec![self.num_classes],
        });
        slots
    }

    /// Slot index range owned by each trunk layer.
    pub fn layer_slot_ranges(&self) -> Vec<Range<usize>> {
        let mut scratch = Vec::new();
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let start = scratch.len();
                layer_slots(i, layer, &mut scratch);
                start..scratch.len()
            })
            .collect()
    }

    pub fn classifier_slots(&self) -> (usize, usize) {
        let n = self.slots().len();
        (n - 2, n - 1)
    }

    pub fn has_binary_layers(&self) -> bool {
        self.layers.iter().any(LayerSpec::is_binarized)
    }

    pub fn to_text(&self) -> String {
        let [c, h, w] = self.input;
        let mut s = format!(
            "input = {c}x{h}x{w}\nembedding_dim = {}\nnum_classes = {}\nlogit_scale = {}\n",
            self.embedding_dim, self.num_classes, self.logit_scale
        );
        for layer in &self.layers {
            s.push_str("layer = ");
            s.push_str(&layer_to_text(layer));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::invalid("network spec", detail);
        let mut input = None;
        let mut embedding_dim = None;
        let mut num_classes = None;
        let mut logit_scale = DEFAULT_LOGIT_SCALE;
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            match key {
                "input" => {
                    let dims: Vec<usize> = value
                        .split('x')
                        .map(|d| d.trim().parse().map_err(|_| bad(format!("bad input `{value}`"))))
                        .collect::<Result<_>>()?;
                    let dims: [usize; 3] = dims
                        .try_into()
                        .map_err(|_| bad(format!("input needs CxHxW, got `{value}`")))?;
                    input = Some(dims);
                }
                "embedding_dim" => {
                    embedding_dim = Some(value.parse().map_err(|_| bad(format!("bad embedding_dim `{value}`")))?)
                }
                "num_classes" => {
                    num_classes = Some(value.parse().map_err(|_| bad(format!("bad num_classes `{value}`")))?)
                }
                "logit_scale" => {
                    logit_scale = value.parse().map_err(|_| bad(format!("bad logit_scale `{value}`")))?
                }
                "layer" => layers.push(layer_from_text(value).map_err(bad)?),
                _ => return Err(bad(format!("unknown key `{key}`"))),
            }
        }
        Self::new(
            input.ok_or_else(|| bad("missing input".into()))?,
            layers,
            embedding_dim.ok_or_else(|| bad("missing embedding_dim".into()))?,
            num_classes.ok_or_else(|| bad("missing num_classes".into()))?,
        )?
        .with_logit_scale(logit_scale)
    }
}

fn next_shape(shape: ActShape, layer: &LayerSpec) -> std::result::Result<ActShape, String> {
    let expect_map = |shape: ActShape| match shape {
        ActShape::Map { c, h, w } => Ok((c, h, w)),
        ActShape::Flat(_) => Err("expects a feature map, got a flat vector".to_string()),
    };
    Ok(match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (c, h, w) = expect_map(shape)?;
            if c != in_channels {
                return Err(format!("input has {c} channels, layer expects {in_channels}"));
            }
            let g = ConvGeometry::new(stride, padding);
            let (oh, ow) = g
                .out_extent(h, kernel)
                .zip(g.out_extent(w, kernel))
                .ok_or_else(|| format!("kernel {kernel} (stride {stride}) does not fit {h}x{w} with padding {padding}"))?;
            if out_channels == 0 {
                return Err("zero output channels".into());
            }
            ActShape::Map {
                c: out_channels,
                h: oh,
                w: ow,
            }
        }
        LayerSpec::ResidualBlock {
            in_channels,
            out_channels,
            stride,
            ..
        } => {
            let (c, h, w) = expect_map(shape)?;
            if c != in_channels {
                return Err(format!("input has {c} channels, block expects {in_channels}"));
            }
            if stride == 0 || out_channels == 0 {
                return Err("stride and out_channels must be >= 1".into());
            }
            ActShape::Map {
                c: out_channels,
                h: (h - 1) / stride + 1,
                w: (w - 1) / stride + 1,
            }
        }
        LayerSpec::Linear {
            in_features,
            out_features,
            ..
        } => match shape {
            ActShape::Flat(d) if d == in_features && out_features > 0 => ActShape::Flat(out_features),
            ActShape::Flat(d) => return Err(format!("input has {d} features, layer expects {in_features}")),
            ActShape::Map { .. } => return Err("expects a flat vector; add a flatten layer".into()),
        },
        LayerSpec::Relu | LayerSpec::Prelu { .. } => shape,
        LayerSpec::Pool(PoolKind::GlobalAverage) => {
            let (c, _, _) = expect_map(shape)?;
            ActShape::Map { c, h: 1, w: 1 }
        }
        LayerSpec::Pool(PoolKind::Max(k)) => {
            let (c, h, w) = expect_map(shape)?;
            if k == 0 || k > h || k > w {
                return Err(format!("max pool kernel {k} larger than {h}x{w}"));
            }
            ActShape::Map { c, h: h / k, w: w / k }
        }
        LayerSpec::Flatten => ActShape::Flat(shape.numel()),
    })
}

fn layer_slots(i: usize, layer: &LayerSpec, out: &mut Vec<ParamSlot>) {
    let mut push = |suffix: &str, kind: SlotKind, shape: Vec<usize>| {
        out.push(ParamSlot {
            name: format!("layers.{i}.{suffix}"),
            kind,
            shape,
        })
    };
    let conv_kind = |binarized: bool| {
        if binarized {
            SlotKind::BinaryConv
        } else {
            SlotKind::FloatConv
        }
    };
    match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            binarized,
            ..
        } => push("weight", conv_kind(binarized), vec![out_channels, in_channels, kernel, kernel]),
        LayerSpec::Linear {
            in_features,
            out_features,
            bias,
        } => {
            push("weight", SlotKind::LinearWeight, vec![out_features, in_features]);
            if bias {
                push("bias", SlotKind::LinearBias, vec![out_features]);
            }
        }
        LayerSpec::Prelu { .. } => push("slope", SlotKind::PreluSlope, vec![1]),
        LayerSpec::ResidualBlock {
            in_channels,
            out_channels,
            stride,
            activation,
            binarized,
        } => {
            push("conv1", conv_kind(binarized), vec![out_channels, in_channels, 3, 3]);
            if activation == Activation::Prelu {
                push("slope1", SlotKind::PreluSlope, vec![1]);
            }
            push("conv2", conv_kind(binarized), vec![out_channels, out_channels, 3, 3]);
            if in_channels != out_channels || stride != 1 {
                push("shortcut", SlotKind::FloatConv, vec![out_channels, in_channels, 1, 1]);
            }
            if activation == Activation::Prelu {
                push("slope2", SlotKind::PreluSlope, vec![1]);
            }
        }
        LayerSpec::Relu | LayerSpec::Pool(_) | LayerSpec::Flatten => {}
    }
}

fn layer_to_text(layer: &LayerSpec) -> String {
    match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            binarized,
        } => format!(
            "conv in={in_channels} out={out_channels} kernel={kernel} stride={stride} padding={padding} binarized={binarized}"
        ),
        LayerSpec::Linear {
            in_features,
            out_features,
            bias,
        } => format!("linear in={in_features} out={out_features} bias={bias}"),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::Prelu { init_slope } => format!("prelu slope={init_slope}"),
        LayerSpec::ResidualBlock {
            in_channels,
            out_channels,
            stride,
            activation,
            binarized,
        } => format!(
            "block in={in_channels} out={out_channels} stride={stride} activation={activation} binarized={binarized}"
        ),
        LayerSpec::Pool(PoolKind::GlobalAverage) => "pool global_average".into(),
        LayerSpec::Pool(PoolKind::Max(k)) => format!("pool max={k}"),
        LayerSpec::Flatten => "flatten".into(),
    }
}

fn layer_from_text(text: &str) -> std::result::Result<LayerSpec, String> {
    let mut words = text.split_whitespace();
    let kind = words.next().ok_or("empty layer")?;
    let mut attrs = std::collections::BTreeMap::new();
    let mut flags = Vec::new();
    for w in words {
        match w.split_once('=') {
            Some((k, v)) => {
                attrs.insert(k, v);
            }
            None => flags.push(w),
        }
    }
    fn get<T: FromStr>(attrs: &std::collections::BTreeMap<&str, &str>, key: &str) -> std::result::Result<T, String> {
        attrs
            .get(key)
            .ok_or_else(|| format!("missing `{key}`"))?
            .parse()
            .map_err(|_| format!("bad value for `{key}`"))
    }
    let layer = match kind {
        "conv" => LayerSpec::Conv2d {
            in_channels: get(&attrs, "in")?,
            out_channels: get(&attrs, "out")?,
            kernel: get(&attrs, "kernel")?,
            stride: get(&attrs, "stride")?,
            padding: get(&attrs, "padding")?,
            binarized: get(&attrs, "binarized")?,
        },
        "linear" => LayerSpec::Linear {
            in_features: get(&attrs, "in")?,
            out_features: get(&attrs, "out")?,
            bias: get(&attrs, "bias")?,
        },
        "relu" => LayerSpec::Relu,
        "prelu" => LayerSpec::Prelu {
            init_slope: get(&attrs, "slope")?,
        },
        "block" => LayerSpec::ResidualBlock {
            in_channels: get(&attrs, "in")?,
            out_channels: get(&attrs, "out")?,
            stride: get(&attrs, "stride")?,
            activation: get(&attrs, "activation")?,
            binarized: get(&attrs, "binarized")?,
        },
        "pool" => match (flags.as_slice(), attrs.get("max")) {
            (["global_average"], None) => LayerSpec::Pool(PoolKind::GlobalAverage),
            ([], Some(_)) => LayerSpec::Pool(PoolKind::Max(get(&attrs, "max")?)),
            _ => return Err(format!("bad pool layer `{text}`")),
        },
        "flatten" => LayerSpec::Flatten,
        _ => return Err(format!("unknown layer kind `{kind}`")),
    };
    Ok(layer)
}

/// A scaled-down ResNet: full-precision 3×3 stem, `depth_blocks` residual
/// blocks per entry of `channels` (stride 2 on entering every stage after
/// the first), global average pooling, and a full-precision linear
/// embedding layer.
pub fn build_micro_resnet(
    input: [usize; 3],
    depth_blocks: usize,
    channels: &[usize],
    embedding_dim: usize,
    num_classes: usize,
    activation: Activation,
) -> Result<NetworkSpec> {
    if depth_blocks == 0 {
        return Err(Error::invalid("build_micro_resnet", "depth_blocks must be >= 1"));
    }
    if channels.is_empty() || channels.contains(&0) {
        return Err(Error::invalid(
            "build_micro_resnet",
            format!("channel list {channels:?} must be non-empty and positive"),
        ));
    }
    let mut layers = vec![LayerSpec::float_conv(input[0], channels[0], 3, 1, 1), activation.layer()];
    let mut width = channels[0];
    for (stage, &out) in channels.iter().enumerate() {
        for b in 0..depth_blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layers.push(LayerSpec::ResidualBlock {
                in_channels: width,
                out_channels: out,
                stride,
                activation,
                binarized: true,
            });
            width = out;
        }
    }
    layers.extend([
        LayerSpec::Pool(PoolKind::GlobalAverage),
        LayerSpec::Flatten,
        LayerSpec::Linear {
            in_features: width,
            out_features: embedding_dim,
            bias: true,
        },
    ]);
    NetworkSpec::new(input, layers, embedding_dim, num_classes)
}
