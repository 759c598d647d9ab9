//! Dense row-major tensors and the multiply-accumulate reference kernels.
//!
//! Everything here is generic over [`Real`]. The engine runs on `f32`; the
//! same kernels instantiated at `f64` back the finite-difference gradient
//! checks, where single precision cannot resolve a 1e-3 relative error.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

/// Scalar type accepted by every kernel.
pub trait Real: Float + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// NCHW extents of an activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub fn of<T>(t: &Tensor<T>, op: &'static str) -> Result<Self> {
        match *t.shape() {
            [batch, channels, height, width] => Ok(Self {
                batch,
                channels,
                height,
                width,
            }),
            _ => Err(Error::shape(
                op,
                format!("expected rank-4 NCHW tensor, got shape {:?}", t.shape()),
            )),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl<T> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor", index });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        )
    }

    /// Row `i` along the leading axis.
    pub fn slice_outer(&self, i: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_parts(shape, self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_outer(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(Error::Empty { op: "stack_outer" })?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(
                    "stack_outer",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementwise

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Relu,
    Prelu { slope: f64 },
    Add,
    Scale { k: f64 },
}

impl Elementwise {
    pub fn apply<T: Real>(self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let arity = if self == Elementwise::Add { 2 } else { 1 };
        if inputs.len() != arity {
            return Err(Error::invalid(
                "elementwise",
                format!("{self:?} takes {arity} input(s), got {}", inputs.len()),
            ));
        }
        match self {
            Elementwise::Relu => Ok(relu(inputs[0])),
            Elementwise::Prelu { slope } => Ok(prelu(inputs[0], T::from_f64(slope))),
            Elementwise::Add => add(inputs[0], inputs[1]),
            Elementwise::Scale { k } => Ok(scale(inputs[0], T::from_f64(k))),
        }
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn prelu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.check_same_shape(b, "add")?;
    Ok(Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    ))
}

pub fn scale<T: Real>(x: &Tensor<T>, k: T) -> Tensor<T> {
    x.map(|v| v * k)
}

// ---------------------------------------------------------------------------
// Convolution

/// Stride and zero padding shared by both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || kernel == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// For one kernel offset, the half-open range of output positions whose
/// receptive tap lands inside the unpadded input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TapRange {
    pub lo: usize,
    pub hi: usize,
}

/// Precomputed index ranges for a cross-correlation, reused by the forward,
/// backward, and multiplication-free kernels.
#[derive(Debug, Clone)]
pub(crate) struct ConvPlan {
    pub input: Shape4,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub geom: ConvGeometry,
    pub out_h: usize,
    pub out_w: usize,
    pub rows: Vec<TapRange>,
    pub cols: Vec<TapRange>,
}

fn tap_range(out_len: usize, in_len: usize, offset: usize, g: ConvGeometry) -> TapRange {
    let (s, p) = (g.stride, g.padding);
    let lo = if p > offset { (p - offset).div_ceil(s) } else { 0 };
    let hi = if in_len + p > offset {
        ((in_len - 1 + p - offset) / s + 1).min(out_len)
    } else {
        0
    };
    TapRange { lo, hi: hi.max(lo) }
}

impl ConvPlan {
    pub fn new(
        op: &'static str,
        input: Shape4,
        weight_shape: &[usize],
        geom: ConvGeometry,
    ) -> Result<Self> {
        let [filters, wc, kh, kw] = match *weight_shape {
            [f, c, h, w] => [f, c, h, w],
            _ => {
                return Err(Error::shape(
                    op,
                    format!("weights must be [F,C,kh,kw], got {weight_shape:?}"),
                ))
            }
        };
        if wc != input.channels {
            return Err(Error::shape(
                op,
                format!(
                    "input channels C={} but weight channels C={wc}",
                    input.channels
                ),
            ));
        }
        if geom.stride == 0 {
            return Err(Error::invalid(op, "stride must be >= 1"));
        }
        let out_h = geom.out_extent(input.height, kh).ok_or_else(|| {
            Error::shape(
                op,
                format!(
                    "kernel height {kh} exceeds padded input height {}",
                    input.height + 2 * geom.padding
                ),
            )
        })?;
        let out_w = geom.out_extent(input.width, kw).ok_or_else(|| {
            Error::shape(
                op,
                format!(
                    "kernel width {kw} exceeds padded input width {}",
                    input.width + 2 * geom.padding
                ),
            )
        })?;
        let rows = (0..kh)
            .map(|k| tap_range(out_h, input.height, k, geom))
            .collect();
        let cols = (0..kw)
            .map(|k| tap_range(out_w, input.width, k, geom))
            .collect();
        Ok(Self {
            input,
            filters,
            kh,
            kw,
            geom,
            out_h,
            out_w,
            rows,
            cols,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.input.batch, self.filters, self.out_h, self.out_w]
    }

    #[inline]
    pub fn in_row(&self, oy: usize, ky: usize) -> usize {
        oy * self.geom.stride + ky - self.geom.padding
    }

    #[inline]
    pub fn in_col(&self, ox: usize, kx: usize) -> usize {
        ox * self.geom.stride + kx - self.geom.padding
    }
}

/// Standard cross-correlation (no kernel flip), NCHW input, `[F,C,kh,kw]`
/// weights, no bias.
pub fn conv2d_reference<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let shape = Shape4::of(input, "conv2d")?;
    let plan = ConvPlan::new(
        "conv2d",
        shape,
        weights.shape(),
        ConvGeometry::new(stride, padding),
    )?;
    Ok(conv2d_with_plan(&plan, input, weights))
}

pub(crate) fn conv2d_with_plan<T: Real>(
    plan: &ConvPlan,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Tensor<T> {
    let Shape4 {
        batch,
        channels,
        height,
        width,
    } = plan.input;
    let (oh, ow, s) = (plan.out_h, plan.out_w, plan.geom.stride);
    let mut out = vec![T::zero(); batch * plan.filters * oh * ow];
    let x = input.data();
    let w = weights.data();
    for n in 0..batch {
        for f in 0..plan.filters {
            let out_map = &mut out[(n * plan.filters + f) * oh * ow..][..oh * ow];
            for c in 0..channels {
                let in_map = &x[(n * channels + c) * height * width..][..height * width];
                for ky in 0..plan.kh {
                    let rows = plan.rows[ky];
                    for kx in 0..plan.kw {
                        let wv = w[((f * channels + c) * plan.kh + ky) * plan.kw + kx];
                        let cols = plan.cols[kx];
                        if cols.lo >= cols.hi {
                            continue;
                        }
                        for oy in rows.lo..rows.hi {
                            let in_row = &in_map[plan.in_row(oy, ky) * width..][..width];
                            let out_row = &mut out_map[oy * ow..][cols.lo..cols.hi];
                            let ix0 = plan.in_col(cols.lo, kx);
                            if s == 1 {
                                for (o, &v) in out_row.iter_mut().zip(&in_row[ix0..]) {
                                    *o += wv * v;
                                }
                            } else {
                                for (j, o) in out_row.iter_mut().enumerate() {
                                    *o += wv * in_row[ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(plan.out_shape().to_vec(), out)
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_input_grad<T: Real>(
    input_shape: &[usize],
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let shape = Shape4::of(&Tensor::<T>::zeros(input_shape), "conv2d_input_grad")?;
    let plan = ConvPlan::new(
        "conv2d_input_grad",
        shape,
        weights.shape(),
        ConvGeometry::new(stride, padding),
    )?;
    check_grad_out(&plan, grad_out, "conv2d_input_grad")?;
    let Shape4 {
        batch,
        channels,
        height,
        width,
    } = plan.input;
    let (oh, ow, s) = (plan.out_h, plan.out_w, plan.geom.stride);
    let mut gin = vec![T::zero(); batch * channels * height * width];
    let g = grad_out.data();
    let w = weights.data();
    for n in 0..batch {
        for f in 0..plan.filters {
            let g_map = &g[(n * plan.filters + f) * oh * ow..][..oh * ow];
            for c in 0..channels {
                let gin_map = &mut gin[(n * channels + c) * height * width..][..height * width];
                for ky in 0..plan.kh {
                    let rows = plan.rows[ky];
                    for kx in 0..plan.kw {
                        let wv = w[((f * channels + c) * plan.kh + ky) * plan.kw + kx];
                        let cols = plan.cols[kx];
                        if cols.lo >= cols.hi {
                            continue;
                        }
                        for oy in rows.lo..rows.hi {
                            let iy = plan.in_row(oy, ky);
                            let g_row = &g_map[oy * ow..][cols.lo..cols.hi];
                            let gin_row = &mut gin_map[iy * width..][..width];
                            let ix0 = plan.in_col(cols.lo, kx);
                            for (j, &gv) in g_row.iter().enumerate() {
                                gin_row[ix0 + j * s] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), gin))
}

/// Gradient of a convolution with respect to its weights.
pub fn conv2d_weight_grad<T: Real>(
    input: &Tensor<T>,
    weight_shape: &[usize],
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let shape = Shape4::of(input, "conv2d_weight_grad")?;
    let plan = ConvPlan::new(
        "conv2d_weight_grad",
        shape,
        weight_shape,
        ConvGeometry::new(stride, padding),
    )?;
    check_grad_out(&plan, grad_out, "conv2d_weight_grad")?;
    let Shape4 {
        batch,
        channels,
        height,
        width,
    } = plan.input;
    let (oh, ow, s) = (plan.out_h, plan.out_w, plan.geom.stride);
    let mut gw = vec![T::zero(); plan.filters * channels * plan.kh * plan.kw];
    let g = grad_out.data();
    let x = input.data();
    for n in 0..batch {
        for f in 0..plan.filters {
            let g_map = &g[(n * plan.filters + f) * oh * ow..][..oh * ow];
            for c in 0..channels {
                let in_map = &x[(n * channels + c) * height * width..][..height * width];
                for ky in 0..plan.kh {
                    let rows = plan.rows[ky];
                    for kx in 0..plan.kw {
                        let cols = plan.cols[kx];
                        if cols.lo >= cols.hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in rows.lo..rows.hi {
                            let in_row = &in_map[plan.in_row(oy, ky) * width..][..width];
                            let g_row = &g_map[oy * ow..][cols.lo..cols.hi];
                            let ix0 = plan.in_col(cols.lo, kx);
                            if s == 1 {
                                for (&gv, &v) in g_row.iter().zip(&in_row[ix0..]) {
                                    acc += gv * v;
                                }
                            } else {
                                for (j, &gv) in g_row.iter().enumerate() {
                                    acc += gv * in_row[ix0 + j * s];
                                }
                            }
                        }
                        gw[((f * channels + c) * plan.kh + ky) * plan.kw + kx] += acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(weight_shape.to_vec(), gw))
}

fn check_grad_out<T: Real>(plan: &ConvPlan, g: &Tensor<T>, op: &'static str) -> Result<()> {
    if g.shape() != plan.out_shape() {
        return Err(Error::shape(
            op,
            format!(
                "upstream gradient {:?} does not match output {:?}",
                g.shape(),
                plan.out_shape()
            ),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Linear

/// `y = x Wᵀ + b` with `x: [N,D]`, `W: [K,D]`, `b: [K]`.
pub fn linear_reference<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, d) = matrix_dims(input, "linear")?;
    let (k, wd) = matrix_dims(weights, "linear")?;
    if d != wd {
        return Err(Error::shape(
            "linear",
            format!("input features D={d} but weight features D={wd}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} does not match K={k}", b.shape()),
            ));
        }
    }
    let x = input.data();
    let w = weights.data();
    let mut out = Vec::with_capacity(n * k);
    for row in x.chunks_exact(d) {
        for (j, wrow) in w.chunks_exact(d).enumerate() {
            let mut acc = bias.map_or(T::zero(), |b| b.data()[j]);
            for (&a, &b) in row.iter().zip(wrow) {
                acc += a * b;
            }
            out.push(acc);
        }
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}

/// Backward of [`linear_reference`]: `(grad_input, grad_weights, grad_bias)`.
pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = matrix_dims(input, "linear_backward")?;
    let (k, _) = matrix_dims(weights, "linear_backward")?;
    if grad_out.shape() != [n, k] {
        return Err(Error::shape(
            "linear_backward",
            format!("upstream {:?}, expected [{n}, {k}]", grad_out.shape()),
        ));
    }
    let (x, w, g) = (input.data(), weights.data(), grad_out.data());
    let mut gin = vec![T::zero(); n * d];
    let mut gw = vec![T::zero(); k * d];
    let mut gb = vec![T::zero(); k];
    for i in 0..n {
        let xrow = &x[i * d..][..d];
        let ginrow = &mut gin[i * d..][..d];
        for j in 0..k {
            let gv = g[i * k + j];
            gb[j] += gv;
            let wrow = &w[j * d..][..d];
            let gwrow = &mut gw[j * d..][..d];
            for t in 0..d {
                ginrow[t] += gv * wrow[t];
                gwrow[t] += gv * xrow[t];
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, d], gin),
        Tensor::from_parts(vec![k, d], gw),
        Tensor::from_parts(vec![k], gb),
    ))
}

fn matrix_dims<T>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        )),
    }
}

// ---------------------------------------------------------------------------
// Pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    GlobalAverage,
    /// Non-overlapping `k×k` max pooling (stride `k`, remainder dropped).
    Max(usize),
}

pub fn pool<T: Real>(input: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    match kind {
        PoolKind::GlobalAverage => global_average_pool(input),
        PoolKind::Max(k) => max_pool(input, k).map(|(out, _)| out),
    }
}

/// Mean over the spatial axes; `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_average_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = Shape4::of(input, "global_average_pool")?;
    let area = s.height * s.width;
    let inv = T::from_f64(1.0 / area as f64);
    let out = input
        .data()
        .chunks_exact(area)
        .map(|m| m.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![s.batch, s.channels, 1, 1], out))
}

/// Max pooling; also returns the flat input index chosen for every output.
pub fn max_pool<T: Real>(input: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = Shape4::of(input, "max_pool")?;
    if k == 0 || k > s.height || k > s.width {
        return Err(Error::shape(
            "max_pool",
            format!("kernel {k} larger than input {}x{}", s.height, s.width),
        ));
    }
    let (oh, ow) = (s.height / k, s.width / k);
    let x = input.data();
    let mut out = Vec::with_capacity(s.batch * s.channels * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..s.batch * s.channels {
        let base = nc * s.height * s.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * s.width + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * s.width + ox * k + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![s.batch, s.channels, oh, ow], out),
        arg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let y = conv2d_reference(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), [9.0]);
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let x = t(&[1, 1, 2, 3], &[1.0, -2.0, 3.5, 0.0, 7.0, -1.25]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d_reference(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_output_extents_follow_floor_formula() {
        let x = Tensor::<f32>::zeros(&[2, 3, 7, 6]);
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 2]);
        let y = conv2d_reference(&x, &w, 2, 1).unwrap();
        // (7 + 2 - 3) / 2 + 1 = 4, (6 + 2 - 2) / 2 + 1 = 4
        assert_eq!(y.shape(), [2, 4, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_dimensions() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d_reference(&x, &w, 1, 0).unwrap_err().to_string();
        assert!(err.contains("C=2") && err.contains("C=3"), "{err}");
    }

    #[test]
    fn conv_kernel_too_large_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_reference(&x, &w, 1, 0).is_err());
        assert!(conv2d_reference(&x, &w, 1, 1).is_ok());
        assert!(conv2d_reference(&x, &w, 0, 1).is_err());
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear_reference(&x, &eye, None).unwrap().data(), [1.0, 2.0]);

        let x = t(&[1, 2], &[1.0, 1.0]);
        let w = t(&[1, 2], &[2.0, 3.0]);
        let b = t(&[1], &[1.0]);
        assert_eq!(linear_reference(&x, &w, Some(&b)).unwrap().data(), [6.0]);
        assert!(linear_reference(&x, &t(&[1, 3], &[1.0; 3]), None).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), [0.0, 0.0, 2.0]);
        let x = t(&[2], &[-2.0, 3.0]);
        assert_eq!(
            Elementwise::Prelu { slope: 0.25 }.apply(&[&x]).unwrap().data(),
            [-0.5, 3.0]
        );
        let neg = Elementwise::Scale { k: -1.0 }.apply(&[&x]).unwrap();
        let zero = Elementwise::Add.apply(&[&x, &neg]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(add(&x, &t(&[3], &[0.0; 3])).is_err());
        assert!(Elementwise::Add.apply(&[&x]).is_err());
    }

    #[test]
    fn pooling_examples() {
        let c = Tensor::full(&[1, 1, 4, 5], 7.0f32);
        assert_eq!(global_average_pool(&c).unwrap().data(), [7.0]);
        let m = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = pool(&m, PoolKind::Max(2)).unwrap();
        assert_eq!(p.shape(), [1, 1, 1, 1]);
        assert_eq!(p.data(), [4.0]);
        assert!(pool(&m, PoolKind::Max(3)).is_err());
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0f32; 3]).is_err());
        assert!(matches!(
            Tensor::from_vec(&[2], vec![0.0f32, f32::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }
}
