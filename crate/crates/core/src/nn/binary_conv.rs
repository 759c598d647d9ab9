//! Multiplication-free convolution against packed sign bits.
//!
//! For each filter the kernel adds or subtracts input samples according to the
//! filter's sign bits, then multiplies every accumulated output by the single
//! filter scale. The only multiplications touching activations are those
//! final scale products.

use crate::binarize::BinaryFilterBank;
use crate::error::Result;
use crate::tensor::{ConvGeometry, ConvPlan, Real, Shape4, Tensor};

/// Arithmetic issued by one call of the binary kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    /// Multiplications issued during sign accumulation.
    pub inner_multiplies: u64,
    pub additions: u64,
    pub subtractions: u64,
    /// Multiplications by the filter scale, one per output element.
    pub scale_multiplies: u64,
}

trait Tally {
    fn add(&mut self, k: usize);
    fn sub(&mut self, k: usize);
    fn scale(&mut self, k: usize);
}

struct NoTally;

impl Tally for NoTally {
    #[inline(always)]
    fn add(&mut self, _: usize) {}
    #[inline(always)]
    fn sub(&mut self, _: usize) {}
    #[inline(always)]
    fn scale(&mut self, _: usize) {}
}

impl Tally for OpCount {
    fn add(&mut self, k: usize) {
        self.additions += k as u64;
    }
    fn sub(&mut self, k: usize) {
        self.subtractions += k as u64;
    }
    fn scale(&mut self, k: usize) {
        self.scale_multiplies += k as u64;
    }
}

pub fn binary_conv2d_forward<T: Real>(
    input: &Tensor<T>,
    bank: &BinaryFilterBank,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let plan = plan_for(input, bank, stride, padding)?;
    Ok(run(&plan, input, bank, &mut NoTally))
}

/// Same as [`binary_conv2d_forward`], also returning the operation counts.
pub fn binary_conv2d_forward_counted<T: Real>(
    input: &Tensor<T>,
    bank: &BinaryFilterBank,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, OpCount)> {
    let plan = plan_for(input, bank, stride, padding)?;
    let mut count = OpCount::default();
    let out = run(&plan, input, bank, &mut count);
    Ok((out, count))
}

fn plan_for<T: Real>(
    input: &Tensor<T>,
    bank: &BinaryFilterBank,
    stride: usize,
    padding: usize,
) -> Result<ConvPlan> {
    let shape = Shape4::of(input, "binary_conv2d")?;
    ConvPlan::new(
        "binary_conv2d",
        shape,
        &bank.shape(),
        ConvGeometry::new(stride, padding),
    )
}

fn run<T: Real, C: Tally>(
    plan: &ConvPlan,
    input: &Tensor<T>,
    bank: &BinaryFilterBank,
    tally: &mut C,
) -> Tensor<T> {
    let Shape4 {
        batch,
        channels,
        height,
        width,
    } = plan.input;
    let (oh, ow, s) = (plan.out_h, plan.out_w, plan.geom.stride);
    let (kh, kw) = (plan.kh, plan.kw);
    let mut out = vec![T::zero(); batch * plan.filters * oh * ow];
    let mut acc = vec![T::zero(); oh * ow];
    let x = input.data();
    for n in 0..batch {
        for f in 0..plan.filters {
            acc.fill(T::zero());
            for c in 0..channels {
                let in_map = &x[(n * channels + c) * height * width..][..height * width];
                for ky in 0..kh {
                    let rows = plan.rows[ky];
                    for kx in 0..kw {
                        let cols = plan.cols[kx];
                        if cols.lo >= cols.hi || rows.lo >= rows.hi {
                            continue;
                        }
                        let positive = bank.is_positive(f, (c * kh + ky) * kw + kx);
                        let len = cols.hi - cols.lo;
                        let ix0 = plan.in_col(cols.lo, kx);
                        for oy in rows.lo..rows.hi {
                            let in_row = &in_map[plan.in_row(oy, ky) * width..][..width];
                            let acc_row = &mut acc[oy * ow..][cols.lo..cols.hi];
                            match (positive, s) {
                                (true, 1) => {
                                    for (o, &v) in acc_row.iter_mut().zip(&in_row[ix0..]) {
                                        *o += v;
                                    }
                                }
                                (false, 1) => {
                                    for (o, &v) in acc_row.iter_mut().zip(&in_row[ix0..]) {
                                        *o -= v;
                                    }
                                }
                                (true, _) => {
                                    for (o, &v) in acc_row.iter_mut().zip(in_row[ix0..].iter().step_by(s)) {
                                        *o += v;
                                    }
                                }
                                (false, _) => {
                                    for (o, &v) in acc_row.iter_mut().zip(in_row[ix0..].iter().step_by(s)) {
                                        *o -= v;
                                    }
                                }
                            }
                            if positive {
                                tally.add(len);
                            } else {
                                tally.sub(len);
                            }
                        }
                    }
                }
            }
            let a = T::from_f32(bank.scales()[f]);
            let out_map = &mut out[(n * plan.filters + f) * oh * ow..][..oh * ow];
            for (o, &v) in out_map.iter_mut().zip(&acc) {
                *o = v * a;
            }
            tally.scale(oh * ow);
        }
    }
    Tensor::from_parts(plan.out_shape().to_vec(), out)
}
