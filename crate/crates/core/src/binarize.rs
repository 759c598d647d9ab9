//! Weight binarization: `W ≈ a·B` with `B ∈ {−1,+1}^n` and one scale per
//! output filter.
//!
//! The closed form is `B = Sign(W)` (with `Sign(0) = +1`) and
//! `a = ‖W‖₁ / n`, the mean absolute weight. [`brute_force_optimum`]
//! enumerates every sign pattern to check that closed form on small filters.
//!
//! The objective `J(B, a) = ‖W − aB‖₂` is reported as the plain (not squared)
//! L2 norm. Minimizers are the same either way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Largest filter size [`brute_force_optimum`] will enumerate.
pub const BRUTE_FORCE_MAX_N: usize = 16;

/// `Sign(x)`: `+1` for `x ≥ 0`, `−1` otherwise.
#[inline]
pub fn sign<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// `clip((x + 1) / 2, 0, 1)`.
#[inline]
pub fn hard_sigmoid(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

fn check_finite<T: Real>(values: &[T], op: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

/// Deterministic elementwise sign binarization.
pub fn sign_binarize<T: Real>(w: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite(w.data(), "sign_binarize")?;
    Ok(w.map(sign))
}

/// Stochastic binarization: each entry becomes `+1` with probability
/// `hard_sigmoid(x)`, independently, from a ChaCha8 stream seeded by `seed`.
/// Training always uses the deterministic [`sign_binarize`] path.
pub fn stochastic_binarize<T: Real>(w: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    check_finite(w.data(), "stochastic_binarize")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(w.map(|x| {
        let u: f64 = rng.random();
        if u < hard_sigmoid(x.as_f64()) {
            T::one()
        } else {
            -T::one()
        }
    }))
}

/// Optimal scale `a* = (1/n)·Σ|wᵢ|`, accumulated in double precision.
pub fn optimal_scale<T: Real>(w: &[T]) -> Result<T> {
    if w.is_empty() {
        return Err(Error::Empty {
            op: "optimal_scale",
        });
    }
    check_finite(w, "optimal_scale")?;
    let l1: f64 = w.iter().map(|v| v.as_f64().abs()).sum();
    Ok(T::from_f64(l1 / w.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBinarization<T> {
    pub signs: Vec<T>,
    pub scale: T,
}

impl<T: Real> FilterBinarization<T> {
    pub fn reconstruct(&self) -> Vec<T> {
        self.signs.iter().map(|&s| s * self.scale).collect()
    }
}

/// `(Sign(W), mean|W|)` for one flattened filter.
pub fn binarize_filter<T: Real>(w: &[T]) -> Result<FilterBinarization<T>> {
    let scale = optimal_scale(w)?;
    Ok(FilterBinarization {
        signs: w.iter().map(|&v| sign(v)).collect(),
        scale,
    })
}

/// `J(B, a) = ‖W − aB‖₂`.
pub fn objective_j<T: Real>(w: &[T], signs: &[T], scale: T) -> Result<f64> {
    if w.len() != signs.len() {
        return Err(Error::shape(
            "objective_j",
            format!("filter has {} entries, sign vector {}", w.len(), signs.len()),
        ));
    }
    if let Some(index) = signs
        .iter()
        .position(|&s| s != T::one() && s != -T::one())
    {
        return Err(Error::InvalidSign {
            index,
            value: signs[index].as_f64(),
        });
    }
    let a = scale.as_f64();
    Ok(w.iter()
        .zip(signs)
        .map(|(&wi, &si)| {
            let r = wi.as_f64() - a * si.as_f64();
            r * r
        })
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceOptimum {
    pub signs: Vec<f64>,
    pub scale: f64,
    pub objective: f64,
}

/// Exhaustive minimization of `J` over all `2^n` sign patterns, each paired
/// with its own least-squares scale `a = WᵀB / n`.
///
/// `B` and `−B` reach the same reconstruction; only patterns with `a ≥ 0` are
/// kept so the answer is unique up to ties on zero weights. Among exact ties
/// the first pattern in enumeration order wins (bit `i` of the counter set
/// means `Bᵢ = +1`).
pub fn brute_force_optimum<T: Real>(w: &[T]) -> Result<BruteForceOptimum> {
    let n = w.len();
    if n == 0 {
        return Err(Error::Empty {
            op: "brute_force_optimum",
        });
    }
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::OracleTooLarge {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }
    check_finite(w, "brute_force_optimum")?;
    let wf: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
    let mut best: Option<(u32, f64, f64)> = None;
    let mut b = vec![0.0f64; n];
    for mask in 0u32..(1u32 << n) {
        for (i, bi) in b.iter_mut().enumerate() {
            *bi = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
        }
        let a = wf.iter().zip(&b).map(|(x, s)| x * s).sum::<f64>() / n as f64;
        if a < 0.0 {
            continue;
        }
        let j = wf
            .iter()
            .zip(&b)
            .map(|(x, s)| (x - a * s) * (x - a * s))
            .sum::<f64>()
            .sqrt();
        if best.is_none_or(|(_, bj, _)| j < bj) {
            best = Some((mask, j, a));
        }
    }
    let (mask, objective, scale) = best.expect("the all-ones or all-minus pattern has a >= 0");
    Ok(BruteForceOptimum {
        signs: (0..n)
            .map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 })
            .collect(),
        scale,
        objective,
    })
}

/// Binarizes every filter (leading axis) of a dense weight tensor, returning
/// the dense reconstruction `W̃ = aB` and the per-filter scales.
pub fn binarize_dense<T: Real>(w: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let filters = w.shape()[0];
    let n = w.numel() / filters;
    let mut out = Vec::with_capacity(w.numel());
    let mut scales = Vec::with_capacity(filters);
    for chunk in w.data().chunks_exact(n) {
        let a = optimal_scale(chunk)?;
        out.extend(chunk.iter().map(|&v| if v >= T::zero() { a } else { -a }));
        scales.push(a);
    }
    Ok((Tensor::from_parts(w.shape().to_vec(), out), scales))
}

// ---------------------------------------------------------------------------

/// Packed sign bits plus one scale per output filter for a `[F,C,kh,kw]`
/// convolution.
///
/// Bit `i` of filter `f` lives in word `f·words_per_filter + i/64` at bit
/// position `i % 64` (LSB first); a set bit means `+1`. Bits past `n` in a
/// filter's last word are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryFilterBank {
    shape: [usize; 4],
    words: Vec<u64>,
    scales: Vec<f32>,
}

pub fn words_for_bits(n: usize) -> usize {
    n.div_ceil(64)
}

impl BinaryFilterBank {
    pub fn from_weights<T: Real>(w: &Tensor<T>) -> Result<Self> {
        let shape: [usize; 4] = w.shape().try_into().map_err(|_| {
            Error::shape(
                "BinaryFilterBank",
                format!("expected [F,C,kh,kw] weights, got {:?}", w.shape()),
            )
        })?;
        let n = shape[1] * shape[2] * shape[3];
        let wpf = words_for_bits(n);
        let mut words = vec![0u64; shape[0] * wpf];
        let mut scales = Vec::with_capacity(shape[0]);
        for (f, chunk) in w.data().chunks_exact(n).enumerate() {
            let fb = binarize_filter(chunk)?;
            for (i, &s) in fb.signs.iter().enumerate() {
                if s > T::zero() {
                    words[f * wpf + i / 64] |= 1u64 << (i % 64);
                }
            }
            scales.push(fb.scale.as_f64() as f32);
        }
        Ok(Self {
            shape,
            words,
            scales,
        })
    }

    /// Assembles a bank from already-packed words, enforcing the padding and
    /// scale invariants.
    pub fn from_packed(shape: [usize; 4], words: Vec<u64>, scales: Vec<f32>) -> Result<Self> {
        let n = shape[1] * shape[2] * shape[3];
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("BinaryFilterBank", format!("zero extent in {shape:?}")));
        }
        let wpf = words_for_bits(n);
        if words.len() != shape[0] * wpf || scales.len() != shape[0] {
            return Err(Error::shape(
                "BinaryFilterBank",
                format!(
                    "{shape:?} needs {} words and {} scales, got {} and {}",
                    shape[0] * wpf,
                    shape[0],
                    words.len(),
                    scales.len()
                ),
            ));
        }
        if let Some(f) = (0..shape[0]).find(|&f| words[f * wpf + wpf - 1] & !last_word_mask(n) != 0)
        {
            return Err(crate::error::FormatError::NonZeroPadding { filter: f }.into());
        }
        if let Some(f) = scales.iter().position(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid(
                "BinaryFilterBank",
                format!("scale of filter {f} is {}", scales[f]),
            ));
        }
        Ok(Self {
            shape,
            words,
            scales,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn num_filters(&self) -> usize {
        self.shape[0]
    }

    pub fn bits_per_filter(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn words_per_filter(&self) -> usize {
        words_for_bits(self.bits_per_filter())
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn filter_words(&self, f: usize) -> &[u64] {
        let wpf = self.words_per_filter();
        &self.words[f * wpf..(f + 1) * wpf]
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// `true` when bit `i` of filter `f` encodes `+1`.
    #[inline]
    pub fn is_positive(&self, f: usize, i: usize) -> bool {
        self.words[f * self.words_per_filter() + i / 64] >> (i % 64) & 1 == 1
    }

    pub fn signs(&self, f: usize) -> Vec<i8> {
        (0..self.bits_per_filter())
            .map(|i| if self.is_positive(f, i) { 1 } else { -1 })
            .collect()
    }

    /// Filters whose scale is zero; they contribute nothing to the output.
    pub fn zero_filters(&self) -> Vec<usize> {
        (0..self.num_filters())
            .filter(|&f| self.scales[f] == 0.0)
            .collect()
    }

    /// Dense `W̃ = a·B`.
    pub fn expand<T: Real>(&self) -> Tensor<T> {
        let n = self.bits_per_filter();
        let mut data = Vec::with_capacity(self.num_filters() * n);
        for f in 0..self.num_filters() {
            let a = T::from_f32(self.scales[f]);
            data.extend((0..n).map(|i| if self.is_positive(f, i) { a } else { -a }));
        }
        Tensor::from_parts(self.shape.to_vec(), data)
    }
}

pub(crate) fn last_word_mask(n: usize) -> u64 {
    match n % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sign_sends_zero_to_plus_one() {
        let b = sign_binarize(&t(&[0.3, -0.1, 0.0])).unwrap();
        assert_eq!(b.data(), [1.0, -1.0, 1.0]);
        let neg = sign_binarize(&t(&[-3.0, -1e-9, -0.5])).unwrap();
        assert!(neg.data().iter().all(|&v| v == -1.0));
        assert_eq!(sign_binarize(&b).unwrap(), b);
    }

    #[test]
    fn nan_is_rejected() {
        let w = Tensor::from_parts(vec![2], vec![0.0f32, f32::NAN]);
        assert!(matches!(
            sign_binarize(&w),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(stochastic_binarize(&w, 1).is_err());
    }

    #[test]
    fn stochastic_saturates_and_is_reproducible() {
        let hi = stochastic_binarize(&t(&[1.0, 1.5, 40.0]), 3).unwrap();
        assert!(hi.data().iter().all(|&v| v == 1.0));
        let lo = stochastic_binarize(&t(&[-1.0, -1.5, -40.0]), 3).unwrap();
        assert!(lo.data().iter().all(|&v| v == -1.0));

        let w = t(&[0.1, -0.3, 0.7, 0.0, -0.9]);
        assert_eq!(
            stochastic_binarize(&w, 42).unwrap(),
            stochastic_binarize(&w, 42).unwrap()
        );
    }

    #[test]
    fn stochastic_frequency_at_zero_is_one_half() {
        let w = Tensor::<f64>::zeros(&[10_000]);
        let b = stochastic_binarize(&w, 2024).unwrap();
        let frac = b.data().iter().filter(|&&v| v > 0.0).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn optimal_scale_examples() {
        assert_eq!(optimal_scale(&[0.5, -0.5, 0.5, -0.5]).unwrap(), 0.5);
        assert_eq!(optimal_scale(&[0.0f32; 5]).unwrap(), 0.0);
        assert!(matches!(
            optimal_scale::<f32>(&[]),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn binarize_filter_examples() {
        let fb = binarize_filter(&[2.0, -2.0]).unwrap();
        assert_eq!(fb.signs, [1.0, -1.0]);
        assert_eq!(fb.scale, 2.0);
        assert_eq!(fb.reconstruct(), [2.0, -2.0]);
        assert_eq!(objective_j(&[2.0, -2.0], &fb.signs, fb.scale).unwrap(), 0.0);

        let fb = binarize_filter(&[1.0f64, 0.0, -3.0]).unwrap();
        assert_eq!(fb.signs, [1.0, 1.0, -1.0]);
        assert!((fb.scale - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective_j(&[1.0, -1.0], &[1.0, 1.0], 1.0).unwrap(), 2.0);
        assert!(matches!(
            objective_j(&[1.0, -1.0], &[1.0, 0.5], 1.0),
            Err(Error::InvalidSign { index: 1, .. })
        ));
        assert!(objective_j(&[1.0], &[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn brute_force_small_cases() {
        let o = brute_force_optimum(&[-0.7]).unwrap();
        assert_eq!(o.signs, [-1.0]);
        assert!((o.scale - 0.7).abs() < 1e-15);
        assert!(o.objective < 1e-15);

        let o = brute_force_optimum(&[3.0, 1.0]).unwrap();
        assert_eq!(o.signs, [1.0, 1.0]);
        assert_eq!(o.scale, 2.0);
        assert!((o.objective - 2f64.sqrt()).abs() < 1e-15);

        assert!(matches!(
            brute_force_optimum(&[0.0f32; 17]),
            Err(Error::OracleTooLarge { n: 17, .. })
        ));
    }

    #[test]
    fn bank_packs_lsb_first_with_zero_padding() {
        let w = t(&[1.0, -1.0, 2.0, -0.5, 0.0, -3.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0])
            .reshape(&[2, 1, 2, 3])
            .unwrap();
        let bank = BinaryFilterBank::from_weights(&w).unwrap();
        assert_eq!(bank.words_per_filter(), 1);
        assert_eq!(bank.filter_words(0), [0b010101]);
        assert_eq!(bank.filter_words(1), [0b111011]);
        assert_eq!(bank.scales(), [1.25, 1.0]);
        assert!(BinaryFilterBank::from_packed([1, 1, 1, 3], vec![0b1000], vec![1.0]).is_err());
        assert!(BinaryFilterBank::from_packed([1, 1, 1, 3], vec![0b101], vec![-1.0]).is_err());
    }

    #[test]
    fn expand_then_rebinarize_is_a_fixpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..3 * 2 * 5 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::from_vec(&[3, 2, 5, 7], data).unwrap();
        let bank = BinaryFilterBank::from_weights(&w).unwrap();
        let dense: Tensor<f32> = bank.expand();
        for f in 0..3 {
            let a = bank.scales()[f];
            assert!(dense.data()[f * 70..(f + 1) * 70].iter().all(|v| v.abs() == a));
        }
        assert_eq!(BinaryFilterBank::from_weights(&dense).unwrap(), bank);
        let (wt, scales) = binarize_dense(&w).unwrap();
        assert_eq!(wt, dense);
        assert_eq!(scales, bank.scales());
    }

    #[test]
    fn all_zero_filter_is_flagged() {
        let w = Tensor::<f32>::zeros(&[2, 1, 1, 4]);
        let bank = BinaryFilterBank::from_weights(&w).unwrap();
        assert_eq!(bank.zero_filters(), [0, 1]);
        assert_eq!(bank.signs(0), [1, 1, 1, 1]);
        assert!(bank.expand::<f32>().data().iter().all(|&v| v == 0.0));
    }
}
