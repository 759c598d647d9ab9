//! Oracle suites behind `bwn verify`. Every suite uses fixed seeds and
//! reports one [`Check`] per property.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binarize::{binarize_filter, brute_force_optimum, objective_j, BinaryFilterBank};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, compute_min_dcf, cosine_score, DEFAULT_C_FA, DEFAULT_C_MISS, DEFAULT_P_TARGET};
use crate::model_io::{
    decode_model, encode_model, load_model, pack_weights, resnet34_scale_layer_set, save_model, size_report,
    unpack_weights, ModelEncoding,
};
use crate::nn::{
    binary_conv2d_forward_counted, build_micro_resnet, forward_network, Activation, Mode, NetworkSpec, Params,
    SlotKind, Weights,
};
use crate::run::run_train;
use crate::synth::{generate_corpus, speaker_prototype, SyntheticSpeakerConfig, Utterance};
use crate::tensor::{conv2d_reference, Tensor};
use crate::train::{
    gradient_check, lr_schedule, sgd_momentum_step, shadow_gradient, ste_gradient, GradientRule, LabeledSet,
    TrainConfig, TrainState,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: Scope,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}/{}: {}", self.suite, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    BinarizeOracle,
    ConvEquivalence,
    Gradcheck,
    MetricsOracle,
    Storage,
    Schedule,
    Data,
    Determinism,
    All,
}

impl Scope {
    pub const SUITES: [Scope; 8] = [
        Scope::BinarizeOracle,
        Scope::ConvEquivalence,
        Scope::Gradcheck,
        Scope::MetricsOracle,
        Scope::Storage,
        Scope::Schedule,
        Scope::Data,
        Scope::Determinism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::BinarizeOracle => "binarize-oracle",
            Scope::ConvEquivalence => "conv-equivalence",
            Scope::Gradcheck => "gradcheck",
            Scope::MetricsOracle => "metrics-oracle",
            Scope::Storage => "storage",
            Scope::Schedule => "schedule",
            Scope::Data => "data",
            Scope::Determinism => "determinism",
            Scope::All => "all",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Scope::SUITES
            .into_iter()
            .chain([Scope::All])
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Scope::SUITES.iter().map(|s| s.name()).collect();
                format!("unknown scope `{s}`; expected one of {}, all", names.join(", "))
            })
    }
}

/// Runs one suite, or all of them, calling `report` as each check finishes.
pub fn run_scope(scope: Scope, mut report: impl FnMut(&Check)) -> Result<Vec<Check>> {
    let suites: Vec<Scope> = match scope {
        Scope::All => Scope::SUITES.to_vec(),
        s => vec![s],
    };
    let mut all = Vec::new();
    for s in suites {
        let checks = match s {
            Scope::BinarizeOracle => binarize_suite(1_000)?,
            Scope::ConvEquivalence => conv_suite(100)?,
            Scope::Gradcheck => gradcheck_suite()?,
            Scope::MetricsOracle => metrics_suite(1_000, 100)?,
            Scope::Storage => storage_suite(100)?,
            Scope::Schedule => schedule_suite()?,
            Scope::Data => data_suite()?,
            Scope::Determinism => determinism_suite()?,
            Scope::All => unreachable!(),
        };
        for c in &checks {
            report(c);
        }
        all.extend(checks);
    }
    Ok(all)
}

fn check(suite: Scope, name: &str, passed: bool, detail: String) -> Check {
    Check {
        suite,
        name: name.to_string(),
        passed,
        detail,
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------------------
// binarization

/// Closed-form binarization against exhaustive search over sign patterns.
pub fn binarize_suite(filters: usize) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1A5);
    let (mut matched, mut worst_j, mut worst_a) = (0, 0.0f64, 0.0f64);
    let mut first_failure = None;
    for i in 0..filters {
        let n = rng.random_range(4..=12);
        let w: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { normal(&mut rng) })
            .collect();
        let closed = binarize_filter(&w)?;
        let oracle = brute_force_optimum(&w)?;
        let j = objective_j(&w, &closed.signs, closed.scale)?;
        let dj = (j - oracle.objective).abs();
        let da = (closed.scale - oracle.scale).abs();
        let signs_ok = w
            .iter()
            .zip(closed.signs.iter().zip(&oracle.signs))
            .all(|(&wi, (s, o))| wi == 0.0 || s == o);
        worst_j = worst_j.max(dj);
        worst_a = worst_a.max(da);
        if dj <= 1e-6 && da <= 1e-6 && signs_ok {
            matched += 1;
        } else if first_failure.is_none() {
            first_failure = Some(i);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let zero = binarize_filter(&[0.0f64, -0.0, 2.0])?;
    Ok(vec![
        check(
            Scope::BinarizeOracle,
            "closed-form-optimal",
            matched == filters,
            format!(
                "{matched}/{filters} filters match closed form (max |ΔJ| {worst_j:.2e}, max |Δa| {worst_a:.2e}, {secs:.2} s){}",
                first_failure.map(|i| format!(", first mismatch at filter {i}")).unwrap_or_default()
            ),
        ),
        check(
            Scope::BinarizeOracle,
            "sign-of-zero",
            zero.signs == [1.0, 1.0, 1.0],
            format!("Sign(0) = {:?}", zero.signs[0]),
        ),
    ])
}

// ---------------------------------------------------------------------------
// convolution

/// Sign-accumulating convolution against the reference convolution run on
/// the expanded weights `a·B`.
pub fn conv_suite(pairs: usize) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0417);
    let mut worst = 0.0f64;
    let mut inner = 0u64;
    let mut scale_ok = true;
    for _ in 0..pairs {
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=1);
        let (batch, c, f) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=6));
        let (h, w) = (rng.random_range(k..=9), rng.random_range(k..=9));
        let input = Tensor::from_vec(
            &[batch, c, h, w],
            (0..batch * c * h * w).map(|_| normal(&mut rng) as f32).collect(),
        )?;
        let weights = Tensor::from_vec(
            &[f, c, k, k],
            (0..f * c * k * k)
                .map(|_| if rng.random_bool(0.05) { 0.0 } else { normal(&mut rng) as f32 })
                .collect(),
        )?;
        let bank = BinaryFilterBank::from_weights(&weights)?;
        let reference = conv2d_reference(&input, &bank.expand::<f32>(), stride, padding)?;
        let (out, ops) = binary_conv2d_forward_counted(&input, &bank, stride, padding)?;
        worst = worst.max(relative_deviation(out.data(), reference.data()));
        inner += ops.inner_multiplies;
        scale_ok &= ops.scale_multiplies == out.numel() as u64;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(vec![
        check(
            Scope::ConvEquivalence,
            "matches-reference",
            worst <= 1e-4,
            format!("{pairs} pairs, max relative deviation {worst:.3e} (limit 1e-4, {secs:.2} s)"),
        ),
        check(
            Scope::ConvEquivalence,
            "no-inner-multiplies",
            inner == 0 && scale_ok,
            format!("inner-loop multiplies {inner}; one scale multiply per output: {scale_ok}"),
        ),
    ])
}

/// `max|x − r| / max|r|` over a tensor.
pub fn relative_deviation(x: &[f32], reference: &[f32]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, &r| m.max((r as f64).abs()));
    let diff = x
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------------------
// gradients

pub fn gradcheck_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let pre = [-1.5, -1.0, -0.999, -0.5, 0.0, 0.5, 1.0, 1.001, 3.0];
    let expected = [0.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 0.0, 0.0];
    let g = ste_gradient(
        &Tensor::full(&[pre.len()], 2.0f64),
        &Tensor::from_vec(&[pre.len()], pre.to_vec())?,
        1.0,
    )?;
    checks.push(check(
        Scope::Gradcheck,
        "ste-clip-indicator",
        g.data() == expected,
        format!("preimage {pre:?} -> {:?}", g.data()),
    ));

    // one filter W = [0.5, −2, 1], a = 7/6, n = 3, unit upstream gradient
    let shadow = Tensor::from_vec(&[1, 3, 1, 1], vec![0.5f64, -2.0, 1.0])?;
    let a = 3.5 / 3.0;
    let ones = Tensor::full(&[1, 3, 1, 1], 1.0f64);
    let scaled = shadow_gradient(&ones, &shadow, &[a], 1.0, GradientRule::ScaledSte)?;
    let want = [1.0 / 3.0 + a, 1.0 / 3.0, 1.0 / 3.0 + a];
    let scaled_ok = scaled.data().iter().zip(want).all(|(x, y)| (x - y).abs() < 1e-12);
    let pass = shadow_gradient(&ones, &shadow, &[a], 1.0, GradientRule::PassThrough)?;
    checks.push(check(
        Scope::Gradcheck,
        "shadow-gradient-rules",
        scaled_ok && pass.data() == [1.0, 0.0, 1.0],
        format!("scaled_ste {:?}, pass_through {:?}", scaled.data(), pass.data()),
    ));

    for act in [Activation::Relu, Activation::Prelu] {
        let start = Instant::now();
        let spec = build_micro_resnet([1, 8, 8], 1, &[6, 8], 8, 3, act)?;
        let params = Params::init(&spec, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
        let x = Tensor::from_vec(&[3, 1, 8, 8], (0..192).map(|_| normal(&mut rng) as f32).collect())?;
        let data = LabeledSet::new(x, vec![0, 2, 1])?;
        let samples = gradient_check(&spec, &params, &data, 200, 1e-6, 5)?;
        let worst = samples.iter().map(|s| s.relative_error(1e-6)).fold(0.0, f64::max);
        checks.push(check(
            Scope::Gradcheck,
            &format!("finite-differences-{act}"),
            samples.len() >= 200 && worst <= 1e-3,
            format!(
                "{} sampled parameters, max relative FD deviation {worst:.3e} (limit 1e-3, {:.2} s)",
                samples.len(),
                start.elapsed().as_secs_f64()
            ),
        ));
    }
    Ok(checks)
}

// ---------------------------------------------------------------------------
// metrics

/// Rates at a threshold by direct counting: `(P_miss, P_fa)`.
fn rates_at(targets: &[f64], nontargets: &[f64], threshold: f64) -> (f64, f64) {
    let misses = targets.iter().filter(|&&s| s < threshold).count();
    let fas = nontargets.iter().filter(|&&s| s >= threshold).count();
    (misses as f64 / targets.len() as f64, fas as f64 / nontargets.len() as f64)
}

fn candidate_thresholds(targets: &[f64], nontargets: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out = vec![f64::NEG_INFINITY];
    out.extend(all);
    out.push(f64::INFINITY);
    out
}

/// Threshold-sweep EER: walk every candidate threshold, counting rates
/// directly, and interpolate linearly where `P_miss − P_fa` changes sign.
pub fn sweep_eer_oracle(targets: &[f64], nontargets: &[f64]) -> f64 {
    let rates: Vec<(f64, f64)> = candidate_thresholds(targets, nontargets)
        .into_iter()
        .map(|t| rates_at(targets, nontargets, t))
        .collect();
    for k in 0..rates.len() {
        let (m, f) = rates[k];
        if m >= f {
            if m == f || k == 0 {
                return m;
            }
            let (m0, f0) = rates[k - 1];
            let lambda = (f0 - m0) / ((f0 - m0) + (m - f));
            return m0 + lambda * (m - m0);
        }
    }
    unreachable!("rejecting everything gives P_miss = 1 ≥ P_fa = 0")
}

/// Normalized minimum detection cost over thresholds placed between
/// consecutive distinct scores and beyond both ends.
pub fn sweep_min_dcf_oracle(targets: &[f64], nontargets: &[f64], p_target: f64, c_miss: f64, c_fa: f64) -> f64 {
    let mut all: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut thresholds = vec![all[0] - 1.0, all[all.len() - 1] + 1.0];
    thresholds.extend(all.windows(2).map(|p| 0.5 * (p[0] + p[1])));
    let norm = (p_target * c_miss).min((1.0 - p_target) * c_fa);
    thresholds
        .into_iter()
        .map(|t| {
            let (m, f) = rates_at(targets, nontargets, t);
            (p_target * c_miss * m + (1.0 - p_target) * c_fa * f) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

/// A random verification score set; about half the sets are quantized so
/// that ties occur within and across the two classes.
pub fn random_score_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nt = rng.random_range(1..=40);
    let nn = rng.random_range(1..=40);
    let shift = rng.random_range(-0.5..2.5);
    let step = if rng.random_bool(0.5) { Some(0.25) } else { None };
    let draw = |mu: f64, rng: &mut ChaCha8Rng| {
        let v = mu + normal(rng);
        step.map_or(v, |s| (v / s).round() * s)
    };
    let t = (0..nt).map(|_| draw(shift, rng)).collect();
    let n = (0..nn).map(|_| draw(0.0, rng)).collect();
    (t, n)
}

pub fn metrics_suite(sets: usize, transforms: usize) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xEE4);
    let (mut eer_worst, mut dcf_worst) = (0.0f64, 0.0f64);
    for i in 0..sets {
        let (t, n) = random_score_set(&mut rng);
        let (p, cm, cf) = if i % 2 == 0 {
            (DEFAULT_P_TARGET, DEFAULT_C_MISS, DEFAULT_C_FA)
        } else {
            (rng.random_range(0.001..0.5), rng.random_range(0.5..5.0), rng.random_range(0.5..5.0))
        };
        eer_worst = eer_worst.max((compute_eer(&t, &n)?.0 - sweep_eer_oracle(&t, &n)).abs());
        dcf_worst = dcf_worst.max((compute_min_dcf(&t, &n, p, cm, cf)?.0 - sweep_min_dcf_oracle(&t, &n, p, cm, cf)).abs());
    }
    let secs = start.elapsed().as_secs_f64();

    let (mut invariant, mut symmetric) = (0, 0);
    for _ in 0..transforms {
        let (t, n) = random_score_set(&mut rng);
        let f = |v: &f64| 3.0 * (0.5 * v).exp() + 1.0;
        let (tt, nt): (Vec<f64>, Vec<f64>) = (t.iter().map(f).collect(), n.iter().map(f).collect());
        let before = (compute_eer(&t, &n)?.0, compute_min_dcf(&t, &n, DEFAULT_P_TARGET, 1.0, 1.0)?.0);
        let after = (compute_eer(&tt, &nt)?.0, compute_min_dcf(&tt, &nt, DEFAULT_P_TARGET, 1.0, 1.0)?.0);
        if (before.0 - after.0).abs() <= 1e-12 && (before.1 - after.1).abs() <= 1e-12 {
            invariant += 1;
        }
        let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
        if (compute_eer(&neg(&n), &neg(&t))?.0 - before.0).abs() <= 1e-12 {
            symmetric += 1;
        }
    }

    let hand = compute_eer(&[0.8, 0.6, 0.4], &[0.7, 0.3, 0.1])?;
    Ok(vec![
        check(
            Scope::MetricsOracle,
            "eer-matches-sweep",
            eer_worst <= 1e-9,
            format!("{sets} random score sets, max |ΔEER| {eer_worst:.2e} (limit 1e-9, {secs:.2} s)"),
        ),
        check(
            Scope::MetricsOracle,
            "min-dcf-matches-sweep",
            dcf_worst <= 1e-9,
            format!("{sets} random score sets, max |ΔminDCF| {dcf_worst:.2e} (limit 1e-9)"),
        ),
        check(
            Scope::MetricsOracle,
            "monotone-invariance",
            invariant == transforms,
            format!("{invariant}/{transforms} sets unchanged under s -> 3·exp(s/2) + 1"),
        ),
        check(
            Scope::MetricsOracle,
            "swap-symmetry",
            symmetric == transforms,
            format!("{symmetric}/{transforms} sets unchanged by negating scores and swapping labels"),
        ),
        check(
            Scope::MetricsOracle,
            "hand-example",
            (hand.0 - 1.0 / 3.0).abs() < 1e-12 && hand.1 == 0.6,
            format!("targets [0.8,0.6,0.4] vs nontargets [0.7,0.3,0.1]: EER {:.6} at {}", hand.0, hand.1),
        ),
    ])
}

// ---------------------------------------------------------------------------
// storage

/// A small random network for round-trip tests.
pub fn random_model(rng: &mut ChaCha8Rng) -> Result<(NetworkSpec, Params<f32>)> {
    let stages = rng.random_range(1..=2);
    let channels: Vec<usize> = (0..stages).map(|_| rng.random_range(1..=6)).collect();
    let size = rng.random_range(4..=9);
    let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Prelu };
    let spec = build_micro_resnet(
        [1, size, size + rng.random_range(0..=2)],
        rng.random_range(1..=2),
        &channels,
        rng.random_range(2..=8),
        rng.random_range(2..=4),
        act,
    )?;
    let params = Params::init(&spec, rng.random());
    Ok((spec, params))
}

fn dense_bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Bit-exact comparison of a decoded model against the in-memory one. For a
/// packed model, binary slots are compared with binarizing in memory.
fn same_model(spec: &NetworkSpec, params: &Params<f32>, loaded: &Params<f32>) -> Result<bool> {
    for (i, slot) in spec.slots().iter().enumerate() {
        let ok = match loaded.get(i) {
            Weights::Dense(d) => dense_bits(d) == dense_bits(params.dense(i)?),
            Weights::Packed(bank) => {
                slot.kind == SlotKind::BinaryConv && *bank == BinaryFilterBank::from_weights(params.dense(i)?)?
            }
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn storage_suite(models: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    // The 8-wide head is the smallest that still forms a loadable model; a
    // 128-wide embedding head is reported alongside for comparison.
    let big = size_report(&resnet34_scale_layer_set(8)?);
    let wide = size_report(&resnet34_scale_layer_set(128)?);
    checks.push(check(
        Scope::Storage,
        "sign-bit-ratio",
        big.sign_bit_ratio() == 32.0,
        format!(
            "{} binarized parameters, sign-bit ratio {}x",
            big.binarized_params,
            big.sign_bit_ratio()
        ),
    ));
    checks.push(check(
        Scope::Storage,
        "whole-file-ratio",
        big.file_ratio() >= 30.0,
        format!(
            "float file {} B, packed file {} B, ratio {:.3}x (limit 30x); with a 128-wide float embedding head {:.3}x",
            big.float_file_bytes,
            big.packed_file_bytes,
            big.file_ratio(),
            wide.file_ratio()
        ),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(0x5707);
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let (mut pack_ok, mut ckpt_ok, mut packed_ok, mut forward_ok) = (0, 0, 0, 0);
    for m in 0..models {
        let (spec, params) = random_model(&mut rng)?;

        let mut all_pack = true;
        for (i, slot) in spec.slots().iter().enumerate() {
            if slot.kind == SlotKind::BinaryConv {
                let bank = BinaryFilterBank::from_weights(params.dense(i)?)?;
                let bytes = pack_weights(&bank);
                let words = unpack_weights(&bytes, bank.bits_per_filter(), bank.num_filters(), true)?;
                all_pack &= words == bank.words();
            }
        }
        pack_ok += all_pack as usize;

        let round_trip = |encoding: ModelEncoding| -> Result<(bool, Params<f32>)> {
            let bytes = encode_model(&spec, &params, encoding)?;
            let (spec2, loaded) = if m < 10 {
                let path = dir.path().join(format!("m{m}.bwn"));
                save_model(&path, &spec, &params, encoding)?;
                let from_disk = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                if from_disk != bytes {
                    return Ok((false, params.clone()));
                }
                load_model(&path)?
            } else {
                decode_model(&bytes)?.into_model()?
            };
            let again = encode_model(&spec2, &loaded, encoding)?;
            let same = spec2 == spec && same_model(&spec, &params, &loaded)?;
            Ok((same && (encoding == ModelEncoding::Packed || again == bytes), loaded))
        };
        ckpt_ok += round_trip(ModelEncoding::Checkpoint)?.0 as usize;
        let (ok, packed) = round_trip(ModelEncoding::Packed)?;
        packed_ok += ok as usize;

        let [c, h, w] = spec.input();
        let x = Tensor::from_vec(&[2, c, h, w], (0..2 * c * h * w).map(|_| normal(&mut rng) as f32).collect())?;
        let a = forward_network(&spec, &params, &x, Mode::Binary)?;
        let b = forward_network(&spec, &packed, &x, Mode::Binary)?;
        forward_ok += (dense_bits(&a.embedding) == dense_bits(&b.embedding)) as usize;
    }
    for (name, ok, what) in [
        ("pack-unpack", pack_ok, "sign words survive pack/unpack"),
        ("checkpoint-round-trip", ckpt_ok, "float32 checkpoints save/load bit-exactly"),
        ("packed-round-trip", packed_ok, "packed models save/load bit-exactly"),
        ("packed-forward", forward_ok, "packed binary-mode embeddings equal in-memory binarization"),
    ] {
        checks.push(check(Scope::Storage, name, ok == models, format!("{ok}/{models} random models: {what}")));
    }
    Ok(checks)
}

// ---------------------------------------------------------------------------
// schedule and optimizer

pub fn schedule_suite() -> Result<Vec<Check>> {
    let lr0 = lr_schedule(0, 0.01);
    let lr10 = lr_schedule(10, 0.01);
    let lr9 = lr_schedule(9, 0.01);

    let spec = build_micro_resnet([1, 4, 4], 1, &[2], 2, 2, Activation::Relu)?;
    let params = Params::init(&spec, 1);
    let cfg = TrainConfig {
        lr0: 0.1,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&spec, params.clone(), &cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5CED);
    let g1: Vec<Tensor<f32>> = spec
        .slots()
        .iter()
        .map(|s| Tensor::from_vec(&s.shape, (0..s.numel()).map(|_| normal(&mut rng) as f32).collect()))
        .collect::<Result<_>>()?;
    let g2: Vec<Tensor<f32>> = g1.iter().map(|g| g.map(|v| 0.5 - v)).collect();
    sgd_momentum_step(&mut state, &g1, 0.95)?;
    sgd_momentum_step(&mut state, &g2, 0.95)?;
    // v1 = g1, w1 = w0 − η v1, v2 = μ v1 + g2, w2 = w1 − η v2
    let (eta, mu) = (0.1f32, 0.95f32);
    let mut worst = 0.0f32;
    for i in 0..spec.slots().len() {
        let w0 = params.dense(i)?.data();
        let w2 = state.params.dense(i)?.data();
        for j in 0..w0.len() {
            let (a, b) = (g1[i].data()[j], g2[i].data()[j]);
            let w1 = w0[j] - eta * a;
            let expected = w1 - eta * (mu * a + b);
            worst = worst.max((w2[j] - expected).abs() / expected.abs().max(1.0));
        }
    }
    Ok(vec![
        check(
            Scope::Schedule,
            "lr-schedule",
            lr0 == 0.01 && lr9 == 0.01 && lr10 == 0.001,
            format!("lr(0) = {lr0}, lr(9) = {lr9}, lr(10) = {lr10}"),
        ),
        check(
            Scope::Schedule,
            "momentum-two-step",
            worst <= 4.0 * f32::EPSILON,
            format!("two SGD+momentum steps vs hand recurrence, max relative deviation {worst:.2e}"),
        ),
    ])
}

// ---------------------------------------------------------------------------
// synthetic data

/// Nearest-class-mean classifier on flattened features: fit on `train`,
/// return accuracy on `test`.
pub fn linear_probe_accuracy(train: &[Utterance], test: &[Utterance], num_speakers: usize) -> f64 {
    let dim = train[0].features.numel();
    let mut means = vec![vec![0.0f64; dim]; num_speakers];
    let mut counts = vec![0usize; num_speakers];
    for u in train {
        for (m, &v) in means[u.speaker].iter_mut().zip(u.features.data()) {
            *m += v as f64;
        }
        counts[u.speaker] += 1;
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|u| {
            let dist = |m: &Vec<f64>| -> f64 {
                m.iter()
                    .zip(u.features.data())
                    .map(|(a, &b)| (a - b as f64).powi(2))
                    .sum()
            };
            let best = (0..num_speakers)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .expect("at least two speakers");
            best == u.speaker
        })
        .count();
    correct as f64 / test.len() as f64
}

/// EER of a scorer that knows the speaker prototypes: each utterance is
/// described by its best circular-shift cosine similarity to every
/// prototype, and trials are scored by cosine between those descriptions.
pub fn prototype_oracle_eer(cfg: &SyntheticSpeakerConfig) -> Result<f64> {
    let corpus = generate_corpus(cfg)?;
    let (h, w) = (cfg.height, cfg.width);
    let protos: Vec<Vec<f64>> = (0..cfg.num_speakers).map(|s| speaker_prototype(cfg, s)).collect();
    let k = cfg.shift_range();
    let describe = |u: &Utterance| -> Vec<f32> {
        let x = u.features.data();
        let xn = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        protos
            .iter()
            .map(|p| {
                let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                (0..=2 * k)
                    .map(|s| {
                        let shift = (s + w - k % w) % w;
                        let mut dot = 0.0;
                        for y in 0..h {
                            for c in 0..w {
                                dot += x[y * w + c] as f64 * p[y * w + (c + w - shift) % w];
                            }
                        }
                        dot / (xn * pn)
                    })
                    .fold(f64::NEG_INFINITY, f64::max) as f32
            })
            .collect()
    };
    let desc: std::collections::BTreeMap<&str, Vec<f32>> =
        corpus.held_out.iter().map(|u| (u.id.as_str(), describe(u))).collect();
    let (mut t, mut n) = (Vec::new(), Vec::new());
    for trial in corpus.trials.trials() {
        let s = cosine_score(&desc[trial.enroll.as_str()], &desc[trial.test.as_str()])?;
        if trial.target { t.push(s) } else { n.push(s) }
    }
    Ok(compute_eer(&t, &n)?.0)
}

pub fn data_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut balanced = true;
    for (speakers, utts) in [(2, 2), (3, 5), (10, 20), (7, 11)] {
        let cfg = SyntheticSpeakerConfig {
            num_speakers: speakers,
            utterances_per_speaker: utts,
            height: 4,
            width: 4,
            ..SyntheticSpeakerConfig::default()
        };
        let (t, n) = generate_corpus(&cfg)?.trials.counts();
        balanced &= t.abs_diff(n) <= 1 && t > 0;
    }
    checks.push(check(
        Scope::Data,
        "label-balance",
        balanced,
        "target and nontarget counts within 1 for 4 corpus shapes".into(),
    ));

    let quick = RunConfig::default().data_config();
    let a = generate_corpus(&quick)?;
    let b = generate_corpus(&quick)?;
    let same = a.train.iter().chain(&a.held_out).zip(b.train.iter().chain(&b.held_out)).all(|(x, y)| {
        x.id == y.id && dense_bits(&x.features) == dense_bits(&y.features)
    }) && a.trials == b.trials;
    checks.push(check(Scope::Data, "deterministic", same, "same seed gives identical corpora".into()));

    let probe_cfg = SyntheticSpeakerConfig {
        num_speakers: 10,
        utterances_per_speaker: 20,
        sigma_within: 0.3,
        separation: 1.5,
        seed: 7,
        ..SyntheticSpeakerConfig::default()
    };
    let probe = generate_corpus(&probe_cfg)?;
    let acc = linear_probe_accuracy(&probe.train, &probe.held_out, 10);
    checks.push(check(
        Scope::Data,
        "linear-probe",
        acc > 0.9,
        format!("nearest-class-mean on flattened features, 10 speakers x 20 utterances: held-out accuracy {acc:.3}"),
    ));

    let mut eers = Vec::new();
    for separation in [0.03, 0.06, 0.12] {
        let cfg = SyntheticSpeakerConfig {
            separation,
            sigma_within: 1.0,
            utterances_per_speaker: 20,
            seed: 3,
            ..SyntheticSpeakerConfig::default()
        };
        eers.push(prototype_oracle_eer(&cfg)?);
    }
    checks.push(check(
        Scope::Data,
        "separability-dial",
        eers.windows(2).all(|p| p[1] < p[0]),
        format!("prototype-oracle EER at separation/sigma 0.03, 0.06, 0.12: {eers:.4?}"),
    ));
    Ok(checks)
}

// ---------------------------------------------------------------------------
// determinism

/// A configuration small enough to train in about a second.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.depth_blocks = 1;
    cfg.channels = vec![4];
    cfg.embedding_dim = 8;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.data.num_speakers = 3;
    cfg.data.utterances_per_speaker = 6;
    cfg.data.height = 8;
    cfg.data.width = 8;
    cfg
}

pub fn determinism_suite() -> Result<Vec<Check>> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = tiny_config();
        cfg.out_dir = dir.path().join(run);
        let out = run_train(&cfg, &mut std::io::sink())?;
        let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| Error::io(&p, e));
        outputs.push([
            read(out.paths.checkpoint())?,
            read(out.paths.model())?,
            read(out.paths.metrics())?,
        ]);
    }
    let same = outputs[0] == outputs[1];
    Ok(vec![check(
        Scope::Determinism,
        "repeat-training",
        same,
        format!(
            "two runs of one config: checkpoint, packed model, and metrics log {}",
            if same { "byte-identical" } else { "differ" }
        ),
    )])
}
