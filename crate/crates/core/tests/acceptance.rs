//! Acceptance gate: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bwn::binarize::{binarize_filter, BinaryFilterBank};
use bwn::metrics::{compute_eer, compute_min_dcf};
use bwn::model_io::{
    load_model, pack_weights, resnet34_scale_layer_set, save_model, size_report, unpack_weights, ModelEncoding,
};
use bwn::nn::{binary_conv2d_forward_counted, build_micro_resnet, Activation, Params, SlotKind, Weights};
use bwn::tensor::Tensor;
use bwn::train::{
    gradient_check, lr_schedule, sgd_momentum_step, ste_gradient, LabeledSet, TrainConfig, TrainState,
};
use bwn::verify::{random_model, run_scope, Scope};

type Outcome = (bool, String);

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------------------
// 1. binarization optimality

/// Exhaustive minimum of `‖W − aB‖` over sign patterns with `a = WᵀB/n`.
fn brute_min(w: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = w.len();
    let mut best = (f64::INFINITY, 0.0, vec![]);
    for mask in 0u32..1 << n {
        let b: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let a = w.iter().zip(&b).map(|(x, s)| x * s).sum::<f64>() / n as f64;
        if a < 0.0 {
            continue;
        }
        let j = w.iter().zip(&b).map(|(x, s)| (x - a * s).powi(2)).sum::<f64>().sqrt();
        if j < best.0 {
            best = (j, a, b);
        }
    }
    best
}

fn binarization_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ok = 0;
    let (mut dj_max, mut da_max) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(4..=12);
        let w: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { normal(&mut rng) })
            .collect();
        let fb = binarize_filter(&w).unwrap();
        let j = w
            .iter()
            .zip(&fb.signs)
            .map(|(x, s)| (x - fb.scale * s).powi(2))
            .sum::<f64>()
            .sqrt();
        let (bj, ba, bb) = brute_min(&w);
        let (dj, da) = ((j - bj).abs(), (fb.scale - ba).abs());
        dj_max = dj_max.max(dj);
        da_max = da_max.max(da);
        let signs = w.iter().zip(fb.signs.iter().zip(&bb)).all(|(&x, (s, b))| x == 0.0 || s == b);
        ok += (dj <= 1e-6 && da <= 1e-6 && signs) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    (
        ok == 1000 && secs < 30.0,
        format!("{ok}/1000 filters optimal, max |dJ| {dj_max:.1e}, max |da| {da_max:.1e}, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------------------
// 2. multiplication-free convolution

/// Direct-loop cross-correlation in f64 with zero padding.
fn reference_conv(x: &Tensor<f32>, w: &[f64], wshape: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, _, kh, kw] = wshape;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * f * oh * ow];
    for n in 0..b {
        for o in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * c + ch) * h + iy as usize) * wd + ix as usize] as f64;
                                acc += xv * w[((o * c + ch) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * f + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn multiplication_free_conv() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst, mut inner) = (0.0f64, 0u64);
    for _ in 0..100 {
        let k = rng.random_range(1..=3);
        let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
        let (b, c, f) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=6));
        let (h, w) = (rng.random_range(k..=10), rng.random_range(k..=10));
        let x = Tensor::from_vec(&[b, c, h, w], (0..b * c * h * w).map(|_| normal(&mut rng) as f32).collect())
            .unwrap();
        let weights =
            Tensor::from_vec(&[f, c, k, k], (0..f * c * k * k).map(|_| normal(&mut rng) as f32).collect()).unwrap();
        let bank = BinaryFilterBank::from_weights(&weights).unwrap();
        let n = c * k * k;
        let expanded: Vec<f64> = (0..f)
            .flat_map(|o| {
                let a = bank.scales()[o] as f64;
                bank.signs(o).into_iter().map(move |s| a * s as f64)
            })
            .collect();
        assert_eq!(expanded.len(), f * n);
        let r = reference_conv(&x, &expanded, [f, c, k, k], stride, pad);
        let (out, ops) = binary_conv2d_forward_counted(&x, &bank, stride, pad).unwrap();
        let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = out.data().iter().zip(&r).fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b).abs()));
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
        inner += ops.inner_multiplies;
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-4 && inner == 0 && secs < 30.0,
        format!("100 pairs, max relative deviation {worst:.2e}, inner multiplies {inner}, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------------------
// 3. straight-through estimator and backward pass

fn ste_and_backward() -> Outcome {
    let start = Instant::now();
    let r = [-2.0, -1.0, -0.25, 0.0, 0.75, 1.0, 1.0 + 1e-9];
    let g = ste_gradient(
        &Tensor::from_vec(&[7], vec![3.0f64; 7]).unwrap(),
        &Tensor::from_vec(&[7], r.to_vec()).unwrap(),
        1.0,
    )
    .unwrap();
    let indicator_ok = g.data() == [0.0, 3.0, 3.0, 3.0, 3.0, 3.0, 0.0];

    let mut worst = 0.0f64;
    let mut sampled = 0;
    for (act, seed) in [(Activation::Relu, 31), (Activation::Prelu, 32)] {
        let spec = build_micro_resnet([1, 8, 8], 1, &[6, 8], 8, 3, act).unwrap();
        let params = Params::init(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(&[4, 1, 8, 8], (0..256).map(|_| normal(&mut rng) as f32).collect()).unwrap();
        let data = LabeledSet::new(x, vec![0, 1, 2, 1]).unwrap();
        let samples = gradient_check(&spec, &params, &data, 200, 1e-6, seed).unwrap();
        sampled = if sampled == 0 { samples.len() } else { sampled.min(samples.len()) };
        worst = samples.iter().map(|s| s.relative_error(1e-6)).fold(worst, f64::max);
    }
    let secs = start.elapsed().as_secs_f64();
    (
        indicator_ok && sampled >= 200 && worst <= 1e-3 && secs < 120.0,
        format!(
            "clip indicator exact: {indicator_ok}; {sampled} parameters per activation, max relative FD deviation {worst:.2e}, {secs:.2} s"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. end-to-end training through the CLI

fn read_metrics(dir: &Path) -> std::collections::BTreeMap<String, f64> {
    fs::read_to_string(dir.join("metrics.log"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| !k.contains(' '))
        .filter_map(|(k, v)| v.parse().ok().map(|v| (k.to_string(), v)))
        .collect()
}

fn bwn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bwn")).args(args).output().unwrap()
}

fn train_quickstart(activation: &str, out: &Path) -> (bool, f64, std::collections::BTreeMap<String, f64>) {
    let text = fs::read_to_string(repo_root().join("configs/quickstart.cfg")).unwrap();
    let text = text.replace("activation = relu", &format!("activation = {activation}"));
    let cfg = out.with_extension("cfg");
    fs::write(&cfg, text).unwrap();
    let start = Instant::now();
    let o = bwn(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let secs = start.elapsed().as_secs_f64();
    let ok = o.status.success();
    (ok, secs, if ok { read_metrics(out) } else { Default::default() })
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (ok, secs, m) = train_quickstart("relu", &dir.path().join("relu"));
    let (acc, bacc, eer, dcf) = (m["train_accuracy"], m["binary_train_accuracy"], m["eer"], m["min_dcf"]);
    let (pok, psecs, pm) = train_quickstart("prelu", &dir.path().join("prelu"));
    let prelu = if pok {
        format!(
            "prelu run ok in {psecs:.0} s: train accuracy {:.3}, EER {:.2}%, minDCF {:.3} ({} than relu)",
            pm["train_accuracy"],
            100.0 * pm["eer"],
            pm["min_dcf"],
            if pm["eer"] > eer { "worse" } else { "not worse" }
        )
    } else {
        "prelu run failed".into()
    };
    (
        ok && pok && acc > 0.9 && eer < 0.15 && secs < 600.0,
        format!(
            "relu: train accuracy {acc:.3} (binary {bacc:.3}), held-out EER {:.2}%, minDCF {dcf:.3}, {secs:.0} s; {prelu}",
            100.0 * eer
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. storage

fn storage() -> Outcome {
    let report = size_report(&resnet34_scale_layer_set(8).unwrap());
    let sign_ok = report.sign_bit_ratio() == 32.0;
    let file_ok = report.file_ratio() >= 30.0;

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let dir = tempfile::tempdir().unwrap();
    let mut exact = 0;
    for m in 0..100 {
        let (spec, params) = random_model(&mut rng).unwrap();
        let mut ok = true;
        for (i, slot) in spec.slots().iter().enumerate() {
            if slot.kind == SlotKind::BinaryConv {
                let bank = BinaryFilterBank::from_weights(params.dense(i).unwrap()).unwrap();
                let words =
                    unpack_weights(&pack_weights(&bank), bank.bits_per_filter(), bank.num_filters(), true).unwrap();
                ok &= words == bank.words();
            }
        }
        for encoding in [ModelEncoding::Checkpoint, ModelEncoding::Packed] {
            let path = dir.path().join(format!("{m}.bwn"));
            save_model(&path, &spec, &params, encoding).unwrap();
            let (spec2, loaded) = load_model(&path).unwrap();
            ok &= spec2 == spec;
            for i in 0..spec.slots().len() {
                let orig = params.dense(i).unwrap();
                ok &= match loaded.get(i) {
                    Weights::Dense(d) => d.data().iter().zip(orig.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                    Weights::Packed(bank) => *bank == BinaryFilterBank::from_weights(orig).unwrap(),
                };
            }
        }
        exact += ok as usize;
    }
    (
        sign_ok && file_ok && exact == 100,
        format!(
            "{} binarizable parameters, sign-bit ratio {}x, whole-file ratio {:.3}x; {exact}/100 random models round-trip bit-exactly",
            report.binarized_params,
            report.sign_bit_ratio(),
            report.file_ratio()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. metrics

fn rates(t: &[f64], n: &[f64], th: f64) -> (f64, f64) {
    (
        t.iter().filter(|&&s| s < th).count() as f64 / t.len() as f64,
        n.iter().filter(|&&s| s >= th).count() as f64 / n.len() as f64,
    )
}

/// Every threshold from −∞ through each score to +∞; linear interpolation
/// across the sign change of `P_miss − P_fa`.
fn oracle_eer(t: &[f64], n: &[f64]) -> f64 {
    let mut ths: Vec<f64> = t.iter().chain(n).copied().collect();
    ths.push(f64::NEG_INFINITY);
    ths.push(f64::INFINITY);
    ths.sort_by(f64::total_cmp);
    ths.dedup();
    let pts: Vec<(f64, f64)> = ths.iter().map(|&th| rates(t, n, th)).collect();
    let k = pts.iter().position(|(m, f)| m >= f).unwrap();
    let (m1, f1) = pts[k];
    if m1 == f1 {
        return m1;
    }
    let (m0, f0) = pts[k - 1];
    let lam = (f0 - m0) / ((f0 - m0) + (m1 - f1));
    m0 + lam * (m1 - m0)
}

fn oracle_dcf(t: &[f64], n: &[f64], p: f64, cm: f64, cf: f64) -> f64 {
    let mut s: Vec<f64> = t.iter().chain(n).copied().collect();
    s.sort_by(f64::total_cmp);
    let mut ths = vec![s[0] - 1.0, s[s.len() - 1] + 1.0];
    ths.extend(s.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let norm = (p * cm).min((1.0 - p) * cf);
    ths.iter()
        .map(|&th| {
            let (m, f) = rates(t, n, th);
            (p * cm * m + (1.0 - p) * cf * f) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

fn score_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let quantize = rng.random_bool(0.5);
    let mu = rng.random_range(-1.0..3.0);
    let draw = |m: f64, rng: &mut ChaCha8Rng| {
        let v = m + normal(rng);
        if quantize { (v * 4.0).round() / 4.0 } else { v }
    };
    let nt = rng.random_range(1..=50);
    let nn = rng.random_range(1..=50);
    ((0..nt).map(|_| draw(mu, rng)).collect(), (0..nn).map(|_| draw(0.0, rng)).collect())
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut de, mut dd) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let (t, n) = score_set(&mut rng);
        let (p, cm, cf) = if i % 2 == 0 { (0.01, 1.0, 1.0) } else { (0.05, 10.0, 1.0) };
        de = de.max((compute_eer(&t, &n).unwrap().0 - oracle_eer(&t, &n)).abs());
        dd = dd.max((compute_min_dcf(&t, &n, p, cm, cf).unwrap().0 - oracle_dcf(&t, &n, p, cm, cf)).abs());
    }
    let mut invariant = 0;
    for _ in 0..100 {
        let (t, n) = score_set(&mut rng);
        let f = |v: &f64| (v * 0.7).tanh() * 5.0 + 2.0;
        let (ft, fnn): (Vec<f64>, Vec<f64>) = (t.iter().map(f).collect(), n.iter().map(f).collect());
        let same_eer = compute_eer(&t, &n).unwrap().0 == compute_eer(&ft, &fnn).unwrap().0;
        let same_dcf =
            compute_min_dcf(&t, &n, 0.01, 1.0, 1.0).unwrap().0 == compute_min_dcf(&ft, &fnn, 0.01, 1.0, 1.0).unwrap().0;
        invariant += (same_eer && same_dcf) as usize;
    }
    (
        de <= 1e-9 && dd <= 1e-9 && invariant == 100,
        format!("1000 score sets: max |dEER| {de:.1e}, max |dminDCF| {dd:.1e}; monotone invariance {invariant}/100"),
    )
}

// ---------------------------------------------------------------------------
// 7. determinism

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(
        &cfg,
        "depth_blocks = 1\nchannels = 4,8\nembedding_dim = 16\nepochs = 3\nbatch_size = 8\n\
         num_speakers = 4\nutterances_per_speaker = 10\nfeature_height = 12\nfeature_width = 12\n",
    )
    .unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = bwn(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push((
            fs::read(out.join("model.bwn")).unwrap(),
            fs::read(out.join("checkpoint.bwn")).unwrap(),
            fs::read(out.join("metrics.log")).unwrap(),
        ));
    }
    let same = files[0] == files[1];
    (
        same,
        format!(
            "two `bwn train` runs: packed model ({} B), checkpoint and metrics log {}",
            files[0].0.len(),
            if same { "byte-identical" } else { "differ" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. schedule and optimizer

fn schedule() -> Outcome {
    let exact = lr_schedule(0, 0.01) == 0.01 && lr_schedule(10, 0.01) == 0.001;
    let spec = build_micro_resnet([1, 4, 4], 1, &[2], 2, 2, Activation::Relu).unwrap();
    let params = Params::init(&spec, 8);
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(&spec, params.clone(), &cfg, 0).unwrap();
    state.learning_rate = 0.01;
    let g1: Vec<Tensor<f32>> = spec.slots().iter().map(|s| Tensor::full(&s.shape, 0.3f32)).collect();
    let g2: Vec<Tensor<f32>> = spec.slots().iter().map(|s| Tensor::full(&s.shape, -1.1f32)).collect();
    sgd_momentum_step(&mut state, &g1, 0.95).unwrap();
    sgd_momentum_step(&mut state, &g2, 0.95).unwrap();
    let mut worst = 0.0f32;
    for i in 0..spec.slots().len() {
        for (&w0, &w2) in params.dense(i).unwrap().data().iter().zip(state.params.dense(i).unwrap().data()) {
            let v1 = 0.3f32;
            let w1 = w0 - 0.01 * v1;
            let v2 = 0.95 * v1 - 1.1;
            let want = w1 - 0.01 * v2;
            worst = worst.max((w2 - want).abs());
        }
    }
    (
        exact && worst <= 1e-7,
        format!(
            "lr(0) = {}, lr(10) = {}; two-step momentum recurrence max deviation {worst:.1e}",
            lr_schedule(0, 0.01),
            lr_schedule(10, 0.01)
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("binarization-optimality", binarization_optimality),
        ("multiplication-free-conv", multiplication_free_conv),
        ("ste-backward", ste_and_backward),
        ("end-to-end-training", end_to_end),
        ("storage", storage),
        ("metrics", metrics),
        ("determinism", determinism),
        ("schedule-optimizer", schedule),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        failed += !pass as usize;
        println!("criterion {} {name}: {} ({detail})", i + 1, if pass { "PASS" } else { "FAIL" });
    }

    let checks = run_scope(Scope::All, |_| {}).unwrap();
    let bad: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    println!(
        "verify all: {} ({}/{} oracle checks)",
        if bad.is_empty() { "PASS" } else { "FAIL" },
        checks.len() - bad.len(),
        checks.len()
    );
    for c in &bad {
        println!("  {c}");
    }
    failed += !bad.is_empty() as usize;

    if failed > 0 {
        println!("acceptance: {failed} failing");
        std::process::exit(1);
    }
    println!("acceptance: all criteria pass");
}
