//! Verification scoring: cosine similarity, equal error rate, and minimum
//! detection cost.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::nn::{forward_network, Mode, NetworkSpec, Params};
use crate::synth::FeatureStore;
use crate::tensor::Tensor;

/// Default detection-cost parameters (NIST SRE convention).
pub const DEFAULT_P_TARGET: f64 = 0.01;
pub const DEFAULT_C_MISS: f64 = 1.0;
pub const DEFAULT_C_FA: f64 = 1.0;

pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_score", format!("{} vs {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// One operating point of the threshold sweep: accept when `score ≥ threshold`.
#[derive(Debug, Clone, Copy)]
struct OperatingPoint {
    threshold: f64,
    misses: usize,
    false_accepts: usize,
}

/// Operating points at `−∞`, every distinct score in ascending order, and `+∞`.
fn sweep(targets: &[f64], nontargets: &[f64]) -> Vec<OperatingPoint> {
    let mut t: Vec<f64> = targets.to_vec();
    let mut n: Vec<f64> = nontargets.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = t.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(OperatingPoint {
        threshold: f64::NEG_INFINITY,
        misses: 0,
        false_accepts: n.len(),
    });
    let (mut ti, mut ni) = (0, 0);
    for &th in &thresholds {
        while ti < t.len() && t[ti] < th {
            ti += 1;
        }
        while ni < n.len() && n[ni] < th {
            ni += 1;
        }
        points.push(OperatingPoint {
            threshold: th,
            misses: ti,
            false_accepts: n.len() - ni,
        });
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        misses: t.len(),
        false_accepts: 0,
    });
    points
}

fn check_scores(op: &'static str, targets: &[f64], nontargets: &[f64]) -> Result<()> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Empty { op });
    }
    if let Some(index) = targets.iter().chain(nontargets).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op, index });
    }
    Ok(())
}

/// Equal error rate and the threshold where it occurs. Between the two
/// adjacent operating points where `P_miss − P_fa` changes sign, both rates
/// and the threshold are interpolated linearly.
pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    check_scores("compute_eer", targets, nontargets)?;
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    let points = sweep(targets, nontargets);
    // sign of P_miss − P_fa without rounding: misses·|N| vs false_accepts·|T|
    let side = |p: &OperatingPoint| (p.misses * nontargets.len()).cmp(&(p.false_accepts * targets.len()));
    let i = points
        .iter()
        .position(|p| side(p).is_ge())
        .expect("the +inf operating point always has P_miss ≥ P_fa");
    let cur = points[i];
    let p_miss = |p: &OperatingPoint| p.misses as f64 / nt;
    let p_fa = |p: &OperatingPoint| p.false_accepts as f64 / nn;
    if side(&cur).is_eq() {
        return Ok((p_miss(&cur), finite_threshold(&points, i)));
    }
    let prev = points[i - 1];
    let d0 = p_miss(&prev) - p_fa(&prev);
    let d1 = p_miss(&cur) - p_fa(&cur);
    let w = d0 / (d0 - d1);
    let eer = p_miss(&prev) + w * (p_miss(&cur) - p_miss(&prev));
    let (a, b) = (prev.threshold, cur.threshold);
    let threshold = match (a.is_finite(), b.is_finite()) {
        (true, true) => a + w * (b - a),
        (false, _) => b,
        (_, false) => a,
    };
    Ok((eer, threshold))
}

fn finite_threshold(points: &[OperatingPoint], i: usize) -> f64 {
    let t = points[i].threshold;
    if t.is_finite() {
        t
    } else if t < 0.0 {
        points[1].threshold
    } else {
        points[points.len() - 2].threshold
    }
}

/// Normalized minimum detection cost and the threshold attaining it.
pub fn compute_min_dcf(
    targets: &[f64],
    nontargets: &[f64],
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<(f64, f64)> {
    check_scores("compute_min_dcf", targets, nontargets)?;
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::invalid("compute_min_dcf", format!("p_target {p_target} outside (0, 1)")));
    }
    if !(c_miss > 0.0 && c_fa > 0.0 && c_miss.is_finite() && c_fa.is_finite()) {
        return Err(Error::invalid("compute_min_dcf", "costs must be positive and finite"));
    }
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    let w_miss = p_target * c_miss;
    let w_fa = (1.0 - p_target) * c_fa;
    let norm = w_miss.min(w_fa);
    let mut best = (f64::INFINITY, f64::NAN);
    // −∞ accepts everything; the first scored threshold does the same
    for p in sweep(targets, nontargets).iter().skip(1) {
        let cost = (w_miss * p.misses as f64 / nt + w_fa * p.false_accepts as f64 / nn) / norm;
        if cost < best.0 {
            best = (cost, p.threshold);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialList {
    trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::Empty { op: "trial_list" });
        }
        Ok(Self { trials })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.trials.iter().filter(|t| t.target).count();
        (t, self.trials.len() - t)
    }

    /// Parses `label enroll_id test_id` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || FormatError::Invalid {
                what: format!("trial list line {}", n + 1),
                detail: format!("expected `label enroll_id test_id`, got `{raw}`"),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [label, enroll, test] = fields[..] else {
                return Err(bad().into());
            };
            let target = match label {
                "1" => true,
                "0" => false,
                _ => return Err(bad().into()),
            };
            trials.push(Trial {
                target,
                enroll: enroll.to_string(),
                test: test.to_string(),
            });
        }
        Self::new(trials)
    }

    pub fn to_text(&self) -> String {
        self.trials
            .iter()
            .map(|t| format!("{} {} {}\n", u8::from(t.target), t.enroll, t.test))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub num_target: usize,
    pub num_nontarget: usize,
}

impl EvalReport {
    pub fn from_scores(targets: &[f64], nontargets: &[f64], p_target: f64, c_miss: f64, c_fa: f64) -> Result<Self> {
        let (eer, eer_threshold) = compute_eer(targets, nontargets)?;
        let (min_dcf, min_dcf_threshold) = compute_min_dcf(targets, nontargets, p_target, c_miss, c_fa)?;
        Ok(Self {
            eer,
            eer_threshold,
            min_dcf,
            min_dcf_threshold,
            p_target,
            c_miss,
            c_fa,
            num_target: targets.len(),
            num_nontarget: nontargets.len(),
        })
    }

    pub fn key_values(&self) -> String {
        format!(
            "eer={}\neer_threshold={}\nmin_dcf={}\nmin_dcf_threshold={}\np_target={}\nc_miss={}\nc_fa={}\ntarget_trials={}\nnontarget_trials={}\n",
            self.eer,
            self.eer_threshold,
            self.min_dcf,
            self.min_dcf_threshold,
            self.p_target,
            self.c_miss,
            self.c_fa,
            self.num_target,
            self.num_nontarget
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "trials: {} target, {} nontarget (cosine scoring)",
            self.num_target, self.num_nontarget
        )?;
        writeln!(f, "EER/minDCF: {:.3}%/{:.3}", 100.0 * self.eer, self.min_dcf)?;
        writeln!(f, "  EER threshold     {:.6}", self.eer_threshold)?;
        write!(
            f,
            "  minDCF threshold  {:.6}  (p_target={}, c_miss={}, c_fa={})",
            self.min_dcf_threshold, self.p_target, self.c_miss, self.c_fa
        )
    }
}

/// Cosine scores of every trial, split into target and nontarget lists in
/// trial order, computed from per-utterance embeddings.
pub fn score_trials(trials: &TrialList, embeddings: &BTreeMap<String, Vec<f32>>) -> Result<(Vec<f64>, Vec<f64>)> {
    let lookup = |id: &str| embeddings.get(id).ok_or_else(|| Error::MissingUtterance(id.to_string()));
    let (mut t, mut n) = (Vec::new(), Vec::new());
    for trial in trials.trials() {
        let s = cosine_score(lookup(&trial.enroll)?, lookup(&trial.test)?)?;
        if trial.target { t.push(s) } else { n.push(s) }
    }
    Ok((t, n))
}

/// Embeds each utterance referenced by the trials once with the binary-mode
/// forward, scores every trial, and computes both metrics.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &Params<f32>,
    trials: &TrialList,
    store: &FeatureStore,
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<EvalReport> {
    let mut needed: Vec<&str> = trials
        .trials()
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let rows = needed
        .iter()
        .map(|id| {
            store
                .position(id)
                .map(|i| store.features.slice_outer(i))
                .ok_or_else(|| Error::MissingUtterance(id.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut embeddings = BTreeMap::new();
    for (ids, chunk) in needed.chunks(64).zip(rows.chunks(64)) {
        let out = forward_network(spec, params, &Tensor::stack_outer(chunk)?, Mode::Binary)?;
        let d = spec.embedding_dim();
        for (id, e) in ids.iter().zip(out.embedding.data().chunks_exact(d)) {
            embeddings.insert(id.to_string(), e.to_vec());
        }
    }
    let (t, n) = score_trials(trials, &embeddings)?;
    EvalReport::from_scores(&t, &n, p_target, c_miss, c_fa)
}
