//! Synthetic speaker corpus for tests and the quickstart.
//!
//! Each speaker has a smooth random prototype pattern with unit RMS. An
//! utterance is `separation` times the speaker's prototype, circularly shifted along the time (width) axis by a random
//! integer, plus white Gaussian noise of standard deviation `sigma_within`.
//! The largest shift is `round(sigma_within · max_time_shift)` columns, so
//! larger within-speaker noise also means larger misalignment.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, FormatError, Result};
use crate::metrics::{Trial, TrialList};
use crate::tensor::Tensor;
use crate::train::LabeledSet;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpeakerConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_within: f64,
    pub separation: f64,
    pub max_time_shift: f64,
    /// Fraction of each speaker's utterances held out for verification.
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpeakerConfig {
    fn default() -> Self {
        Self {
            num_speakers: 10,
            utterances_per_speaker: 40,
            height: 32,
            width: 32,
            sigma_within: 0.5,
            separation: 1.0,
            max_time_shift: 4.0,
            held_out_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpeakerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("synthetic_corpus", detail));
        if self.num_speakers < 2 {
            return bad(format!("need at least 2 speakers, got {}", self.num_speakers));
        }
        if self.utterances_per_speaker < 2 {
            return bad(format!(
                "need at least 2 utterances per speaker, got {}",
                self.utterances_per_speaker
            ));
        }
        if self.height == 0 || self.width == 0 {
            return bad("feature extents must be positive".into());
        }
        for (name, v) in [
            ("sigma_within", self.sigma_within),
            ("separation", self.separation),
            ("max_time_shift", self.max_time_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return bad(format!("held_out_fraction must lie in (0, 1), got {}", self.held_out_fraction));
        }
        Ok(())
    }

    /// Largest circular time shift in columns.
    pub fn shift_range(&self) -> usize {
        (self.sigma_within * self.max_time_shift).round() as usize
    }

    /// Held-out utterances per speaker (at least one, leaving at least one
    /// for training).
    /// Held-out utterances per speaker: at least two so target trials exist,
    /// and at most `n − 1` when that leaves one for training.
    pub fn held_out_per_speaker(&self) -> usize {
        let n = self.utterances_per_speaker;
        let h = ((n as f64 * self.held_out_fraction).round() as usize).max(2);
        if n >= 3 { h.min(n - 1) } else { n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    /// `[1, 1, H, W]`.
    pub features: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<Utterance>,
    pub held_out: Vec<Utterance>,
    pub trials: TrialList,
}

/// Seed for a named stream derived from the master seed (FNV-1a over the
/// label, mixed with the seed).
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes().chain(seed.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn smooth_pattern(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in [h - 1, 0, 1] {
                for dx in [w - 1, 0, 1] {
                    acc += raw[((y + dy) % h) * w + (x + dx) % w];
                }
            }
            out[y * w + x] = acc;
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    out.iter_mut().for_each(|v| *v /= rms.max(1e-12));
    out
}

/// The unit-RMS prototype pattern of speaker `s`, as used by [`generate_corpus`].
pub fn speaker_prototype(cfg: &SyntheticSpeakerConfig, s: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("speaker{s}")));
    smooth_pattern(cfg.height, cfg.width, &mut rng)
}

pub fn utterance_id(speaker: usize, index: usize) -> String {
    format!("spk{speaker:03}_utt{index:03}")
}

/// Generates the corpus, the train/held-out split, and verification trials:
/// every same-speaker pair of held-out utterances plus an equal number of
/// distinct cross-speaker pairs.
pub fn generate_corpus(cfg: &SyntheticSpeakerConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let k = cfg.shift_range() as i64;
    let held = cfg.held_out_per_speaker();
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for s in 0..cfg.num_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("speaker{s}")));
        let proto = smooth_pattern(h, w, &mut rng);
        let base: Vec<f64> = proto.iter().map(|p| cfg.separation * p).collect();
        for u in 0..cfg.utterances_per_speaker {
            let shift = rng.random_range(-k..=k).rem_euclid(w as i64) as usize;
            let mut data = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push((base[y * w + (x + w - shift) % w] + cfg.sigma_within * noise) as f32);
                }
            }
            let utt = Utterance {
                id: utterance_id(s, u),
                speaker: s,
                features: Tensor::from_vec(&[1, 1, h, w], data)?,
            };
            if u < cfg.utterances_per_speaker - held {
                train.push(utt);
            } else {
                held_out.push(utt);
            }
        }
    }
    let trials = make_trials(&held_out, cfg.seed)?;
    Ok(SyntheticCorpus { train, held_out, trials })
}

fn make_trials(held_out: &[Utterance], seed: u64) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (i, a) in held_out.iter().enumerate() {
        for b in &held_out[i + 1..] {
            if a.speaker == b.speaker {
                trials.push(Trial {
                    target: true,
                    enroll: a.id.clone(),
                    test: b.id.clone(),
                });
            }
        }
    }
    let mut cross: Vec<(usize, usize)> = Vec::new();
    for i in 0..held_out.len() {
        for j in i + 1..held_out.len() {
            if held_out[i].speaker != held_out[j].speaker {
                cross.push((i, j));
            }
        }
    }
    cross.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "trials")));
    let wanted = trials.len().min(cross.len());
    let picked: BTreeSet<_> = cross.into_iter().take(wanted).collect();
    for (i, j) in picked {
        trials.push(Trial {
            target: false,
            enroll: held_out[i].id.clone(),
            test: held_out[j].id.clone(),
        });
    }
    TrialList::new(trials)
}

/// Stacks utterances into a labelled set (labels are speaker indices).
pub fn labeled_set(utterances: &[Utterance]) -> Result<LabeledSet> {
    let rows: Vec<_> = utterances.iter().map(|u| u.features.clone()).collect();
    LabeledSet::new(
        Tensor::stack_outer(&rows)?,
        utterances.iter().map(|u| u.speaker).collect(),
    )
}

const FEATURE_MAGIC: [u8; 4] = *b"BWNT";

/// Feature archive: a `[U, C, H, W]` float32 tensor file plus a text index
/// (`<id> <speaker>` per line) next to it with the `.index` extension.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub ids: Vec<String>,
    pub speakers: Vec<usize>,
    pub features: Tensor<f32>,
}

pub fn index_path(path: &Path) -> PathBuf {
    path.with_extension("index")
}

impl FeatureStore {
    pub fn from_utterances(utterances: &[Utterance]) -> Result<Self> {
        let rows: Vec<_> = utterances.iter().map(|u| u.features.clone()).collect();
        Ok(Self {
            ids: utterances.iter().map(|u| u.id.clone()).collect(),
            speakers: utterances.iter().map(|u| u.speaker).collect(),
            features: Tensor::stack_outer(&rows)?,
        })
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + 4 * self.features.numel());
        bytes.extend_from_slice(&FEATURE_MAGIC);
        bytes.extend_from_slice(&(self.features.shape().len() as u32).to_le_bytes());
        for &d in self.features.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.features.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let idx = index_path(path);
        let mut f = fs::File::create(&idx).map_err(|e| Error::io(&idx, e))?;
        for (id, s) in self.ids.iter().zip(&self.speakers) {
            writeln!(f, "{id} {s}").map_err(|e| Error::io(&idx, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let truncated = || FormatError::Truncated { what: "feature tensor".into() };
        let take4 = |at: usize| -> std::result::Result<[u8; 4], FormatError> {
            bytes.get(at..at + 4).map(|b| b.try_into().unwrap()).ok_or_else(truncated)
        };
        let magic = take4(0)?;
        if magic != FEATURE_MAGIC {
            return Err(FormatError::BadMagic {
                found: magic,
                expected: FEATURE_MAGIC,
            }
            .into());
        }
        let rank = u32::from_le_bytes(take4(4)?) as usize;
        if rank != 4 {
            return Err(FormatError::Invalid {
                what: "feature tensor".into(),
                detail: format!("rank {rank}, expected 4"),
            }
            .into());
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| take4(8 + 4 * i).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<std::result::Result<_, _>>()?;
        let start = 8 + 4 * rank;
        let numel: usize = shape.iter().product();
        let body = &bytes[start.min(bytes.len())..];
        if body.len() != 4 * numel {
            return Err(FormatError::LengthMismatch {
                what: "feature tensor payload".into(),
                expected: 4 * numel,
                actual: body.len(),
            }
            .into());
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let features = Tensor::from_vec(&shape, data)?;

        let idx = index_path(path);
        let text = fs::read_to_string(&idx).map_err(|e| Error::io(&idx, e))?;
        let mut ids = Vec::new();
        let mut speakers = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let (Some(id), Some(s), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(FormatError::Invalid {
                    what: "feature index".into(),
                    detail: format!("bad line `{line}`"),
                }
                .into());
            };
            let s = s.parse().map_err(|_| FormatError::Invalid {
                what: "feature index".into(),
                detail: format!("bad speaker label in `{line}`"),
            })?;
            ids.push(id.to_string());
            speakers.push(s);
        }
        if ids.len() != shape[0] {
            return Err(FormatError::LengthMismatch {
                what: "feature index entries".into(),
                expected: shape[0],
                actual: ids.len(),
            }
            .into());
        }
        Ok(Self { ids, speakers, features })
    }
}
