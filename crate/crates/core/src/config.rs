//! Run configuration: a line-oriented `key = value` file with `#` comments.
//! Unknown, duplicate, or malformed keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{ConfigError, Error, Result};
use crate::metrics::{DEFAULT_C_FA, DEFAULT_C_MISS, DEFAULT_P_TARGET};
use crate::nn::{build_micro_resnet, Activation, NetworkSpec, DEFAULT_EMBEDDING_DIM, DEFAULT_LOGIT_SCALE};
use crate::synth::{sub_seed, SyntheticSpeakerConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Residual blocks per stage.
    pub depth_blocks: usize,
    /// Width of each stage; stages after the first downsample by 2.
    pub channels: Vec<usize>,
    pub activation: Activation,
    pub embedding_dim: usize,
    pub logit_scale: f64,
    pub train: TrainConfig,
    pub data: SyntheticSpeakerConfig,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/quickstart"),
            depth_blocks: 2,
            channels: vec![8, 16],
            activation: Activation::Relu,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            logit_scale: DEFAULT_LOGIT_SCALE,
            train: TrainConfig::default(),
            data: SyntheticSpeakerConfig {
                sigma_within: 0.3,
                separation: 1.5,
                ..SyntheticSpeakerConfig::default()
            },
            p_target: DEFAULT_P_TARGET,
            c_miss: DEFAULT_C_MISS,
            c_fa: DEFAULT_C_FA,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "depth_blocks",
    "channels",
    "activation",
    "embedding_dim",
    "logit_scale",
    "lr0",
    "momentum",
    "decay_factor",
    "decay_every",
    "batch_size",
    "epochs",
    "clip_threshold",
    "gradient_rule",
    "clip_shadow",
    "num_speakers",
    "utterances_per_speaker",
    "feature_height",
    "feature_width",
    "sigma_within",
    "separation",
    "max_time_shift",
    "held_out_fraction",
    "p_target",
    "c_miss",
    "c_fa",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, ConfigError>
where
    T::Err: ToString,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .filter(|(k, v)| !k.is_empty() && !v.is_empty())
                .ok_or_else(|| ConfigError::Malformed {
                    line: line_no,
                    text: raw.to_string(),
                })?;
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(ConfigError::UnknownKey {
                    line: line_no,
                    key: key.to_string(),
                }
                .into());
            };
            if seen.contains(&known) {
                return Err(ConfigError::Duplicate {
                    line: line_no,
                    key: key.to_string(),
                }
                .into());
            }
            seen.push(known);
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), ConfigError> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "depth_blocks" => self.depth_blocks = parse_value(key, value)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|c| parse_value(key, c.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "activation" => self.activation = parse_value(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_value(key, value)?,
            "logit_scale" => self.logit_scale = parse_value(key, value)?,
            "lr0" => t.lr0 = parse_value(key, value)?,
            "momentum" => t.momentum = parse_value(key, value)?,
            "decay_factor" => t.decay_factor = parse_value(key, value)?,
            "decay_every" => t.decay_every = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "clip_threshold" => t.clip_threshold = parse_value(key, value)?,
            "gradient_rule" => t.gradient_rule = parse_value(key, value)?,
            "clip_shadow" => t.clip_shadow = parse_bool(key, value)?,
            "num_speakers" => d.num_speakers = parse_value(key, value)?,
            "utterances_per_speaker" => d.utterances_per_speaker = parse_value(key, value)?,
            "feature_height" => d.height = parse_value(key, value)?,
            "feature_width" => d.width = parse_value(key, value)?,
            "sigma_within" => d.sigma_within = parse_value(key, value)?,
            "separation" => d.separation = parse_value(key, value)?,
            "max_time_shift" => d.max_time_shift = parse_value(key, value)?,
            "held_out_fraction" => d.held_out_fraction = parse_value(key, value)?,
            "p_target" => self.p_target = parse_value(key, value)?,
            "c_miss" => self.c_miss = parse_value(key, value)?,
            "c_fa" => self.c_fa = parse_value(key, value)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Checks every section, reporting failures as configuration errors.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| -> Error {
            match e {
                Error::Config(_) => e,
                other => ConfigError::InvalidValue {
                    key: "(combined)".into(),
                    value: String::new(),
                    reason: other.to_string(),
                }
                .into(),
            }
        };
        self.train.validate().map_err(as_config)?;
        self.data.validate().map_err(as_config)?;
        self.network().map_err(as_config)?;
        if !(self.p_target > 0.0 && self.p_target < 1.0 && self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(ConfigError::InvalidValue {
                key: "p_target/c_miss/c_fa".into(),
                value: format!("{}/{}/{}", self.p_target, self.c_miss, self.c_fa),
                reason: "need 0 < p_target < 1 and positive costs".into(),
            }
            .into());
        }
        Ok(())
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        build_micro_resnet(
            [1, self.data.height, self.data.width],
            self.depth_blocks,
            &self.channels,
            self.embedding_dim,
            self.data.num_speakers,
            self.activation,
        )?
        .with_logit_scale(self.logit_scale)
    }

    pub fn data_seed(&self) -> u64 {
        sub_seed(self.seed, "data")
    }

    pub fn init_seed(&self) -> u64 {
        sub_seed(self.seed, "init")
    }

    pub fn shuffle_seed(&self) -> u64 {
        sub_seed(self.seed, "shuffle")
    }

    /// Synthetic-data settings with the derived data seed filled in.
    pub fn data_config(&self) -> SyntheticSpeakerConfig {
        SyntheticSpeakerConfig {
            seed: self.data_seed(),
            ..self.data.clone()
        }
    }

    /// Every key with its effective value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.data;
        let channels: Vec<String> = self.channels.iter().map(ToString::to_string).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to String");
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("depth_blocks", self.depth_blocks.to_string());
        kv("channels", channels.join(","));
        kv("activation", self.activation.to_string());
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("logit_scale", self.logit_scale.to_string());
        kv("lr0", t.lr0.to_string());
        kv("momentum", t.momentum.to_string());
        kv("decay_factor", t.decay_factor.to_string());
        kv("decay_every", t.decay_every.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("clip_threshold", t.clip_threshold.to_string());
        kv("gradient_rule", t.gradient_rule.to_string());
        kv("clip_shadow", t.clip_shadow.to_string());
        kv("num_speakers", d.num_speakers.to_string());
        kv("utterances_per_speaker", d.utterances_per_speaker.to_string());
        kv("feature_height", d.height.to_string());
        kv("feature_width", d.width.to_string());
        kv("sigma_within", d.sigma_within.to_string());
        kv("separation", d.separation.to_string());
        kv("max_time_shift", d.max_time_shift.to_string());
        kv("held_out_fraction", d.held_out_fraction.to_string());
        kv("p_target", self.p_target.to_string());
        kv("c_miss", self.c_miss.to_string());
        kv("c_fa", self.c_fa.to_string());
        s
    }
}
