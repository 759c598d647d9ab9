//! The training pipeline behind `bwn train`: generate the corpus, train,
//! write both model encodings, and score the held-out trials.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model_io::{save_model, write_atomic, ModelEncoding};
use crate::nn::{Mode, NetworkSpec, Params};
use crate::synth::{generate_corpus, labeled_set, FeatureStore};
use crate::train::{accuracy, train, EpochRecord, TrainState};

/// File names inside a run's output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.cfg")
    }

    pub fn train_features(&self) -> PathBuf {
        self.dir.join("train.bwnt")
    }

    pub fn held_out_features(&self) -> PathBuf {
        self.dir.join("heldout.bwnt")
    }

    pub fn trials(&self) -> PathBuf {
        self.dir.join("trials.txt")
    }

    /// Float32 checkpoint holding the shadow weights.
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bwn")
    }

    /// Bit-packed deployment model.
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.bwn")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.log")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub spec: NetworkSpec,
    pub params: Params<f32>,
    pub history: Vec<EpochRecord>,
    /// Accuracy on the training set after training, full-precision forward.
    pub train_accuracy: f64,
    /// Same, with binarized weights.
    pub binary_train_accuracy: f64,
    /// Held-out verification with the binarized model.
    pub report: EvalReport,
    pub paths: RunPaths,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Runs a full training job, writing every artifact under `cfg.out_dir` and
/// one line per finished epoch to `progress`.
pub fn run_train(cfg: &RunConfig, progress: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    fs::create_dir_all(&paths.dir).map_err(io_err(&paths.dir))?;
    write_atomic(&paths.config(), cfg.to_text().as_bytes())?;

    let corpus = generate_corpus(&cfg.data_config())?;
    FeatureStore::from_utterances(&corpus.train)?.save(&paths.train_features())?;
    let held_out = FeatureStore::from_utterances(&corpus.held_out)?;
    held_out.save(&paths.held_out_features())?;
    corpus.trials.save(&paths.trials())?;

    let spec = cfg.network()?;
    let params = Params::init(&spec, cfg.init_seed());
    let mut state = TrainState::new(&spec, params, &cfg.train, cfg.shuffle_seed())?;
    let data = labeled_set(&corpus.train)?;
    let mut log = String::new();
    let history = train(&mut state, &spec, &data, &cfg.train, |r| {
        let line = r.to_string();
        // progress output is best-effort; the log file is authoritative
        let _ = writeln!(progress, "{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    let params = state.params;

    save_model(&paths.checkpoint(), &spec, &params, ModelEncoding::Checkpoint)?;
    save_model(&paths.model(), &spec, &params, ModelEncoding::Packed)?;

    let train_accuracy = accuracy(&spec, &params, &data, Mode::FullPrecision)?;
    let binary_train_accuracy = accuracy(&spec, &params, &data, Mode::Binary)?;
    let report = evaluate(
        &spec,
        &params,
        &corpus.trials,
        &held_out,
        cfg.p_target,
        cfg.c_miss,
        cfg.c_fa,
    )?;
    writeln!(log, "train_accuracy={train_accuracy}").expect("write to String");
    writeln!(log, "binary_train_accuracy={binary_train_accuracy}").expect("write to String");
    log.push_str(&report.key_values());
    write_atomic(&paths.metrics(), log.as_bytes())?;

    Ok(TrainOutcome {
        spec,
        params,
        history,
        train_accuracy,
        binary_train_accuracy,
        report,
        paths,
    })
}
