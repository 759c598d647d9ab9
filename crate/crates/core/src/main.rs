use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bwn::binarize::optimal_scale;
use bwn::config::RunConfig;
use bwn::metrics::{evaluate, TrialList, DEFAULT_C_FA, DEFAULT_C_MISS, DEFAULT_P_TARGET};
use bwn::model_io::{read_model_file, save_model, size_report, ModelEncoding, RecordData};
use bwn::nn::SlotKind;
use bwn::run::run_train;
use bwn::synth::FeatureStore;
use bwn::verify::{run_scope, Scope};
use bwn::Error;

#[derive(Parser)]
#[command(name = "bwn", version, about = "Binary-weight speaker-embedding networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, train, and write checkpoint, packed model and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a trial list with a model and report EER and minDCF.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Feature archive holding every utterance named in the trials.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_P_TARGET)]
        p_target: f64,
        #[arg(long, default_value_t = DEFAULT_C_MISS)]
        c_miss: f64,
        #[arg(long, default_value_t = DEFAULT_C_FA)]
        c_fa: f64,
    },
    /// Convert a float32 checkpoint into a bit-packed model.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the records of a model file.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the oracle suites.
    Verify {
        /// binarize-oracle, conv-equivalence, gradcheck, metrics-oracle,
        /// storage, schedule, data, determinism or all.
        #[arg(default_value = "all")]
        scope: Scope,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, out, seed),
        Command::Eval {
            model,
            trials,
            data,
            p_target,
            c_miss,
            c_fa,
        } => cmd_eval(&model, &trials, &data, p_target, c_miss, c_fa),
        Command::Compress { model, out } => cmd_compress(&model, &out),
        Command::Inspect { model } => cmd_inspect(&model),
        Command::Verify { scope } => cmd_verify(scope),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("bwn: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let text = fs::read_to_string(config).map_err(|e| Failure {
        code: 2,
        message: format!("cannot read config {}: {e}", config.display()),
    })?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let stdout = io::stdout();
    let outcome = run_train(&cfg, &mut stdout.lock())?;
    let paths = &outcome.paths;
    println!(
        "train_accuracy={:.4} binary_train_accuracy={:.4}",
        outcome.train_accuracy, outcome.binary_train_accuracy
    );
    println!("{}", outcome.report);
    println!("wrote {}", paths.checkpoint().display());
    println!("wrote {}", paths.model().display());
    println!("wrote {}", paths.metrics().display());
    Ok(())
}

fn cmd_eval(model: &Path, trials: &Path, data: &Path, p_target: f64, c_miss: f64, c_fa: f64) -> CmdResult {
    let (spec, params) = read_model_file(model)?.into_model()?;
    let trials = TrialList::load(trials)?;
    let store = FeatureStore::load(data)?;
    let report = evaluate(&spec, &params, &trials, &store, p_target, c_miss, c_fa)?;
    println!("{report}");
    print!("{}", report.key_values());
    Ok(())
}

fn cmd_compress(model: &Path, out: &Path) -> CmdResult {
    let file = read_model_file(model)?;
    if file.is_packed() {
        return Err(Failure {
            code: 2,
            message: format!("{} is already packed; compress expects a float32 checkpoint", model.display()),
        });
    }
    let (spec, params) = file.into_model()?;
    let report = size_report(&spec);
    if !spec.has_binary_layers() {
        eprintln!("warning: model has no binarized layers; output is the same size as the input");
    }
    save_model(out, &spec, &params, ModelEncoding::Packed)?;
    println!("{report}");
    println!("wrote {}", out.display());
    Ok(())
}

fn stats(values: &[f32]) -> String {
    if values.is_empty() {
        return "-".into();
    }
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    format!("{min:.4}/{mean:.4}/{max:.4}")
}

fn cmd_inspect(model: &Path) -> CmdResult {
    let file = read_model_file(model)?;
    let mut out = io::stdout().lock();
    let mut emit = || -> io::Result<()> {
        writeln!(
            out,
            "{}: format v{}, {} records, {} bytes, crc32 {:08x}, {}",
            model.display(),
            file.version,
            file.records.len(),
            file.total_bytes,
            file.crc,
            if file.is_packed() { "packed" } else { "float32 checkpoint" }
        )?;
        writeln!(
            out,
            "{:>3}  {:<13} {:<16} {:<8} {:>9}  {:<28} {}",
            "#", "kind", "shape", "encoding", "bytes", "scale min/mean/max", "first word"
        )?;
        for (i, rec) in file.records.iter().enumerate() {
            let shape = format!("{:?}", rec.shape);
            let (scales, first) = match &rec.data {
                RecordData::Packed(bank) => (
                    stats(bank.scales()),
                    bank.words().first().map_or("-".into(), |w| format!("{w:016x}")),
                ),
                RecordData::Float(v) if rec.kind == SlotKind::BinaryConv.code() => {
                    let n = v.len() / rec.shape[0].max(1);
                    let a: Vec<f32> = v.chunks(n.max(1)).map(|c| optimal_scale(c).unwrap_or(f32::NAN)).collect();
                    (stats(&a), "-".into())
                }
                _ => ("-".into(), "-".into()),
            };
            writeln!(
                out,
                "{:>3}  {:<13} {:<16} {:<8} {:>9}  {:<28} {}",
                i,
                rec.kind_name(),
                shape,
                rec.encoding.name(),
                rec.bytes,
                scales,
                first
            )?;
        }
        Ok(())
    };
    match emit() {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => return Ok(()),
        Err(e) => {
            return Err(Failure {
                code: 1,
                message: e.to_string(),
            })
        }
        Ok(()) => {}
    }
    let (spec, _) = file.into_model()?;
    println!(
        "architecture: {} layers, {} parameter records, input {:?}, embedding {}, {} classes",
        spec.layers().len(),
        spec.slots().len(),
        spec.input(),
        spec.embedding_dim(),
        spec.num_classes()
    );
    Ok(())
}

fn cmd_verify(scope: Scope) -> CmdResult {
    let checks = run_scope(scope, |c| println!("{c}"))?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{}/{} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(Failure {
            code: 1,
            message: format!("{failed} verification checks failed"),
        });
    }
    Ok(())
}
