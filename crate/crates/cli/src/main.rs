//! `mpsynth` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration or contract error, 2 I/O or
//! format error, 3 gradient check failure, 4 non-finite value during training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mpsynth::data::{build_dataset, read_tensor, write_tensor, Dataset, Split};
use mpsynth::errviz::{error_map, grayscale, write_png, DEFAULT_MAX_DISPLAY};
use mpsynth::gradsuite::{run_suite, Scope};
use mpsynth::metrics::{evaluate_pairs, PsnrPeak, SSIM_SETTINGS};
use mpsynth::objectives::PerceptualNet;
use mpsynth::train::{load_checkpoint, run_ablation, train, TrainConfig};
use mpsynth::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "mpsynth", version, about = "Multi-parameter image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        /// Image side length, a multiple of 16.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of cases assigned to the training split.
        #[arg(long, default_value_t = mpsynth::data::DEFAULT_SPLIT_RATIO)]
        split: f64,
    },
    /// Train a model; writes config.json, losses.csv, checkpoints and metrics.csv.
    Train {
        /// JSON training config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize one case from a checkpoint.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding p1.mpt, p2.mpt, p3.mpt.
        #[arg(long)]
        case_dir: PathBuf,
        #[arg(long)]
        out_png: Option<PathBuf>,
        #[arg(long)]
        out_tensor: Option<PathBuf>,
    },
    /// Write a per-case metrics CSV for a dataset split.
    Eval {
        /// Synthesize with this checkpoint.
        #[arg(long, conflicts_with = "pred_dir")]
        ckpt: Option<PathBuf>,
        /// Read predictions from <DIR>/<case id>/y.mpt instead.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// PSNR peak: largest observed value, or a fixed data range of 1.
        #[arg(long, value_enum, default_value_t = PeakArg::Observed)]
        peak: PeakArg,
    },
    /// Render an absolute-error map to PNG.
    Errmap {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_DISPLAY)]
        max_display: f64,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::Op)]
        scope: ScopeArg,
        /// Maximum relative error; defaults to 1e-4 for op, 1e-3 otherwise.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train every variant for each seed and tabulate held-out metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PeakArg {
    Observed,
    Range,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Op,
    Block,
    Full,
}

enum Failure {
    Lib(Error),
    GradCheck(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) | Error::Config(_) | Error::State(_) => 1,
        Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) => 2,
        Error::NonFinite(_) => 4,
    }
}

fn load_config(path: Option<&Path>) -> mpsynth::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn write_file(path: &Path, text: &str) -> mpsynth::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData {
            out,
            cases,
            size,
            seed,
            split,
        } => {
            let m = build_dataset(&out, cases, size, seed, split)?;
            println!(
                "wrote {} cases ({} train, {} test) to {}",
                m.cases.len(),
                m.count(Split::Train),
                m.count(Split::Test),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = Dataset::load(&data)?;
            let outcome = train(&cfg, &ds, &out)?;
            println!("{} steps, final checkpoint {}", outcome.steps, outcome.final_checkpoint.display());
            if let Some(r) = outcome.report {
                println!(
                    "held-out ssim {:.4} ± {:.4}, nmse {:.4}, psnr {:.2} dB ({SSIM_SETTINGS})",
                    r.mean.ssim, r.std.ssim, r.mean.nmse, r.mean.psnr
                );
            }
        }
        Command::Synth {
            ckpt,
            case_dir,
            out_png,
            out_tensor,
        } => {
            if out_png.is_none() && out_tensor.is_none() {
                return Err(Error::Config("synth needs --out-png and/or --out-tensor".into()).into());
            }
            let model = load_checkpoint(&ckpt, None)?;
            let mut inputs = Vec::new();
            for name in &model.net.inputs {
                let t = read_tensor(&case_dir.join(format!("{name}.mpt")))?;
                let s = t.shape().to_vec();
                if s.len() != 3 || s[0] != 1 {
                    return Err(Error::Config(format!("{name}.mpt must be 1×H×W, got {s:?}")).into());
                }
                inputs.push(t.reshape(vec![1, 1, s[1], s[2]])?);
            }
            let y = model.synthesize(&inputs)?;
            let (h, w) = (y.shape()[2], y.shape()[3]);
            let y = y.reshape(vec![1, h, w])?;
            if let Some(p) = out_tensor {
                write_tensor(&p, &y)?;
            }
            if let Some(p) = out_png {
                write_png(&p, &grayscale(&y)?)?;
            }
        }
        Command::Eval {
            ckpt,
            pred_dir,
            data,
            report,
            split,
            peak,
        } => {
            let ds = Dataset::load(&data)?;
            let cases = match split {
                SplitArg::Train => ds.split(Split::Train),
                SplitArg::Test => ds.split(Split::Test),
                SplitArg::All => ds.cases.iter().collect(),
            };
            if cases.is_empty() {
                return Err(Error::Config("the selected split has no cases".into()).into());
            }
            let preds: Vec<Tensor<f32>> = match (ckpt, pred_dir) {
                (Some(c), None) => load_checkpoint(&c, None)?.synthesize_cases(&cases)?,
                (None, Some(dir)) => cases
                    .iter()
                    .map(|c| read_tensor(&dir.join(&c.id).join("y.mpt")))
                    .collect::<mpsynth::Result<_>>()?,
                _ => return Err(Error::Config("eval needs exactly one of --ckpt or --pred-dir".into()).into()),
            };
            let triples: Vec<_> = cases
                .iter()
                .zip(preds)
                .map(|(c, p)| (c.id.clone(), c.y.clone(), p))
                .collect();
            let peak = match peak {
                PeakArg::Observed => PsnrPeak::ObservedMax,
                PeakArg::Range => PsnrPeak::DataRange(1.0),
            };
            let alpha = mpsynth::objectives::DEFAULT_ALPHA;
            let r = evaluate_pairs(&triples, &PerceptualNet::new(), &alpha, peak)?;
            write_file(&report, &r.to_csv())?;
            println!(
                "{} cases, mean ssim {:.4}, nmse {:.4} ({SSIM_SETTINGS})",
                r.rows.len(),
                r.mean.ssim,
                r.mean.nmse
            );
        }
        Command::Errmap {
            pred,
            truth,
            out,
            max_display,
        } => {
            let p = read_tensor(&pred)?;
            let t = read_tensor(&truth)?;
            write_png(&out, &error_map(&t, &p, max_display)?)?;
        }
        Command::Gradcheck { scope, tol, seed } => {
            let scope = match scope {
                ScopeArg::Op => Scope::Op,
                ScopeArg::Block => Scope::Block,
                ScopeArg::Full => Scope::Full,
            };
            let tol = tol.unwrap_or(scope.default_tol());
            if !(tol > 0.0) {
                return Err(Error::Config(format!("--tol must be positive, got {tol}")).into());
            }
            let reports = run_suite(scope, tol, seed)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{} {:<32} max rel error {:.3e} over {} probes ({} discarded)",
                    if r.pass { "ok  " } else { "FAIL" },
                    r.op,
                    r.max_rel_error,
                    r.probes,
                    r.discarded
                );
                failed += usize::from(!r.pass);
            }
            if failed > 0 {
                return Err(Failure::GradCheck(failed));
            }
        }
        Command::Ablate {
            config,
            data,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = Dataset::load(&data)?;
            let table = run_ablation(&cfg, &ds, &seeds)?;
            write_file(&out, &table.to_csv())?;
            println!("wrote {} rows to {}", table.rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::GradCheck(n)) => {
            eprintln!("error: {n} gradient check(s) failed");
            ExitCode::from(3)
        }
    }
}
