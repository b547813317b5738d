//! `fqc` command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use fqc_core::dataset::consensus;
use fqc_core::{BandThresholds, DatasetManifest, GradeRecord, TrainConfig};
use serde::Serialize;

use crate::error::{ServiceError, ServiceResult};
use crate::pipeline::{self, io_error, ArchChoice, GenerateConfig, TrainRunConfig, TRAIN_CONFIG_FILE};
use crate::registry::{LoadedModel, Registry};
use crate::score::{score_image, MediaKind, RecapturePolicy};
use crate::server::{self, AppConfig, AppState, GRADES_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Fundus image quality triage.
#[derive(Debug, Parser)]
#[command(name = "fqc", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic graded dataset with train/test splits.
    Generate(GenerateArgs),
    /// Train a scoring network on a manifest's train split.
    Train(TrainArgs),
    /// Score the test split and write an evaluation report.
    Eval(EvalArgs),
    /// Score one image.
    Infer(InferArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Grade store operations.
    Grades {
        #[command(subcommand)]
        command: GradesCommand,
    },
    /// Model registry operations.
    Models {
        #[command(subcommand)]
        command: ModelsCommand,
    },
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output directory; receives manifest.json and images/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total image count, split about 94/4/2 into accept/reject/ambiguous.
    #[arg(long, default_value_t = 800)]
    total: usize,
    /// Side of the generated square images in pixels.
    #[arg(long, default_value_t = 256)]
    side: usize,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for per-epoch checkpoints, history.jsonl and model.fqc.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `default` or `reduced-<scale>`.
    #[arg(long, default_value = "default")]
    arch: ArchChoice,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr_start: f64,
    #[arg(long, default_value_t = 0.0001)]
    lr_end: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Report JSON destination.
    #[arg(long)]
    out: PathBuf,
    /// Optional ROC curve CSV destination.
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    #[arg(long, default_value = "-2.2,-0.5", value_parser = parse_thresholds, allow_hyphen_values = true)]
    thresholds: BandThresholds,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "-2.2,-0.5", value_parser = parse_thresholds, allow_hyphen_values = true)]
    thresholds: BandThresholds,
    /// Only advise recapture for the reject band.
    #[arg(long)]
    recapture_reject_only: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "FQC_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long, env = "FQC_PORT", default_value_t = 8080)]
    port: u16,
    /// Manifest to serve; defaults to <data-dir>/manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "-2.2,-0.5", value_parser = parse_thresholds, allow_hyphen_values = true)]
    thresholds: BandThresholds,
    #[arg(long)]
    recapture_reject_only: bool,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

#[derive(Debug, Subcommand)]
enum GradesCommand {
    /// Write one JSON line per image with its grades and consensus.
    Export {
        #[arg(long, env = "FQC_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Destination file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ModelsCommand {
    /// Copy a checkpoint into the registry under its content hash.
    Register {
        #[arg(long, env = "FQC_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
}

fn parse_thresholds(s: &str) -> Result<BandThresholds, String> {
    s.parse().map_err(|e: fqc_core::Error| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    EXIT_USAGE
                }
                _ => {
                    let _ = e.print();
                    eprintln!("\n{}", Cli::command().render_help());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn dispatch(command: Command) -> ServiceResult<()> {
    match command {
        Command::Generate(a) => {
            let cfg = GenerateConfig {
                total: a.total,
                side: a.side,
                train_fraction: a.train_fraction,
                seed: a.seed,
            };
            let g = pipeline::generate(&a.out, &cfg)?;
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&serde_json::json!({
                "manifest": g.manifest_path,
                "images": g.manifest.entries.len(),
            }))
        }
        Command::Train(a) => {
            let run = TrainRunConfig {
                arch: a.arch,
                train: TrainConfig {
                    epochs: a.epochs,
                    lr_start: a.lr_start,
                    lr_end: a.lr_end,
                    batch_size: a.batch_size,
                    seed: a.seed,
                    ..TrainConfig::default()
                },
            };
            let t = pipeline::train_model(&a.manifest, &a.out, &run)?;
            let last = t.history.epochs.last();
            print_json(&serde_json::json!({
                "model": t.model_path,
                "epochs": t.history.epochs.len(),
                "final_mean_train_loss": last.map(|r| r.mean_train_loss),
                "final_train_accuracy": last.map(|r| r.train_accuracy),
            }))
        }
        Command::Eval(a) => {
            let ev = pipeline::evaluate(&a.manifest, &a.model, &a.thresholds)?;
            pipeline::write_report(&ev.report, &a.out, a.roc_csv.as_deref())?;
            print_json(&serde_json::json!({
                "report": a.out,
                "accuracy": ev.report.accuracy,
                "auc": ev.report.auc,
            }))
        }
        Command::Infer(a) => {
            let model = LoadedModel::read(&a.model)?;
            let bytes = std::fs::read(&a.image).map_err(|e| io_error(&a.image, e))?;
            let r = score_image(&model, &bytes, MediaKind::from_extension(&a.image), &a.thresholds, policy(a.recapture_reject_only))?;
            print_json(&r)
        }
        Command::Serve(a) => {
            let mut cfg = AppConfig::new(&a.data_dir);
            if let Some(m) = a.manifest {
                cfg.manifest_path = m;
            }
            cfg.thresholds = a.thresholds;
            cfg.recapture = policy(a.recapture_reject_only);
            let state = Arc::new(AppState::open(cfg)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| ServiceError::Internal(e.to_string()))?;
            rt.block_on(server::serve(state, SocketAddr::new(a.host, a.port)))
                .map_err(|e| ServiceError::Internal(e.to_string()))
        }
        Command::Grades {
            command: GradesCommand::Export { data_dir, manifest, out },
        } => {
            let manifest_path = manifest.unwrap_or_else(|| data_dir.join(pipeline::MANIFEST_FILE));
            let text = export_grades(&data_dir, &manifest_path)?;
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| io_error(&p, e).into()),
                None => std::io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|e| ServiceError::Internal(e.to_string())),
            }
        }
        Command::Models {
            command: ModelsCommand::Register { data_dir, model },
        } => {
            let cfg_path = model.with_file_name(TRAIN_CONFIG_FILE);
            let cfg = std::fs::read(&cfg_path).ok();
            let entry = Registry::new(&data_dir).register(&model, cfg.as_deref())?;
            print_json(&entry)
        }
    }
}

fn policy(reject_only: bool) -> RecapturePolicy {
    if reject_only {
        RecapturePolicy::RejectOnly
    } else {
        RecapturePolicy::UnlessAccept
    }
}

#[derive(Serialize)]
struct ExportLine<'a> {
    image_id: &'a str,
    consensus: fqc_core::Consensus,
    grades: Vec<GradeRecord>,
}

/// Manifest grades merged with the store, one JSON line per image in
/// manifest order, followed by store records for unknown images.
pub fn export_grades(data_dir: &Path, manifest_path: &Path) -> ServiceResult<String> {
    let manifest = if manifest_path.exists() {
        DatasetManifest::load(manifest_path)?
    } else {
        DatasetManifest::default()
    };
    let mut stored = fqc_core::dataset::GradeStore::new(data_dir.join(GRADES_FILE)).by_image()?;
    let mut out = String::new();
    let mut push = |id: &str, grades: Vec<GradeRecord>| -> ServiceResult<()> {
        let line = ExportLine {
            image_id: id,
            consensus: consensus(&grades, fqc_core::dataset::REQUIRED_GRADERS),
            grades,
        };
        out.push_str(&serde_json::to_string(&line).map_err(fqc_core::Error::from)?);
        out.push('\n');
        Ok(())
    };
    for e in &manifest.entries {
        let mut grades = e.grades.clone();
        grades.extend(stored.remove(&e.image_id).unwrap_or_default());
        push(&e.image_id, grades)?;
    }
    for (id, grades) in stored {
        push(&id, grades)?;
    }
    Ok(out)
}

fn print_json<T: Serialize>(v: &T) -> ServiceResult<()> {
    let s = serde_json::to_string_pretty(v).map_err(fqc_core::Error::from)?;
    println!("{s}");
    Ok(())
}
