//! Generate, train and evaluate steps shared by the CLI and the tests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fqc_core::dataset::{split_dataset, Split};
use fqc_core::eval::eval_report;
use fqc_core::model::{build_default_arch, build_reduced_arch, encode_checkpoint, load_checkpoint, CheckpointMeta};
use fqc_core::synth::{build_synth_dataset, make_ambiguous_variants, ImbalancePreset, SynthProfile};
use fqc_core::trainer::{score_all, train, LabeledImages};
use fqc_core::{ArchitectureSpec, BandThresholds, DatasetManifest, Error, EvalReport, Result, TrainConfig, TrainHistory};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.fqc";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const REPORT_FILE: &str = "report.json";
pub const ROC_FILE: &str = "roc.csv";

/// Which network to build: the full-size one or a width-reduced variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchChoice {
    Default,
    Reduced(usize),
}

impl ArchChoice {
    pub fn build(self) -> Result<ArchitectureSpec> {
        match self {
            ArchChoice::Default => Ok(build_default_arch()),
            ArchChoice::Reduced(scale) => build_reduced_arch(scale),
        }
    }
}

impl fmt::Display for ArchChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchChoice::Default => f.write_str("default"),
            ArchChoice::Reduced(s) => write!(f, "reduced-{s}"),
        }
    }
}

impl FromStr for ArchChoice {
    type Err = String;

    /// `default` or `reduced-<scale>`.
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "default" {
            return Ok(ArchChoice::Default);
        }
        s.strip_prefix("reduced-")
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n > 0)
            .map(ArchChoice::Reduced)
            .ok_or_else(|| format!("unknown architecture {s:?}; expected `default` or `reduced-<scale>`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub total: usize,
    pub side: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            total: 800,
            side: 256,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Writes a synthetic dataset with the usual class imbalance plus
/// split-vote ambiguous variants, assigns splits and saves the manifest.
pub fn generate(out_dir: &Path, cfg: &GenerateConfig) -> Result<Generated> {
    let preset = ImbalancePreset::for_total(cfg.total);
    let profile = SynthProfile::with_side(cfg.side);
    std::fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    let base = build_synth_dataset(out_dir, preset.accept, preset.reject, cfg.seed, &profile)?;
    let full = make_ambiguous_variants(&base, out_dir, preset.ambiguous, cfg.seed, &profile)?;
    let split = split_dataset(&full, cfg.train_fraction, cfg.seed)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    split.manifest.save(&manifest_path)?;
    Ok(Generated {
        manifest_path,
        manifest: split.manifest,
        warnings: split.warnings,
    })
}

/// Settings recorded next to a trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub arch: ArchChoice,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model_path: PathBuf,
    pub history: TrainHistory,
}

/// Trains on the manifest's train split. Per-epoch checkpoints and
/// `history.jsonl` go to `out_dir`, and the final parameters are also
/// written to `out_dir/model.fqc`.
pub fn train_model(manifest_path: &Path, out_dir: &Path, run: &TrainRunConfig) -> Result<Trained> {
    let arch = run.arch.build()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let data = LabeledImages::<f32>::load_split(&manifest, manifest_path, arch.input.height, Split::Train)?;
    let outcome = train(&arch, &data, &run.train, Some(out_dir))?;
    let meta = CheckpointMeta {
        seed: Some(run.train.seed),
        epoch: Some(run.train.epochs),
        created_at: None,
    };
    let model_path = out_dir.join(MODEL_FILE);
    let bytes = encode_checkpoint(&outcome.params, &arch, &meta)?;
    std::fs::write(&model_path, bytes).map_err(|e| io_error(&model_path, e))?;
    let cfg_path = out_dir.join(TRAIN_CONFIG_FILE);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(run)? + "\n").map_err(|e| io_error(&cfg_path, e))?;
    Ok(Trained {
        model_path,
        history: outcome.history,
    })
}

/// Per-image test-split scores alongside the report built from them.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub report: EvalReport,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Scores every test-split image and builds the evaluation report.
pub fn evaluate(manifest_path: &Path, model_path: &Path, thresholds: &BandThresholds) -> Result<Evaluated> {
    let (params, arch, _) = load_checkpoint::<f32>(model_path)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let data = LabeledImages::<f32>::load_split(&manifest, manifest_path, arch.input.height, Split::Test)?;
    if data.is_empty() {
        return Err(Error::Input("test split is empty".into()));
    }
    let scores = score_all(&arch, &params, &data)?;
    let report = eval_report(&scores, &data.categories, thresholds)?;
    Ok(Evaluated {
        report,
        ids: data.ids,
        scores,
    })
}

/// Writes the report as pretty JSON and its ROC points as CSV.
pub fn write_report(report: &EvalReport, json_path: &Path, roc_path: Option<&Path>) -> Result<()> {
    std::fs::write(json_path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| io_error(json_path, e))?;
    if let Some(p) = roc_path {
        std::fs::write(p, report.roc_csv()).map_err(|e| io_error(p, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub generate: GenerateConfig,
    pub run: TrainRunConfig,
    pub thresholds: BandThresholds,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest_path: PathBuf,
    pub model_path: PathBuf,
    pub report_path: PathBuf,
    pub history: TrainHistory,
    pub evaluated: Evaluated,
}

/// generate → train → eval under `root`, laid out as `root/data`,
/// `root/train` and `root/report.json`.
pub fn run_pipeline(root: &Path, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let generated = generate(&root.join("data"), &cfg.generate)?;
    let trained = train_model(&generated.manifest_path, &root.join("train"), &cfg.run)?;
    let evaluated = evaluate(&generated.manifest_path, &trained.model_path, &cfg.thresholds)?;
    let report_path = root.join(REPORT_FILE);
    write_report(&evaluated.report, &report_path, Some(&root.join(ROC_FILE)))?;
    Ok(PipelineOutput {
        manifest_path: generated.manifest_path,
        model_path: trained.model_path,
        report_path,
        history: trained.history,
        evaluated,
    })
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
