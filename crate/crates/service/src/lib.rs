//! Command-line pipeline and HTTP service for fundus image quality triage.
//!
//! Data directory layout (`FQC_DATA_DIR`): `manifest.json` with its images,
//! the append-only `grades.jsonl`, `models/` for the registry and
//! `report.json` for the latest evaluation.

pub mod cli;
pub mod error;
pub mod pipeline;
pub mod registry;
pub mod score;
pub mod server;

pub use error::{ServiceError, ServiceResult};
pub use registry::{LoadedModel, Registry, RegistryEntry};
pub use score::{RecapturePolicy, ScoreResponse};
pub use server::{router, AppConfig, AppState};
