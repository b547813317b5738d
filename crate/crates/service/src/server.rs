//! HTTP API.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use fqc_core::dataset::{consensus, resolve_image_path, GradeStore, REQUIRED_GRADERS};
use fqc_core::{BandThresholds, BinaryClass, Consensus, DatasetManifest, Error, GradeRecord};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::pipeline::{io_error, MANIFEST_FILE, REPORT_FILE};
use crate::registry::{LoadedModel, Registry, RegistryEntry};
use crate::score::{score_image, MediaKind, RecapturePolicy, ScoreResponse};

pub const GRADES_FILE: &str = "grades.jsonl";
const MAX_UPLOAD_BYTES: usize = 64 << 20;

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub data_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub thresholds: BandThresholds,
    pub recapture: RecapturePolicy,
    pub required_graders: usize,
}

impl AppConfig {
    /// Defaults rooted at `data_dir`: `manifest.json`, `grades.jsonl`,
    /// `models/` and `report.json` all live there.
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        Self {
            manifest_path: data_dir.join(MANIFEST_FILE),
            data_dir,
            thresholds: BandThresholds::default(),
            recapture: RecapturePolicy::default(),
            required_graders: REQUIRED_GRADERS,
        }
    }
}

/// Shared server state. The manifest is fixed at startup; grades live in
/// the append-only store and are replayed on every read.
pub struct AppState {
    config: AppConfig,
    manifest: DatasetManifest,
    store: GradeStore,
    registry: Registry,
    /// Serializes store appends and activations.
    write_lock: Mutex<()>,
    active: RwLock<Option<Arc<LoadedModel>>>,
    verdicts: Mutex<HashMap<(String, String), ScoreResponse>>,
}

impl AppState {
    /// Loads the manifest (an absent one means no images) and the
    /// previously activated model, if any.
    pub fn open(config: AppConfig) -> ServiceResult<Self> {
        config.thresholds.validate()?;
        let manifest = if config.manifest_path.exists() {
            DatasetManifest::load(&config.manifest_path)?
        } else {
            DatasetManifest::default()
        };
        let registry = Registry::new(&config.data_dir);
        let active = match registry.active_id()? {
            Some(id) => {
                let entry = registry
                    .entry(&id)?
                    .ok_or_else(|| ServiceError::NotFound(format!("active model {id} is not registered")))?;
                Some(Arc::new(registry.load(&entry)?))
            }
            None => None,
        };
        Ok(Self {
            store: GradeStore::new(config.data_dir.join(GRADES_FILE)),
            config,
            manifest,
            registry,
            write_lock: Mutex::new(()),
            active: RwLock::new(active),
            verdicts: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn active(&self) -> Option<Arc<LoadedModel>> {
        self.active.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Swaps in `model` for new requests; requests holding the old `Arc`
    /// finish on it.
    pub fn install(&self, model: LoadedModel) {
        *self.active.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(model));
    }

    /// Loads a registered model, makes it active and records the choice.
    pub fn activate(&self, id: &str) -> ServiceResult<RegistryEntry> {
        let entry = self
            .registry
            .entry(id)?
            .ok_or_else(|| ServiceError::NotFound(format!("model {id}")))?;
        let loaded = self.registry.load(&entry)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        self.registry.set_active(id)?;
        self.install(loaded);
        Ok(entry)
    }

    pub fn score(&self, bytes: &[u8], kind: MediaKind) -> ServiceResult<ScoreResponse> {
        let model = self.active().ok_or(ServiceError::NoActiveModel)?;
        score_image(&model, bytes, kind, &self.config.thresholds, self.config.recapture)
    }

    fn known_image(&self, image_id: &str) -> ServiceResult<&fqc_core::dataset::ManifestEntry> {
        self.manifest
            .entry(image_id)
            .ok_or_else(|| ServiceError::NotFound(format!("image {image_id}")))
    }

    /// Manifest grades followed by store grades for every image.
    fn all_grades(&self) -> ServiceResult<HashMap<String, Vec<GradeRecord>>> {
        let mut map: HashMap<String, Vec<GradeRecord>> = self
            .manifest
            .entries
            .iter()
            .map(|e| (e.image_id.clone(), e.grades.clone()))
            .collect();
        for r in self.store.read_all()? {
            map.entry(r.image_id.clone()).or_default().push(r);
        }
        Ok(map)
    }

    fn grades_for(&self, image_id: &str) -> ServiceResult<Vec<GradeRecord>> {
        let mut grades = self.known_image(image_id)?.grades.clone();
        grades.extend(self.store.read_all()?.into_iter().filter(|r| r.image_id == image_id));
        Ok(grades)
    }

    pub fn consensus_of(&self, image_id: &str) -> ServiceResult<ConsensusResponse> {
        let grades = self.grades_for(image_id)?;
        Ok(ConsensusResponse {
            image_id: image_id.to_string(),
            consensus: consensus(&grades, self.config.required_graders),
            graders: distinct_graders(&grades),
        })
    }

    /// Appends a grade unless it repeats the grader's current label, then
    /// returns the recomputed consensus.
    pub fn record_grade(&self, sub: GradeSubmission) -> ServiceResult<GradeResponse> {
        if sub.grader_id.trim().is_empty() {
            return Err(ServiceError::BadRequest("grader_id must be non-empty".into()));
        }
        self.known_image(&sub.image_id)?;
        let record = GradeRecord {
            image_id: sub.image_id,
            grader_id: sub.grader_id,
            label: sub.label,
            timestamp: sub.timestamp.unwrap_or_else(Utc::now),
        };
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mine: Vec<GradeRecord> = self
            .grades_for(&record.image_id)?
            .into_iter()
            .filter(|r| r.grader_id == record.grader_id)
            .collect();
        let unchanged = consensus(&mine, 1).binary() == Some(record.label);
        let recorded = !unchanged && self.store.append(&record)?;
        let grades = self.grades_for(&record.image_id)?;
        Ok(GradeResponse {
            consensus: consensus(&grades, self.config.required_graders),
            image_id: record.image_id,
            recorded,
        })
    }

    /// Images `grader` has not graded, in manifest order.
    pub fn queue(&self, grader: &str, limit: Option<usize>, with_verdicts: bool) -> ServiceResult<Vec<QueueItem>> {
        if grader.trim().is_empty() {
            return Err(ServiceError::BadRequest("grader must be non-empty".into()));
        }
        let grades = self.all_grades()?;
        let model = if with_verdicts { self.active() } else { None };
        let pending = self
            .manifest
            .entries
            .iter()
            .filter(|e| !grades.get(&e.image_id).is_some_and(|g| g.iter().any(|r| r.grader_id == grader)))
            .take(limit.unwrap_or(usize::MAX));
        Ok(pending
            .map(|e| QueueItem {
                image_url: format!("/api/images/{}", e.image_id),
                verdict: model.as_ref().and_then(|m| self.cached_verdict(m, e)),
                prior_label: None,
                image_id: e.image_id.clone(),
            })
            .collect())
    }

    /// Score for a dataset image under `model`, memoized per model. Images
    /// that cannot be scored get no verdict.
    fn cached_verdict(&self, model: &LoadedModel, e: &fqc_core::dataset::ManifestEntry) -> Option<ScoreResponse> {
        let key = (model.model_id.clone(), e.image_id.clone());
        if let Some(v) = self.verdicts.lock().unwrap_or_else(|p| p.into_inner()).get(&key) {
            return Some(v.clone());
        }
        let path = resolve_image_path(&self.config.manifest_path, e);
        let bytes = std::fs::read(&path).ok()?;
        let v = score_image(
            model,
            &bytes,
            MediaKind::from_extension(&path),
            &self.config.thresholds,
            self.config.recapture,
        )
        .ok()?;
        self.verdicts.lock().unwrap_or_else(|p| p.into_inner()).insert(key, v.clone());
        Some(v)
    }

    pub fn image(&self, image_id: &str) -> ServiceResult<(MediaKind, Vec<u8>)> {
        let e = self.known_image(image_id)?;
        let path = resolve_image_path(&self.config.manifest_path, e);
        let bytes = std::fs::read(&path).map_err(|err| io_error(&path, err))?;
        Ok((MediaKind::from_extension(&path), bytes))
    }

    pub fn models(&self) -> ServiceResult<ModelsResponse> {
        Ok(ModelsResponse {
            active_model_id: self.active().map(|m| m.model_id.clone()),
            models: self.registry.entries()?,
        })
    }

    pub fn report(&self) -> ServiceResult<Vec<u8>> {
        let path = self.config.data_dir.join(REPORT_FILE);
        match std::fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(ServiceError::NotFound("no evaluation report".into()))
            }
            Err(e) => Err(io_error(&path, e).into()),
        }
    }
}

fn distinct_graders(grades: &[GradeRecord]) -> usize {
    let mut ids: Vec<&str> = grades.iter().map(|g| g.grader_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeSubmission {
    pub image_id: String,
    pub grader_id: String,
    pub label: BinaryClass,
    /// Defaults to the time of receipt.
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeResponse {
    pub image_id: String,
    pub consensus: Consensus,
    /// False when the submission repeated the grader's current label.
    pub recorded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResponse {
    pub image_id: String,
    pub consensus: Consensus,
    pub graders: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub image_id: String,
    pub image_url: String,
    /// Present when a model is active and the image could be scored.
    pub verdict: Option<ScoreResponse>,
    pub prior_label: Option<BinaryClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub active_model_id: Option<String>,
    pub models: Vec<RegistryEntry>,
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    grader: String,
    limit: Option<usize>,
    verdicts: Option<bool>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::Core(e) => match e {
                Error::Decode(_) | Error::Input(_) | Error::Config(_) => StatusCode::BAD_REQUEST,
                Error::AllDark { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::NoActiveModel => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::UnsupportedMedia(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let error = match &self {
            ServiceError::Core(Error::AllDark { .. }) => "no fundus field detected".to_string(),
            other => other.to_string(),
        };
        (status, Json(ErrorBody { error })).into_response()
    }
}

/// Runs blocking work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ServiceResult<T> + Send + 'static) -> ServiceResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn post_score(State(s): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ServiceResult<Json<ScoreResponse>> {
    let ct = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok());
    let kind = MediaKind::from_content_type(ct)?;
    blocking(move || s.score(&body, kind)).await.map(Json)
}

async fn get_queue(State(s): State<Arc<AppState>>, Query(q): Query<QueueParams>) -> ServiceResult<Json<Vec<QueueItem>>> {
    blocking(move || s.queue(&q.grader, q.limit, q.verdicts.unwrap_or(true)))
        .await
        .map(Json)
}

async fn get_image(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Response> {
    let (kind, bytes) = blocking(move || s.image(&id)).await?;
    Ok(([(header::CONTENT_TYPE, kind.content_type())], bytes).into_response())
}

async fn post_grade(State(s): State<Arc<AppState>>, Json(sub): Json<GradeSubmission>) -> ServiceResult<Json<GradeResponse>> {
    blocking(move || s.record_grade(sub)).await.map(Json)
}

async fn get_consensus(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ServiceResult<Json<ConsensusResponse>> {
    blocking(move || s.consensus_of(&id)).await.map(Json)
}

async fn get_models(State(s): State<Arc<AppState>>) -> ServiceResult<Json<ModelsResponse>> {
    blocking(move || s.models()).await.map(Json)
}

async fn post_activate(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ServiceResult<Json<RegistryEntry>> {
    blocking(move || s.activate(&id)).await.map(Json)
}

async fn get_report(State(s): State<Arc<AppState>>) -> ServiceResult<Response> {
    let bytes = blocking(move || s.report()).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/score", post(post_score).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)))
        .route("/api/queue", get(get_queue))
        .route("/api/images/{id}", get(get_image))
        .route("/api/grades", post(post_grade))
        .route("/api/consensus/{id}", get(get_consensus))
        .route("/api/models", get(get_models))
        .route("/api/models/{id}/activate", post(post_activate))
        .route("/api/report", get(get_report))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
