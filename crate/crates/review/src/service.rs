//! The HTTP API over the dataset, the model's predictions, explanations and
//! the review store.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use foamqc::data::load_manifest;
use foamqc::explain::{explain, render_overlay, ExplainParams};
use foamqc::model::{defective_probability, load_checkpoint, Classifier, ViewMode};
use foamqc::train::{GridEntry, GridResult, GRID_COLUMNS, GRID_ROWS};
use foamqc::{BinaryLabel, ExampleGroup, RawLabel, ViewKind};
use serde::{Deserialize, Serialize};
use tokio::sync::OnceCell;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::error::{ReviewError, ReviewResult};
use crate::store::{LabelOutcome, ReviewStore};

pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_VAR: &str = "FOAMQC_PORT";
const OVERLAY_TOP_K: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueOrder {
    /// Pending items with P(defective) closest to ½ first.
    #[default]
    Uncertainty,
    Id,
}

impl FromStr for QueueOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uncertainty" => Ok(Self::Uncertainty),
            "id" => Ok(Self::Id),
            _ => Err(format!("unknown queue order `{s}` (uncertainty, id)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Manifest file, or a directory holding `manifest.json`.
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    /// One-view, single-view model for explanations; defaults to
    /// `checkpoint` when that model qualifies.
    pub explain_checkpoint: Option<PathBuf>,
    /// Journal, snapshot and explanation cache.
    pub state_dir: PathBuf,
    /// `grid.json`, or a directory holding it.
    pub runs: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
    /// Hide predictions and explanations until an item is reviewed.
    pub blind: bool,
    pub order: QueueOrder,
    pub explain: ExplainParams,
    pub snapshot_every: u64,
}

impl ServiceConfig {
    pub fn new(data: impl Into<PathBuf>, checkpoint: impl Into<PathBuf>, state_dir: impl Into<PathBuf>) -> Self {
        Self {
            data: data.into(),
            checkpoint: checkpoint.into(),
            explain_checkpoint: None,
            state_dir: state_dir.into(),
            runs: None,
            ui_dir: None,
            blind: false,
            order: QueueOrder::Uncertainty,
            explain: ExplainParams::default(),
            snapshot_every: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Reviewed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: String,
    pub p_defective: Option<f64>,
    pub predicted: Option<BinaryLabel>,
    pub status: Status,
    pub expert_label: Option<RawLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub view: ViewKind,
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRef {
    pub view: ViewKind,
    pub overlay_url: String,
    pub weights_url: String,
    /// Served without computing in this request.
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub images: Vec<ImageRef>,
    pub p_defective: Option<f64>,
    pub predicted: Option<BinaryLabel>,
    pub explanation: Option<ExplanationRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation_error: Option<String>,
    pub status: Status,
    pub expert_label: Option<RawLabel>,
    pub note: String,
    /// Pass back when relabeling; 0 until first reviewed.
    pub revision: u64,
    /// Label from the dataset manifest, if any.
    pub dataset_label: Option<RawLabel>,
}

/// Pending first; then by the configured order, ids breaking ties.
/// Pending items without a probability go last among the pending.
pub fn order_queue(entries: &mut [QueueEntry], order: QueueOrder) {
    let key = |e: &QueueEntry| match (order, e.status, e.p_defective) {
        (QueueOrder::Uncertainty, Status::Pending, Some(p)) => (p - 0.5).abs(),
        (QueueOrder::Uncertainty, Status::Pending, None) => f64::INFINITY,
        _ => 0.0,
    };
    entries.sort_by(|a, b| {
        (a.status == Status::Reviewed)
            .cmp(&(b.status == Status::Reviewed))
            .then(key(a).total_cmp(&key(b)))
            .then_with(|| a.id.cmp(&b.id))
    });
}

pub fn predicted_label(p: f64) -> BinaryLabel {
    if p > 0.5 {
        BinaryLabel::Defective
    } else {
        BinaryLabel::Normal
    }
}

struct Model {
    probabilities: BTreeMap<String, f64>,
    explainer: Option<(Arc<Classifier>, ViewKind)>,
}

type ExplanationCell = Arc<OnceCell<Result<ExplanationRef, String>>>;

pub struct Service {
    cfg: ServiceConfig,
    groups: BTreeMap<String, ExampleGroup>,
    store: Mutex<ReviewStore>,
    model: OnceLock<Model>,
    warm_error: OnceLock<String>,
    explanations: Mutex<HashMap<String, ExplanationCell>>,
}

impl Service {
    /// Loads the dataset and the review store; the model is loaded by
    /// [`Service::warm_up`].
    pub fn open(cfg: ServiceConfig) -> ReviewResult<Arc<Self>> {
        let manifest = if cfg.data.is_dir() { cfg.data.join("manifest.json") } else { cfg.data.clone() };
        let groups = load_manifest(&manifest)?.into_iter().map(|g| (g.id.clone(), g)).collect();
        let store = ReviewStore::open(&cfg.state_dir, cfg.snapshot_every)?;
        Ok(Arc::new(Self {
            cfg,
            groups,
            store: Mutex::new(store),
            model: OnceLock::new(),
            warm_error: OnceLock::new(),
            explanations: Mutex::new(HashMap::new()),
        }))
    }

    /// Loads the checkpoint(s) and predicts every group. Blocking.
    pub fn warm_up(&self) -> ReviewResult<()> {
        let result = self.load_model();
        match result {
            Ok(m) => {
                let _ = self.model.set(m);
                log::info!("model ready: {} predictions", self.groups.len());
                Ok(())
            }
            Err(e) => {
                let _ = self.warm_error.set(e.to_string());
                Err(e)
            }
        }
    }

    fn load_model(&self) -> ReviewResult<Model> {
        let (clf, _) = load_checkpoint(&self.cfg.checkpoint, None)?;
        let mut probabilities = BTreeMap::new();
        for (id, g) in &self.groups {
            match clf.classify_group(g) {
                Ok(l) => {
                    probabilities.insert(id.clone(), defective_probability(l));
                }
                Err(e) => log::warn!("no prediction for {id}: {e}"),
            }
        }
        let clf = Arc::new(clf);
        let explainer_clf = match &self.cfg.explain_checkpoint {
            Some(p) => Arc::new(load_checkpoint(p, None)?.0),
            None => clf,
        };
        let explainer = (explainer_clf.config.mode == ViewMode::OneView && explainer_clf.config.views.len() == 1).then(|| {
            let v = explainer_clf.config.views[0];
            (explainer_clf, v)
        });
        if explainer.is_none() {
            log::info!("model is not one-view single-view; explanations disabled");
        }
        Ok(Model { probabilities, explainer })
    }

    pub fn is_ready(&self) -> bool {
        self.model.get().is_some()
    }

    fn probability(&self, id: &str) -> Option<f64> {
        self.model.get().and_then(|m| m.probabilities.get(id).copied())
    }

    /// `None` until warm-up completes.
    pub fn queue(&self) -> Option<Vec<QueueEntry>> {
        let model = self.model.get()?;
        let store = self.store.lock().expect("store lock");
        let mut entries: Vec<QueueEntry> = self
            .groups
            .keys()
            .map(|id| {
                let review = store.state().reviews.get(id);
                let visible = !self.cfg.blind || review.is_some();
                let p = model.probabilities.get(id).copied().filter(|_| visible);
                QueueEntry {
                    id: id.clone(),
                    p_defective: p,
                    predicted: p.map(predicted_label),
                    status: if review.is_some() { Status::Reviewed } else { Status::Pending },
                    expert_label: review.map(|r| r.expert_label),
                }
            })
            .collect();
        drop(store);
        // Blind review must not leak predictions through the ordering.
        let order = if self.cfg.blind { QueueOrder::Id } else { self.cfg.order };
        order_queue(&mut entries, order);
        Some(entries)
    }

    fn item(&self, id: &str, explanation: Option<Result<ExplanationRef, String>>) -> ReviewResult<ReviewItem> {
        let g = self.groups.get(id).ok_or_else(|| ReviewError::UnknownGroup(id.to_string()))?;
        let store = self.store.lock().expect("store lock");
        let review = store.state().reviews.get(id).cloned();
        let revision = store.state().revision(id);
        drop(store);
        let visible = !self.cfg.blind || review.is_some();
        let p = self.probability(id).filter(|_| visible);
        let (explanation, explanation_error) = match explanation.filter(|_| visible) {
            Some(Ok(e)) => (Some(e), None),
            Some(Err(e)) => (None, Some(e)),
            None => (None, None),
        };
        Ok(ReviewItem {
            id: id.to_string(),
            images: ViewKind::ALL
                .iter()
                .map(|&v| ImageRef {
                    view: v,
                    url: format!("/api/images/{id}/{v}.png"),
                })
                .collect(),
            p_defective: p,
            predicted: p.map(predicted_label),
            explanation,
            explanation_error,
            status: if review.is_some() { Status::Reviewed } else { Status::Pending },
            expert_label: review.as_ref().map(|r| r.expert_label),
            note: review.map(|r| r.note).unwrap_or_default(),
            revision,
            dataset_label: g.raw_label,
        })
    }

    pub fn label(&self, id: &str, label: RawLabel, note: &str, revision: Option<u64>) -> ReviewResult<LabelOutcome> {
        if !self.groups.contains_key(id) {
            return Err(ReviewError::UnknownGroup(id.to_string()));
        }
        let prior = self.probability(id);
        self.store.lock().expect("store lock").label(id, label, note, revision, prior)
    }

    fn cache_dir(&self, id: &str) -> Option<PathBuf> {
        // Ids come from the manifest; only plain ones map to cache paths.
        let plain = !id.is_empty() && id != "." && id != ".." && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        plain.then(|| self.cfg.state_dir.join("explanations").join(id))
    }

    /// Explanation for a group, computed once (single-flight) and cached on
    /// disk. `None` when the model cannot be explained.
    async fn explanation(self: &Arc<Self>, id: &str) -> Option<Result<ExplanationRef, String>> {
        let (clf, view) = self.model.get()?.explainer.clone()?;
        let cell = self.explanations.lock().expect("cache lock").entry(id.to_string()).or_default().clone();
        let ran = AtomicBool::new(false);
        let result = cell
            .get_or_init(|| {
                ran.store(true, Ordering::Relaxed);
                let svc = Arc::clone(self);
                let id = id.to_string();
                async move {
                    tokio::task::spawn_blocking(move || svc.compute_explanation(&id, &clf, view).map_err(|e| e.to_string()))
                        .await
                        .map_err(|e| e.to_string())
                        .and_then(|r| r)
                }
            })
            .await
            .clone();
        match result {
            Ok(mut r) => {
                r.cached |= !ran.load(Ordering::Relaxed);
                Some(Ok(r))
            }
            Err(e) => {
                // Let a later request retry.
                self.explanations.lock().expect("cache lock").remove(id);
                Some(Err(e))
            }
        }
    }

    fn compute_explanation(&self, id: &str, clf: &Classifier, view: ViewKind) -> ReviewResult<ExplanationRef> {
        let dir = self
            .cache_dir(id)
            .ok_or_else(|| foamqc::Error::Validation(format!("group id `{id}` cannot name a cache directory")))?;
        let overlay = dir.join(format!("{view}.png"));
        let weights = dir.join(format!("{view}.json"));
        let r = ExplanationRef {
            view,
            overlay_url: format!("/api/explanations/{id}/{view}.png"),
            weights_url: format!("/api/explanations/{id}/{view}.json"),
            cached: true,
        };
        if overlay.exists() && weights.exists() {
            return Ok(r);
        }
        let g = &self.groups[id];
        let img = g.image(view)?;
        let expl = explain(clf, img, &self.cfg.explain)?;
        let rgb = render_overlay(img, &expl, OVERLAY_TOP_K);
        let mut png = std::io::Cursor::new(Vec::new());
        rgb.write_to(&mut png, image::ImageFormat::Png)
            .map_err(|e| ReviewError::Core(foamqc::Error::Validation(format!("encoding overlay: {e}"))))?;
        foamqc::write_atomic(&weights, serde_json::to_string_pretty(&expl.weights_json())?.as_bytes())?;
        foamqc::write_atomic(&overlay, &png.into_inner())?;
        Ok(ExplanationRef { cached: false, ..r })
    }

    fn grid(&self) -> Option<GridResult> {
        let p = self.cfg.runs.as_ref()?;
        let p = if p.is_dir() { p.join("grid.json") } else { p.clone() };
        let bytes = std::fs::read(&p).ok()?;
        match serde_json::from_slice::<GridResult>(&bytes) {
            Ok(g) if g.cells.iter().any(|c| c.report.is_some()) => Some(g),
            Ok(_) => None,
            Err(e) => {
                log::warn!("{}: {e}", p.display());
                None
            }
        }
    }

    /// Dataset counts by review status and by effective label (expert
    /// label, else the manifest's, else unlabeled).
    pub fn counts(&self) -> Counts {
        let store = self.store.lock().expect("store lock");
        let mut c = Counts {
            total: self.groups.len(),
            ..Default::default()
        };
        for (id, g) in &self.groups {
            let review = store.state().reviews.get(id);
            *c.status.entry(if review.is_some() { "reviewed" } else { "pending" }.into()).or_default() += 1;
            let label = review.map(|r| r.expert_label).or(g.raw_label).map_or("unlabeled", |l| l.as_str());
            *c.label.entry(label.into()).or_default() += 1;
        }
        for s in ["pending", "reviewed"] {
            c.status.entry(s.into()).or_default();
        }
        for l in RawLabel::ALL.iter().map(|l| l.as_str()).chain(["unlabeled"]) {
            c.label.entry(l.into()).or_default();
        }
        c
    }

    pub fn router(self: Arc<Self>) -> Router {
        let mut r = Router::new()
            .route("/api/health", get(health))
            .route("/api/queue", get(queue))
            .route("/api/groups/{id}", get(group))
            .route("/api/groups/{id}/label", post(label))
            .route("/api/metrics", get(metrics))
            .route("/api/images/{group}/{file}", get(image_file))
            .route("/api/explanations/{group}/{file}", get(explanation_file));
        if let Some(ui) = &self.cfg.ui_dir {
            r = r.fallback_service(ServeDir::new(ui));
        }
        r.layer(CorsLayer::permissive()).with_state(self)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub status: BTreeMap<String, usize>,
    pub label: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub accuracy: Vec<Vec<GridEntry>>,
    pub auc: Vec<Vec<GridEntry>>,
    pub counts: Counts,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::UnknownGroup(_) => StatusCode::NOT_FOUND,
            ReviewError::InvalidLabel(_) => StatusCode::BAD_REQUEST,
            ReviewError::Conflict { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn not_ready(svc: &Service) -> ApiError {
    let msg = svc.warm_error.get().map_or("model warming up".to_string(), |e| format!("model failed to load: {e}"));
    ApiError(StatusCode::SERVICE_UNAVAILABLE, msg)
}

async fn health(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "ready": svc.is_ready(), "error": svc.warm_error.get() }))
}

async fn queue(State(svc): State<Arc<Service>>) -> Result<Json<Vec<QueueEntry>>, ApiError> {
    svc.queue().map(Json).ok_or_else(|| not_ready(&svc))
}

async fn group(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Json<ReviewItem>, ApiError> {
    if !svc.groups.contains_key(&id) {
        return Err(ReviewError::UnknownGroup(id).into());
    }
    if !svc.is_ready() {
        return Err(not_ready(&svc));
    }
    let hidden = svc.cfg.blind && !svc.store.lock().expect("store lock").state().reviews.contains_key(&id);
    let expl = if hidden { None } else { svc.explanation(&id).await };
    Ok(Json(svc.item(&id, expl)?))
}

#[derive(Deserialize)]
struct LabelRequest {
    expert_label: String,
    #[serde(default)]
    note: String,
    #[serde(default)]
    revision: Option<u64>,
}

async fn label(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<ReviewItem>, ApiError> {
    let req: LabelRequest = serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("bad request body: {e}")))?;
    let label = RawLabel::from_str(&req.expert_label).map_err(|_| ReviewError::InvalidLabel(req.expert_label.clone()))?;
    svc.label(&id, label, &req.note, req.revision)?;
    // Attach an explanation only if it is already available.
    let expl = svc
        .explanations
        .lock()
        .expect("cache lock")
        .get(&id)
        .and_then(|c| c.get().cloned())
        .map(|r| r.map(|e| ExplanationRef { cached: true, ..e }));
    Ok(Json(svc.item(&id, expl)?))
}

async fn metrics(State(svc): State<Arc<Service>>) -> Response {
    let Some(grid) = svc.grid() else {
        return StatusCode::NO_CONTENT.into_response();
    };
    Json(Metrics {
        rows: GRID_ROWS.iter().map(|s| s.to_string()).collect(),
        columns: GRID_COLUMNS.iter().map(|s| s.to_string()).collect(),
        accuracy: grid.table(|r| Some(r.accuracy_at_min_loss)),
        auc: grid.table(|r| r.auc),
        counts: svc.counts(),
    })
    .into_response()
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn image_file(State(svc): State<Arc<Service>>, UrlPath((id, file)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let nf = || ApiError(StatusCode::NOT_FOUND, format!("no image {id}/{file}"));
    let view = file.strip_suffix(".png").and_then(|v| ViewKind::from_str(v).ok()).ok_or_else(nf)?;
    let img = svc.groups.get(&id).and_then(|g| g.images.get(&view)).ok_or_else(nf)?;
    Ok(png(img.to_png_bytes()))
}

async fn explanation_file(State(svc): State<Arc<Service>>, UrlPath((id, file)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let nf = || ApiError(StatusCode::NOT_FOUND, format!("no explanation {id}/{file}"));
    let (stem, ext) = file.rsplit_once('.').ok_or_else(nf)?;
    let view = ViewKind::from_str(stem).map_err(|_| nf())?;
    if !svc.groups.contains_key(&id) || !matches!(ext, "png" | "json") {
        return Err(nf());
    }
    let hidden = svc.cfg.blind && !svc.store.lock().expect("store lock").state().reviews.contains_key(&id);
    if hidden {
        return Err(nf());
    }
    let path = svc.cache_dir(&id).ok_or_else(nf)?.join(format!("{view}.{ext}"));
    let bytes = tokio::fs::read(&path).await.map_err(|_| nf())?;
    Ok(if ext == "png" {
        png(bytes)
    } else {
        ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
    })
}

/// Port from `FOAMQC_PORT`, else the default.
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var(PORT_VAR) {
        Ok(v) => v.parse().map_err(|_| format!("{PORT_VAR}={v} is not a port number")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

/// Opens the service, warms the model up in the background and serves
/// until interrupted.
pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> ReviewResult<()> {
    let svc = Service::open(cfg)?;
    let warm = Arc::clone(&svc);
    tokio::task::spawn_blocking(move || {
        if let Err(e) = warm.warm_up() {
            log::error!("warm-up failed: {e}");
        }
    });
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ReviewError::io(Path::new(&addr.to_string()), e))?;
    log::info!("listening on http://{}", listener.local_addr().map_err(|e| ReviewError::io(Path::new("socket"), e))?);
    axum::serve(listener, svc.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ReviewError::io(Path::new("server"), e))
}
