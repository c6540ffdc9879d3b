//! JSON-over-HTTP endpoints.

use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use caravan_core::domain::{ArtifactId, FeatureFamily, Seed, Timestamp};
use caravan_core::engine::{Engine, StageRequest};
use caravan_core::model::{self, load_model_artifact};
use caravan_core::queue::Stage;
use caravan_core::registry::PluginStage;
use caravan_core::store::ArtifactStore;
use caravan_core::{Error, FieldError};

const DEFAULT_PAGE: usize = 50;
const MAX_UPLOAD: usize = 64 * 1024 * 1024;

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Option<Vec<FieldError>>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
            details: None,
        }
    }
}

fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::Conflict(_) | Error::LeaseLost(_) | Error::Cancelled => StatusCode::CONFLICT,
        Error::InvalidArgument(_)
        | Error::Validation(_)
        | Error::Parse(_)
        | Error::MissingInput(_)
        | Error::Unsupported(_)
        | Error::EmptySelection
        | Error::IncompleteFeatures(_)
        | Error::EmptyGroup(_)
        | Error::EmptyTarget(_) => StatusCode::BAD_REQUEST,
        Error::Integrity(_) | Error::Diverged(_) | Error::Fetch(_) | Error::TaskFailed(..) | Error::Io(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let mut out = ApiError::new(status_of(&e), e.code(), e.to_string());
        out.details = match e {
            Error::Validation(errs) => Some(errs),
            Error::IncompleteFeatures(ids) => Some(
                ids.into_iter()
                    .map(|id| FieldError::new(id, "features incomplete"))
                    .collect(),
            ),
            _ => None,
        };
        out
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Runs store and queue work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> caravan_core::Result<T> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
    }
}

fn parse_json(body: &[u8]) -> ApiResult<Value> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "parse-error", e.to_string()))
}

fn artifact_id(raw: &str) -> ApiResult<ArtifactId> {
    raw.parse().map_err(ApiError::from)
}

pub fn router(engine: Engine) -> Router {
    Router::new()
        .route("/api/packages", post(upload_package).get(list_packages))
        .route("/api/packages/{id}", get(package_detail))
        .route("/api/packages/{id}/votes", post(vote))
        .route("/api/stages/{stage}", post(launch_stage))
        .route("/api/tasks", get(task_snapshot))
        .route("/api/tasks/{id}", get(task_detail))
        .route("/api/tasks/{id}/cancel", post(cancel_task))
        .route("/api/plugins", get(list_plugins))
        .route("/api/plugins/{stage}/{id}/schema", get(plugin_schema))
        .route("/api/datasets", get(list_datasets))
        .route("/api/models", get(list_models))
        .route("/api/models/{id}/evaluation", get(model_evaluation))
        .route("/api/models/{id}/prediction-view", get(model_prediction_view))
        .route("/api/artifacts/{id}/provenance", get(provenance))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such endpoint") })
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(engine)
}

async fn upload_package(State(engine): State<Engine>, mut form: Multipart) -> ApiResult<Response> {
    let mut file: Option<Bytes> = None;
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::new(StatusCode::BAD_REQUEST, "parse-error", e.to_string());
    while let Some(field) = form.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        if name == "file" {
            file = Some(field.bytes().await.map_err(bad)?);
        } else {
            fields.insert(name, field.text().await.map_err(bad)?);
        }
    }
    let mut errors = Vec::new();
    if file.is_none() {
        errors.push(FieldError::new("file", "required"));
    }
    let master_seed = match fields.get("master_seed") {
        None => Seed(0),
        Some(s) => s.trim().parse().map(Seed).unwrap_or_else(|_| {
            errors.push(FieldError::new("master_seed", "not an unsigned integer"));
            Seed(0)
        }),
    };
    if let Some(unknown) = fields.keys().find(|k| !["category", "uploader", "master_seed"].contains(&k.as_str())) {
        errors.push(FieldError::new(unknown.clone(), "unknown field"));
    }
    if !errors.is_empty() {
        return Err(Error::Validation(errors).into());
    }
    let file = file.expect("checked above");
    let category = fields.get("category").cloned().filter(|c| !c.trim().is_empty());
    let uploader = fields.get("uploader").cloned().unwrap_or_else(|| "anonymous".into());
    let (package_id, task_id) =
        blocking(move || engine.upload(&file, category.as_deref(), &uploader, master_seed)).await?;
    Ok((StatusCode::CREATED, Json(json!({"package_id": package_id, "task_id": task_id}))).into_response())
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn list_packages(State(engine): State<Engine>, Query(q): Query<PageQuery>) -> ApiResult<Json<Value>> {
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 {
        return Err(Error::Validation(vec![FieldError::new("limit", "must be positive")]).into());
    }
    blocking(move || {
        let records = engine.collector().package_records()?;
        let total = records.len();
        let items: Vec<_> = records.into_iter().skip(offset).take(limit).collect();
        Ok(Json(json!({"items": items, "total": total, "offset": offset, "limit": limit})))
    })
    .await
}

async fn package_detail(State(engine): State<Engine>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let id = artifact_id(&id)?;
    blocking(move || {
        let collector = engine.collector();
        let record = collector.package_record(&id)?;
        let features = collector.featureset(&id)?;
        let status: BTreeMap<&str, Value> = FeatureFamily::ALL
            .iter()
            .map(|f| {
                let done = features.completed_families.contains(f);
                let tokens = features.extracted.get(f).map(Vec::len).unwrap_or(0);
                (f.name(), json!({"completed": done, "tokens": tokens}))
            })
            .collect();
        Ok(Json(json!({
            "record": record,
            "featureset_id": collector.featureset_id(&id),
            "features": status,
            "votes": collector.votes(&id)?,
            "resolved_label": collector.resolved_label(&id)?,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VoteBody {
    category: String,
    voter: String,
}

async fn vote(State(engine): State<Engine>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let id = artifact_id(&id)?;
    let body: VoteBody = caravan_core::engine::from_value(parse_json(&body)?)?;
    blocking(move || {
        let label = engine.collector().cast_vote(&id, &body.category, &body.voter)?;
        Ok(Json(json!({ "resolved_label": label })))
    })
    .await
}

const LAUNCHABLE: [Stage; 6] = [
    Stage::Crawl,
    Stage::Select,
    Stage::Merge,
    Stage::Preprocess,
    Stage::Train,
    Stage::Evaluate,
];

async fn launch_stage(State(engine): State<Engine>, Path(stage): Path<String>, body: Bytes) -> ApiResult<Response> {
    let stage = stage
        .parse::<Stage>()
        .ok()
        .filter(|s| LAUNCHABLE.contains(s))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not-found", format!("no launchable stage {stage:?}")))?;
    let request = StageRequest::parse(stage, parse_json(&body)?)?;
    let task_id = blocking(move || engine.submit(&request)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "task_id": task_id }))).into_response())
}

async fn task_snapshot(State(engine): State<Engine>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let queue = engine.queue();
        let snapshot = queue.snapshot();
        let tasks: Vec<Value> = queue
            .tasks()
            .into_iter()
            .map(|t| {
                json!({
                    "task_id": t.spec.task_id,
                    "stage": t.spec.stage,
                    "status": t.state.status,
                    "attempt": t.state.attempt,
                    "submitted_at": t.spec.submitted_at,
                    "units_total": t.spec.units.len(),
                    "units_done": t.state.completed_units.len(),
                })
            })
            .collect();
        Ok(Json(json!({
            "counts": snapshot.counts,
            "workers": snapshot.workers,
            "recent": snapshot.recent,
            "tasks": tasks,
        })))
    })
    .await
}

async fn task_detail(State(engine): State<Engine>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(serde_json::to_value(engine.queue().get(&id)?)?))).await
}

async fn cancel_task(State(engine): State<Engine>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        engine.queue().cancel(&id, engine.clock().now())?;
        Ok(Json(serde_json::to_value(engine.queue().get(&id)?)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct PluginQuery {
    stage: Option<String>,
    algorithm_class: Option<String>,
}

async fn list_plugins(State(engine): State<Engine>, Query(q): Query<PluginQuery>) -> ApiResult<Json<Value>> {
    let stage = q.stage.as_deref().map(PluginStage::parse).transpose()?;
    let plugins = engine.registry().list_plugins(stage, q.algorithm_class.as_deref());
    Ok(Json(serde_json::to_value(plugins).map_err(Error::from)?))
}

async fn plugin_schema(State(engine): State<Engine>, Path((stage, id)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let stage = PluginStage::parse(&stage).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "not-found", e.to_string()))?;
    let descriptor = engine.registry().descriptor(stage, &id)?;
    Ok(Json(serde_json::to_value(descriptor).map_err(Error::from)?))
}

fn created_at(store: &ArtifactStore, id: &ArtifactId) -> Option<Timestamp> {
    store.summary(id).ok().map(|s| s.created_at)
}

async fn list_datasets(State(engine): State<Engine>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let store = engine.store();
        let mut items = Vec::new();
        for (kind, prefix) in [
            ("selected", "dataset/selected/"),
            ("merged", "dataset/merged/"),
            ("processed", "dataset/processed/"),
        ] {
            for (key, value) in store.refs_with_prefix(prefix) {
                let Some(id) = value.as_str().and_then(|s| s.parse::<ArtifactId>().ok()) else {
                    continue;
                };
                items.push(json!({
                    "name": key,
                    "kind": kind,
                    "artifact_id": id,
                    "created_at": created_at(store, &id),
                }));
            }
        }
        Ok(Json(json!({ "items": items, "total": items.len() })))
    })
    .await
}

async fn list_models(State(engine): State<Engine>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let store = engine.store();
        let mut items = Vec::new();
        for (key, value) in store.refs_with_prefix("model/") {
            let Some(id) = value.as_str().and_then(|s| s.parse::<ArtifactId>().ok()) else {
                continue;
            };
            let meta = load_model_artifact(store, &id)?.meta;
            items.push(json!({
                "name": key,
                "model_id": id,
                "algorithm_class": meta.algorithm_class,
                "algorithm_id": meta.algorithm_id,
                "processed_dataset": meta.processed_dataset,
                "latent_dim": meta.latent_dim,
                "classes": meta.classes,
                "evaluated": model::load_evaluation(store, &id).is_ok(),
                "created_at": created_at(store, &id),
            }));
        }
        Ok(Json(json!({ "items": items, "total": items.len() })))
    })
    .await
}

async fn model_evaluation(State(engine): State<Engine>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let id = artifact_id(&id)?;
    blocking(move || Ok(Json(serde_json::to_value(model::load_evaluation(engine.store(), &id)?)?))).await
}

#[derive(Debug, Deserialize)]
struct ViewQuery {
    dims: Option<usize>,
    focal: Option<String>,
    k: Option<usize>,
    show_incorrect: Option<bool>,
}

async fn model_prediction_view(
    State(engine): State<Engine>,
    Path(id): Path<String>,
    Query(q): Query<ViewQuery>,
) -> ApiResult<Json<Value>> {
    let id = artifact_id(&id)?;
    let focal = q.focal.as_deref().filter(|f| !f.is_empty()).map(artifact_id).transpose()?;
    blocking(move || {
        let view = model::prediction_view(
            engine.store(),
            &id,
            q.dims.unwrap_or(2),
            focal.as_ref(),
            q.k.unwrap_or(5),
            q.show_incorrect.unwrap_or(true),
        )?;
        Ok(Json(serde_json::to_value(view)?))
    })
    .await
}

/// Lineage of an artifact as JSON, oldest record first.
pub fn provenance_json(store: &ArtifactStore, id: &ArtifactId) -> caravan_core::Result<Value> {
    Ok(json!({ "artifact": id, "lineage": store.lineage(id)? }))
}

fn wants_xml(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("application/xml") || v.contains("text/xml"))
}

async fn provenance(State(engine): State<Engine>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    let id = artifact_id(&id)?;
    let xml = wants_xml(&headers);
    blocking(move || {
        let store = engine.store();
        if xml {
            let doc = store.export_provenance_xml(&id)?;
            Ok(([(header::CONTENT_TYPE, "application/xml")], doc).into_response())
        } else {
            Ok(Json(provenance_json(store, &id)?).into_response())
        }
    })
    .await
}
