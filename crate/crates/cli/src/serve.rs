//! HTTP API over a run directory, used by the refinement UI.
//!
//! Labels exchanged here are the per-frame clustering labels that
//! corrections are expressed in, not the propagated global labels.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, PathRejection};
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cortrack::clustering::CorrectionSet;
use cortrack::evaluation::TrackingMetrics;
use cortrack::io::{self, CorrectionsDoc, PlaneDoc};
use cortrack::model::to_plane_coords;
use cortrack::pipeline::{files, RunState};
use cortrack::{Error, NucleusId};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn not_found(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", detail)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    detail: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.error,
            detail: &self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = e.to_string();
        match e {
            Error::InvalidLabel { .. }
            | Error::UnknownNucleus { .. }
            | Error::Schema(_)
            | Error::Parse { .. }
            | Error::DegenerateInput(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", detail),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let status = r.status();
        let kind = if status == StatusCode::UNPROCESSABLE_ENTITY {
            "validation"
        } else {
            "bad_request"
        };
        Self::new(status, kind, r.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(r: PathRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct Inner {
    run: RunState,
    metrics: Option<TrackingMetrics>,
}

/// Shared server state. Reads take the lock shared; correction writes and
/// reruns take it exclusively, so writes are serialized.
#[derive(Clone)]
pub struct AppState(Arc<RwLock<Inner>>);

impl AppState {
    pub fn load(dir: &Path) -> cortrack::Result<Self> {
        let run = RunState::load(dir)?;
        let metrics_path = dir.join(files::METRICS);
        let metrics = metrics_path
            .exists()
            .then(|| io::read_json(&metrics_path))
            .transpose()?;
        Ok(Self(Arc::new(RwLock::new(Inner { run, metrics }))))
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.0.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.0.write().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame: usize,
    pub nuclei: usize,
    pub mitotic: usize,
    pub fitness: f64,
    pub corrections: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FramesResponse {
    pub count: usize,
    pub time_interval_min: Option<f64>,
    pub frames: Vec<FrameSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub u: f64,
    pub v: f64,
    pub label: u8,
    pub phase: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProjectionResponse {
    pub frame: usize,
    pub points: Vec<ProjectedPoint>,
    pub plane: PlaneDoc,
    pub fitness: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: String,
    pub label: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsRequest {
    pub entries: Vec<LabelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RerunResponse {
    pub links: usize,
    pub divisions: usize,
    pub reconciliation_errors: usize,
    pub diagnostics: usize,
    pub metrics: Option<TrackingMetrics>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/frames", get(frames))
        .route("/api/frames/{t}/projection", get(projection))
        .route("/api/frames/{t}/labels", post(post_labels))
        .route("/api/corrections", get(get_corrections).put(put_corrections))
        .route("/api/rerun", post(rerun))
        .route("/api/metrics", get(metrics))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

async fn frames(State(s): State<AppState>) -> Json<FramesResponse> {
    let g = s.read();
    let ds = &g.run.dataset;
    let frames = ds
        .frames
        .iter()
        .zip(&g.run.planes)
        .map(|(f, p)| FrameSummary {
            frame: f.frame_index,
            nuclei: f.len(),
            mitotic: f.nuclei.iter().filter(|n| n.phase.is_mitotic()).count(),
            fitness: p.fitness,
            corrections: g.run.corrections.for_frame(f.frame_index).count(),
        })
        .collect();
    Json(FramesResponse {
        count: ds.num_frames(),
        time_interval_min: ds.frames.first().map(|f| f.time_interval_min),
        frames,
    })
}

fn frame_index(t: Result<UrlPath<usize>, PathRejection>, n: usize) -> ApiResult<usize> {
    let UrlPath(t) = t?;
    if t >= n {
        return Err(ApiError::not_found(format!("frame {t} out of range 0..{n}")));
    }
    Ok(t)
}

async fn projection(
    State(s): State<AppState>,
    t: Result<UrlPath<usize>, PathRejection>,
) -> ApiResult<Json<ProjectionResponse>> {
    let g = s.read();
    let t = frame_index(t, g.run.dataset.num_frames())?;
    let frame = &g.run.dataset.frames[t];
    let plane = g.run.planes[t].plane;
    let labels = g.run.corrected_frame(t)?;
    let coords = to_plane_coords(&frame.positions(), &plane);
    let points = frame
        .nuclei
        .iter()
        .zip(coords)
        .map(|(n, c)| {
            Ok(ProjectedPoint {
                id: n.id.0.clone(),
                u: c.x,
                v: c.y,
                label: labels.label_of(&n.id).ok_or_else(|| Error::UnknownNucleus {
                    frame: t,
                    id: n.id.clone(),
                })?,
                phase: n.phase.as_str().to_owned(),
            })
        })
        .collect::<cortrack::Result<_>>()?;
    Ok(Json(ProjectionResponse {
        frame: t,
        points,
        plane: PlaneDoc::from(&plane),
        fitness: g.run.planes[t].fitness,
    }))
}

async fn post_labels(
    State(s): State<AppState>,
    t: Result<UrlPath<usize>, PathRejection>,
    body: Result<Json<LabelsRequest>, JsonRejection>,
) -> ApiResult<StatusCode> {
    let Json(req) = body?;
    let mut g = s.write();
    let t = frame_index(t, g.run.dataset.num_frames())?;
    let mut next = g.run.corrections.clone();
    for e in req.entries {
        next.upsert(t, NucleusId(e.id), e.label)?;
    }
    g.run.save_corrections(next)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_corrections(State(s): State<AppState>) -> Json<CorrectionsDoc> {
    Json(CorrectionsDoc::from(&s.read().run.corrections))
}

async fn put_corrections(
    State(s): State<AppState>,
    body: Result<Json<CorrectionsDoc>, JsonRejection>,
) -> ApiResult<StatusCode> {
    let Json(doc) = body?;
    let set = CorrectionSet::try_from(doc)?;
    s.write().run.save_corrections(set)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn rerun(State(s): State<AppState>) -> ApiResult<Json<RerunResponse>> {
    let s2 = s.clone();
    let resp = tokio::task::spawn_blocking(move || -> ApiResult<RerunResponse> {
        let mut g = s2.write();
        let corrections = g.run.corrections.clone();
        let d = g.run.rerun_with(corrections)?;
        g.metrics = d.metrics.clone();
        let forest = &d.report.forest;
        Ok(RerunResponse {
            links: forest.edges().iter().map(|e| e.children.len()).sum(),
            divisions: forest.division_events().len(),
            reconciliation_errors: d.report.errors.len(),
            diagnostics: d.report.diagnostics.len(),
            metrics: d.metrics,
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(resp))
}

async fn metrics(State(s): State<AppState>) -> ApiResult<Json<TrackingMetrics>> {
    s.read()
        .metrics
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("run has no ground truth to score against"))
}

/// Binds `addr` and serves the run in `dir` until ctrl-c.
pub async fn serve(dir: &Path, addr: SocketAddr) -> anyhow::Result<()> {
    use anyhow::Context;
    let state = AppState::load(dir).with_context(|| format!("loading run state from {}", dir.display()))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("serving {} on http://{}", dir.display(), listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
