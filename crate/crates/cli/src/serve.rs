//! Read-only HTTP API over cached pipeline artifacts.
//!
//! * `GET /api/meta`: scene and config summary
//! * `GET /api/scene?stride=k`: binary payload of every k-th point (layout below)
//! * `POST /api/query` `{"prompt"}`: per-superpoint scores and display window
//! * `POST /api/instances` `{"prompt", "threshold"?, "percentile"?, "epsilon"?, "min_cluster_size"?}`
//!
//! Scene payload, little-endian: `u32` header length `h`, `h` bytes of JSON
//! header (space-padded so the body starts 4-byte aligned), then `i32 × 3n`
//! positions in voxel units relative to `header.origin`, `u8 × 3n` colors,
//! zero padding to a multiple of 4, and `u32 × n` superpoint ids. The header
//! states `n`, `stride` and every section's byte offset from the start of the
//! payload. Point `i` of the payload is cloud point `i * stride`.
//!
//! Heat colors follow the same blue (0, 0, 255) to yellow (255, 255, 0) ramp
//! over `[normalization.lo, normalization.hi]` as the PLY exports.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ovseg_core::feature::{FeatureError, FeatureProvider};
use ovseg_core::pipeline::{PipelineConfig, QueryState};
use ovseg_core::query::{cluster_instances, score_query, threshold_points, ClusterConfig, QueryError, ThresholdMode};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

pub struct AppState {
    pub config: PipelineConfig,
    pub query: QueryState,
    pub provider: Arc<dyn FeatureProvider>,
    scene_payload: Bytes,
}

impl AppState {
    pub fn new(config: PipelineConfig, query: QueryState, provider: Arc<dyn FeatureProvider>) -> Self {
        let scene_payload = Bytes::from(scene_payload(&query, 1));
        Self {
            config,
            query,
            provider,
            scene_payload,
        }
    }
}

/// Encodes the scene payload described in the module docs.
pub fn scene_payload(q: &QueryState, stride: usize) -> Vec<u8> {
    let cloud = &q.bundle.cloud;
    let stride = stride.max(1);
    let kept: Vec<usize> = (0..cloud.len()).step_by(stride).collect();
    let n = kept.len();
    let step = q.bundle.voxel_size;
    let origin = cloud.bounds().map_or([0.0; 3], |(lo, _)| [lo.x, lo.y, lo.z]);
    let positions_len = 12 * n;
    let colors_len = 3 * n;
    let colors_pad = (4 - colors_len % 4) % 4;
    let header_for = |start: usize| {
        json!({
            "n_points": n,
            "n_superpoints": q.artifact.graph.len(),
            "stride": stride,
            "origin": origin,
            "scale": step,
            "positions_offset": start,
            "colors_offset": start + positions_len,
            "sp_ids_offset": start + positions_len + colors_len + colors_pad,
            "total_bytes": start + positions_len + colors_len + colors_pad + 4 * n,
        })
        .to_string()
    };
    // offsets depend on the header length; iterate until stable
    let mut start = 0usize;
    let mut header = header_for(start);
    loop {
        let padded = (4 + header.len()).div_ceil(4) * 4;
        if padded == start {
            break;
        }
        start = padded;
        header = header_for(start);
    }
    let mut out = Vec::with_capacity(start + positions_len + colors_len + colors_pad + 4 * n);
    out.extend_from_slice(&((start - 4) as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.resize(start, b' ');
    for &i in &kept {
        for (c, o) in cloud.positions[i].coords.iter().zip(origin) {
            out.extend_from_slice(&(((c - o) / step).round() as i32).to_le_bytes());
        }
    }
    for &i in &kept {
        out.extend_from_slice(&cloud.colors[i]);
    }
    out.resize(out.len() + colors_pad, 0);
    for &i in &kept {
        out.extend_from_slice(&q.artifact.graph.point_to_sp[i].to_le_bytes());
    }
    out
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/meta", get(meta))
        .route("/api/scene", get(scene))
        .route("/api/query", post(query))
        .route("/api/instances", post(instances))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn query_error(e: QueryError) -> Response {
    match e {
        QueryError::Feature(FeatureError::ProviderUnavailable(m)) => error(StatusCode::SERVICE_UNAVAILABLE, m),
        QueryError::Feature(FeatureError::ProviderProtocol(m)) => error(StatusCode::BAD_GATEWAY, m),
        QueryError::EmptyPrompt | QueryError::InvalidConfig(_) => error(StatusCode::BAD_REQUEST, e.to_string()),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

#[allow(clippy::result_large_err)]
fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

async fn meta(State(s): State<Arc<AppState>>) -> Json<Value> {
    let a = &s.query.artifact;
    let c = &s.config;
    Json(json!({
        "n_points": s.query.bundle.cloud.len(),
        "n_superpoints": a.graph.len(),
        "n_features": a.query_features.len(),
        "provider": a.query_features.provider,
        "dim": a.query_features.dim,
        "merge_rounds": a.report.rounds,
        "config": {
            "voxel_size": c.scene.voxel_size,
            "tau": c.merge.tau,
            "rounds": c.merge.rounds,
            "cluster": c.cluster,
        },
        "colormap": { "low": [0, 0, 255], "high": [255, 255, 0] },
    }))
}

#[derive(Deserialize)]
struct SceneParams {
    stride: Option<usize>,
}

async fn scene(State(s): State<Arc<AppState>>, params: Result<Query<SceneParams>, QueryRejection>) -> Response {
    let stride = match params {
        Ok(Query(p)) => p.stride.unwrap_or(1),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    if stride == 0 {
        return error(StatusCode::BAD_REQUEST, "stride must be positive");
    }
    let body = if stride == 1 {
        s.scene_payload.clone()
    } else {
        Bytes::from(scene_payload(&s.query, stride))
    };
    ([(header::CONTENT_TYPE, "application/octet-stream")], body).into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    prompt: String,
}

async fn run_query(s: Arc<AppState>, prompt: String) -> Result<ovseg_core::query::QueryResult, Response> {
    tokio::task::spawn_blocking(move || {
        let a = &s.query.artifact;
        score_query(&prompt, &a.query_features, s.provider.as_ref(), &a.graph)
    })
    .await
    .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(query_error)
}

async fn query(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: QueryRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match run_query(s, req.prompt).await {
        Ok(r) => Json(json!({
            "prompt": r.prompt,
            "sp_scores": r.sp_scores,
            "normalization": r.normalization,
        }))
        .into_response(),
        Err(resp) => resp,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstancesRequest {
    prompt: String,
    threshold: Option<f64>,
    percentile: Option<f64>,
    epsilon: Option<f64>,
    min_cluster_size: Option<usize>,
}

async fn instances(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: InstancesRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let mut cfg: ClusterConfig = s.config.cluster.clone();
    match (req.threshold, req.percentile) {
        (Some(_), Some(_)) => return error(StatusCode::BAD_REQUEST, "give threshold or percentile, not both"),
        (Some(t), None) => cfg.threshold = ThresholdMode::Absolute(t),
        (None, Some(p)) => cfg.threshold = ThresholdMode::Percentile(p),
        (None, None) => {}
    }
    cfg.epsilon = req.epsilon.unwrap_or(cfg.epsilon);
    cfg.min_cluster_size = req.min_cluster_size.unwrap_or(cfg.min_cluster_size);
    if let Err(e) = cfg.validate() {
        return query_error(e);
    }
    let result = match run_query(s.clone(), req.prompt).await {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let clustered = tokio::task::spawn_blocking(move || {
        let selected = threshold_points(&result, cfg.threshold);
        cluster_instances(&selected, &s.query.bundle.cloud, &cfg, &result.point_scores).map(|i| (i, selected.len()))
    })
    .await;
    match clustered {
        Ok(Ok((inst, n_selected))) => Json(json!({
            "n_selected": n_selected,
            "instances": inst.iter().map(|i| json!({
                "id": i.instance_id,
                "size": i.point_indices.len(),
                "score": i.score,
                "point_indices": i.point_indices,
            })).collect::<Vec<_>>(),
        }))
        .into_response(),
        Ok(Err(e)) => query_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
