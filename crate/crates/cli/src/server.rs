//! Read-only JSON API over a fixed set of artifacts.
//!
//! Every response is a function of the query string and the artifacts loaded
//! at startup; the only mutable state is a request counter.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use tower_http::cors::CorsLayer;

use vocabscale_core::predict::{loss_curve, predict, CurvePoint, MAX_CURVE_POINTS, MIN_VOCAB, PRESETS};
use vocabscale_core::{Approach, ArtifactSet, Error, FlopsBudget, PredictionRequest};

use crate::{parse_f64, parse_u32, parse_usize, ArtifactSource};

/// Default upper end of a curve request.
pub const CURVE_VMAX: f64 = 1_000_000.0;
/// Default number of curve points.
pub const CURVE_POINTS: usize = 128;

pub struct AppState {
    pub artifacts: ArtifactSet,
    pub source: ArtifactSource,
    requests: AtomicU64,
}

impl AppState {
    pub fn new(artifacts: ArtifactSet, source: ArtifactSource) -> Self {
        Self {
            artifacts,
            source,
            requests: AtomicU64::new(0),
        }
    }

    fn hit(&self) {
        self.requests.fetch_add(1, Ordering::Relaxed);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/predict", get(predict_handler))
        .route("/api/v1/curve", get(curve_handler))
        .route("/api/v1/fertility", get(fertility_handler))
        .route("/api/v1/presets", get(presets_handler))
        .route("/api/v1/metrics", get(metrics_handler))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn bad(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "invalid_input",
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        if e.is_solver_failure() {
            Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                kind: "solver_failure",
                message: e.to_string(),
            }
        } else {
            Self::bad(e.to_string())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "kind": self.kind, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

/// Query parameters as raw strings, so numbers in scientific notation and
/// unknown keys get the same error shape as everything else.
struct Params<'a> {
    map: &'a HashMap<String, String>,
}

impl<'a> Params<'a> {
    fn new(map: &'a HashMap<String, String>, allowed: &[&str]) -> Result<Self, ApiError> {
        if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(ApiError::bad(format!("unknown parameter '{k}'")));
        }
        Ok(Self { map })
    }

    fn get<T>(&self, key: &str, parse: fn(&str) -> Result<T, String>) -> Result<Option<T>, ApiError> {
        self.map
            .get(key)
            .map(|s| parse(s).map_err(|e| ApiError::bad(format!("{key}: {e}"))))
            .transpose()
    }

    fn require<T>(&self, key: &str, parse: fn(&str) -> Result<T, String>) -> Result<T, ApiError> {
        self.get(key, parse)?
            .ok_or_else(|| ApiError::bad(format!("missing parameter '{key}'")))
    }
}

fn parse_approach(s: &str) -> Result<Approach, String> {
    let n: u8 = s.trim().parse().map_err(|_| format!("'{s}' is not 1, 2 or 3"))?;
    Approach::try_from(n).map_err(|e| e.to_string())
}

/// Builds a prediction request from query parameters.
pub fn request_from_query(q: &HashMap<String, String>) -> Result<PredictionRequest, ApiError> {
    let p = Params::new(q, &["approach", "n_nv", "flops", "chars", "embed_dim"])?;
    let req = PredictionRequest {
        approach: p.require("approach", parse_approach)?,
        n_nv: p.get("n_nv", parse_f64)?,
        flops: p.get("flops", parse_f64)?,
        chars: p.get("chars", parse_f64)?,
        embed_dim: p.get("embed_dim", parse_u32)?,
    };
    req.validate()?;
    Ok(req)
}

async fn predict_handler(
    State(st): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<vocabscale_core::VocabPrediction>, ApiError> {
    st.hit();
    let req = request_from_query(&q)?;
    Ok(Json(predict(&req, &st.artifacts)?))
}

#[derive(Debug, Serialize)]
struct CurveResponse {
    n_nv: f64,
    flops: f64,
    embed_dim: u32,
    points: Vec<CurvePoint>,
    minimum: CurvePoint,
}

async fn curve_handler(
    State(st): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<CurveResponse>, ApiError> {
    st.hit();
    let p = Params::new(&q, &["n_nv", "flops", "vmin", "vmax", "points", "embed_dim"])?;
    let n_nv = p.require("n_nv", parse_f64)?;
    let flops = p.require("flops", parse_f64)?;
    let vmin = p.get("vmin", parse_f64)?.unwrap_or(MIN_VOCAB as f64);
    let vmax = p.get("vmax", parse_f64)?.unwrap_or(CURVE_VMAX);
    let points = p.get("points", parse_usize)?.unwrap_or(CURVE_POINTS);
    if points > MAX_CURVE_POINTS {
        return Err(ApiError::bad(format!("points must be at most {MAX_CURVE_POINTS}")));
    }
    let embed_dim = match p.get("embed_dim", parse_u32)? {
        Some(0) => return Err(ApiError::bad("embed_dim must be positive")),
        Some(d) => d,
        None => st.artifacts.shapes.embed_dim_for(n_nv)?,
    };
    let budget = FlopsBudget::new(flops)?;
    let series = loss_curve(&st.artifacts.loss, n_nv, embed_dim as f64, budget, vmin, vmax, points)?;
    let minimum = *series
        .iter()
        .min_by(|a, b| a.loss_u.total_cmp(&b.loss_u))
        .ok_or_else(|| ApiError::bad("empty curve"))?;
    Ok(Json(CurveResponse {
        n_nv,
        flops,
        embed_dim,
        points: series,
        minimum,
    }))
}

async fn fertility_handler(
    State(st): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<serde_json::Value>, ApiError> {
    st.hit();
    let p = Params::new(&q, &["v"])?;
    let v = p.require("v", parse_f64)?;
    if v < 2.0 {
        return Err(ApiError::bad("v must be at least 2"));
    }
    let fit = &st.artifacts.fertility;
    Ok(Json(json!({
        "v": v,
        "ratio": fit.eval(v),
        "clamped": v > fit.clamp_v,
        "clamp_v": fit.clamp_v,
    })))
}

async fn presets_handler(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    st.hit();
    Json(json!({
        "available": PRESETS,
        "active": st.source,
        "artifacts": st.artifacts,
    }))
}

async fn metrics_handler(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "requests": st.requests.load(Ordering::Relaxed) }))
}
