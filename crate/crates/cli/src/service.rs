//! JSON-over-HTTP front end.
//!
//! Every endpoint is a pure function from request bytes to a status code and
//! a JSON body, so the HTTP layer is a thin adapter and tests can exercise
//! the handlers without a socket. Responses carry either a payload or an
//! `error` object, never both.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use pointprompt::codec::{encode_points, Point2D, Scribble};
use pointprompt::data::SyntheticImage;
use pointprompt::model::ModelBundle;
use pointprompt::rng::rng_for;
use pointprompt::tasks::caption::caption_region;
use pointprompt::tasks::dialogue::{dialogue_step, DialogueState};
use pointprompt::tasks::ImageStore;
use pointprompt::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::DEFAULT_SEED;

pub struct ServiceState {
    pub model: ModelBundle,
    pub images: ImageStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct WirePoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeRequest {
    pub points: Vec<WirePoint>,
}

/// Image given by id, or inline as a synthetic scene.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRequest {
    #[serde(default)]
    pub image_id: Option<String>,
    #[serde(default)]
    pub image: Option<SyntheticImage>,
    #[serde(default)]
    pub points: Vec<WirePoint>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub head: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRequest {
    #[serde(default)]
    pub image_id: Option<String>,
    #[serde(default)]
    pub image: Option<SyntheticImage>,
    #[serde(default)]
    pub state: DialogueState,
    pub text: String,
    #[serde(default)]
    pub points: Vec<WirePoint>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct AttentionResponse {
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub num_queries: usize,
    /// `num_queries x patch_rows*patch_cols`, row-major.
    pub weights: Vec<f32>,
    /// Per-patch mean over queries.
    pub mean: Vec<f32>,
    pub tokens: String,
}

/// A failed request: HTTP status, stable machine code, human message.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn body(&self) -> Value {
        json!({ "error": { "code": self.code, "message": self.message } })
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Domain(m) if m.starts_with("unknown image id") => Self::new(404, "unknown_image", m),
            Error::Domain(m) => Self::new(422, "invalid_input", m),
            Error::Selector(m) => Self::new(422, "bad_selector", m),
            Error::ContextOverflow { len, limit } => {
                Self::new(422, "context_overflow", format!("prompt of {len} rows exceeds {limit}"))
            }
            Error::UnknownToken(_) | Error::Parse { .. } | Error::Shape(_) => {
                Self::new(422, "invalid_input", e.to_string())
            }
            other => {
                log::error!("internal failure: {other}");
                Self::new(500, "internal", "internal error")
            }
        }
    }
}

type ApiResult = Result<Value, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(400, "malformed_request", e.to_string()))
}

fn points(wire: &[WirePoint]) -> Result<Vec<Point2D>, ApiError> {
    wire.iter()
        .map(|p| Point2D::new(p.x, p.y).map_err(|e| ApiError::new(422, "invalid_point", e.to_string())))
        .collect()
}

fn scribble(wire: &[WirePoint]) -> Result<Scribble, ApiError> {
    if wire.is_empty() {
        return Ok(Scribble::empty());
    }
    Scribble::new(points(wire)?).map_err(|e| ApiError::new(422, "invalid_point", e.to_string()))
}

fn resolve<'a>(
    state: &'a ServiceState,
    id: &Option<String>,
    inline: &'a Option<SyntheticImage>,
) -> Result<&'a SyntheticImage, ApiError> {
    match (id, inline) {
        (Some(_), Some(_)) => Err(ApiError::new(
            400,
            "malformed_request",
            "give image_id or image, not both",
        )),
        (None, Some(img)) => Ok(img),
        (Some(id), None) => Ok(state.images.get(id)?),
        (None, None) => Err(ApiError::new(400, "malformed_request", "missing image_id")),
    }
}

/// Same string the `encode` command prints.
pub fn encode(body: &[u8]) -> ApiResult {
    let req: EncodeRequest = parse(body)?;
    let tokens = encode_points(&points(&req.points)?)?;
    Ok(json!({ "tokens": tokens }))
}

pub fn caption(state: &ServiceState, body: &[u8]) -> ApiResult {
    let req: RegionRequest = parse(body)?;
    let image = resolve(state, &req.image_id, &req.image)?;
    let s = scribble(&req.points)?;
    let mut rng = rng_for(req.seed.unwrap_or(DEFAULT_SEED), "caption");
    let text = caption_region(&state.model, image, &s, &mut rng)?;
    Ok(json!({ "caption": text, "tokens": encode_points(s.points())? }))
}

pub fn attention(state: &ServiceState, body: &[u8]) -> ApiResult {
    let req: RegionRequest = parse(body)?;
    let image = resolve(state, &req.image_id, &req.image)?;
    let s = scribble(&req.points)?;
    let model = &state.model;
    let mut rng = rng_for(req.seed.unwrap_or(DEFAULT_SEED), "attention");
    let tokens = model.point_tokens(&s, &mut rng)?;
    let out = model.region(&model.features(image)?, &tokens)?;
    let map = out.cross_attention_map(req.layer, req.head)?;
    let resp = AttentionResponse {
        patch_rows: map.patch_rows,
        patch_cols: map.patch_cols,
        num_queries: map.weights.rows(),
        mean: map.mean_over_queries(),
        weights: map.weights.into_data(),
        tokens: pointprompt::codec::detokenize_points(&tokens, &pointprompt::PointTokenVocab::standard())?,
    };
    Ok(serde_json::to_value(resp).map_err(Error::from)?)
}

pub fn dialogue(state: &ServiceState, body: &[u8]) -> ApiResult {
    let req: DialogueRequest = parse(body)?;
    let image = resolve(state, &req.image_id, &req.image)?;
    let s = scribble(&req.points)?;
    let reply = dialogue_step(
        &state.model,
        image,
        &req.state,
        &req.text,
        (!s.is_empty()).then_some(&s),
        req.seed.unwrap_or(DEFAULT_SEED),
    )?;
    Ok(serde_json::to_value(reply).map_err(Error::from)?)
}

/// Cell-by-cell description of a synthetic image for display.
pub fn image(state: &ServiceState, id: &str) -> ApiResult {
    let img = state.images.get(id)?;
    let raster: Vec<Vec<Value>> = (0..img.grid)
        .map(|r| {
            (0..img.grid)
                .map(|c| match img.object_at(r, c) {
                    Some(o) => json!({ "color": o.color, "shape": o.shape }),
                    None => Value::Null,
                })
                .collect()
        })
        .collect();
    Ok(json!({ "image_id": img.image_id, "grid": img.grid, "raster": raster, "objects": img.objects }))
}

fn respond(result: ApiResult) -> Response {
    let (status, body) = match result {
        Ok(v) => (StatusCode::OK, v),
        Err(e) => (
            StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            e.body(),
        ),
    };
    (status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(|| async { respond(Ok(json!({ "status": "ok" }))) }))
        .route("/encode", post(|body: Bytes| async move { respond(encode(&body)) }))
        .route(
            "/caption",
            post(|State(s): State<Arc<ServiceState>>, body: Bytes| async move { respond(caption(&s, &body)) }),
        )
        .route(
            "/attention",
            post(|State(s): State<Arc<ServiceState>>, body: Bytes| async move { respond(attention(&s, &body)) }),
        )
        .route(
            "/dialogue",
            post(|State(s): State<Arc<ServiceState>>, body: Bytes| async move { respond(dialogue(&s, &body)) }),
        )
        .route(
            "/image/{id}",
            get(|State(s): State<Arc<ServiceState>>, Path(id): Path<String>| async move { respond(image(&s, &id)) }),
        )
        .fallback(|| async { respond(Err(ApiError::new(404, "not_found", "no such endpoint"))) })
        .with_state(state)
}

pub async fn serve(state: ServiceState, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
