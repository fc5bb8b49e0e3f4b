//! HTTP job API.
//!
//! Jobs are submitted as multipart forms and run asynchronously on the
//! worker pool in [`crate::jobs`]. Clients poll `GET /jobs/{id}`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clap::Args;
use pilot_core::denoiser::prompt::Label;
use pilot_core::denoiser::PromptTokens;
use pilot_core::io::{mask_from_png_bytes, ImageRgb};
use pilot_core::pilot::{BinaryMask, PilotParams};
use serde_json::json;
use uuid::Uuid;

use crate::config::Config;
use crate::jobs::{Hub, JobRequest, SubmitError};
use crate::models::{Models, Precision};
use crate::run::merge_json;

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen port; overrides the config file.
    #[arg(long, env = "PILOT_PORT")]
    pub port: Option<u16>,
    #[arg(long, value_enum, default_value_t)]
    pub precision: Precision,
}

#[derive(Clone)]
pub struct AppState {
    pub hub: Arc<Hub>,
    pub defaults: PilotParams,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no {what} {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        match e {
            SubmitError::NotFound => Self::new(StatusCode::NOT_FOUND, "no such session"),
            SubmitError::Busy => Self::new(StatusCode::CONFLICT, "the previous edit is still pending"),
            SubmitError::ShuttingDown => Self::new(StatusCode::SERVICE_UNAVAILABLE, "server is shutting down"),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/vocab", get(vocab))
        .route("/jobs", post(create_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/output", get(get_output))
        .route("/jobs/{id}/trace", get(get_trace))
        .route("/jobs/{id}/contact_sheet", get(get_contact_sheet))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edits", post(create_edit))
        .layer(DefaultBodyLimit::max(16 << 20))
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    let (h, w) = s.hub.image_size();
    Json(json!({ "status": "ok", "image_size": [h, w] }))
}

async fn vocab() -> Json<Vec<String>> {
    Json(Label::all().map(Label::caption).collect())
}

/// Raw multipart fields, before any validation.
#[derive(Default)]
struct Form {
    image: Option<Bytes>,
    mask: Option<Bytes>,
    prompt: Option<String>,
    params: Option<String>,
}

async fn read_form(mut mp: Multipart) -> ApiResult<Form> {
    let mut form = Form::default();
    while let Some(field) = mp.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        let text = || String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::bad_request(format!("field {name} is not UTF-8")));
        match name.as_str() {
            "image" => form.image = Some(bytes.clone()),
            "mask" => form.mask = Some(bytes.clone()),
            "prompt" => form.prompt = Some(text()?),
            "params" => form.params = Some(text()?),
            other => return Err(ApiError::bad_request(format!("unexpected field {other:?}"))),
        }
    }
    Ok(form)
}

fn required<T>(v: Option<T>, name: &str) -> ApiResult<T> {
    v.ok_or_else(|| ApiError::bad_request(format!("missing field {name:?}")))
}

fn parse_image(bytes: &[u8], (h, w): (usize, usize)) -> ApiResult<ImageRgb> {
    let img = ImageRgb::from_png_bytes(bytes).map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
    if (img.height, img.width) != (h, w) {
        return Err(ApiError::unprocessable(format!(
            "image is {}x{}, the model expects {h}x{w}",
            img.height, img.width
        )));
    }
    Ok(img)
}

fn parse_mask(bytes: &[u8], (h, w): (usize, usize)) -> ApiResult<BinaryMask> {
    let m = mask_from_png_bytes(bytes).map_err(|e| ApiError::bad_request(format!("mask: {e}")))?;
    if (m.height, m.width) != (h, w) {
        return Err(ApiError::unprocessable(format!(
            "mask is {}x{}, the model expects {h}x{w}",
            m.height, m.width
        )));
    }
    Ok(m)
}

/// Jobs need a caption from the vocabulary; the empty prompt is refused.
fn parse_prompt(p: Option<String>) -> ApiResult<PromptTokens> {
    let p = required(p, "prompt")?;
    let tokens = PromptTokens::parse(&p).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    if tokens.is_null() {
        return Err(ApiError::unprocessable("prompt is empty"));
    }
    Ok(tokens)
}

fn parse_params(p: Option<String>, defaults: &PilotParams) -> ApiResult<PilotParams> {
    let Some(text) = p else {
        return Ok(defaults.clone());
    };
    let over: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ApiError::bad_request(format!("params: {e}")))?;
    let mut base = serde_json::to_value(defaults).map_err(|e| ApiError::bad_request(e.to_string()))?;
    merge_json(&mut base, over);
    let params: PilotParams =
        serde_json::from_value(base).map_err(|e| ApiError::unprocessable(format!("params: {e}")))?;
    params
        .validate()
        .map_err(|e| ApiError::unprocessable(format!("params: {e}")))?;
    Ok(params)
}

async fn create_job(State(s): State<AppState>, mp: Multipart) -> ApiResult<impl IntoResponse> {
    let form = read_form(mp).await?;
    let size = s.hub.image_size();
    let image = parse_image(&required(form.image, "image")?, size)?;
    let mask = parse_mask(&required(form.mask, "mask")?, size)?;
    let prompt = parse_prompt(form.prompt)?;
    let params = parse_params(form.params, &s.defaults)?;
    let id = s.hub.submit(JobRequest {
        image: Arc::new(image),
        mask,
        prompt,
        params,
    })?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))))
}

fn parse_id(id: &str, what: &str) -> ApiResult<Uuid> {
    Uuid::parse_str(id).map_err(|_| ApiError::not_found(what, id))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let uid = parse_id(&id, "job")?;
    s.hub.job(uid).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

fn png(bytes: Arc<Vec<u8>>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes.as_ref().clone()).into_response()
}

fn not_ready(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, format!("job {id} has no output yet"))
}

async fn get_output(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let uid = parse_id(&id, "job")?;
    let out = s.hub.output_png(uid).ok_or_else(|| ApiError::not_found("job", &id))?;
    out.map(png).ok_or_else(|| not_ready(&id))
}

async fn get_contact_sheet(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let uid = parse_id(&id, "job")?;
    let out = s.hub.contact_sheet_png(uid).ok_or_else(|| ApiError::not_found("job", &id))?;
    out.map(png)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("job {id} has no contact sheet")))
}

async fn get_trace(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let uid = parse_id(&id, "job")?;
    let trace = s.hub.trace(uid).ok_or_else(|| ApiError::not_found("job", &id))?;
    let trace = trace.ok_or_else(|| not_ready(&id))?;
    let sheet = s
        .hub
        .contact_sheet_png(uid)
        .flatten()
        .map(|_| format!("/jobs/{id}/contact_sheet"));
    Ok(Json(json!({ "trace": trace.as_ref(), "contact_sheet": sheet })))
}

async fn create_session(State(s): State<AppState>, mp: Multipart) -> ApiResult<impl IntoResponse> {
    let form = read_form(mp).await?;
    if form.mask.is_some() || form.prompt.is_some() || form.params.is_some() {
        return Err(ApiError::bad_request("a session takes only an image"));
    }
    let image = parse_image(&required(form.image, "image")?, s.hub.image_size())?;
    let id = s.hub.create_session(image);
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let uid = parse_id(&id, "session")?;
    s.hub.session(uid).map(Json).ok_or_else(|| ApiError::not_found("session", &id))
}

async fn create_edit(
    State(s): State<AppState>,
    Path(id): Path<String>,
    mp: Multipart,
) -> ApiResult<impl IntoResponse> {
    let uid = parse_id(&id, "session")?;
    if s.hub.session(uid).is_none() {
        return Err(ApiError::not_found("session", &id));
    }
    let form = read_form(mp).await?;
    if form.image.is_some() {
        return Err(ApiError::bad_request("edits apply to the session head; do not send an image"));
    }
    let mask = parse_mask(&required(form.mask, "mask")?, s.hub.image_size())?;
    let prompt = parse_prompt(form.prompt)?;
    let params = parse_params(form.params, &s.defaults)?;
    let job = s.hub.submit_edit(uid, mask, prompt, params)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job, "session_id": uid }))))
}

pub fn serve(config: Config, a: &ServeArgs) -> anyhow::Result<()> {
    let mut models = Models::load(&config, a.precision)?;
    let oracle = models.oracle.take();
    let runs = config.output_root.join("jobs");
    let hub = Hub::start(Arc::new(models), oracle, runs, config.workers);
    let state = AppState {
        hub: Arc::clone(&hub),
        defaults: config.defaults.clone(),
    };
    let port = a.port.unwrap_or(config.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        tracing::info!(port, workers = config.workers, "listening");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                tracing::info!("shutting down");
            })
            .await
    })?;
    hub.shutdown();
    Ok(())
}
