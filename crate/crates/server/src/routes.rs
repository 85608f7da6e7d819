use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use brushwork::pipeline::{blend_feature_space, blend_image_space, precompute_levels_with_budget, BlendMode, LevelMask};
use brushwork::upsample::{Backend, UpsampleJob, UpsampleRequest};
use brushwork::{ImagePlane, StrokeParams};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::state::{now, AppState, LevelCache, Session, SessionSummary, StyleInfo};

type AppStateRef = State<Arc<AppState>>;

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// Runs CPU-heavy work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

pub async fn list_styles(State(state): AppStateRef) -> Json<Vec<StyleInfo>> {
    Json(state.styles().cloned().collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
}

pub async fn create_session(State(state): AppStateRef, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_input", "request body must be a PNG or JPEG image"));
    }
    let (h, w) = ImagePlane::probe_extent(&body)?;
    let cap = state.config.max_pixels;
    if h * w > cap {
        return Err(ApiError::too_large(format!(
            "image is {h}x{w} ({} pixels); the limit is {cap} pixels",
            h * w
        )));
    }
    let preview_cap = state.config.preview_cap;
    let session = blocking(move || {
        let original = ImagePlane::decode(&body)?;
        let content = original.fit_long_side(preview_cap);
        let t = now();
        Ok(Session {
            id: uuid::Uuid::new_v4().to_string(),
            content_hash: content.content_hash(),
            content,
            original_extent: original.extent(),
            style_id: None,
            params: StrokeParams::default(),
            mask: None,
            levels: None,
            final_render: None,
            created: t,
            updated: t,
        })
    })
    .await?;
    let created = Created {
        session_id: session.id.clone(),
        height: session.content.height(),
        width: session.content.width(),
    };
    state.insert_session(session);
    Ok((StatusCode::CREATED, Json(created)))
}

pub async fn get_session(State(state): AppStateRef, Path(id): Path<String>) -> ApiResult<Json<SessionSummary>> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    Ok(Json(s.summary()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylizeRequest {
    pub style_id: String,
    pub lambda_s: f32,
    pub lambda_i: f32,
    #[serde(default)]
    pub tau: f32,
}

pub async fn stylize(
    State(state): AppStateRef,
    Path(id): Path<String>,
    Json(req): Json<StylizeRequest>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let params = StrokeParams::new(req.lambda_s, req.lambda_i, req.tau)?;
    let model = state.model(&req.style_id)?;
    let mut s = session.lock_owned().await;
    let bytes = blocking(move || {
        let out = model.stylize(&s.content, &params)?;
        s.style_id = Some(req.style_id);
        s.params = params;
        s.updated = now();
        Ok(out.encode_png()?)
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelsRequest {
    /// Defaults to the style of the last stylize call.
    #[serde(default)]
    pub style_id: Option<String>,
    pub level_values: Vec<f32>,
    pub lambda_i: f32,
    #[serde(default)]
    pub tau: f32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LevelPreview {
    pub index: usize,
    pub lambda_s: f32,
    pub url: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LevelsResponse {
    pub style_id: String,
    pub levels: Vec<LevelPreview>,
}

pub async fn levels(
    State(state): AppStateRef,
    Path(id): Path<String>,
    Json(req): Json<LevelsRequest>,
) -> ApiResult<Json<LevelsResponse>> {
    let session = state.session(&id)?;
    let mut s = session.lock_owned().await;
    let style_id = req
        .style_id
        .or_else(|| s.style_id.clone())
        .ok_or_else(|| ApiError::invalid("style_id is required before the first stylize call"))?;
    let model = state.model(&style_id)?;
    let budget = state.config.memory_budget;
    let response = blocking(move || {
        // Validates the level list and the intensity.
        let (features, previews) =
            precompute_levels_with_budget(&model, &s.content, &req.level_values, req.lambda_i, req.tau, budget)?;
        let levels = features
            .level_values()
            .iter()
            .enumerate()
            .map(|(index, &lambda_s)| LevelPreview {
                index,
                lambda_s,
                url: format!("/sessions/{}/levels/{index}", s.id),
            })
            .collect();
        s.params = StrokeParams {
            lambda_s: s.params.lambda_s,
            lambda_i: req.lambda_i,
            tau: features.frame().tau,
        };
        s.style_id = Some(style_id.clone());
        s.levels = Some(LevelCache {
            style_id: style_id.clone(),
            features,
            previews,
        });
        s.mask = None;
        s.final_render = None;
        s.updated = now();
        Ok(LevelsResponse { style_id, levels })
    })
    .await?;
    Ok(Json(response))
}

pub async fn level_preview(
    State(state): AppStateRef,
    Path((id, index)): Path<(String, usize)>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let s = session.lock_owned().await;
    let bytes = blocking(move || {
        let cache = s.fresh_levels()?;
        let img = cache
            .previews
            .images
            .get(index)
            .ok_or_else(|| ApiError::not_found(format!("level {index}")))?;
        Ok(img.encode_png()?)
    })
    .await?;
    Ok(png(bytes))
}

/// A mask on the wire: either a label map (one 8-bit image of level
/// indices) or one 8-bit weight plane per level, each base64-encoded PNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPayload {
    Labels(String),
    Planes(Vec<String>),
}

impl MaskPayload {
    pub fn from_labels_png(png: &[u8]) -> Self {
        Self::Labels(B64.encode(png))
    }

    pub fn from_plane_pngs(planes: &[Vec<u8>]) -> Self {
        Self::Planes(planes.iter().map(|p| B64.encode(p)).collect())
    }

    fn decode(&self, levels: usize) -> ApiResult<LevelMask> {
        let b64 = |s: &str| {
            B64.decode(s)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_input", format!("mask is not base64: {e}")))
        };
        match self {
            Self::Labels(s) => Ok(LevelMask::decode_labels(&b64(s)?, levels)?),
            Self::Planes(planes) => {
                if planes.len() != levels {
                    return Err(ApiError::from(brushwork::Error::Shape(format!(
                        "{} mask planes for {levels} levels",
                        planes.len()
                    ))));
                }
                let bytes = planes.iter().map(|p| b64(p)).collect::<ApiResult<Vec<_>>>()?;
                Ok(LevelMask::decode_planes(&bytes)?)
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendRequest {
    pub mask: MaskPayload,
    pub mode: BlendMode,
}

pub async fn blend(
    State(state): AppStateRef,
    Path(id): Path<String>,
    Json(req): Json<BlendRequest>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let mut s = session.lock_owned().await;
    let style_id = s.fresh_levels()?.style_id.clone();
    let model = state.model(&style_id)?;
    let bytes = blocking(move || {
        let cache = s.fresh_levels()?;
        let mask = req.mask.decode(cache.features.len())?;
        if mask.extent() != s.content.extent() {
            return Err(ApiError::from(brushwork::Error::Shape(format!(
                "mask is {}x{}, session image is {}x{}",
                mask.extent().0,
                mask.extent().1,
                s.content.height(),
                s.content.width()
            ))));
        }
        let out = match req.mode {
            BlendMode::Preview => blend_image_space(&cache.previews, &mask)?,
            BlendMode::Final => blend_feature_space(&model, &cache.features, &mask)?,
        };
        let bytes = out.encode_png()?;
        if req.mode == BlendMode::Final {
            s.final_render = Some(out);
        }
        s.mask = Some(mask);
        s.updated = now();
        Ok(bytes)
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRequest {
    pub scale: f64,
    #[serde(default = "local")]
    pub backend: Backend,
}

fn local() -> Backend {
    Backend::Local
}

pub async fn export(
    State(state): AppStateRef,
    Path(id): Path<String>,
    Json(req): Json<ExportRequest>,
) -> ApiResult<(StatusCode, Json<UpsampleJob>)> {
    let session = state.session(&id)?;
    let s = session.lock_owned().await;
    let stylized = s
        .final_render
        .clone()
        .ok_or_else(|| ApiError::sequencing("export needs a final-mode blend first"))?;
    let style_id = s.style_id.clone().unwrap_or_default();
    drop(s);
    let model = state.model(&style_id)?;
    let style = model
        .style_image()
        .cloned()
        .or_else(|| (req.backend == Backend::Local).then(|| ImagePlane::new(1, 1)))
        .ok_or_else(|| ApiError::invalid(format!("style {style_id} has no embedded style image to send")))?;
    let gateway = state.gateway.clone();
    let job = blocking(move || {
        let request = UpsampleRequest {
            stylized,
            style,
            target_scale: req.scale,
        };
        Ok(gateway.submit(&request, req.backend)?)
    })
    .await?;
    Ok((StatusCode::ACCEPTED, Json(job)))
}

pub async fn job(State(state): AppStateRef, Path(id): Path<String>) -> ApiResult<Json<UpsampleJob>> {
    let gateway = state.gateway.clone();
    Ok(Json(blocking(move || Ok(gateway.poll(&id)?)).await?))
}

pub async fn job_result(State(state): AppStateRef, Path(id): Path<String>) -> ApiResult<Response> {
    let gateway = state.gateway.clone();
    let bytes = blocking(move || {
        let job = gateway.poll(&id)?;
        if job.state != brushwork::upsample::JobState::Done {
            return Err(ApiError::sequencing(format!("job {id} is not done")));
        }
        Ok(gateway.result(&id)?.encode_png()?)
    })
    .await?;
    Ok(png(bytes))
}
