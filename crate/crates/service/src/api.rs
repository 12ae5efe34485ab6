use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use descry::eval::track;
use descry::heatmap::{db_heatmap, peak, KeypointDb, KeypointEntry, Peak};
use descry::image::encode_png;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::ApiError;
use crate::state::SessionState;

type Shared = Arc<SessionState>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Shared) -> Router {
    let api = Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{id}", get(get_image))
        .route("/api/db/{name}", get(get_db))
        .route("/api/db/{name}/keypoints", post(annotate))
        .route("/api/db/{name}/keypoints/{label}", delete(remove_keypoint))
        .route("/api/heatmap", get(heatmap))
        .route("/api/track", get(track_point));
    let app = match &state.config().static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.with_state(state)
}

/// Runs blocking work (decoding, network evaluation, file I/O) off the
/// async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(axum::http::StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

async fn list_images(State(state): State<Shared>) -> ApiResult<Json<Vec<ImageInfo>>> {
    blocking(move || {
        let mut out = Vec::new();
        for id in state.image_ids()? {
            let img = descry::image::load_image(state.image_path(&id)?)?;
            out.push(ImageInfo {
                id,
                width: img.width(),
                height: img.height(),
            });
        }
        Ok(Json(out))
    })
    .await
}

async fn get_image(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        let path = state.image_path(&id)?;
        let bytes = std::fs::read(&path).map_err(|e| descry::Error::io(&path, e))?;
        Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
    })
    .await
}

async fn get_db(State(state): State<Shared>, Path(name): Path<String>) -> ApiResult<Json<KeypointDb>> {
    blocking(move || {
        state
            .load_db(&name)?
            .map(Json)
            .ok_or_else(|| ApiError::not_found(format!("database {name:?}")))
    })
    .await
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateRequest {
    pub image_id: String,
    pub u: i64,
    pub v: i64,
    pub label: String,
}

#[derive(Serialize)]
struct Stored {
    label: String,
    u: usize,
    v: usize,
}

fn pixel(u: i64, v: i64, width: usize, height: usize) -> ApiResult<(usize, usize)> {
    if u < 0 || v < 0 || u as usize >= width || v as usize >= height {
        return Err(descry::Error::OutOfBounds { u, v, width, height }.into());
    }
    Ok((u as usize, v as usize))
}

async fn annotate(
    State(state): State<Shared>,
    Path(name): Path<String>,
    Json(req): Json<AnnotateRequest>,
) -> ApiResult<Json<Stored>> {
    state.db_path(&name)?;
    if req.label.is_empty() {
        return Err(ApiError::bad_request("label must not be empty"));
    }
    let gate = state.gate(&name);
    let _held = gate.lock().await;
    blocking(move || {
        let desc = state.descriptors(&req.image_id)?;
        let (u, v) = pixel(req.u, req.v, desc.width(), desc.height())?;
        let mut db = state
            .load_db(&name)?
            .unwrap_or_else(|| KeypointDb::new(name.clone(), desc.dim()));
        let entry = db.add_keypoint(&desc, &req.image_id, u, v, &req.label)?;
        let reply = Stored {
            label: entry.label.clone(),
            u,
            v,
        };
        state.save_db(&db)?;
        Ok(Json(reply))
    })
    .await
}

async fn remove_keypoint(
    State(state): State<Shared>,
    Path((name, label)): Path<(String, String)>,
) -> ApiResult<Json<KeypointEntry>> {
    state.db_path(&name)?;
    let gate = state.gate(&name);
    let _held = gate.lock().await;
    blocking(move || {
        let mut db = state
            .load_db(&name)?
            .ok_or_else(|| ApiError::not_found(format!("database {name:?}")))?;
        let removed = db.remove_keypoint(&label)?;
        state.save_db(&db)?;
        Ok(Json(removed))
    })
    .await
}

#[derive(Deserialize)]
struct HeatmapQuery {
    db: String,
    image_id: String,
    format: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub width: usize,
    pub height: usize,
    pub peak: Peak,
}

async fn heatmap(State(state): State<Shared>, Query(q): Query<HeatmapQuery>) -> ApiResult<Response> {
    let json = match q.format.as_deref() {
        None | Some("png") => false,
        Some("json") => true,
        Some(other) => return Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    };
    blocking(move || {
        let db = state
            .load_db(&q.db)?
            .ok_or_else(|| ApiError::not_found(format!("database {:?}", q.db)))?;
        let desc = state.descriptors(&q.image_id)?;
        let fused = db_heatmap(&db, &desc, &state.config().heatmap)?;
        let top = peak(&fused);
        if json {
            let meta = HeatmapMeta {
                width: fused.width(),
                height: fused.height(),
                peak: top,
            };
            return Ok(Json(meta).into_response());
        }
        let peak_header = format!("{},{},{}", top.u, top.v, top.value);
        Ok((
            [(header::CONTENT_TYPE, "image/png".to_string()), (header::HeaderName::from_static("x-heatmap-peak"), peak_header)],
            encode_png(&fused),
        )
            .into_response())
    })
    .await
}

#[derive(Deserialize)]
struct TrackQuery {
    src: String,
    u: i64,
    v: i64,
    dst: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResponse {
    pub u_star: usize,
    pub v_star: usize,
    pub similarity: f64,
}

async fn track_point(State(state): State<Shared>, Query(q): Query<TrackQuery>) -> ApiResult<Json<TrackResponse>> {
    blocking(move || {
        let src = state.descriptors(&q.src)?;
        let (u, v) = pixel(q.u, q.v, src.width(), src.height())?;
        let dst = state.descriptors(&q.dst)?;
        let (u_star, v_star, similarity) = track(&dst, src.descriptor(u, v), None)?;
        Ok(Json(TrackResponse {
            u_star,
            v_star,
            similarity,
        }))
    })
    .await
}
