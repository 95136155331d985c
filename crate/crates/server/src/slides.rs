use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::header::{CACHE_CONTROL, CONTENT_TYPE};
use axum::http::HeaderValue;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pyraflow::pyramid::{encode_png, open_container, Manifest, TileKey};
use pyraflow::tilecache::CacheError;
use pyraflow::tissue::{preview_tissue, TissueParams, DEFAULT_CLOSING_RADIUS, DEFAULT_THRESHOLD};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::{AppState, SlideEntry};

pub const ACTUAL_LEVEL_HEADER: &str = "x-actual-level";
const MAX_PREVIEW_RADIUS: u32 = 64;
const MAX_PREVIEW_DOWNSAMPLE: u32 = 64;

/// Ids name directories, so path separators and leading dots are refused.
pub(crate) fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

pub(crate) fn png(bytes: Vec<u8>) -> Response {
    ([(CONTENT_TYPE, "image/png")], bytes).into_response()
}

pub(crate) async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

impl AppState {
    /// Registered slide, or the container at `{data_dir}/slides/{id}` opened on first use.
    pub(crate) fn slide(self: &Arc<Self>, id: &str) -> ApiResult<Arc<SlideEntry>> {
        if let Some(s) = self.slides.read().unwrap_or_else(|e| e.into_inner()).get(id) {
            return Ok(s.clone());
        }
        let dir = self.config.data_dir.join("slides").join(id);
        if !valid_id(id) || !dir.join("manifest.json").is_file() {
            return Err(ApiError::not_found(format!("unknown slide `{id}`")));
        }
        let pyramid = open_container(&dir).map_err(ApiError::internal)?;
        self.insert_slide(id, Arc::new(pyramid))?;
        Ok(self.slides.read().unwrap_or_else(|e| e.into_inner())[id].clone())
    }
}

#[derive(Serialize)]
pub struct SlideSummary {
    id: String,
    width: u32,
    height: u32,
    levels: usize,
    tile_size: u32,
}

impl SlideSummary {
    fn of(id: &str, m: &Manifest) -> Self {
        Self { id: id.into(), width: m.width, height: m.height, levels: m.levels.len(), tile_size: m.tile_size }
    }
}

pub async fn list(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<SlideSummary>>> {
    let mut out: Vec<SlideSummary> = state
        .slides
        .read()
        .unwrap_or_else(|e| e.into_inner())
        .iter()
        .map(|(id, s)| SlideSummary::of(id, &Manifest::of(&s.pyramid)))
        .collect();
    if let Ok(entries) = std::fs::read_dir(state.config.data_dir.join("slides")) {
        for entry in entries.flatten() {
            let id = entry.file_name().to_string_lossy().into_owned();
            if !valid_id(&id) || out.iter().any(|s| s.id == id) {
                continue;
            }
            let Ok(bytes) = std::fs::read(entry.path().join("manifest.json")) else { continue };
            match serde_json::from_slice::<Manifest>(&bytes) {
                Ok(m) => out.push(SlideSummary::of(&id, &m)),
                Err(e) => log::warn!("skipping slide {id}: {e}"),
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Json(out))
}

#[derive(Serialize)]
pub struct SlideManifest {
    id: String,
    #[serde(flatten)]
    manifest: Manifest,
    magnifications: Vec<f64>,
}

pub async fn manifest(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SlideManifest>> {
    let s = state.slide(&id)?;
    let p = &s.pyramid;
    Ok(Json(SlideManifest {
        id,
        manifest: Manifest::of(p),
        magnifications: (0..p.level_count()).map(|l| p.magnification(l)).collect(),
    }))
}

#[derive(Deserialize)]
pub struct TileQuery {
    #[serde(default)]
    fallback: u8,
}

pub async fn tile(
    State(state): State<Arc<AppState>>,
    Path((id, level, col, row)): Path<(String, u32, u32, u32)>,
    Query(q): Query<TileQuery>,
) -> ApiResult<Response> {
    let s = state.slide(&id)?;
    let key = TileKey::new(level, col, row);
    if s.pyramid.tile_rect(key).is_err() {
        return Err(ApiError::not_found(format!("tile {key} is outside the grid")));
    }
    let cache = s.cache.clone();
    let (tile, actual) = if q.fallback != 0 {
        let r = cache.resolve_with_fallback(key).map_err(ApiError::internal)?;
        if r.actual_level != level {
            // fetch the real tile off the request path; the next request gets it
            let c = cache.clone();
            tokio::task::spawn_blocking(move || {
                if let Err(e) = c.drain_scheduled() {
                    log::warn!("background tile load failed: {e}");
                }
            });
        }
        (r.tile, r.actual_level)
    } else {
        let t = blocking(move || {
            cache.get_tile(key).map_err(|e| match e {
                CacheError::Pyramid(p) => ApiError::not_found(p.to_string()),
                other => ApiError::internal(other),
            })
        })
        .await?;
        (t, level)
    };
    let bytes = encode_png(tile.width, tile.height, tile.channels, &tile.pixels).map_err(ApiError::internal)?;
    let mut resp = png(bytes);
    resp.headers_mut().insert(ACTUAL_LEVEL_HEADER, HeaderValue::from(actual));
    Ok(resp)
}

#[derive(Deserialize)]
pub struct PreviewQuery {
    threshold: Option<f64>,
    radius: Option<u32>,
    downsample: Option<u32>,
}

pub async fn tissue_preview(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PreviewQuery>,
) -> ApiResult<Response> {
    let s = state.slide(&id)?;
    let params = TissueParams {
        threshold: q.threshold.unwrap_or(DEFAULT_THRESHOLD),
        closing_radius: q.radius.unwrap_or(DEFAULT_CLOSING_RADIUS),
        ..Default::default()
    };
    params.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    if params.closing_radius > MAX_PREVIEW_RADIUS {
        return Err(ApiError::bad_request(format!("radius must be at most {MAX_PREVIEW_RADIUS}")));
    }
    let downsample = q.downsample.unwrap_or(1);
    if !(1..=MAX_PREVIEW_DOWNSAMPLE).contains(&downsample) {
        return Err(ApiError::bad_request(format!("downsample must be in 1..={MAX_PREVIEW_DOWNSAMPLE}")));
    }
    let bytes = blocking(move || {
        let mask = preview_tissue(&s.pyramid, &params, downsample).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let px: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        encode_png(mask.width, mask.height, 1, &px).map_err(ApiError::internal)
    })
    .await?;
    let mut resp = png(bytes);
    resp.headers_mut().insert(CACHE_CONTROL, HeaderValue::from_static("max-age=3600"));
    Ok(resp)
}
