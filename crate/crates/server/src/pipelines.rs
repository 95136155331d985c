use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::Json;
use pyraflow::models::ModelDescriptor;
use pyraflow::orchestration::{builtin_pipelines, parse_pipeline, CompiledPipeline, PipelineSpec};
use serde::Serialize;

use crate::error::{ApiError, ApiResult};
use crate::slides::valid_id;
use crate::AppState;

impl AppState {
    /// Saved pipeline text, falling back to the built-in of that name.
    pub(crate) fn pipeline_text(&self, name: &str) -> ApiResult<String> {
        if valid_id(name) {
            if let Ok(text) = std::fs::read_to_string(self.config.data_dir.join("pipelines").join(format!("{name}.txt"))) {
                return Ok(text);
            }
        }
        builtin_pipelines()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.to_string())
            .ok_or_else(|| ApiError::not_found(format!("unknown pipeline `{name}`")))
    }

    pub(crate) fn compile(&self, name: &str, text: &str) -> ApiResult<(PipelineSpec, CompiledPipeline)> {
        let spec = parse_pipeline(name, text).map_err(ApiError::from_pipeline)?;
        let compiled = spec.compile(&self.registry).map_err(ApiError::from_pipeline)?;
        Ok((spec, compiled))
    }
}

#[derive(Serialize)]
pub struct PipelineEntry {
    name: String,
    builtin: bool,
}

pub async fn list(State(state): State<Arc<AppState>>) -> Json<Vec<PipelineEntry>> {
    let mut all: BTreeMap<String, bool> = builtin_pipelines().into_iter().map(|(n, _)| (n.to_string(), true)).collect();
    if let Ok(entries) = std::fs::read_dir(state.config.data_dir.join("pipelines")) {
        for e in entries.flatten() {
            let path = e.path();
            if path.extension().is_some_and(|x| x == "txt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()).filter(|s| valid_id(s)) {
                    all.insert(stem.to_string(), false);
                }
            }
        }
    }
    Json(all.into_iter().map(|(name, builtin)| PipelineEntry { name, builtin }).collect())
}

#[derive(Serialize)]
pub struct PipelineText {
    name: String,
    text: String,
}

pub async fn get_one(State(state): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Json<PipelineText>> {
    let text = state.pipeline_text(&name)?;
    Ok(Json(PipelineText { name, text }))
}

#[derive(Serialize)]
pub struct Validated {
    name: String,
    stages: usize,
    model: String,
    task: String,
    patch_size: u32,
    magnification: f64,
}

impl Validated {
    fn of(spec: &PipelineSpec, c: &CompiledPipeline) -> Self {
        Self {
            name: spec.name.clone(),
            stages: spec.stages.len(),
            model: c.model.clone(),
            task: c.task.as_str().to_string(),
            patch_size: c.patch_size,
            magnification: c.magnification,
        }
    }
}

/// Parses and compiles the body; errors carry the script line.
pub async fn validate(State(state): State<Arc<AppState>>, body: String) -> ApiResult<Json<Validated>> {
    let (spec, compiled) = state.compile("unsaved", &body)?;
    Ok(Json(Validated::of(&spec, &compiled)))
}

/// Saves the body as `{name}.txt` after it validates.
pub async fn put(
    State(state): State<Arc<AppState>>,
    Path(name): Path<String>,
    body: String,
) -> ApiResult<Json<Validated>> {
    if !valid_id(&name) {
        return Err(ApiError::bad_request(format!("invalid pipeline name `{name}`")));
    }
    let (spec, compiled) = state.compile(&name, &body)?;
    let dir = state.config.data_dir.join("pipelines");
    std::fs::create_dir_all(&dir).map_err(ApiError::internal)?;
    std::fs::write(dir.join(format!("{name}.txt")), &body).map_err(ApiError::internal)?;
    Ok(Json(Validated::of(&spec, &compiled)))
}

pub async fn models(State(state): State<Arc<AppState>>) -> Json<Vec<ModelDescriptor>> {
    let names: Vec<String> = state.registry.names().map(String::from).collect();
    Json(names.iter().filter_map(|n| state.registry.get(n)).map(|r| r.descriptor().clone()).collect())
}
