use std::convert::Infallible;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::header::{CONTENT_DISPOSITION, CONTENT_TYPE};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pyraflow::export::{heatmap_rasters, heatmap_stats, metaimage_header, slide_level_call, write_detections_csv, TensorContainer};
use pyraflow::orchestration::prepare_run;
use pyraflow::patchflow::{ResultLayer, RunConfig, RunObserver, RunProgress, RunStatus, DEFAULT_BUFFER_CAPACITY};
use pyraflow::pyramid::{encode_png, ImagePyramid, TileKey};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;

use crate::error::{ApiError, ApiResult};
use crate::slides::{blocking, png};
use crate::AppState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Halted,
    Finished,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub slide_id: String,
    pub pipeline: String,
    pub kind: String,
    pub state: RunState,
    pub done: usize,
    pub total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Progress {
    state: RunState,
    done: usize,
    error: Option<String>,
    /// Serialized events, each ending in a newline.
    events: Vec<String>,
}

pub(crate) struct RunEntry {
    id: String,
    slide_id: String,
    pipeline: String,
    slide: Arc<ImagePyramid>,
    layer: Arc<ResultLayer<f32>>,
    classes: u32,
    total: usize,
    halt: Arc<std::sync::atomic::AtomicBool>,
    progress: Mutex<Progress>,
    notify: watch::Sender<u64>,
}

impl RunEntry {
    fn lock(&self) -> MutexGuard<'_, Progress> {
        self.progress.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn push(&self, p: &mut Progress, event: serde_json::Value) {
        p.events.push(format!("{event}\n"));
    }

    fn publish(&self) {
        self.notify.send_modify(|v| *v += 1);
    }

    fn end(&self, state: RunState, error: Option<String>) {
        {
            let mut p = self.lock();
            p.state = state;
            let mut event = json!({ "type": state, "done": p.done, "total": self.total });
            if let Some(e) = &error {
                event["error"] = json!(e);
            }
            p.error = error;
            self.push(&mut p, event);
        }
        self.publish();
    }

    fn info(&self) -> RunInfo {
        let p = self.lock();
        RunInfo {
            run_id: self.id.clone(),
            slide_id: self.slide_id.clone(),
            pipeline: self.pipeline.clone(),
            kind: self.layer.kind().to_string(),
            state: p.state,
            done: p.done,
            total: self.total,
            error: p.error.clone(),
        }
    }

    fn is_running(&self) -> bool {
        self.lock().state == RunState::Running
    }
}

struct EventSink(Arc<RunEntry>);

impl RunObserver for EventSink {
    fn on_progress(&self, progress: &RunProgress) {
        let run = &self.0;
        {
            let mut p = run.lock();
            for r in &progress.dirty_regions {
                run.push(&mut p, json!({ "type": "region", "level": r.level, "x": r.x, "y": r.y, "w": r.w, "h": r.h }));
            }
            p.done = p.done.max(progress.done);
            let done = p.done;
            run.push(&mut p, json!({ "type": "progress", "done": done, "total": progress.total }));
        }
        run.publish();
    }
}

impl AppState {
    fn run(&self, id: &str) -> ApiResult<Arc<RunEntry>> {
        self.runs
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown run `{id}`")))
    }

    fn reserve_slot(&self) -> ApiResult<()> {
        let max = self.config.max_concurrent_runs;
        self.active_runs
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < max).then_some(n + 1))
            .map(|_| ())
            .map_err(|n| ApiError::conflict(format!("{n} of {max} concurrent runs already active")))
    }

    fn release_slot(&self) {
        self.active_runs.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct StartRun {
    /// Name of a saved or built-in pipeline.
    pipeline: Option<String>,
    /// Inline pipeline text, used instead of `pipeline` when given.
    text: Option<String>,
    batch_size: Option<u32>,
    buffer_capacity: Option<usize>,
}

pub async fn start(
    State(state): State<Arc<AppState>>,
    Path(slide_id): Path<String>,
    Json(req): Json<StartRun>,
) -> ApiResult<Response> {
    let slide = state.slide(&slide_id)?;
    let (name, text) = match (req.text, req.pipeline) {
        (Some(text), name) => (name.unwrap_or_else(|| "inline".into()), text),
        (None, Some(name)) => {
            let text = state.pipeline_text(&name)?;
            (name, text)
        }
        (None, None) => return Err(ApiError::bad_request("either `pipeline` or `text` is required")),
    };
    let (_, mut compiled) = state.compile(&name, &text)?;
    if let Some(bs) = req.batch_size {
        if bs == 0 {
            return Err(ApiError::bad_request("batch_size must be at least 1"));
        }
        compiled.batch_size = Some(bs);
    }
    let config = RunConfig { buffer_capacity: req.buffer_capacity.unwrap_or(DEFAULT_BUFFER_CAPACITY), ..Default::default() };
    if config.buffer_capacity == 0 {
        return Err(ApiError::bad_request("buffer_capacity must be at least 1"));
    }
    state.reserve_slot()?;
    let prepared = {
        let (registry, pyramid) = (state.registry.clone(), slide.pyramid.clone());
        let compiled = compiled.clone();
        blocking(move || prepare_run(&compiled, pyramid, &registry, config).map_err(ApiError::from_pipeline)).await
    };
    let run = match prepared {
        Ok(r) => r,
        Err(e) => {
            state.release_slot();
            return Err(e);
        }
    };
    let id = format!("r{}", state.next_run.fetch_add(1, Ordering::SeqCst));
    let classes = state.registry.get(&compiled.model).map_or(0, |r| r.descriptor().num_classes);
    let entry = Arc::new(RunEntry {
        id: id.clone(),
        slide_id,
        pipeline: name,
        slide: slide.pyramid.clone(),
        layer: run.layer().clone(),
        classes,
        total: run.plan().total(),
        halt: run.halt_handle(),
        progress: Mutex::new(Progress { state: RunState::Running, done: 0, error: None, events: Vec::new() }),
        notify: watch::channel(0).0,
    });
    {
        let mut p = entry.lock();
        entry.push(&mut p, json!({ "type": "start", "run_id": id, "kind": entry.layer.kind(), "total": entry.total }));
    }
    state.runs.write().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), entry.clone());
    let worker_state = state.clone();
    let worker_entry = entry.clone();
    let spawned = std::thread::Builder::new().name(format!("run-{id}")).spawn(move || {
        let result = run.run(&EventSink(worker_entry.clone()));
        worker_state.release_slot();
        match result {
            Ok(s) if s.status == RunStatus::Finished => worker_entry.end(RunState::Finished, None),
            Ok(_) => worker_entry.end(RunState::Halted, None),
            Err(e) => {
                log::error!("run {} failed: {e}", worker_entry.id);
                worker_entry.end(RunState::Failed, Some(e.to_string()));
            }
        }
    });
    if let Err(e) = spawned {
        state.release_slot();
        entry.end(RunState::Failed, Some(e.to_string()));
        return Err(ApiError::internal(e));
    }
    Ok((StatusCode::ACCEPTED, Json(entry.info())).into_response())
}

pub async fn list(State(state): State<Arc<AppState>>) -> Json<Vec<RunInfo>> {
    let runs: Vec<Arc<RunEntry>> = state.runs.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
    let mut out: Vec<RunInfo> = runs.iter().map(|r| r.info()).collect();
    out.sort_by_key(|r| r.run_id[1..].parse::<u64>().unwrap_or(u64::MAX));
    Json(out)
}

pub async fn info(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<RunInfo>> {
    Ok(Json(state.run(&id)?.info()))
}

/// Requests a halt; the run drains in-flight patches and ends as `halted`.
pub async fn halt(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let run = state.run(&id)?;
    if run.is_running() {
        run.halt.store(true, Ordering::SeqCst);
        return Ok((StatusCode::ACCEPTED, Json(run.info())).into_response());
    }
    Ok(Json(run.info()).into_response())
}

/// Newline-delimited JSON: every event so far, then new ones as they happen, closing after the
/// terminal event.
pub async fn events(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let run = state.run(&id)?;
    let rx = run.notify.subscribe();
    let stream = futures::stream::unfold((run, 0usize, rx), |(run, mut cursor, mut rx)| async move {
        loop {
            rx.borrow_and_update();
            let (chunk, ended) = {
                let p = run.lock();
                let chunk = p.events[cursor..].concat();
                cursor = p.events.len();
                (chunk, p.state != RunState::Running)
            };
            if !chunk.is_empty() {
                return Some((Ok::<_, Infallible>(chunk), (run, cursor, rx)));
            }
            if ended || rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(([(CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream)).into_response())
}

/// Class and confidence (gray + alpha PNG) over the footprint of slide tile `(level, col, row)`.
/// Unprocessed pixels read class 255, confidence 0.
pub async fn overlay(
    State(state): State<Arc<AppState>>,
    Path((id, level, col, row)): Path<(String, u32, u32, u32)>,
) -> ApiResult<Response> {
    let run = state.run(&id)?;
    let (x, y, w, h) = run
        .slide
        .tile_rect(TileKey::new(level, col, row))
        .map_err(|e| ApiError::not_found(e.to_string()))?;
    let bytes = blocking(move || {
        let px = run.layer.overlay_region(level, x, y, w, h).map_err(ApiError::internal)?;
        encode_png(w, h, 2, &px).map_err(ApiError::internal)
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Deserialize)]
pub struct StatsQuery {
    #[serde(default)]
    snapshot: u8,
    /// Comma-separated class ids left out of the slide-level call.
    exclude: Option<String>,
}

fn parse_exclude(s: Option<&str>) -> ApiResult<Vec<u32>> {
    s.filter(|s| !s.is_empty())
        .map(|s| s.split(',').map(|v| v.trim().parse().map_err(|_| ApiError::bad_request(format!("bad class id `{v}`")))).collect())
        .unwrap_or(Ok(Vec::new()))
}

pub async fn stats(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<StatsQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let run = state.run(&id)?;
    if run.is_running() && q.snapshot == 0 {
        return Err(ApiError::conflict("run is still going; pass snapshot=1 for partial statistics"));
    }
    let exclude = parse_exclude(q.exclude.as_deref())?;
    let info = run.info();
    let body = blocking(move || {
        let mut body = match run.layer.as_ref() {
            ResultLayer::Heatmap(h) => serde_json::to_value(heatmap_stats(&h.snapshot(), &exclude)).map_err(ApiError::internal)?,
            ResultLayer::Segmentation(s) => {
                let p = s.pyramid();
                let data = p.read_level(0).map_err(ApiError::internal)?;
                let mut histogram = vec![0u64; run.classes as usize];
                let mut processed = 0u64;
                for (i, &c) in data.iter().enumerate() {
                    let (x, y) = ((i % p.width() as usize) as u32, (i / p.width() as usize) as u32);
                    if s.pixel_committed(x, y) {
                        processed += 1;
                        if let Some(slot) = histogram.get_mut(c as usize) {
                            *slot += 1;
                        }
                    }
                }
                json!({
                    "histogram": histogram,
                    "processed_pixels": processed,
                    "total_pixels": data.len(),
                    "slide_call": slide_level_call(&histogram, &exclude),
                })
            }
            ResultLayer::Detections(d) => {
                let boxes = d.finish();
                let mut histogram = vec![0u64; run.classes as usize];
                for b in &boxes {
                    if let Some(slot) = histogram.get_mut(b.class_id as usize) {
                        *slot += 1;
                    }
                }
                json!({
                    "histogram": histogram,
                    "detections": boxes.len(),
                    "slide_call": slide_level_call(&histogram, &exclude),
                })
            }
        };
        body["kind"] = json!(run.layer.kind());
        Ok(body)
    })
    .await?;
    let mut body = body;
    body["run_id"] = json!(info.run_id);
    body["state"] = json!(info.state);
    Ok(Json(body))
}

#[derive(Deserialize)]
pub struct ExportQuery {
    format: String,
    /// Heatmap raster to export: `classes` (default) or `confidence`.
    layer: Option<String>,
}

fn download(bytes: Vec<u8>, content_type: &'static str, file_name: String) -> Response {
    (
        [(CONTENT_TYPE, content_type.to_string()), (CONTENT_DISPOSITION, format!("attachment; filename=\"{file_name}\""))],
        bytes,
    )
        .into_response()
}

/// Downloads one exporter output. MetaImage comes in two requests: `mhd` for the header, whose
/// data file is named `{run}_{layer}.raw`, and `raw` for the pixels.
pub async fn export(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    let run = state.run(&id)?;
    if run.is_running() {
        return Err(ApiError::conflict("run is still going"));
    }
    blocking(move || {
        let unsupported = || ApiError::bad_request(format!("format `{}` does not apply to a {} run", q.format, run.layer.kind()));
        let (raster, layer_name) = match run.layer.as_ref() {
            ResultLayer::Heatmap(h) => {
                let snap = h.snapshot();
                if q.format == "tensor" {
                    let shape = vec![u64::from(snap.rows), u64::from(snap.cols), u64::from(snap.classes)];
                    let c = TensorContainer::from_scalars(shape, &snap.values).map_err(ApiError::internal)?;
                    return Ok(download(c.encode(), "application/octet-stream", format!("{}_heatmap.ptns", run.id)));
                }
                let (classes, conf) = heatmap_rasters(&snap);
                match q.layer.as_deref().unwrap_or("classes") {
                    "classes" => (classes, "classes"),
                    "confidence" => (conf, "confidence"),
                    other => return Err(ApiError::bad_request(format!("unknown heatmap layer `{other}`"))),
                }
            }
            ResultLayer::Segmentation(s) => {
                let p = s.pyramid();
                let data = p.read_level(0).map_err(ApiError::internal)?;
                if q.format == "tensor" {
                    let shape = vec![u64::from(p.height()), u64::from(p.width())];
                    let c = TensorContainer::from_u8(shape, &data).map_err(ApiError::internal)?;
                    return Ok(download(c.encode(), "application/octet-stream", format!("{}_segmentation.ptns", run.id)));
                }
                (pyraflow::export::Raster { width: p.width(), height: p.height(), data }, "segmentation")
            }
            ResultLayer::Detections(d) => {
                if q.format != "csv" {
                    return Err(unsupported());
                }
                let mut buf = Vec::new();
                write_detections_csv(&d.finish(), &mut buf).map_err(ApiError::internal)?;
                return Ok(download(buf, "text/csv", format!("{}_detections.csv", run.id)));
            }
        };
        let stem = format!("{}_{layer_name}", run.id);
        match q.format.as_str() {
            "mhd" => Ok(download(
                metaimage_header(raster.width, raster.height, &format!("{stem}.raw")).into_bytes(),
                "text/plain",
                format!("{stem}.mhd"),
            )),
            "raw" => Ok(download(raster.data, "application/octet-stream", format!("{stem}.raw"))),
            _ => Err(unsupported()),
        }
    })
    .await
}
