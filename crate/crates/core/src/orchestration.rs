//! Text pipelines and projects.
//!
//! A pipeline file is a chain of stages:
//!
//! ```text
//! stage tissue tissue_segmentation
//!   attr threshold 30.0
//!   attr closing_radius 2
//! stage gen patch_generator
//!   attr patch_size 512
//!   attr magnification 20.0
//! stage net neural_network
//!   attr model mock_classifier_v1
//! stage out stitcher
//!   attr kind classification
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::export::{
    export_detections_csv, export_metaimage, heatmap_rasters, heatmap_stats, ExportError, Raster, TensorContainer,
};
use crate::models::{ModelRegistry, Task};
use crate::patchflow::{
    plan_patches, plan_whole_image, PatchError, PipelineRun, ResultLayer, RunConfig, RunObserver, RunSummary,
    DEFAULT_KEEP_FRACTION, DEFAULT_NMS_IOU,
};
use crate::pyramid::{open_container, ImagePyramid, PyramidError};
use crate::scalar::Scalar;
use crate::tissue::{segment_tissue, segment_tissue_otsu, TissueError, TissueParams};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error(transparent)]
    Tissue(#[from] TissueError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("{path}: {message}")]
    Project { path: PathBuf, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    TissueSegmentation,
    PatchGenerator,
    BatchGenerator,
    NeuralNetwork,
    Stitcher,
    Accumulator,
    Exporter,
}

impl StageKind {
    pub const ALL: [StageKind; 7] = [
        StageKind::TissueSegmentation,
        StageKind::PatchGenerator,
        StageKind::BatchGenerator,
        StageKind::NeuralNetwork,
        StageKind::Stitcher,
        StageKind::Accumulator,
        StageKind::Exporter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::TissueSegmentation => "tissue_segmentation",
            StageKind::PatchGenerator => "patch_generator",
            StageKind::BatchGenerator => "batch_generator",
            StageKind::NeuralNetwork => "neural_network",
            StageKind::Stitcher => "stitcher",
            StageKind::Accumulator => "accumulator",
            StageKind::Exporter => "exporter",
        }
    }

    /// `(key, required, type)` for every attribute the kind accepts.
    fn attributes(self) -> &'static [(&'static str, bool, AttrType)] {
        use AttrType::*;
        match self {
            StageKind::TissueSegmentation => &[
                ("threshold", false, Real),
                ("closing_radius", false, Count),
                ("method", false, Word(&["distance", "otsu"])),
                ("keep_fraction", false, Fraction),
            ],
            StageKind::PatchGenerator => &[("patch_size", true, Positive), ("magnification", true, PositiveReal)],
            StageKind::BatchGenerator => &[("batch_size", true, Positive)],
            StageKind::NeuralNetwork => &[("model", true, Name)],
            StageKind::Stitcher => &[("kind", true, Word(&["classification", "segmentation"]))],
            StageKind::Accumulator => &[("nms_iou", false, Fraction)],
            StageKind::Exporter => &[("format", true, Word(&["mhd", "csv", "tensor"]))],
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown stage kind `{s}`"))
    }
}

#[derive(Clone, Copy, Debug)]
enum AttrType {
    Real,
    PositiveReal,
    Fraction,
    Count,
    Positive,
    Name,
    Word(&'static [&'static str]),
}

impl AttrType {
    fn check(self, v: &str) -> Result<(), String> {
        let real = || v.parse::<f64>().ok().filter(|x| x.is_finite());
        let ok = match self {
            AttrType::Real => real().is_some(),
            AttrType::PositiveReal => real().is_some_and(|x| x > 0.0),
            AttrType::Fraction => real().is_some_and(|x| (0.0..=1.0).contains(&x)),
            AttrType::Count => v.parse::<u32>().is_ok(),
            AttrType::Positive => v.parse::<u32>().is_ok_and(|x| x > 0),
            AttrType::Name => !v.is_empty() && !v.contains(char::is_whitespace),
            AttrType::Word(words) => words.contains(&v),
        };
        if ok {
            Ok(())
        } else {
            Err(match self {
                AttrType::Word(words) => format!("`{v}` is not one of {}", words.join(", ")),
                other => format!("`{v}` is not a valid {other:?}"),
            })
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub kind: StageKind,
    pub attributes: BTreeMap<String, String>,
    /// Line of the `stage` keyword in the source text; 0 for stages built in code.
    #[serde(default)]
    pub line: usize,
}

impl PartialEq for StageSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.kind == other.kind && self.attributes == other.attributes
    }
}

impl StageSpec {
    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Option<T> {
        self.attr(key).and_then(|v| v.parse().ok())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
}

impl fmt::Display for PipelineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stages {
            writeln!(f, "stage {} {}", s.name, s.kind)?;
            for (k, v) in &s.attributes {
                writeln!(f, "  attr {k} {v}")?;
            }
        }
        Ok(())
    }
}

/// Ready-made pipelines for the built-in mock models, as `(name, text)`.
pub fn builtin_pipelines() -> Vec<(&'static str, &'static str)> {
    vec![
        (
            "classify",
            "stage tissue tissue_segmentation\n  attr threshold 30.0\n  attr closing_radius 2\n\
             stage gen patch_generator\n  attr patch_size 256\n  attr magnification 20.0\n\
             stage net neural_network\n  attr model mock_classifier_v1\n\
             stage out stitcher\n  attr kind classification\n\
             stage save exporter\n  attr format mhd\n",
        ),
        (
            "segment",
            "stage tissue tissue_segmentation\n  attr threshold 30.0\n  attr closing_radius 2\n\
             stage gen patch_generator\n  attr patch_size 256\n  attr magnification 40.0\n\
             stage net neural_network\n  attr model mock_segmenter_v1\n\
             stage out stitcher\n  attr kind segmentation\n\
             stage save exporter\n  attr format mhd\n",
        ),
        (
            "segment_image",
            "stage gen patch_generator\n  attr patch_size 512\n  attr magnification 2.5\n\
             stage net neural_network\n  attr model mock_image_segmenter_v1\n\
             stage out stitcher\n  attr kind segmentation\n\
             stage save exporter\n  attr format mhd\n",
        ),
        (
            "detect",
            "stage tissue tissue_segmentation\n  attr threshold 30.0\n  attr closing_radius 2\n\
             stage gen patch_generator\n  attr patch_size 256\n  attr magnification 40.0\n\
             stage net neural_network\n  attr model mock_detector_v1\n\
             stage acc accumulator\n  attr nms_iou 0.5\n\
             stage save exporter\n  attr format csv\n",
        ),
    ]
}

/// Parses pipeline text. Attribute names and values are checked per stage kind; model
/// references are checked by [`PipelineSpec::compile`].
pub fn parse_pipeline(name: &str, text: &str) -> Result<PipelineSpec, PipelineError> {
    let syntax = |line: usize, message: String| PipelineError::Syntax { line, message };
    let mut stages: Vec<StageSpec> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim_end();
        if content.trim().is_empty() {
            continue;
        }
        let indented = content.starts_with(char::is_whitespace);
        let mut words = content.split_whitespace();
        match (words.next(), indented) {
            (Some("stage"), false) => {
                let (Some(stage_name), Some(kind), None) = (words.next(), words.next(), words.next()) else {
                    return Err(syntax(line, "expected `stage <name> <kind>`".into()));
                };
                let kind: StageKind = kind.parse().map_err(|m| syntax(line, m))?;
                if stages.iter().any(|s| s.name == stage_name) {
                    return Err(syntax(line, format!("duplicate stage name `{stage_name}`")));
                }
                stages.push(StageSpec { name: stage_name.into(), kind, attributes: BTreeMap::new(), line });
            }
            (Some("attr"), true) => {
                let Some(stage) = stages.last_mut() else {
                    return Err(syntax(line, "`attr` before any stage".into()));
                };
                let Some(key) = words.next() else {
                    return Err(syntax(line, "expected `attr <key> <value>`".into()));
                };
                let value = words.collect::<Vec<_>>().join(" ");
                if value.is_empty() {
                    return Err(syntax(line, format!("attribute `{key}` has no value")));
                }
                let Some(&(_, _, ty)) = stage.kind.attributes().iter().find(|(k, _, _)| *k == key) else {
                    return Err(syntax(line, format!("{} stage has no attribute `{key}`", stage.kind)));
                };
                ty.check(&value).map_err(|m| syntax(line, format!("attribute `{key}`: {m}")))?;
                if stage.attributes.insert(key.into(), value).is_some() {
                    return Err(syntax(line, format!("attribute `{key}` given twice")));
                }
            }
            (Some(word), _) => {
                let hint = if indented { "attribute lines start with `attr`" } else { "stages start with `stage`" };
                return Err(syntax(line, format!("unexpected `{word}`; {hint}")));
            }
            (None, _) => unreachable!(),
        }
    }
    if stages.is_empty() {
        return Err(syntax(1, "pipeline declares no stages".into()));
    }
    for s in &stages {
        for (key, required, _) in s.kind.attributes() {
            if *required && !s.attributes.contains_key(*key) {
                return Err(syntax(s.line, format!("{} stage `{}` needs attribute `{key}`", s.kind, s.name)));
            }
        }
    }
    Ok(PipelineSpec { name: name.into(), stages })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    Distance,
    Otsu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueStep {
    pub params: TissueParams,
    pub method: ThresholdMethod,
    pub keep_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Mhd,
    Csv,
    Tensor,
}

/// A validated pipeline with every parameter resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompiledPipeline {
    pub name: String,
    pub tissue: Option<TissueStep>,
    pub patch_size: u32,
    pub magnification: f64,
    pub batch_size: Option<u32>,
    pub model: String,
    pub task: Task,
    pub nms_iou: f64,
    pub exports: Vec<ExportFormat>,
}

const ORDER_HELP: &str = "expected [tissue_segmentation] patch_generator [batch_generator] neural_network \
                          (stitcher | accumulator) [exporter...]";

impl PipelineSpec {
    /// Checks the stage chain and the model reference against `registry`.
    pub fn compile<S: Scalar>(&self, registry: &ModelRegistry<S>) -> Result<CompiledPipeline, PipelineError> {
        let invalid = |line: usize, message: String| PipelineError::Invalid { line, message };
        let mut it = self.stages.iter().peekable();
        let tissue = it.next_if(|s| s.kind == StageKind::TissueSegmentation);
        let Some(generator) = it.next_if(|s| s.kind == StageKind::PatchGenerator) else {
            let line = it.peek().map_or(0, |s| s.line);
            return Err(invalid(line, ORDER_HELP.into()));
        };
        let batch = it.next_if(|s| s.kind == StageKind::BatchGenerator);
        let Some(net) = it.next_if(|s| s.kind == StageKind::NeuralNetwork) else {
            let line = it.peek().map_or(generator.line, |s| s.line);
            return Err(invalid(line, ORDER_HELP.into()));
        };
        let Some(sink) = it.next_if(|s| matches!(s.kind, StageKind::Stitcher | StageKind::Accumulator)) else {
            let line = it.peek().map_or(net.line, |s| s.line);
            return Err(invalid(line, ORDER_HELP.into()));
        };
        let mut exports = Vec::new();
        for s in it {
            if s.kind != StageKind::Exporter {
                return Err(invalid(s.line, format!("{} stage after the result stage; {ORDER_HELP}", s.kind)));
            }
            exports.push(match s.attr("format") {
                Some("mhd") => ExportFormat::Mhd,
                Some("csv") => ExportFormat::Csv,
                _ => ExportFormat::Tensor,
            });
        }
        let model_name = net.attr("model").unwrap_or_default();
        let Some(runner) = registry.get(model_name) else {
            return Err(invalid(net.line, format!("model `{model_name}` is not registered")));
        };
        let task = runner.descriptor().task;
        let fits = match (sink.kind, sink.attr("kind")) {
            (StageKind::Stitcher, Some("classification")) => task == Task::PatchClassification,
            (StageKind::Stitcher, Some("segmentation")) => task.is_segmentation(),
            (StageKind::Accumulator, _) => task == Task::Detection,
            _ => false,
        };
        if !fits {
            return Err(invalid(sink.line, format!("{} stage `{}` cannot take {task} output", sink.kind, sink.name)));
        }
        for f in &exports {
            let ok = match f {
                ExportFormat::Csv => task == Task::Detection,
                ExportFormat::Mhd => task != Task::Detection,
                ExportFormat::Tensor => task == Task::PatchClassification,
            };
            if !ok {
                return Err(invalid(sink.line, format!("{f:?} export does not apply to {task} results")));
            }
        }
        let tissue = tissue.map(|t| {
            let d = TissueParams::default();
            TissueStep {
                params: TissueParams {
                    threshold: t.parsed("threshold").unwrap_or(d.threshold),
                    closing_radius: t.parsed("closing_radius").unwrap_or(d.closing_radius),
                    reference_color: d.reference_color,
                },
                method: if t.attr("method") == Some("otsu") { ThresholdMethod::Otsu } else { ThresholdMethod::Distance },
                keep_fraction: t.parsed("keep_fraction").unwrap_or(DEFAULT_KEEP_FRACTION),
            }
        });
        if let Some(t) = &tissue {
            t.params.validate().map_err(|e| invalid(self.stages[0].line, e.to_string()))?;
        }
        Ok(CompiledPipeline {
            name: self.name.clone(),
            tissue,
            patch_size: generator.parsed("patch_size").expect("checked"),
            magnification: generator.parsed("magnification").expect("checked"),
            batch_size: batch.and_then(|b| b.parsed("batch_size")),
            model: model_name.into(),
            task,
            nms_iou: sink.parsed("nms_iou").unwrap_or(DEFAULT_NMS_IOU),
            exports,
        })
    }
}

/// Builds the run for one slide: tissue mask, patch plan and result layer. Nothing executes
/// until [`PipelineRun::run`].
pub fn prepare_run<S: Scalar>(
    pipeline: &CompiledPipeline,
    slide: Arc<ImagePyramid>,
    registry: &ModelRegistry<S>,
    config: RunConfig,
) -> Result<PipelineRun<S>, PipelineError> {
    let runner = registry.get(&pipeline.model).ok_or_else(|| PipelineError::Invalid {
        line: 0,
        message: format!("model `{}` is not registered", pipeline.model),
    })?;
    let plan = if pipeline.task == Task::ImageSegmentation {
        plan_whole_image(&slide, pipeline.patch_size, pipeline.magnification)?
    } else {
        let mask = match &pipeline.tissue {
            None => None,
            Some(t) if t.method == ThresholdMethod::Otsu => Some(segment_tissue_otsu(&slide, t.params.closing_radius)?.0),
            Some(t) => Some(segment_tissue(&slide, &t.params)?),
        };
        let keep = pipeline.tissue.as_ref().map_or(DEFAULT_KEEP_FRACTION, |t| t.keep_fraction);
        plan_patches(&slide, mask.as_ref(), pipeline.patch_size, pipeline.magnification, keep)?
    };
    let runner = match pipeline.batch_size {
        Some(bs) if bs != runner.descriptor().batch_size => rebatched(runner, bs),
        _ => runner,
    };
    let config = RunConfig { nms_iou: pipeline.nms_iou, ..config };
    Ok(PipelineRun::new(slide, plan, runner, config)?)
}

/// Same runner, different batch size.
struct Rebatched<S> {
    inner: Arc<dyn crate::models::ModelRunner<S>>,
    descriptor: crate::models::ModelDescriptor,
}

impl<S: Scalar> crate::models::ModelRunner<S> for Rebatched<S> {
    fn descriptor(&self) -> &crate::models::ModelDescriptor {
        &self.descriptor
    }

    fn invoke(
        &self,
        batch: &[crate::tensor::Tensor<S>],
    ) -> Result<Vec<crate::models::ModelOutput<S>>, crate::models::ModelError> {
        self.inner.invoke(batch)
    }

    fn concurrent_invocations(&self) -> bool {
        self.inner.concurrent_invocations()
    }
}

fn rebatched<S: Scalar>(
    inner: Arc<dyn crate::models::ModelRunner<S>>,
    batch_size: u32,
) -> Arc<dyn crate::models::ModelRunner<S>> {
    let mut descriptor = inner.descriptor().clone();
    descriptor.batch_size = batch_size;
    Arc::new(Rebatched { inner, descriptor })
}

/// Compiles and runs a pipeline on one slide, blocking until it ends.
pub fn execute_pipeline<S: Scalar>(
    spec: &PipelineSpec,
    slide: Arc<ImagePyramid>,
    registry: &ModelRegistry<S>,
    observer: &dyn RunObserver,
) -> Result<(Arc<ResultLayer<S>>, RunSummary), PipelineError> {
    let compiled = spec.compile(registry)?;
    let run = prepare_run(&compiled, slide, registry, RunConfig::default())?;
    let summary = run.run(observer)?;
    Ok((run.layer().clone(), summary))
}

/// Writes a result layer's files into `dir`; returns the file names written.
pub fn write_results<S: Scalar>(
    layer: &ResultLayer<S>,
    formats: &[ExportFormat],
    dir: &Path,
) -> Result<Vec<String>, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::Project { path: dir.into(), message: e.to_string() })?;
    let mut written = Vec::new();
    let mut formats = formats.to_vec();
    if formats.is_empty() {
        formats.push(match layer {
            ResultLayer::Detections(_) => ExportFormat::Csv,
            _ => ExportFormat::Mhd,
        });
    }
    for f in formats {
        match (layer, f) {
            (ResultLayer::Heatmap(h), ExportFormat::Mhd) => {
                let (classes, conf) = heatmap_rasters(&h.snapshot());
                export_metaimage(&classes, dir.join("heatmap_classes.mhd"))?;
                export_metaimage(&conf, dir.join("heatmap_confidence.mhd"))?;
                written.extend(["heatmap_classes.mhd", "heatmap_confidence.mhd"].map(String::from));
            }
            (ResultLayer::Heatmap(h), ExportFormat::Tensor) => {
                let snap = h.snapshot();
                let shape = vec![u64::from(snap.rows), u64::from(snap.cols), u64::from(snap.classes)];
                TensorContainer::from_scalars(shape, &snap.values)?.write(dir.join("heatmap.ptns"))?;
                written.push("heatmap.ptns".into());
            }
            (ResultLayer::Segmentation(s), ExportFormat::Mhd) => {
                let p = s.pyramid();
                let raster = Raster { width: p.width(), height: p.height(), data: p.read_level(0)? };
                export_metaimage(&raster, dir.join("segmentation.mhd"))?;
                written.push("segmentation.mhd".into());
            }
            (ResultLayer::Detections(d), ExportFormat::Csv) => {
                export_detections_csv(&d.finish(), dir.join("detections.csv"))?;
                written.push("detections.csv".into());
            }
            (layer, f) => {
                return Err(PipelineError::Invalid {
                    line: 0,
                    message: format!("{f:?} export does not apply to a {} layer", layer.kind()),
                })
            }
        }
    }
    if let ResultLayer::Heatmap(h) = layer {
        let stats = heatmap_stats(&h.snapshot(), &[]);
        let json = serde_json::to_vec_pretty(&stats).expect("stats serialize");
        fs::write(dir.join("stats.json"), json)
            .map_err(|e| PipelineError::Project { path: dir.join("stats.json"), message: e.to_string() })?;
        written.push("stats.json".into());
    }
    Ok(written)
}

pub const PROJECT_FILE: &str = "project.json";
pub const RESULTS_DIR: &str = "results";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub name: String,
    /// Slide container directories, relative to the project root unless absolute.
    pub slides: Vec<PathBuf>,
    #[serde(default)]
    pub history: Vec<String>,
}

impl Project {
    pub fn load(root: &Path) -> Result<Self, PipelineError> {
        let path = root.join(PROJECT_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| PipelineError::Project { path: path.clone(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Project { path, message: e.to_string() })
    }

    pub fn save(&self, root: &Path) -> Result<(), PipelineError> {
        let path = root.join(PROJECT_FILE);
        fs::create_dir_all(root).map_err(|e| PipelineError::Project { path: root.into(), message: e.to_string() })?;
        fs::write(&path, serde_json::to_vec_pretty(self).expect("project serializes"))
            .map_err(|e| PipelineError::Project { path, message: e.to_string() })
    }

    fn resolve(&self, root: &Path, slide: &Path) -> PathBuf {
        if slide.is_absolute() {
            slide.to_path_buf()
        } else {
            root.join(slide)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideStatus {
    Success,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideResult {
    pub slide: PathBuf,
    pub stem: String,
    pub status: SlideStatus,
    pub pipeline: String,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default)]
    pub patches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub slides: Vec<SlideResult>,
}

impl ResultManifest {
    pub fn successes(&self) -> usize {
        self.slides.iter().filter(|s| s.status == SlideStatus::Success).count()
    }

    pub fn failures(&self) -> usize {
        self.slides.len() - self.successes()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ProjectOptions {
    /// Skip slides that already have a successful entry for the same pipeline.
    pub resume: bool,
}

fn slide_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "slide".into())
}

/// Runs the pipeline over every slide of the project in list order, one at a time. Failing
/// slides are recorded and the run moves on. The result manifest is rewritten after each slide.
pub fn run_for_project<S: Scalar>(
    root: &Path,
    spec: &PipelineSpec,
    registry: &ModelRegistry<S>,
    options: ProjectOptions,
) -> Result<ResultManifest, PipelineError> {
    let mut project = Project::load(root)?;
    let compiled = spec.compile(registry)?;
    let results = root.join(RESULTS_DIR);
    let manifest_path = results.join("manifest.json");
    let previous: ResultManifest = if options.resume {
        fs::read(&manifest_path).ok().and_then(|b| serde_json::from_slice(&b).ok()).unwrap_or_default()
    } else {
        ResultManifest::default()
    };
    fs::create_dir_all(&results).map_err(|e| PipelineError::Project { path: results.clone(), message: e.to_string() })?;
    let mut manifest = ResultManifest::default();
    for slide in &project.slides {
        let stem = slide_stem(slide);
        if let Some(done) = previous
            .slides
            .iter()
            .find(|r| r.slide == *slide && r.pipeline == compiled.name && r.status == SlideStatus::Success)
        {
            log::info!("skipping {} (already processed)", slide.display());
            manifest.slides.push(done.clone());
            continue;
        }
        let out_dir = results.join(&stem);
        let outcome = (|| -> Result<(Vec<String>, usize), PipelineError> {
            let pyramid = Arc::new(open_container(project.resolve(root, slide))?);
            let run = prepare_run(&compiled, pyramid, registry, RunConfig::default())?;
            let summary = run.run(&())?;
            let files = write_results(run.layer(), &compiled.exports, &out_dir)?;
            Ok((files, summary.done))
        })();
        let entry = match outcome {
            Ok((files, patches)) => SlideResult {
                slide: slide.clone(),
                stem,
                status: SlideStatus::Success,
                pipeline: compiled.name.clone(),
                error: None,
                files,
                patches,
            },
            Err(e) => {
                log::warn!("slide {} failed: {e}", slide.display());
                SlideResult {
                    slide: slide.clone(),
                    stem,
                    status: SlideStatus::Failed,
                    pipeline: compiled.name.clone(),
                    error: Some(e.to_string()),
                    files: Vec::new(),
                    patches: 0,
                }
            }
        };
        manifest.slides.push(entry);
        fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
            .map_err(|e| PipelineError::Project { path: manifest_path.clone(), message: e.to_string() })?;
    }
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| PipelineError::Project { path: manifest_path.clone(), message: e.to_string() })?;
    project.history.push(compiled.name.clone());
    project.save(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const EXAMPLE: &str = "\
stage tissue tissue_segmentation
  attr threshold 30.0
  attr closing_radius 2
stage gen patch_generator
  attr patch_size 512
  attr magnification 20.0
stage net neural_network
  attr model mock_classifier_v1
stage out stitcher
  attr kind classification
";

    #[test]
    fn example_parses() {
        let spec = parse_pipeline("grading", EXAMPLE).unwrap();
        assert_eq!(spec.stages.len(), 4);
        assert_eq!(spec.stages[2].attr("model"), Some("mock_classifier_v1"));
        assert_eq!(spec.stages[3].line, 9);
        let again = parse_pipeline("grading", &spec.to_string()).unwrap();
        assert_eq!(again, spec);
        let c = spec.compile(&ModelRegistry::<f32>::with_mocks()).unwrap();
        assert_eq!((c.patch_size, c.magnification, c.task), (512, 20.0, Task::PatchClassification));
        assert_eq!(c.tissue.unwrap().params.threshold, 30.0);
    }

    #[test]
    fn builtins_compile() {
        let reg = ModelRegistry::<f32>::with_mocks();
        for (name, text) in builtin_pipelines() {
            let spec = parse_pipeline(name, text).unwrap();
            spec.compile(&reg).unwrap();
        }
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let err = parse_pipeline("x", &EXAMPLE.replace("stitcher", "stitchr")).unwrap_err();
        assert!(matches!(err, PipelineError::Syntax { line: 9, .. }));
        assert!(err.to_string().contains("stitchr"));
        let dup = EXAMPLE.replace("stage out", "stage gen");
        assert!(parse_pipeline("x", &dup).unwrap_err().to_string().contains("duplicate"));
        let missing = EXAMPLE.replace("  attr patch_size 512\n", "");
        assert!(matches!(parse_pipeline("x", &missing), Err(PipelineError::Syntax { line: 4, .. })));
        let bad_value = EXAMPLE.replace("patch_size 512", "patch_size -3");
        assert!(matches!(parse_pipeline("x", &bad_value), Err(PipelineError::Syntax { line: 5, .. })));
        assert!(parse_pipeline("x", "# nothing\n").is_err());
        assert!(parse_pipeline("x", "  attr a b\n").is_err());
    }

    #[test]
    fn dangling_model_and_bad_chain() {
        let reg = ModelRegistry::<f32>::with_mocks();
        let spec = parse_pipeline("x", &EXAMPLE.replace("mock_classifier_v1", "ghost")).unwrap();
        assert!(matches!(spec.compile(&reg), Err(PipelineError::Invalid { line: 7, .. })));
        let spec = parse_pipeline("x", &EXAMPLE.replace("kind classification", "kind segmentation")).unwrap();
        assert!(matches!(spec.compile(&reg), Err(PipelineError::Invalid { line: 9, .. })));
        let no_gen = "stage net neural_network\n  attr model mock_classifier_v1\n";
        assert!(parse_pipeline("x", no_gen).unwrap().compile(&reg).is_err());
    }
}
