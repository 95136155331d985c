use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use super::{
    make_batches, preprocess, read_patch, resize_nearest, Detection, DetectionLayer, HeatmapLayer, LevelRect,
    PatchDescriptor, PatchError, PatchPlan, ResultLayer, SegmentationLayer,
};
use crate::models::{ClassRaster, ModelDescriptor, ModelOutput, ModelRunner, Task};
use crate::pyramid::{ImagePyramid, PyramidPolicy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BUFFER_CAPACITY: usize = 64;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PatchGenerator,
    NnInput,
    NnInference,
    NnOutput,
    PatchStitcher,
}

impl Stage {
    pub const ALL: [Stage; 5] =
        [Stage::PatchGenerator, Stage::NnInput, Stage::NnInference, Stage::NnOutput, Stage::PatchStitcher];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PatchGenerator => "patch_generator",
            Stage::NnInput => "nn_input",
            Stage::NnInference => "nn_inference",
            Stage::NnOutput => "nn_output",
            Stage::PatchStitcher => "patch_stitcher",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Capacity, in patches, of the queue between the generator and preprocessing.
    pub buffer_capacity: usize,
    pub nms_iou: f64,
    /// Storage policy for segmentation result pyramids.
    pub result_policy: PyramidPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { buffer_capacity: DEFAULT_BUFFER_CAPACITY, nms_iou: DEFAULT_NMS_IOU, result_policy: PyramidPolicy::default() }
    }
}

/// Upper bound on patches generated but not yet stitched: the generator queue, one patch in the
/// generator, and a batch in each later stage and in each queue between them.
pub fn max_resident_patches(buffer_capacity: usize, batch_size: usize) -> usize {
    buffer_capacity + 1 + 7 * batch_size
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunProgress {
    pub done: usize,
    pub total: usize,
    /// Source-level rectangles committed since the previous report.
    pub dirty_regions: Vec<LevelRect>,
}

pub trait RunObserver: Send + Sync {
    fn on_progress(&self, _progress: &RunProgress) {}
}

impl RunObserver for () {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Finished,
    Halted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub done: usize,
    pub total: usize,
    /// Busy time per stage in milliseconds, in [`Stage::ALL`] order. Time spent waiting on the
    /// queues is not counted.
    pub stage_ms: [f64; 5],
    pub wall_ms: f64,
    pub peak_resident_patches: usize,
}

/// A model output mapped back to the patch footprint.
#[derive(Clone, Debug, PartialEq)]
pub enum StageOutput<S> {
    Probabilities(Vec<S>),
    /// Footprint-sized class raster.
    Raster(ClassRaster),
    /// Boxes in source-level pixels relative to the patch origin.
    Boxes(Vec<Detection<S>>),
}

/// Checks a model output against the descriptor and maps it to the patch footprint.
pub fn postprocess<S: Scalar>(
    d: &PatchDescriptor,
    model: &ModelDescriptor,
    output: ModelOutput<S>,
) -> Result<StageOutput<S>, PatchError> {
    let shape = |message: String| PatchError::Shape { patch: *d, message };
    match (model.task, output) {
        (Task::PatchClassification, ModelOutput::Probabilities(p)) => {
            if p.len() != model.num_classes as usize {
                return Err(shape(format!("{} probabilities for {} classes", p.len(), model.num_classes)));
            }
            let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
            if (sum - 1.0).abs() > 1e-5 || p.iter().any(|v| !(0.0..=1.0).contains(&v.as_f64())) {
                return Err(shape(format!("probabilities sum to {sum}")));
            }
            Ok(StageOutput::Probabilities(p))
        }
        (t, ModelOutput::Segmentation(r)) if t.is_segmentation() => {
            if r.data.len() != r.width as usize * r.height as usize || r.width == 0 || r.height == 0 {
                return Err(shape(format!("raster {}x{} holds {} labels", r.width, r.height, r.data.len())));
            }
            if (r.width, r.height) == (d.footprint_w, d.footprint_h) {
                return Ok(StageOutput::Raster(r));
            }
            let data = resize_nearest(&r.data, r.width, r.height, d.footprint_w, d.footprint_h);
            Ok(StageOutput::Raster(ClassRaster { width: d.footprint_w, height: d.footprint_h, data }))
        }
        (Task::Detection, ModelOutput::Boxes(boxes)) => {
            let sx = S::from_f64_lossy(f64::from(d.footprint_w) / f64::from(model.input_width));
            let sy = S::from_f64_lossy(f64::from(d.footprint_h) / f64::from(model.input_height));
            let one = S::one();
            if let Some(b) = boxes.iter().find(|b| b.score < S::zero() || b.score > one) {
                return Err(shape(format!("score {} outside [0, 1]", b.score)));
            }
            Ok(StageOutput::Boxes(
                boxes
                    .into_iter()
                    .map(|b| Detection { x: b.x * sx, y: b.y * sy, w: b.w * sx, h: b.h * sy, ..b })
                    .collect(),
            ))
        }
        (t, other) => Err(shape(format!("task {t} produced {}", output_kind(&other)))),
    }
}

fn output_kind<S>(o: &ModelOutput<S>) -> &'static str {
    match o {
        ModelOutput::Probabilities(_) => "probabilities",
        ModelOutput::Segmentation(_) => "a class raster",
        ModelOutput::Boxes(_) => "boxes",
    }
}

/// Runners that refuse concurrent calls share this lock.
static SERIAL_INVOKE: Mutex<()> = Mutex::new(());

#[derive(Default)]
struct Counters {
    busy_ns: [AtomicU64; 5],
    resident: AtomicUsize,
    peak: AtomicUsize,
}

impl Counters {
    fn time<R>(&self, stage: Stage, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let r = f();
        self.busy_ns[stage as usize].fetch_add(t.elapsed().as_nanos() as u64, Ordering::Relaxed);
        r
    }
}

type Item<T> = (PatchDescriptor, T);

/// One execution of a patch plan through a model runner. The result layer exists from
/// construction on and can be read while [`PipelineRun::run`] is working.
pub struct PipelineRun<S: Scalar> {
    pyramid: Arc<ImagePyramid>,
    plan: PatchPlan,
    runner: Arc<dyn ModelRunner<S>>,
    layer: Arc<ResultLayer<S>>,
    halt: Arc<AtomicBool>,
    config: RunConfig,
}

impl<S: Scalar> PipelineRun<S> {
    pub fn new(
        pyramid: Arc<ImagePyramid>,
        plan: PatchPlan,
        runner: Arc<dyn ModelRunner<S>>,
        config: RunConfig,
    ) -> Result<Self, PatchError> {
        if config.buffer_capacity == 0 {
            return Err(PatchError::Argument("buffer capacity must be at least 1".into()));
        }
        let d = runner.descriptor();
        let layer = match d.task {
            Task::PatchClassification => ResultLayer::Heatmap(HeatmapLayer::new(&plan, d.num_classes)),
            Task::ImageSegmentation | Task::PatchSegmentation => {
                ResultLayer::Segmentation(SegmentationLayer::new(&plan, &config.result_policy)?)
            }
            Task::Detection => ResultLayer::Detections(DetectionLayer::new(
                S::from_f64_lossy(config.nms_iou),
                pyramid.width(),
                pyramid.height(),
            )),
        };
        Ok(Self { pyramid, plan, runner, layer: Arc::new(layer), halt: Arc::new(AtomicBool::new(false)), config })
    }

    pub fn layer(&self) -> &Arc<ResultLayer<S>> {
        &self.layer
    }

    pub fn plan(&self) -> &PatchPlan {
        &self.plan
    }

    /// Flag that stops patch generation once set; patches already generated are still stitched.
    pub fn halt_handle(&self) -> Arc<AtomicBool> {
        self.halt.clone()
    }

    pub fn halt(&self) {
        self.halt.store(true, Ordering::SeqCst);
    }

    /// Runs all stages concurrently until the plan is exhausted or the run is halted.
    pub fn run(&self, observer: &dyn RunObserver) -> Result<RunSummary, PatchError> {
        let start = Instant::now();
        let total = self.plan.total();
        let counters = Counters::default();
        let abort = AtomicBool::new(false);
        let model = self.runner.descriptor().clone();
        observer.on_progress(&RunProgress { done: 0, total, dirty_regions: Vec::new() });

        let (patch_tx, patch_rx) = bounded(self.config.buffer_capacity);
        let (tensor_tx, tensor_rx) = bounded(1);
        let (output_tx, output_rx) = bounded(1);
        let (stitch_tx, stitch_rx) = bounded(1);

        let mut done = 0usize;
        let results: Vec<(Stage, Result<(), PatchError>)> = std::thread::scope(|s| {
            let (counters, abort, model) = (&counters, &abort, &model);
            let fail = move |stage: Stage, r: Result<(), PatchError>| {
                if r.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                (stage, r)
            };
            let handles = [
                s.spawn(move || fail(Stage::PatchGenerator, self.generate(patch_tx, counters, abort))),
                s.spawn(move || fail(Stage::NnInput, self.prepare(patch_rx, tensor_tx, model, counters))),
                s.spawn(move || fail(Stage::NnInference, self.infer(tensor_rx, output_tx, counters))),
                s.spawn(move || fail(Stage::NnOutput, postprocess_stage(output_rx, stitch_tx, model, counters))),
            ];
            let stitched = fail(Stage::PatchStitcher, self.stitch(stitch_rx, counters, observer, &mut done, total));
            let mut out: Vec<_> = handles.into_iter().map(|h| h.join().expect("stage thread panicked")).collect();
            out.push(stitched);
            out
        });
        if let Some((stage, Err(e))) = results.into_iter().find(|(_, r)| r.is_err()) {
            return Err(PatchError::Stage { stage, source: Box::new(e) });
        }
        let status = if done < total { RunStatus::Halted } else { RunStatus::Finished };
        Ok(RunSummary {
            status,
            done,
            total,
            stage_ms: std::array::from_fn(|i| counters.busy_ns[i].load(Ordering::Relaxed) as f64 / 1e6),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            peak_resident_patches: counters.peak.load(Ordering::Relaxed),
        })
    }

    fn generate(&self, tx: Sender<super::Patch>, c: &Counters, abort: &AtomicBool) -> Result<(), PatchError> {
        for d in &self.plan.patches {
            if self.halt.load(Ordering::SeqCst) || abort.load(Ordering::SeqCst) {
                break;
            }
            let patch = c.time(Stage::PatchGenerator, || read_patch(&self.pyramid, d))?;
            let now = c.resident.fetch_add(1, Ordering::SeqCst) + 1;
            c.peak.fetch_max(now, Ordering::SeqCst);
            if tx.send(patch).is_err() {
                break;
            }
        }
        Ok(())
    }

    fn prepare(
        &self,
        rx: Receiver<super::Patch>,
        tx: Sender<Vec<Item<Tensor<S>>>>,
        model: &ModelDescriptor,
        c: &Counters,
    ) -> Result<(), PatchError> {
        let tensors = rx.iter().map(|p| (p.descriptor, c.time(Stage::NnInput, || preprocess::<S>(&p, model))));
        for batch in make_batches(tensors, model.batch_size as usize) {
            if tx.send(batch).is_err() {
                break;
            }
        }
        Ok(())
    }

    fn infer(
        &self,
        rx: Receiver<Vec<Item<Tensor<S>>>>,
        tx: Sender<Vec<Item<ModelOutput<S>>>>,
        c: &Counters,
    ) -> Result<(), PatchError> {
        for batch in rx.iter() {
            let (descs, tensors): (Vec<_>, Vec<_>) = batch.into_iter().unzip();
            let outputs = c.time(Stage::NnInference, || {
                let _guard =
                    (!self.runner.concurrent_invocations()).then(|| SERIAL_INVOKE.lock().unwrap_or_else(|e| e.into_inner()));
                self.runner.invoke(&tensors)
            })?;
            if outputs.len() != descs.len() {
                return Err(crate::models::ModelError::Inference(format!(
                    "{} outputs for a batch of {}",
                    outputs.len(),
                    descs.len()
                ))
                .into());
            }
            if tx.send(descs.into_iter().zip(outputs).collect()).is_err() {
                break;
            }
        }
        Ok(())
    }

    fn stitch(
        &self,
        rx: Receiver<Vec<Item<StageOutput<S>>>>,
        c: &Counters,
        observer: &dyn RunObserver,
        done: &mut usize,
        total: usize,
    ) -> Result<(), PatchError> {
        for batch in rx.iter() {
            for (d, out) in batch {
                c.time(Stage::PatchStitcher, || self.commit(&d, out))?;
                c.resident.fetch_sub(1, Ordering::SeqCst);
                *done += 1;
                observer.on_progress(&RunProgress { done: *done, total, dirty_regions: vec![LevelRect::of_patch(&d)] });
            }
        }
        Ok(())
    }

    fn commit(&self, d: &PatchDescriptor, out: StageOutput<S>) -> Result<(), PatchError> {
        match (&*self.layer, out) {
            (ResultLayer::Heatmap(h), StageOutput::Probabilities(p)) => h.commit(d, &p),
            (ResultLayer::Segmentation(s), StageOutput::Raster(r)) => s.commit(d, &r),
            (ResultLayer::Detections(a), StageOutput::Boxes(b)) => {
                a.commit(d, &b);
                Ok(())
            }
            (layer, _) => Err(PatchError::Stitch(format!("output does not fit a {} layer", layer.kind()))),
        }
    }
}

fn postprocess_stage<S: Scalar>(
    rx: Receiver<Vec<Item<ModelOutput<S>>>>,
    tx: Sender<Vec<Item<StageOutput<S>>>>,
    model: &ModelDescriptor,
    c: &Counters,
) -> Result<(), PatchError> {
    for batch in rx.iter() {
        let mapped = c.time(Stage::NnOutput, || {
            batch.into_iter().map(|(d, o)| postprocess(&d, model, o).map(|m| (d, m))).collect::<Result<Vec<_>, _>>()
        })?;
        if tx.send(mapped).is_err() {
            break;
        }
    }
    Ok(())
}

impl RunSummary {
    pub fn stage(&self, stage: Stage) -> Duration {
        Duration::from_secs_f64(self.stage_ms[stage as usize] / 1e3)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::AtomicUsize;

    use super::*;
    use crate::models::{builtin_descriptors, MockClassifier, ModelError, ModelRegistry};
    use crate::patchflow::plan_patches;
    use crate::pyramid::{generate_synthetic_slide, SyntheticSpec};

    fn slide() -> Arc<ImagePyramid> {
        Arc::new(generate_synthetic_slide(7, 1024, 768, &SyntheticSpec::default()).unwrap())
    }

    fn runner(name: &str) -> Arc<dyn ModelRunner<f32>> {
        ModelRegistry::<f32>::with_mocks().get(name).unwrap()
    }

    fn sequential_classes(p: &ImagePyramid, plan: &PatchPlan) -> Vec<u8> {
        let d = builtin_descriptors()[0].clone();
        let mut out = vec![crate::patchflow::UNPROCESSED; (plan.cols * plan.rows) as usize];
        for pd in &plan.patches {
            let t = preprocess::<f32>(&read_patch(p, pd).unwrap(), &d);
            out[(pd.grid_row * plan.cols + pd.grid_col) as usize] = MockClassifier::classify(&t) as u8;
        }
        out
    }

    #[test]
    fn classification_matches_sequential() {
        let p = slide();
        let plan = plan_patches(&p, None, 128, 20.0, 0.1).unwrap();
        let run = PipelineRun::new(p.clone(), plan.clone(), runner("mock_classifier_v1"), RunConfig::default()).unwrap();
        let summary = run.run(&()).unwrap();
        assert_eq!(summary.status, RunStatus::Finished);
        assert_eq!((summary.done, summary.total), (plan.total(), plan.total()));
        let ResultLayer::Heatmap(h) = &**run.layer() else { panic!() };
        assert_eq!(h.snapshot().class_raster(), sequential_classes(&p, &plan));
    }

    struct HaltAfter {
        after: usize,
        halt: Arc<AtomicBool>,
        seen: Mutex<Vec<usize>>,
    }

    impl RunObserver for HaltAfter {
        fn on_progress(&self, p: &RunProgress) {
            let mut seen = self.seen.lock().unwrap();
            seen.push(p.done);
            if p.done >= self.after {
                self.halt.store(true, Ordering::SeqCst);
            }
        }
    }

    #[test]
    fn halt_leaves_consistent_prefix() {
        let p = slide();
        let plan = plan_patches(&p, None, 64, 20.0, 0.1).unwrap();
        let full = sequential_classes(&p, &plan);
        let config = RunConfig { buffer_capacity: 1, ..Default::default() };
        let run = PipelineRun::new(p.clone(), plan.clone(), runner("mock_classifier_v1"), config).unwrap();
        let obs = HaltAfter { after: 1, halt: run.halt_handle(), seen: Mutex::new(Vec::new()) };
        let summary = run.run(&obs).unwrap();
        assert_eq!(summary.status, RunStatus::Halted);
        assert!(summary.done < summary.total);
        let seen = obs.seen.lock().unwrap();
        assert!(seen.windows(2).all(|w| w[0] <= w[1]));
        let ResultLayer::Heatmap(h) = &**run.layer() else { panic!() };
        let partial = h.snapshot();
        assert_eq!(partial.processed_cells(), summary.done);
        for (got, want) in partial.class_raster().iter().zip(&full) {
            assert!(*got == crate::patchflow::UNPROCESSED || got == want);
        }
    }

    #[test]
    fn empty_plan_completes() {
        let p = slide();
        let mut plan = plan_patches(&p, None, 128, 20.0, 0.1).unwrap();
        plan.patches.clear();
        let run = PipelineRun::new(p, plan, runner("mock_segmenter_v1"), RunConfig::default()).unwrap();
        let s = run.run(&()).unwrap();
        assert_eq!((s.status, s.done, s.total), (RunStatus::Finished, 0, 0));
    }

    struct Broken(ModelDescriptor);

    impl ModelRunner<f32> for Broken {
        fn descriptor(&self) -> &ModelDescriptor {
            &self.0
        }

        fn invoke(&self, _: &[Tensor<f32>]) -> Result<Vec<ModelOutput<f32>>, ModelError> {
            Err(ModelError::Inference("device lost".into()))
        }

        fn concurrent_invocations(&self) -> bool {
            false
        }
    }

    #[test]
    fn stage_failure_is_named() {
        let p = slide();
        let plan = plan_patches(&p, None, 128, 20.0, 0.1).unwrap();
        let run =
            PipelineRun::new(p, plan, Arc::new(Broken(builtin_descriptors()[0].clone())), RunConfig::default()).unwrap();
        let err = run.run(&()).unwrap_err();
        assert!(matches!(err, PatchError::Stage { stage: Stage::NnInference, .. }));
        assert!(err.to_string().contains("nn_inference"));
    }

    struct Slow(Arc<dyn ModelRunner<f32>>, AtomicUsize);

    impl ModelRunner<f32> for Slow {
        fn descriptor(&self) -> &ModelDescriptor {
            self.0.descriptor()
        }

        fn invoke(&self, batch: &[Tensor<f32>]) -> Result<Vec<ModelOutput<f32>>, ModelError> {
            self.1.fetch_add(1, Ordering::Relaxed);
            std::thread::sleep(Duration::from_millis(2));
            self.0.invoke(batch)
        }
    }

    #[test]
    fn backpressure_bounds_resident_patches() {
        let p = slide();
        let plan = plan_patches(&p, None, 32, 40.0, 0.1).unwrap();
        assert!(plan.total() > 500);
        let inner = runner("mock_segmenter_v1");
        let bs = inner.descriptor().batch_size as usize;
        let mut d = inner.descriptor().clone();
        d.input_width = 32;
        d.input_height = 32;
        d.patch_size = 32;
        let mut reg = ModelRegistry::<f32>::new();
        reg.insert_mock(d).unwrap();
        let slow = Arc::new(Slow(reg.get("mock_segmenter_v1").unwrap(), AtomicUsize::new(0)));
        let config = RunConfig { buffer_capacity: 8, ..Default::default() };
        let run = PipelineRun::new(p, plan, slow.clone(), config).unwrap();
        let s = run.run(&()).unwrap();
        assert_eq!(s.done, s.total);
        assert!(s.peak_resident_patches <= max_resident_patches(8, bs), "peak {}", s.peak_resident_patches);
        assert!(s.peak_resident_patches > 8);
        assert_eq!(slow.1.load(Ordering::Relaxed), s.total.div_ceil(bs));
    }
}
