//! Sliding-window patch processing: grid planning over the tissue mask, preprocessing and
//! batching, the staged concurrent pipeline, and the result layers it stitches into.

mod detect;
mod plan;
mod preprocess;
mod run;
mod stitch;

pub use detect::{clamp_to_slide, iou, local_to_level0, nms, rank, Detection, DetectionAccumulator};
pub use plan::{
    level0_to_level, level_to_level0, plan_patches, plan_whole_image, read_patch, source_level, Patch,
    PatchDescriptor, PatchPlan, DEFAULT_KEEP_FRACTION,
};
pub use preprocess::{make_batches, preprocess, resize_bilinear, resize_bilinear_u8, resize_nearest, Batches};
pub use run::{
    max_resident_patches, postprocess, PipelineRun, RunConfig, RunObserver, RunProgress, RunStatus, RunSummary,
    Stage, StageOutput, DEFAULT_BUFFER_CAPACITY, DEFAULT_NMS_IOU,
};
pub use stitch::{
    majority_downsample, quantize, stitch_classification, DetectionLayer, Heatmap, HeatmapLayer, LevelRect,
    ResultLayer, SegmentationLayer, UNPROCESSED,
};

use crate::models::ModelError;
use crate::pyramid::PyramidError;

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("stitching: {0}")]
    Stitch(String),
    #[error("patch {} at level {} ({}, {}): {message}", patch.index, patch.level, patch.origin_x, patch.origin_y)]
    Shape { patch: PatchDescriptor, message: String },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PatchError>,
    },
}
