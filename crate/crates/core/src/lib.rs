//! Tiled gigapixel image pyramids with byte-budgeted tile caching, tissue detection and
//! streaming sliding-window model pipelines.

pub mod bench;
pub mod export;
pub mod models;
pub mod orchestration;
pub mod patchflow;
pub mod pyramid;
pub mod scalar;
pub mod tensor;
pub mod tilecache;
pub mod tissue;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Detection32 = patchflow::Detection<f32>;
pub type Detection64 = patchflow::Detection<f64>;
pub type Heatmap32 = patchflow::Heatmap<f32>;
pub type Heatmap64 = patchflow::Heatmap<f64>;
pub type ModelRegistry32 = models::ModelRegistry<f32>;
pub type PipelineRun32 = patchflow::PipelineRun<f32>;
