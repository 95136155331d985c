//! Model runners: the inference interface the pipeline drives, model description files, and
//! deterministic mock runners for each task shape.

mod descriptor;
mod mock;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use descriptor::{parse_descriptor, DescriptorError, ModelDescriptor, ParsedDescriptor, Task};
pub use mock::{connected_components, Component, MockClassifier, MockDetector, MockSegmenter, DEFAULT_MIN_AREA};

use crate::patchflow::Detection;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model `{model}` cannot serve task {task}: {reason}")]
    Incompatible { model: String, task: Task, reason: String },
    #[error("input {got:?} does not match the declared input {expected:?}")]
    InputShape { expected: (u32, u32, u8), got: (u32, u32, u8) },
    #[error("inference failed: {0}")]
    Inference(String),
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

/// One patch's model output, shaped by task.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelOutput<S> {
    /// One probability per class, summing to 1.
    Probabilities(Vec<S>),
    Segmentation(ClassRaster),
    /// Boxes in input-tensor pixel coordinates.
    Boxes(Vec<Detection<S>>),
}

pub trait ModelRunner<S: Scalar>: Send + Sync {
    fn descriptor(&self) -> &ModelDescriptor;

    /// Runs one batch; returns one output per input tensor, in order.
    fn invoke(&self, batch: &[Tensor<S>]) -> Result<Vec<ModelOutput<S>>, ModelError>;

    /// Whether `invoke` may be called from several threads at once. The pipeline serializes
    /// calls otherwise.
    fn concurrent_invocations(&self) -> bool {
        true
    }
}

pub(crate) fn check_input<S: Scalar>(d: &ModelDescriptor, t: &Tensor<S>) -> Result<(), ModelError> {
    let expected = (d.input_width, d.input_height, d.input_channels);
    if t.shape() != expected {
        return Err(ModelError::InputShape { expected, got: t.shape() });
    }
    Ok(())
}

/// Named runners available to pipelines.
pub struct ModelRegistry<S> {
    runners: BTreeMap<String, Arc<dyn ModelRunner<S>>>,
}

impl<S: Scalar> Default for ModelRegistry<S> {
    fn default() -> Self {
        Self { runners: BTreeMap::new() }
    }
}

impl<S: Scalar> ModelRegistry<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the four built-in mocks under their descriptor names.
    pub fn with_mocks() -> Self {
        let mut r = Self::new();
        for d in builtin_descriptors() {
            r.insert_mock(d).expect("built-in descriptors are valid");
        }
        r
    }

    pub fn insert(&mut self, runner: Arc<dyn ModelRunner<S>>) {
        self.runners.insert(runner.descriptor().name.clone(), runner);
    }

    /// Registers the mock runner matching the descriptor's task.
    pub fn insert_mock(&mut self, d: ModelDescriptor) -> Result<(), ModelError> {
        let runner: Arc<dyn ModelRunner<S>> = match d.task {
            Task::PatchClassification => Arc::new(MockClassifier::new(d)?),
            Task::ImageSegmentation | Task::PatchSegmentation => Arc::new(MockSegmenter::new(d)?),
            Task::Detection => Arc::new(MockDetector::new(d)?),
        };
        self.insert(runner);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn ModelRunner<S>>> {
        self.runners.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.runners.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.runners.keys().map(String::as_str)
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Descriptors of the built-in mock models.
pub fn builtin_descriptors() -> Vec<ModelDescriptor> {
    vec![
        ModelDescriptor {
            name: "mock_classifier_v1".into(),
            task: Task::PatchClassification,
            input_width: 128,
            input_height: 128,
            input_channels: 3,
            num_classes: 4,
            class_names: names(&["normal", "benign", "in_situ", "invasive"]),
            target_magnification: 20.0,
            patch_size: 256,
            batch_size: 8,
        },
        ModelDescriptor {
            name: "mock_segmenter_v1".into(),
            task: Task::PatchSegmentation,
            input_width: 256,
            input_height: 256,
            input_channels: 3,
            num_classes: 2,
            class_names: names(&["background", "tumor"]),
            target_magnification: 40.0,
            patch_size: 256,
            batch_size: 4,
        },
        ModelDescriptor {
            name: "mock_image_segmenter_v1".into(),
            task: Task::ImageSegmentation,
            input_width: 512,
            input_height: 512,
            input_channels: 3,
            num_classes: 2,
            class_names: names(&["background", "tumor"]),
            target_magnification: 2.5,
            patch_size: 512,
            batch_size: 1,
        },
        ModelDescriptor {
            name: "mock_detector_v1".into(),
            task: Task::Detection,
            input_width: 256,
            input_height: 256,
            input_channels: 3,
            num_classes: 1,
            class_names: names(&["nucleus"]),
            target_magnification: 40.0,
            patch_size: 256,
            batch_size: 4,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry() {
        let r = ModelRegistry::<f32>::with_mocks();
        assert_eq!(r.names().count(), 4);
        let c = r.get("mock_classifier_v1").unwrap();
        assert_eq!(c.descriptor().num_classes, 4);
        assert!(r.get("nope").is_none());
    }
}
