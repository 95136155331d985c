use super::{check_input, ClassRaster, ModelDescriptor, ModelError, ModelOutput, ModelRunner, Task};
use crate::patchflow::Detection;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MIN_AREA: u32 = 4;

fn incompatible(d: &ModelDescriptor, reason: &str) -> ModelError {
    ModelError::Incompatible { model: d.name.clone(), task: d.task, reason: reason.into() }
}

/// Classifies a patch by its mean normalized intensity: class `floor(4 m)`, clamped to 0..=3,
/// with probability 1.
#[derive(Clone, Debug)]
pub struct MockClassifier {
    descriptor: ModelDescriptor,
}

impl MockClassifier {
    pub fn new(descriptor: ModelDescriptor) -> Result<Self, ModelError> {
        if descriptor.task != Task::PatchClassification {
            return Err(incompatible(&descriptor, "needs patch_classification"));
        }
        if descriptor.num_classes != 4 {
            return Err(incompatible(&descriptor, "needs exactly 4 classes"));
        }
        Ok(Self { descriptor })
    }

    pub fn classify<S: Scalar>(t: &Tensor<S>) -> usize {
        let sum: f64 = t.data.iter().map(|v| v.as_f64()).sum();
        let mean = sum / t.data.len().max(1) as f64;
        ((mean * 4.0).floor().max(0.0) as usize).min(3)
    }
}

impl<S: Scalar> ModelRunner<S> for MockClassifier {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn invoke(&self, batch: &[Tensor<S>]) -> Result<Vec<ModelOutput<S>>, ModelError> {
        batch
            .iter()
            .map(|t| {
                check_input(&self.descriptor, t)?;
                let mut probs = vec![S::zero(); 4];
                probs[Self::classify(t)] = S::one();
                Ok(ModelOutput::Probabilities(probs))
            })
            .collect()
    }
}

fn dark_mask<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let half = S::from_f64_lossy(0.5);
    let mut out = Vec::with_capacity(t.width as usize * t.height as usize);
    for y in 0..t.height {
        for x in 0..t.width {
            out.push(u8::from(t.channel_mean(x, y) < half));
        }
    }
    out
}

/// Labels pixels whose normalized channel mean is below 0.5 as class 1.
#[derive(Clone, Debug)]
pub struct MockSegmenter {
    descriptor: ModelDescriptor,
}

impl MockSegmenter {
    pub fn new(descriptor: ModelDescriptor) -> Result<Self, ModelError> {
        if !descriptor.task.is_segmentation() {
            return Err(incompatible(&descriptor, "needs a segmentation task"));
        }
        if descriptor.num_classes != 2 {
            return Err(incompatible(&descriptor, "needs exactly 2 classes"));
        }
        Ok(Self { descriptor })
    }

    /// Segments a tensor of any size.
    pub fn segment<S: Scalar>(t: &Tensor<S>) -> ClassRaster {
        ClassRaster { width: t.width, height: t.height, data: dark_mask(t) }
    }
}

impl<S: Scalar> ModelRunner<S> for MockSegmenter {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn invoke(&self, batch: &[Tensor<S>]) -> Result<Vec<ModelOutput<S>>, ModelError> {
        batch
            .iter()
            .map(|t| {
                check_input(&self.descriptor, t)?;
                Ok(ModelOutput::Segmentation(Self::segment(t)))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub min_x: u32,
    pub min_y: u32,
    pub max_x: u32,
    pub max_y: u32,
    pub area: u32,
}

/// 4-connected components of the non-zero pixels, ordered by their first pixel in row-major
/// scan order.
pub fn connected_components(mask: &[u8], width: u32, height: u32) -> Vec<Component> {
    let (w, h) = (width as usize, height as usize);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (sx, sy) = ((start % w) as u32, (start / w) as u32);
        let mut c = Component { min_x: sx, min_y: sy, max_x: sx, max_y: sy, area: 0 };
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            c.area += 1;
            c.min_x = c.min_x.min(x as u32);
            c.max_x = c.max_x.max(x as u32);
            c.min_y = c.min_y.min(y as u32);
            c.max_y = c.max_y.max(y as u32);
            let mut visit = |j: usize| {
                if mask[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(c);
    }
    out
}

/// Boxes every dark 4-connected component of at least `min_area` pixels; class 0, score is
/// the fraction of the box the component fills.
#[derive(Clone, Debug)]
pub struct MockDetector {
    descriptor: ModelDescriptor,
    min_area: u32,
}

impl MockDetector {
    pub fn new(descriptor: ModelDescriptor) -> Result<Self, ModelError> {
        if descriptor.task != Task::Detection {
            return Err(incompatible(&descriptor, "needs detection"));
        }
        Ok(Self { descriptor, min_area: DEFAULT_MIN_AREA })
    }

    pub fn with_min_area(mut self, min_area: u32) -> Self {
        self.min_area = min_area;
        self
    }

    pub fn detect<S: Scalar>(t: &Tensor<S>, min_area: u32) -> Vec<Detection<S>> {
        connected_components(&dark_mask(t), t.width, t.height)
            .into_iter()
            .filter(|c| c.area >= min_area)
            .map(|c| {
                let (bw, bh) = (c.max_x - c.min_x + 1, c.max_y - c.min_y + 1);
                let f = |v: u32| S::from_f64_lossy(f64::from(v));
                Detection::new(f(c.min_x), f(c.min_y), f(bw), f(bh), 0, f(c.area) / f(bw * bh))
            })
            .collect()
    }
}

impl<S: Scalar> ModelRunner<S> for MockDetector {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn invoke(&self, batch: &[Tensor<S>]) -> Result<Vec<ModelOutput<S>>, ModelError> {
        batch
            .iter()
            .map(|t| {
                check_input(&self.descriptor, t)?;
                Ok(ModelOutput::Boxes(Self::detect(t, self.min_area)))
            })
            .collect()
    }
}
