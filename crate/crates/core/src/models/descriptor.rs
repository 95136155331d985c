//! Model description files: one `key: value` per line, `#` starts a comment.
//!
//! ```text
//! name: mock_classifier_v1
//! task: patch_classification
//! input_size: 256 256 3
//! num_classes: 4
//! class_names: normal;benign;in_situ;invasive
//! magnification: 10
//! patch_size: 256
//! batch_size: 8
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DescriptorError {
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("{0}")]
    Invariant(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PatchClassification,
    ImageSegmentation,
    PatchSegmentation,
    Detection,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::PatchClassification => "patch_classification",
            Task::ImageSegmentation => "image_segmentation",
            Task::PatchSegmentation => "patch_segmentation",
            Task::Detection => "detection",
        }
    }

    pub fn is_segmentation(self) -> bool {
        matches!(self, Task::ImageSegmentation | Task::PatchSegmentation)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "patch_classification" => Task::PatchClassification,
            "image_segmentation" => Task::ImageSegmentation,
            "patch_segmentation" => Task::PatchSegmentation,
            "detection" => Task::Detection,
            other => return Err(format!("unknown task `{other}`")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub task: Task,
    pub input_width: u32,
    pub input_height: u32,
    pub input_channels: u8,
    pub num_classes: u32,
    pub class_names: Vec<String>,
    pub target_magnification: f64,
    pub patch_size: u32,
    pub batch_size: u32,
}

impl ModelDescriptor {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.class_names.len() != self.num_classes as usize {
            return Err(DescriptorError::Invariant(format!(
                "num_classes is {} but {} class names given",
                self.num_classes,
                self.class_names.len()
            )));
        }
        if self.input_width == 0 || self.input_height == 0 || self.patch_size == 0 || self.batch_size == 0 {
            return Err(DescriptorError::Invariant("sizes must be positive".into()));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return Err(DescriptorError::Invariant(format!("unsupported input channels {}", self.input_channels)));
        }
        if !(self.target_magnification > 0.0) {
            return Err(DescriptorError::Invariant("magnification must be positive".into()));
        }
        Ok(())
    }
}

/// Writes the descriptor back in file form.
impl fmt::Display for ModelDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name: {}", self.name)?;
        writeln!(f, "task: {}", self.task)?;
        writeln!(f, "input_size: {} {} {}", self.input_width, self.input_height, self.input_channels)?;
        writeln!(f, "num_classes: {}", self.num_classes)?;
        writeln!(f, "class_names: {}", self.class_names.join(";"))?;
        writeln!(f, "magnification: {}", self.target_magnification)?;
        writeln!(f, "patch_size: {}", self.patch_size)?;
        writeln!(f, "batch_size: {}", self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedDescriptor {
    pub descriptor: ModelDescriptor,
    /// Unknown keys, kept as `line N: unknown key ...` messages.
    pub warnings: Vec<String>,
}

const REQUIRED: [&str; 7] =
    ["name", "task", "input_size", "num_classes", "class_names", "magnification", "patch_size"];

pub fn parse_descriptor(text: &str) -> Result<ParsedDescriptor, DescriptorError> {
    let mut values: Vec<(&str, &str, usize)> = Vec::new();
    let mut warnings = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(DescriptorError::Malformed { line: line_no, message: format!("expected `key: value`, got `{line}`") });
        };
        let (key, value) = (key.trim(), value.trim());
        if values.iter().any(|(k, _, _)| *k == key) {
            return Err(DescriptorError::Malformed { line: line_no, message: format!("duplicate key `{key}`") });
        }
        if REQUIRED.contains(&key) || key == "batch_size" {
            values.push((key, value, line_no));
        } else {
            warnings.push(format!("line {line_no}: unknown key `{key}` = `{value}`"));
            log::warn!("model descriptor line {line_no}: unknown key `{key}`");
        }
    }
    let get = |key: &'static str| -> Result<(&str, usize), DescriptorError> {
        values
            .iter()
            .find(|(k, _, _)| *k == key)
            .map(|&(_, v, l)| (v, l))
            .ok_or(DescriptorError::Missing(key))
    };
    fn num<T: FromStr>(key: &str, (v, line): (&str, usize)) -> Result<T, DescriptorError> {
        v.parse().map_err(|_| DescriptorError::Malformed { line, message: format!("`{key}`: cannot parse `{v}`") })
    }
    for key in REQUIRED {
        get(key)?;
    }
    let (name, _) = get("name")?;
    let (task_s, task_line) = get("task")?;
    let task = task_s.parse().map_err(|message| DescriptorError::Malformed { line: task_line, message })?;
    let (size, size_line) = get("input_size")?;
    let dims: Vec<&str> = size.split_whitespace().collect();
    if dims.len() != 3 {
        return Err(DescriptorError::Malformed {
            line: size_line,
            message: format!("`input_size` needs three integers, got `{size}`"),
        });
    }
    let input_width = num("input_size", (dims[0], size_line))?;
    let input_height = num("input_size", (dims[1], size_line))?;
    let input_channels = num("input_size", (dims[2], size_line))?;
    let (names, _) = get("class_names")?;
    let class_names: Vec<String> =
        names.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    let batch_size = match get("batch_size") {
        Ok(v) => num("batch_size", v)?,
        Err(_) => 1,
    };
    let descriptor = ModelDescriptor {
        name: name.to_string(),
        task,
        input_width,
        input_height,
        input_channels,
        num_classes: num("num_classes", get("num_classes")?)?,
        class_names,
        target_magnification: num("magnification", get("magnification")?)?,
        patch_size: num("patch_size", get("patch_size")?)?,
        batch_size,
    };
    descriptor.validate()?;
    Ok(ParsedDescriptor { descriptor, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
# four-class grading network
name: grade_net
task: patch_classification
input_size: 512 512 3
num_classes: 4
class_names: normal; benign; in_situ; invasive
magnification: 20
patch_size: 512
";

    #[test]
    fn minimal_defaults_batch_size() {
        let p = parse_descriptor(MINIMAL).unwrap();
        assert_eq!(p.descriptor.batch_size, 1);
        assert_eq!(p.descriptor.class_names.len(), 4);
        assert_eq!(p.descriptor.input_width, 512);
        assert_eq!(p.descriptor.target_magnification, 20.0);
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn missing_input_size() {
        let text = MINIMAL.replace("input_size: 512 512 3\n", "");
        let err = parse_descriptor(&text).unwrap_err();
        assert_eq!(err, DescriptorError::Missing("input_size"));
        assert!(err.to_string().contains("input_size"));
    }

    #[test]
    fn class_count_mismatch() {
        let text = MINIMAL.replace("num_classes: 4", "num_classes: 3");
        assert!(matches!(parse_descriptor(&text), Err(DescriptorError::Invariant(_))));
    }

    #[test]
    fn malformed_value_reports_line() {
        let text = MINIMAL.replace("patch_size: 512", "patch_size: big");
        assert!(matches!(parse_descriptor(&text), Err(DescriptorError::Malformed { line: 8, .. })));
    }

    #[test]
    fn unknown_keys_warn_and_display_round_trips() {
        let text = format!("{MINIMAL}engine: openvino\nbatch_size: 8\n");
        let p = parse_descriptor(&text).unwrap();
        assert_eq!(p.warnings.len(), 1);
        assert!(p.warnings[0].contains("engine"));
        let again = parse_descriptor(&p.descriptor.to_string()).unwrap();
        assert_eq!(again.descriptor, p.descriptor);
    }
}
