use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::PyramidError;

pub const DEFAULT_MEMORY_MAP_THRESHOLD: u64 = 512 << 20;
pub const DEFAULT_MIN_LEVEL_EXTENT: u32 = 4096;
pub const DEFAULT_TILE_SIZE: u32 = 256;

/// Level creation and storage policy for pyramids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidPolicy {
    /// Levels whose byte size reaches this threshold are backed by a memory-mapped file.
    pub memory_map_threshold_bytes: u64,
    /// A level is created only while at least one of its dimensions reaches this extent.
    pub min_level_extent: u32,
    pub tile_size: u32,
    /// Directory for memory-mapped backing files; the system temp dir when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backing_dir: Option<PathBuf>,
}

impl Default for PyramidPolicy {
    fn default() -> Self {
        Self {
            memory_map_threshold_bytes: DEFAULT_MEMORY_MAP_THRESHOLD,
            min_level_extent: DEFAULT_MIN_LEVEL_EXTENT,
            tile_size: DEFAULT_TILE_SIZE,
            backing_dir: None,
        }
    }
}

impl PyramidPolicy {
    pub fn validate(&self) -> Result<(), PyramidError> {
        if self.memory_map_threshold_bytes == 0 || self.min_level_extent == 0 {
            return Err(PyramidError::Argument("policy fields must be positive".into()));
        }
        if self.tile_size == 0 || !self.tile_size.is_power_of_two() {
            return Err(PyramidError::Argument(format!(
                "tile size {} is not a power of two",
                self.tile_size
            )));
        }
        Ok(())
    }
}

/// Dimension of level `level` for a level-0 extent, rounding up so no pixel is lost.
pub fn level_extent(extent: u32, level: u32) -> u32 {
    if level >= 32 {
        return 1;
    }
    let d = 1u64 << level;
    (u64::from(extent).div_ceil(d)) as u32
}

/// Plans the level ladder for a `width` x `height` image.
///
/// Level `l` measures `ceil(width / 2^l) x ceil(height / 2^l)`. Generation stops at the first
/// level where both dimensions fall below `min_level_extent`, or once a 1x1 level is reached.
/// Level 0 always exists.
pub fn plan_levels(width: u32, height: u32, policy: &PyramidPolicy) -> Vec<(u32, u32)> {
    let mut levels = vec![(width.max(1), height.max(1))];
    let mut l = 1;
    loop {
        let prev = levels[levels.len() - 1];
        if prev == (1, 1) {
            break;
        }
        let (w, h) = (level_extent(width, l), level_extent(height, l));
        if w < policy.min_level_extent && h < policy.min_level_extent {
            break;
        }
        levels.push((w, h));
        l += 1;
    }
    levels
}
