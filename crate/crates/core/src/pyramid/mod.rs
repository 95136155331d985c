//! Tiled multi-resolution image pyramids.
//!
//! A pyramid is a ladder of levels where level `l` is the base image halved `l` times (rounding
//! up). Three backends share one read interface:
//!
//! * raster pyramids created in memory, where large levels are backed by memory-mapped files,
//! * on-disk containers (a manifest plus one PNG per tile), read lazily tile by tile,
//! * procedural synthetic slides evaluated on demand, used for very large virtual slides.
//!
//! Only raster pyramids are writable.

mod container;
mod import;
mod plan;
mod storage;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use tempfile::TempDir;

pub use container::{encode_png, open_container, save_container, LevelEntry, Manifest, FORMAT_VERSION};
pub use import::{downsample_box, import_flat_image, rebuild_levels};
pub use plan::{
    level_extent, plan_levels, PyramidPolicy, DEFAULT_MEMORY_MAP_THRESHOLD,
    DEFAULT_MIN_LEVEL_EXTENT, DEFAULT_TILE_SIZE,
};
pub use synthetic::{generate_synthetic_slide, virtual_synthetic_slide, SyntheticSpec};

use storage::LevelData;

pub const DEFAULT_MAGNIFICATION: f64 = 40.0;

#[derive(Debug, thiserror::Error)]
pub enum PyramidError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("region ({x},{y}) {w}x{h} is outside level {level} ({level_width}x{level_height})")]
    Range { level: u32, x: u32, y: u32, w: u32, h: u32, level_width: u32, level_height: u32 },
    #[error("tile {0} is outside the tile grid")]
    TileOutOfGrid(TileKey),
    #[error("failed to create storage for level {level}: {source}")]
    Create { level: u32, source: std::io::Error },
    #[error("pyramid is read-only")]
    ReadOnly,
    #[error("invalid container: {0}")]
    Container(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot decode image: {0}")]
    Format(String),
}

impl PyramidError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PyramidError::Io { path: path.into(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileKey {
    pub level: u32,
    pub col: u32,
    pub row: u32,
}

impl TileKey {
    pub fn new(level: u32, col: u32, row: u32) -> Self {
        Self { level, col, row }
    }
}

impl fmt::Display for TileKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.level, self.col, self.row)
    }
}

/// A decoded tile. Edge tiles are smaller than the nominal tile size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub key: TileKey,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub pixels: Vec<u8>,
}

impl Tile {
    pub fn byte_size(&self) -> u64 {
        self.pixels.len() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Ram,
    FileMapped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub index: u32,
    pub width: u32,
    pub height: u32,
    pub storage: Storage,
    pub byte_size: u64,
}

enum Source {
    Raster {
        levels: Vec<LevelData>,
        // Backing files live here and are removed when the pyramid is dropped.
        _backing: Option<TempDir>,
    },
    Container {
        root: PathBuf,
    },
    Procedural(Box<synthetic::Procedural>),
}

pub struct ImagePyramid {
    width: u32,
    height: u32,
    channels: u8,
    tile_size: u32,
    base_magnification: f64,
    levels: Vec<PyramidLevel>,
    source: Source,
    tile_reads: AtomicU64,
}

impl fmt::Debug for ImagePyramid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.source {
            Source::Raster { .. } => "raster",
            Source::Container { .. } => "container",
            Source::Procedural(_) => "procedural",
        };
        f.debug_struct("ImagePyramid")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .field("tile_size", &self.tile_size)
            .field("levels", &self.levels.len())
            .field("source", &kind)
            .finish()
    }
}

fn check_channels(channels: u8) -> Result<(), PyramidError> {
    if channels == 1 || channels == 3 {
        Ok(())
    } else {
        Err(PyramidError::Argument(format!("unsupported channel count {channels}")))
    }
}

fn describe_levels(dims: &[(u32, u32)], channels: u8, threshold: u64) -> Vec<PyramidLevel> {
    dims.iter()
        .enumerate()
        .map(|(i, &(w, h))| {
            let byte_size = u64::from(w) * u64::from(h) * u64::from(channels);
            PyramidLevel {
                index: i as u32,
                width: w,
                height: h,
                storage: if byte_size >= threshold { Storage::FileMapped } else { Storage::Ram },
                byte_size,
            }
        })
        .collect()
}

/// Allocates a zero-filled writable pyramid following `policy`.
///
/// Levels at or above the memory-map threshold get their own backing file in a temporary
/// directory that lives as long as the pyramid.
pub fn create_pyramid(
    width: u32,
    height: u32,
    channels: u8,
    policy: &PyramidPolicy,
) -> Result<ImagePyramid, PyramidError> {
    if width == 0 || height == 0 {
        return Err(PyramidError::Argument("dimensions must be at least 1".into()));
    }
    check_channels(channels)?;
    policy.validate()?;
    let dims = plan_levels(width, height, policy);
    let levels = describe_levels(&dims, channels, policy.memory_map_threshold_bytes);
    let mut backing: Option<TempDir> = None;
    let mut data = Vec::with_capacity(levels.len());
    for level in &levels {
        let d = match level.storage {
            Storage::Ram => LevelData::ram(level.width, level.height, channels),
            Storage::FileMapped => {
                if backing.is_none() {
                    let mut builder = tempfile::Builder::new();
                    builder.prefix("pyraflow-levels-");
                    let dir = match &policy.backing_dir {
                        Some(root) => builder.tempdir_in(root),
                        None => builder.tempdir(),
                    }
                    .map_err(|source| PyramidError::Create { level: level.index, source })?;
                    backing = Some(dir);
                }
                let path = backing
                    .as_ref()
                    .expect("backing dir")
                    .path()
                    .join(format!("level_{}.raw", level.index));
                LevelData::mapped(level.index, level.width, level.height, channels, &path)?
            }
        };
        data.push(d);
    }
    Ok(ImagePyramid {
        width,
        height,
        channels,
        tile_size: policy.tile_size,
        base_magnification: DEFAULT_MAGNIFICATION,
        levels,
        source: Source::Raster { levels: data, _backing: backing },
        tile_reads: AtomicU64::new(0),
    })
}

impl ImagePyramid {
    pub(crate) fn from_parts(
        width: u32,
        height: u32,
        channels: u8,
        tile_size: u32,
        base_magnification: f64,
        dims: &[(u32, u32)],
        source_root: Option<PathBuf>,
        procedural: Option<synthetic::Procedural>,
    ) -> Self {
        let levels = describe_levels(dims, channels, DEFAULT_MEMORY_MAP_THRESHOLD);
        let source = match (source_root, procedural) {
            (Some(root), _) => Source::Container { root },
            (None, Some(p)) => Source::Procedural(Box::new(p)),
            (None, None) => unreachable!("from_parts needs a backend"),
        };
        Self {
            width,
            height,
            channels,
            tile_size,
            base_magnification,
            levels,
            source,
            tile_reads: AtomicU64::new(0),
        }
    }

    pub fn with_base_magnification(mut self, magnification: f64) -> Self {
        self.base_magnification = magnification;
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn tile_size(&self) -> u32 {
        self.tile_size
    }

    pub fn base_magnification(&self) -> f64 {
        self.base_magnification
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn level_count(&self) -> u32 {
        self.levels.len() as u32
    }

    pub fn lowest_level(&self) -> u32 {
        self.level_count() - 1
    }

    pub fn level(&self, level: u32) -> Option<&PyramidLevel> {
        self.levels.get(level as usize)
    }

    pub fn level_dims(&self, level: u32) -> Option<(u32, u32)> {
        self.level(level).map(|l| (l.width, l.height))
    }

    /// Magnification of `level`: the base magnification halved once per level.
    pub fn magnification(&self, level: u32) -> f64 {
        self.base_magnification / f64::from(1u32 << level.min(31))
    }

    pub fn is_writable(&self) -> bool {
        matches!(self.source, Source::Raster { .. })
    }

    /// Whether level `level` is held in a memory-mapped file (raster pyramids only).
    pub fn is_level_mapped(&self, level: u32) -> bool {
        match &self.source {
            Source::Raster { levels, .. } => levels.get(level as usize).is_some_and(|d| d.is_mapped()),
            _ => false,
        }
    }

    /// Number of tiles decoded or rendered from the backing source so far.
    pub fn tile_reads(&self) -> u64 {
        self.tile_reads.load(Ordering::Relaxed)
    }

    pub fn tile_grid(&self, level: u32) -> Option<(u32, u32)> {
        self.level(level)
            .map(|l| (l.width.div_ceil(self.tile_size), l.height.div_ceil(self.tile_size)))
    }

    pub fn tile_bytes(&self) -> u64 {
        u64::from(self.tile_size) * u64::from(self.tile_size) * u64::from(self.channels)
    }

    /// Level-pixel rectangle `(x, y, w, h)` covered by `key`.
    pub fn tile_rect(&self, key: TileKey) -> Result<(u32, u32, u32, u32), PyramidError> {
        let (cols, rows) = self.tile_grid(key.level).ok_or(PyramidError::TileOutOfGrid(key))?;
        if key.col >= cols || key.row >= rows {
            return Err(PyramidError::TileOutOfGrid(key));
        }
        let (lw, lh) = self.level_dims(key.level).expect("level checked");
        let x = key.col * self.tile_size;
        let y = key.row * self.tile_size;
        Ok((x, y, self.tile_size.min(lw - x), self.tile_size.min(lh - y)))
    }

    fn check_region(&self, level: u32, x: u32, y: u32, w: u32, h: u32) -> Result<(), PyramidError> {
        let Some((lw, lh)) = self.level_dims(level) else {
            return Err(PyramidError::Argument(format!("level {level} does not exist")));
        };
        let inside = u64::from(x) + u64::from(w) <= u64::from(lw)
            && u64::from(y) + u64::from(h) <= u64::from(lh);
        if !inside {
            return Err(PyramidError::Range {
                level,
                x,
                y,
                w,
                h,
                level_width: lw,
                level_height: lh,
            });
        }
        Ok(())
    }

    /// Reads a `w` x `h` region of `level` starting at `(x, y)`, row-major with interleaved
    /// channels.
    pub fn read_region(
        &self,
        level: u32,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
    ) -> Result<Vec<u8>, PyramidError> {
        self.check_region(level, x, y, w, h)?;
        let c = self.channels as usize;
        let mut out = vec![0u8; w as usize * h as usize * c];
        if w == 0 || h == 0 {
            return Ok(out);
        }
        match &self.source {
            Source::Raster { levels, .. } => levels[level as usize].read(x, y, w, h, &mut out),
            Source::Procedural(p) => p.render(level, x, y, w, h, &mut out),
            Source::Container { .. } => {
                let ts = self.tile_size;
                let row_len = w as usize * c;
                for row in y / ts..=(y + h - 1) / ts {
                    for col in x / ts..=(x + w - 1) / ts {
                        let tile = self.read_tile(TileKey::new(level, col, row))?;
                        let (tx, ty) = (col * ts, row * ts);
                        let x0 = x.max(tx);
                        let x1 = (x + w).min(tx + tile.width);
                        let y0 = y.max(ty);
                        let y1 = (y + h).min(ty + tile.height);
                        let span = (x1 - x0) as usize * c;
                        for yy in y0..y1 {
                            let src = ((yy - ty) as usize * tile.width as usize + (x0 - tx) as usize) * c;
                            let dst = (yy - y) as usize * row_len + (x0 - x) as usize * c;
                            out[dst..dst + span].copy_from_slice(&tile.pixels[src..src + span]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Writes `pixels` (row-major, `w * h * channels` bytes) at `(x, y)` of `level`.
    pub fn write_region(
        &self,
        level: u32,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        pixels: &[u8],
    ) -> Result<(), PyramidError> {
        let Source::Raster { levels, .. } = &self.source else {
            return Err(PyramidError::ReadOnly);
        };
        self.check_region(level, x, y, w, h)?;
        let expected = w as usize * h as usize * self.channels as usize;
        if pixels.len() != expected {
            return Err(PyramidError::Argument(format!(
                "pixel buffer holds {} bytes, region needs {expected}",
                pixels.len()
            )));
        }
        if expected > 0 {
            levels[level as usize].write(x, y, w, h, pixels);
        }
        Ok(())
    }

    pub fn read_tile(&self, key: TileKey) -> Result<Tile, PyramidError> {
        let (x, y, w, h) = self.tile_rect(key)?;
        let pixels = match &self.source {
            Source::Container { root } => {
                self.tile_reads.fetch_add(1, Ordering::Relaxed);
                return container::read_tile_file(root, key, w, h, self.channels);
            }
            Source::Procedural(_) => {
                self.tile_reads.fetch_add(1, Ordering::Relaxed);
                self.read_region(key.level, x, y, w, h)?
            }
            Source::Raster { .. } => self.read_region(key.level, x, y, w, h)?,
        };
        Ok(Tile { key, width: w, height: h, channels: self.channels, pixels })
    }

    /// Runs `f` over the full buffer of a raster level.
    pub(crate) fn with_level_bytes<R>(&self, level: u32, f: impl FnOnce(&[u8]) -> R) -> Option<R> {
        match &self.source {
            Source::Raster { levels, .. } => levels.get(level as usize).map(|d| d.with_bytes(f)),
            _ => None,
        }
    }

    pub(crate) fn with_level_bytes_mut<R>(
        &self,
        level: u32,
        f: impl FnOnce(&mut [u8]) -> R,
    ) -> Option<R> {
        match &self.source {
            Source::Raster { levels, .. } => levels.get(level as usize).map(|d| d.with_bytes_mut(f)),
            _ => None,
        }
    }

    /// Reads an entire level into memory.
    pub fn read_level(&self, level: u32) -> Result<Vec<u8>, PyramidError> {
        let (w, h) = self
            .level_dims(level)
            .ok_or_else(|| PyramidError::Argument(format!("level {level} does not exist")))?;
        if let Some(v) = self.with_level_bytes(level, |b| b.to_vec()) {
            return Ok(v);
        }
        self.read_region(level, 0, 0, w, h)
    }
}
