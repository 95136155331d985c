//! On-disk pyramid container: `manifest.json` plus `level_{l}/{col}_{row}.png` tiles.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ExtendedColorType, ImageEncoder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{level_extent, ImagePyramid, PyramidError, Tile, TileKey};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub index: u32,
    pub width: u32,
    pub height: u32,
    pub cols: u32,
    pub rows: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub tile_size: u32,
    pub base_magnification: f64,
    pub levels: Vec<LevelEntry>,
}

impl Manifest {
    pub fn of(pyramid: &ImagePyramid) -> Self {
        let levels = pyramid
            .levels()
            .iter()
            .map(|l| {
                let (cols, rows) = pyramid.tile_grid(l.index).expect("level exists");
                LevelEntry { index: l.index, width: l.width, height: l.height, cols, rows }
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            width: pyramid.width(),
            height: pyramid.height(),
            channels: pyramid.channels(),
            tile_size: pyramid.tile_size(),
            base_magnification: pyramid.base_magnification(),
            levels,
        }
    }

    pub fn validate(&self) -> Result<(), PyramidError> {
        let bad = |msg: String| Err(PyramidError::Container(msg));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("unsupported channel count {}", self.channels));
        }
        if self.tile_size == 0 || !self.tile_size.is_power_of_two() {
            return bad(format!("tile_size {} is not a power of two", self.tile_size));
        }
        if !(self.base_magnification > 0.0) {
            return bad("base_magnification must be positive".into());
        }
        if self.levels.is_empty() {
            return bad("no levels".into());
        }
        for (i, l) in self.levels.iter().enumerate() {
            let i = i as u32;
            if l.index != i {
                return bad(format!("level {} listed at position {i}", l.index));
            }
            let (ew, eh) = (level_extent(self.width, i), level_extent(self.height, i));
            if (l.width, l.height) != (ew, eh) {
                return bad(format!(
                    "level {i} is {}x{}, halving rule requires {ew}x{eh}",
                    l.width, l.height
                ));
            }
            if (l.cols, l.rows) != (ew.div_ceil(self.tile_size), eh.div_ceil(self.tile_size)) {
                return bad(format!("level {i} tile grid {}x{} does not match its size", l.cols, l.rows));
            }
        }
        Ok(())
    }
}

fn tile_path(root: &Path, key: TileKey) -> PathBuf {
    root.join(format!("level_{}", key.level)).join(format!("{}_{}.png", key.col, key.row))
}

/// Encodes an 8-bit raster as PNG: 1 channel gray, 2 gray + alpha, 3 RGB.
pub fn encode_png(width: u32, height: u32, channels: u8, pixels: &[u8]) -> Result<Vec<u8>, PyramidError> {
    let color = match channels {
        1 => ExtendedColorType::L8,
        2 => ExtendedColorType::La8,
        3 => ExtendedColorType::Rgb8,
        c => return Err(PyramidError::Argument(format!("cannot encode {c} channels"))),
    };
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(pixels, width, height, color)
        .map_err(|e| PyramidError::Format(e.to_string()))?;
    Ok(buf)
}

/// Writes `pyramid` as a container directory at `path`, creating it if needed.
pub fn save_container(pyramid: &ImagePyramid, path: impl AsRef<Path>) -> Result<(), PyramidError> {
    let root = path.as_ref();
    let manifest = Manifest::of(pyramid);
    fs::create_dir_all(root).map_err(|e| PyramidError::io(root, e))?;
    for level in &manifest.levels {
        let dir = root.join(format!("level_{}", level.index));
        fs::create_dir_all(&dir).map_err(|e| PyramidError::io(&dir, e))?;
        let keys: Vec<TileKey> = (0..level.rows)
            .flat_map(|r| (0..level.cols).map(move |c| TileKey::new(level.index, c, r)))
            .collect();
        keys.par_iter().try_for_each(|&key| {
            let tile = pyramid.read_tile(key)?;
            let bytes = encode_png(tile.width, tile.height, tile.channels, &tile.pixels)?;
            let p = tile_path(root, key);
            fs::write(&p, bytes).map_err(|e| PyramidError::io(&p, e))
        })?;
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mpath = root.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| PyramidError::io(&mpath, e))
}

/// Opens a container. Only the manifest is read eagerly; tiles are decoded on demand.
pub fn open_container(path: impl AsRef<Path>) -> Result<ImagePyramid, PyramidError> {
    let root = path.as_ref();
    let mpath = root.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| PyramidError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| PyramidError::Container(format!("{}: {e}", mpath.display())))?;
    manifest.validate()?;
    for level in &manifest.levels {
        for row in 0..level.rows {
            for col in 0..level.cols {
                let p = tile_path(root, TileKey::new(level.index, col, row));
                if !p.is_file() {
                    return Err(PyramidError::Container(format!("missing tile file {}", p.display())));
                }
            }
        }
    }
    let dims: Vec<(u32, u32)> = manifest.levels.iter().map(|l| (l.width, l.height)).collect();
    Ok(ImagePyramid::from_parts(
        manifest.width,
        manifest.height,
        manifest.channels,
        manifest.tile_size,
        manifest.base_magnification,
        &dims,
        Some(root.to_path_buf()),
        None,
    ))
}

pub(crate) fn read_tile_file(
    root: &Path,
    key: TileKey,
    width: u32,
    height: u32,
    channels: u8,
) -> Result<Tile, PyramidError> {
    let p = tile_path(root, key);
    let bytes = fs::read(&p).map_err(|e| PyramidError::io(&p, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| PyramidError::Format(format!("{}: {e}", p.display())))?;
    if (img.width(), img.height()) != (width, height) {
        return Err(PyramidError::Container(format!(
            "tile {} is {}x{}, expected {width}x{height}",
            p.display(),
            img.width(),
            img.height()
        )));
    }
    let pixels = match (channels, img) {
        (1, image::DynamicImage::ImageLuma8(g)) => g.into_raw(),
        (3, image::DynamicImage::ImageRgb8(c)) => c.into_raw(),
        (_, other) => {
            return Err(PyramidError::Container(format!(
                "tile {} has color type {:?}, expected {channels} channel(s)",
                p.display(),
                other.color()
            )))
        }
    };
    Ok(Tile { key, width, height, channels, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{create_pyramid, PyramidPolicy};

    fn gradient(w: u32, h: u32) -> ImagePyramid {
        let p = create_pyramid(w, h, 3, &PyramidPolicy::default()).unwrap();
        let px: Vec<u8> = (0..w * h * 3).map(|i| (i % 253) as u8).collect();
        p.write_region(0, 0, 0, w, h, &px).unwrap();
        p
    }

    #[test]
    fn manifest_rejects_broken_halving() {
        let p = gradient(300, 300);
        let mut m = Manifest::of(&p);
        m.validate().unwrap();
        m.levels.push(LevelEntry { index: 1, width: 149, height: 150, cols: 1, rows: 1 });
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("halving rule"), "{err}");
    }

    #[test]
    fn round_trip_with_edge_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let p = gradient(300, 270);
        save_container(&p, dir.path()).unwrap();
        let q = open_container(dir.path()).unwrap();
        assert_eq!(Manifest::of(&p), Manifest::of(&q));
        assert_eq!(q.tile_reads(), 0);
        let edge = q.read_tile(TileKey::new(0, 1, 1)).unwrap();
        assert_eq!((edge.width, edge.height), (44, 14));
        assert_eq!(q.read_level(0).unwrap(), p.read_level(0).unwrap());
        assert_eq!(q.read_region(0, 250, 250, 20, 20).unwrap(), p.read_region(0, 250, 250, 20, 20).unwrap());
    }

    #[test]
    fn missing_and_mismatched_tiles() {
        let dir = tempfile::tempdir().unwrap();
        save_container(&gradient(300, 300), dir.path()).unwrap();
        // wrong size tile
        let wrong = encode_png(10, 10, 3, &[0; 300]).unwrap();
        fs::write(dir.path().join("level_0/0_0.png"), wrong).unwrap();
        let q = open_container(dir.path()).unwrap();
        let err = q.read_tile(TileKey::new(0, 0, 0)).unwrap_err();
        assert!(err.to_string().contains("expected 256x256"), "{err}");
        drop(q);
        fs::remove_file(dir.path().join("level_0/1_1.png")).unwrap();
        let err = open_container(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing tile"), "{err}");
        fs::write(dir.path().join(MANIFEST), "{").unwrap();
        assert!(matches!(open_container(dir.path()), Err(PyramidError::Container(_))));
    }

    #[test]
    fn level_magnification_from_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = create_pyramid(9000, 100, 1, &PyramidPolicy::default()).unwrap().with_base_magnification(20.0);
        save_container(&p, dir.path()).unwrap();
        let q = open_container(dir.path()).unwrap();
        assert_eq!(q.level_count(), 2);
        assert_eq!(q.magnification(1), 10.0);
    }
}
