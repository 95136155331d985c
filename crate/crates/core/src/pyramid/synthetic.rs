//! Deterministic synthetic slides: white glass, elliptical tissue blobs and dark nuclei.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{create_pyramid, plan_levels, rebuild_levels, ImagePyramid, PyramidError, PyramidPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub blobs: usize,
    /// Blob semi-major axis range as a fraction of the shorter slide side.
    pub blob_radius: (f64, f64),
    /// Nuclei are placed on a grid of square cells of this side (level-0 pixels).
    pub nucleus_cell: u32,
    /// Probability that a cell inside tissue holds a nucleus.
    pub nucleus_density: f64,
    pub nucleus_radius: (u32, u32),
    pub tile_size: u32,
    pub base_magnification: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            blobs: 6,
            blob_radius: (0.08, 0.2),
            nucleus_cell: 24,
            nucleus_density: 0.35,
            nucleus_radius: (2, 5),
            tile_size: 256,
            base_magnification: 40.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    color: [u8; 3],
    // level-0 bounding box, inclusive-exclusive
    bbox: (i64, i64, i64, i64),
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        u * u + v * v <= 1.0
    }
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b.rotate_left(32))
}

const WHITE: [u8; 3] = [255, 255, 255];

/// Procedural slide evaluated per level-0 pixel.
pub(crate) struct Procedural {
    seed: u64,
    spec: SyntheticSpec,
    blobs: Vec<Blob>,
}

impl Procedural {
    pub fn new(seed: u64, width: u32, height: u32, spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let short = f64::from(width.min(height));
        let (rmin, rmax) = spec.blob_radius;
        let blobs = (0..spec.blobs)
            .map(|_| {
                let cx = rng.gen_range(0.15..0.85) * f64::from(width);
                let cy = rng.gen_range(0.15..0.85) * f64::from(height);
                let rx = (rng.gen_range(rmin..=rmax) * short).max(1.0);
                let ry = rx * rng.gen_range(0.6..=1.0);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let color = [rng.gen_range(215..=240), rng.gen_range(140..=190), rng.gen_range(190..=225)];
                let r = rx.max(ry);
                let bbox = (
                    (cx - r).floor() as i64,
                    (cy - r).floor() as i64,
                    (cx + r).ceil() as i64 + 1,
                    (cy + r).ceil() as i64 + 1,
                );
                Blob { cx, cy, rx, ry, cos: angle.cos(), sin: angle.sin(), color, bbox }
            })
            .collect();
        Self { seed, spec: spec.clone(), blobs }
    }

    fn pixel(&self, blobs: &[&Blob], x: u64, y: u64) -> [u8; 3] {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        // later blobs are drawn on top
        let Some(blob) = blobs.iter().rev().find(|b| b.contains(fx, fy)) else {
            return WHITE;
        };
        let cell = u64::from(self.spec.nucleus_cell.max(4));
        let (gx, gy) = (x / cell, y / cell);
        let h = hash3(self.seed, gx, gy);
        if ((h & 0xFFFF) as f64 / 65536.0) < self.spec.nucleus_density {
            let (rlo, rhi) = self.spec.nucleus_radius;
            let rhi = rhi.min((cell as u32 - 1) / 2).max(rlo);
            let r = u64::from(rlo + ((h >> 16) as u32 % (rhi - rlo + 1)));
            let span = cell.saturating_sub(2 * r).max(1);
            let ncx = gx * cell + r + (h >> 24) % span;
            let ncy = gy * cell + r + (h >> 40) % span;
            let (dx, dy) = (x as i64 - ncx as i64, y as i64 - ncy as i64);
            if (dx * dx + dy * dy) as u64 <= r * r && blob.contains(ncx as f64 + 0.5, ncy as f64 + 0.5) {
                let shade = (h >> 56) as u8 % 24;
                return [60 + shade, 30 + shade / 2, 100 + shade];
            }
        }
        let noise = (hash3(self.seed ^ 0x5151, x, y) % 14) as u8;
        [blob.color[0] - noise, blob.color[1] - noise, blob.color[2] - noise]
    }

    /// Renders a region of `level` by point-sampling level 0 at each pixel's block centre.
    pub fn render(&self, level: u32, x: u32, y: u32, w: u32, h: u32, out: &mut [u8]) {
        let step = 1u64 << level;
        let half = step / 2;
        let (x0, y0) = (u64::from(x) * step, u64::from(y) * step);
        let (x1, y1) = (u64::from(x + w) * step, u64::from(y + h) * step);
        let blobs: Vec<&Blob> = self
            .blobs
            .iter()
            .filter(|b| {
                b.bbox.0 < x1 as i64 && b.bbox.2 > x0 as i64 && b.bbox.1 < y1 as i64 && b.bbox.3 > y0 as i64
            })
            .collect();
        if blobs.is_empty() {
            out.fill(255);
            return;
        }
        let row_len = w as usize * 3;
        out.par_chunks_mut(row_len).enumerate().for_each(|(r, row)| {
            let sy = (u64::from(y) + r as u64) * step + half;
            for c in 0..w as usize {
                let sx = (u64::from(x) + c as u64) * step + half;
                row[c * 3..c * 3 + 3].copy_from_slice(&self.pixel(&blobs, sx, sy));
            }
        });
    }
}

/// Renders a synthetic slide into a writable raster pyramid.
///
/// Level 0 is the procedural image; coarser levels are box-downsampled from it.
pub fn generate_synthetic_slide(
    seed: u64,
    width: u32,
    height: u32,
    spec: &SyntheticSpec,
) -> Result<ImagePyramid, PyramidError> {
    let policy = PyramidPolicy { tile_size: spec.tile_size, ..Default::default() };
    let pyramid = create_pyramid(width, height, 3, &policy)?.with_base_magnification(spec.base_magnification);
    let proc = Procedural::new(seed, width, height, spec);
    const BAND: u32 = 256;
    for y in (0..height).step_by(BAND as usize) {
        let h = BAND.min(height - y);
        let mut band = vec![0u8; width as usize * h as usize * 3];
        proc.render(0, 0, y, width, h, &mut band);
        pyramid.write_region(0, 0, y, width, h, &band)?;
    }
    rebuild_levels(&pyramid, 0)?;
    Ok(pyramid)
}

/// A read-only synthetic slide of any size whose tiles are rendered on demand.
///
/// Every level point-samples level 0, so nothing proportional to the slide size is allocated.
pub fn virtual_synthetic_slide(
    seed: u64,
    width: u32,
    height: u32,
    spec: &SyntheticSpec,
) -> Result<ImagePyramid, PyramidError> {
    if width == 0 || height == 0 {
        return Err(PyramidError::Argument("dimensions must be at least 1".into()));
    }
    let policy = PyramidPolicy { tile_size: spec.tile_size, ..Default::default() };
    policy.validate()?;
    let dims = plan_levels(width, height, &policy);
    Ok(ImagePyramid::from_parts(
        width,
        height,
        3,
        spec.tile_size,
        spec.base_magnification,
        &dims,
        None,
        Some(Procedural::new(seed, width, height, spec)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_slide(42, 600, 500, &spec).unwrap();
        let b = generate_synthetic_slide(42, 600, 500, &spec).unwrap();
        let c = generate_synthetic_slide(43, 600, 500, &spec).unwrap();
        assert_eq!(a.read_level(0).unwrap(), b.read_level(0).unwrap());
        assert_ne!(a.read_level(0).unwrap(), c.read_level(0).unwrap());
    }

    #[test]
    fn zero_blobs_is_white() {
        let spec = SyntheticSpec { blobs: 0, ..Default::default() };
        let p = generate_synthetic_slide(7, 300, 200, &spec).unwrap();
        assert!(p.read_level(0).unwrap().iter().all(|&v| v == 255));
    }

    #[test]
    fn pixels_are_glass_or_tissue() {
        let p = generate_synthetic_slide(42, 512, 512, &SyntheticSpec::default()).unwrap();
        let px = p.read_level(0).unwrap();
        let mut tissue = 0;
        for rgb in px.chunks(3) {
            if rgb != WHITE {
                tissue += 1;
                assert!(rgb.iter().any(|&v| v <= 235), "{rgb:?}");
            }
        }
        assert!(tissue > 0 && tissue < 512 * 512);
    }

    #[test]
    fn virtual_matches_materialized_level0() {
        let spec = SyntheticSpec::default();
        let v = virtual_synthetic_slide(42, 700, 650, &spec).unwrap();
        let m = generate_synthetic_slide(42, 700, 650, &spec).unwrap();
        assert_eq!(v.read_region(0, 100, 200, 300, 50).unwrap(), m.read_region(0, 100, 200, 300, 50).unwrap());
        let before = v.tile_reads();
        v.read_tile(crate::pyramid::TileKey::new(0, 1, 1)).unwrap();
        assert_eq!(v.tile_reads(), before + 1);
        assert!(!v.is_writable());
    }
}
