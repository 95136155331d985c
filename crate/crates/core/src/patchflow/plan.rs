use serde::{Deserialize, Serialize};

use super::{resize_bilinear_u8, PatchError};
use crate::pyramid::ImagePyramid;
use crate::tissue::TissueMask;

pub const DEFAULT_KEEP_FRACTION: f64 = 0.1;

/// Where a patch comes from. `footprint_*` is the source-level area read for it (edge patches
/// are padded with white past the level border), `width`/`height` the part that lies inside
/// the level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchDescriptor {
    pub index: usize,
    pub level: u32,
    pub grid_col: u32,
    pub grid_row: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub footprint_w: u32,
    pub footprint_h: u32,
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub target_magnification: f64,
}

impl PatchDescriptor {
    #[doc(hidden)]
    pub fn for_test(level: u32, origin_x: u32, origin_y: u32) -> Self {
        Self {
            index: 0,
            level,
            grid_col: origin_x / 256,
            grid_row: origin_y / 256,
            origin_x,
            origin_y,
            footprint_w: 256,
            footprint_h: 256,
            width: 256,
            height: 256,
            patch_size: 256,
            target_magnification: 40.0,
        }
    }

    /// Patch-pixel to source-level coordinates.
    pub fn patch_to_level(&self, u: f64, v: f64) -> (f64, f64) {
        let (fx, fy) = self.scale();
        (f64::from(self.origin_x) + u * fx, f64::from(self.origin_y) + v * fy)
    }

    pub fn level_to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        let (fx, fy) = self.scale();
        ((x - f64::from(self.origin_x)) / fx, (y - f64::from(self.origin_y)) / fy)
    }

    fn scale(&self) -> (f64, f64) {
        let p = f64::from(self.patch_size);
        (f64::from(self.footprint_w) / p, f64::from(self.footprint_h) / p)
    }

    /// The valid area in level-0 pixels, `(x, y, w, h)`.
    pub fn level0_rect(&self) -> (u64, u64, u64, u64) {
        let s = self.level;
        (
            u64::from(self.origin_x) << s,
            u64::from(self.origin_y) << s,
            u64::from(self.width) << s,
            u64::from(self.height) << s,
        )
    }
}

pub fn level_to_level0(level: u32, x: f64, y: f64) -> (f64, f64) {
    let s = f64::from(1u32 << level);
    (x * s, y * s)
}

pub fn level0_to_level(level: u32, x: f64, y: f64) -> (f64, f64) {
    let s = f64::from(1u32 << level);
    (x / s, y / s)
}

/// A patch grid over one source level.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPlan {
    pub level: u32,
    pub level_width: u32,
    pub level_height: u32,
    pub cols: u32,
    pub rows: u32,
    /// Grid pitch at the source level.
    pub cell_w: u32,
    pub cell_h: u32,
    pub patch_size: u32,
    pub target_magnification: f64,
    /// Kept patches, row-major.
    pub patches: Vec<PatchDescriptor>,
}

impl PatchPlan {
    pub fn total(&self) -> usize {
        self.patches.len()
    }
}

/// Coarsest level whose magnification still reaches `target`.
pub fn source_level(p: &ImagePyramid, target: f64) -> Result<u32, PatchError> {
    if !(target > 0.0) {
        return Err(PatchError::Argument(format!("target magnification {target} must be positive")));
    }
    let tol = 1e-9 * target;
    if target > p.base_magnification() + tol {
        return Err(PatchError::Argument(format!(
            "target magnification {target} exceeds the base magnification {}",
            p.base_magnification()
        )));
    }
    Ok((0..p.level_count()).rev().find(|&l| p.magnification(l) + tol >= target).unwrap_or(0))
}

/// Lays a non-overlapping patch grid over the level chosen for `target_magnification` and keeps
/// the cells whose projected mask area is at least `keep_fraction` tissue. The mask is taken to
/// span the whole slide.
pub fn plan_patches(
    p: &ImagePyramid,
    mask: Option<&TissueMask>,
    patch_size: u32,
    target_magnification: f64,
    keep_fraction: f64,
) -> Result<PatchPlan, PatchError> {
    if patch_size == 0 {
        return Err(PatchError::Argument("patch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(PatchError::Argument(format!("keep fraction {keep_fraction} outside [0, 1]")));
    }
    let level = source_level(p, target_magnification)?;
    let ratio = p.magnification(level) / target_magnification;
    let cell = ((f64::from(patch_size) * ratio).round() as u32).max(1);
    let (lw, lh) = p.level_dims(level).expect("source level exists");
    let (cols, rows) = (lw.div_ceil(cell), lh.div_ceil(cell));
    let mut patches = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let (ox, oy) = (col * cell, row * cell);
            let d = PatchDescriptor {
                index: patches.len(),
                level,
                grid_col: col,
                grid_row: row,
                origin_x: ox,
                origin_y: oy,
                footprint_w: cell,
                footprint_h: cell,
                width: cell.min(lw - ox),
                height: cell.min(lh - oy),
                patch_size,
                target_magnification,
            };
            if mask.map_or(true, |m| keep(m, p.width(), p.height(), &d, keep_fraction)) {
                patches.push(d);
            }
        }
    }
    Ok(PatchPlan {
        level,
        level_width: lw,
        level_height: lh,
        cols,
        rows,
        cell_w: cell,
        cell_h: cell,
        patch_size,
        target_magnification,
        patches,
    })
}

/// One patch covering the whole source level, resized to `patch_size` square.
pub fn plan_whole_image(p: &ImagePyramid, patch_size: u32, target_magnification: f64) -> Result<PatchPlan, PatchError> {
    if patch_size == 0 {
        return Err(PatchError::Argument("patch size must be positive".into()));
    }
    let level = source_level(p, target_magnification)?;
    let (lw, lh) = p.level_dims(level).expect("source level exists");
    let d = PatchDescriptor {
        index: 0,
        level,
        grid_col: 0,
        grid_row: 0,
        origin_x: 0,
        origin_y: 0,
        footprint_w: lw,
        footprint_h: lh,
        width: lw,
        height: lh,
        patch_size,
        target_magnification,
    };
    Ok(PatchPlan {
        level,
        level_width: lw,
        level_height: lh,
        cols: 1,
        rows: 1,
        cell_w: lw,
        cell_h: lh,
        patch_size,
        target_magnification,
        patches: vec![d],
    })
}

fn keep(mask: &TissueMask, width: u32, height: u32, d: &PatchDescriptor, fraction: f64) -> bool {
    let (x, y, w, h) = d.level0_rect();
    let (mw, mh) = (u64::from(mask.width), u64::from(mask.height));
    let (sw, sh) = (u64::from(width), u64::from(height));
    let x0 = (x * mw / sw).min(mw.saturating_sub(1));
    let y0 = (y * mh / sh).min(mh.saturating_sub(1));
    let x1 = ((x + w).min(sw) * mw).div_ceil(sw).clamp(x0 + 1, mw);
    let y1 = ((y + h).min(sh) * mh).div_ceil(sh).clamp(y0 + 1, mh);
    let mut tissue = 0u64;
    for my in y0..y1 {
        let row = &mask.data[(my * mw) as usize..((my + 1) * mw) as usize];
        tissue += row[x0 as usize..x1 as usize].iter().filter(|&&v| v != 0).count() as u64;
    }
    let area = (x1 - x0) * (y1 - y0);
    tissue as f64 >= fraction * area as f64
}

/// Patch pixels (`patch_size` square) plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub descriptor: PatchDescriptor,
    pub channels: u8,
    pub pixels: Vec<u8>,
}

impl Patch {
    pub fn width(&self) -> u32 {
        self.descriptor.patch_size
    }

    pub fn height(&self) -> u32 {
        self.descriptor.patch_size
    }
}

/// Reads the footprint, pads it with white and resizes it to the patch size when needed.
pub fn read_patch(p: &ImagePyramid, d: &PatchDescriptor) -> Result<Patch, PatchError> {
    let c = p.channels() as usize;
    let valid = p.read_region(d.level, d.origin_x, d.origin_y, d.width, d.height)?;
    let (fw, fh) = (d.footprint_w as usize, d.footprint_h as usize);
    let footprint = if d.width == d.footprint_w && d.height == d.footprint_h {
        valid
    } else {
        let mut buf = vec![255u8; fw * fh * c];
        let row = d.width as usize * c;
        for y in 0..d.height as usize {
            buf[y * fw * c..y * fw * c + row].copy_from_slice(&valid[y * row..(y + 1) * row]);
        }
        buf
    };
    let pixels = if d.footprint_w == d.patch_size && d.footprint_h == d.patch_size {
        footprint
    } else {
        resize_bilinear_u8(&footprint, d.footprint_w, d.footprint_h, c as u8, d.patch_size, d.patch_size)
    };
    Ok(Patch { descriptor: *d, channels: c as u8, pixels })
}
