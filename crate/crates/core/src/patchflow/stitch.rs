//! Result layers. Each supports one writer and any number of readers; a patch becomes visible
//! as a whole when it is committed.

use std::sync::RwLock;

use super::{DetectionAccumulator, PatchDescriptor, PatchError, PatchPlan};
use crate::models::ClassRaster;
use crate::pyramid::{create_pyramid, ImagePyramid, PyramidPolicy};
use crate::scalar::Scalar;

/// Class value marking cells and pixels no patch has written.
pub const UNPROCESSED: u8 = 255;

/// Rectangle at a pyramid level, in that level's pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LevelRect {
    pub level: u32,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl LevelRect {
    pub fn of_patch(d: &PatchDescriptor) -> Self {
        Self { level: d.level, x: d.origin_x, y: d.origin_y, w: d.width, h: d.height }
    }
}

/// Per-cell class confidences over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<S> {
    pub cols: u32,
    pub rows: u32,
    pub classes: u32,
    /// `cols * rows * classes`, row-major by cell.
    pub values: Vec<S>,
    pub processed: Vec<bool>,
}

impl<S: Scalar> Heatmap<S> {
    pub fn new(cols: u32, rows: u32, classes: u32) -> Self {
        let cells = cols as usize * rows as usize;
        Self { cols, rows, classes, values: vec![S::zero(); cells * classes as usize], processed: vec![false; cells] }
    }

    fn index(&self, col: u32, row: u32) -> usize {
        row as usize * self.cols as usize + col as usize
    }

    pub fn cell(&self, col: u32, row: u32) -> Option<&[S]> {
        let i = self.index(col, row);
        let c = self.classes as usize;
        self.processed[i].then(|| &self.values[i * c..(i + 1) * c])
    }

    /// Highest-confidence class of a processed cell; ties go to the lower class id.
    pub fn argmax(&self, col: u32, row: u32) -> Option<u32> {
        self.cell(col, row).map(argmax)
    }

    pub fn confidence(&self, col: u32, row: u32) -> Option<S> {
        self.cell(col, row).map(|v| v[argmax(v) as usize])
    }

    /// Argmax class per cell, [`UNPROCESSED`] where nothing was committed.
    pub fn class_raster(&self) -> Vec<u8> {
        self.cells().map(|(c, r)| self.argmax(c, r).map_or(UNPROCESSED, |k| k as u8)).collect()
    }

    /// `round(255 * confidence)` per cell, 0 where nothing was committed.
    pub fn confidence_raster(&self) -> Vec<u8> {
        self.cells().map(|(c, r)| self.confidence(c, r).map_or(0, quantize)).collect()
    }

    pub fn processed_cells(&self) -> usize {
        self.processed.iter().filter(|&&p| p).count()
    }

    fn cells(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| (c, r)))
    }

    /// Writes one cell. Returns `true` when the cell had already been written; the new value
    /// replaces it.
    pub fn commit(&mut self, col: u32, row: u32, probs: &[S]) -> Result<bool, PatchError> {
        if col >= self.cols || row >= self.rows {
            return Err(PatchError::Stitch(format!("cell ({col}, {row}) outside the {}x{} grid", self.cols, self.rows)));
        }
        if probs.len() != self.classes as usize {
            return Err(PatchError::Stitch(format!("{} confidences for {} classes", probs.len(), self.classes)));
        }
        let i = self.index(col, row);
        let c = self.classes as usize;
        self.values[i * c..(i + 1) * c].copy_from_slice(probs);
        let duplicate = std::mem::replace(&mut self.processed[i], true);
        if duplicate {
            log::warn!("heatmap cell ({col}, {row}) written twice; keeping the last value");
        }
        Ok(duplicate)
    }
}

fn argmax<S: Scalar>(v: &[S]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

pub fn quantize<S: Scalar>(confidence: S) -> u8 {
    (confidence.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Folds a stream of `(col, row, probabilities)` into a heatmap.
pub fn stitch_classification<S: Scalar>(
    cols: u32,
    rows: u32,
    classes: u32,
    cells: impl IntoIterator<Item = (u32, u32, Vec<S>)>,
) -> Result<Heatmap<S>, PatchError> {
    let mut h = Heatmap::new(cols, rows, classes);
    for (c, r, p) in cells {
        h.commit(c, r, &p)?;
    }
    Ok(h)
}

#[derive(Debug)]
pub struct HeatmapLayer<S> {
    source_level: u32,
    cell: u32,
    inner: RwLock<Heatmap<S>>,
}

impl<S: Scalar> HeatmapLayer<S> {
    pub fn new(plan: &PatchPlan, classes: u32) -> Self {
        Self { source_level: plan.level, cell: plan.cell_w, inner: RwLock::new(Heatmap::new(plan.cols, plan.rows, classes)) }
    }

    pub fn commit(&self, d: &PatchDescriptor, probs: &[S]) -> Result<(), PatchError> {
        self.inner.write().unwrap_or_else(|e| e.into_inner()).commit(d.grid_col, d.grid_row, probs).map(|_| ())
    }

    pub fn snapshot(&self) -> Heatmap<S> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn source_level(&self) -> u32 {
        self.source_level
    }

    /// Grid pitch in source-level pixels.
    pub fn cell_size(&self) -> u32 {
        self.cell
    }
}

/// Per-pixel classes at the processed level, kept as a one-channel pyramid. Coarser levels are
/// refreshed for every committed patch by a majority vote over each 2x2 block.
#[derive(Debug)]
pub struct SegmentationLayer {
    pyramid: ImagePyramid,
    source_level: u32,
    cols: u32,
    rows: u32,
    cell_w: u32,
    cell_h: u32,
    committed: RwLock<Vec<bool>>,
}

impl SegmentationLayer {
    pub fn new(plan: &PatchPlan, policy: &PyramidPolicy) -> Result<Self, PatchError> {
        let pyramid = create_pyramid(plan.level_width, plan.level_height, 1, policy)?;
        Ok(Self {
            pyramid,
            source_level: plan.level,
            cols: plan.cols,
            rows: plan.rows,
            cell_w: plan.cell_w,
            cell_h: plan.cell_h,
            committed: RwLock::new(vec![false; plan.cols as usize * plan.rows as usize]),
        })
    }

    /// The stitched result. Level `k` of it corresponds to level `source_level + k` of the
    /// slide.
    pub fn pyramid(&self) -> &ImagePyramid {
        &self.pyramid
    }

    pub fn source_level(&self) -> u32 {
        self.source_level
    }

    pub fn grid(&self) -> (u32, u32, u32, u32) {
        (self.cols, self.rows, self.cell_w, self.cell_h)
    }

    pub fn is_committed(&self, col: u32, row: u32) -> bool {
        self.committed.read().unwrap_or_else(|e| e.into_inner())[(row * self.cols + col) as usize]
    }

    /// Whether the processed-level pixel `(x, y)` belongs to a committed patch.
    pub fn pixel_committed(&self, x: u32, y: u32) -> bool {
        let (c, r) = (x / self.cell_w, y / self.cell_h);
        c < self.cols && r < self.rows && self.is_committed(c, r)
    }

    pub fn committed_cells(&self) -> usize {
        self.committed.read().unwrap_or_else(|e| e.into_inner()).iter().filter(|&&b| b).count()
    }

    /// Writes the valid part of a footprint-sized raster at the patch origin.
    pub fn commit(&self, d: &PatchDescriptor, raster: &ClassRaster) -> Result<(), PatchError> {
        if (raster.width, raster.height) != (d.footprint_w, d.footprint_h)
            || raster.data.len() != raster.width as usize * raster.height as usize
        {
            return Err(PatchError::Shape {
                patch: *d,
                message: format!(
                    "raster is {}x{}, patch footprint is {}x{}",
                    raster.width, raster.height, d.footprint_w, d.footprint_h
                ),
            });
        }
        if d.level != self.source_level || d.grid_col >= self.cols || d.grid_row >= self.rows {
            return Err(PatchError::Shape { patch: *d, message: "patch is not on this layer's grid".into() });
        }
        let (w, h) = (d.width as usize, d.height as usize);
        let valid: Vec<u8> = if w == raster.width as usize {
            raster.data[..w * h].to_vec()
        } else {
            raster.data.chunks(raster.width as usize).take(h).flat_map(|row| &row[..w]).copied().collect()
        };
        self.pyramid.write_region(0, d.origin_x, d.origin_y, d.width, d.height, &valid)?;
        self.refresh(d.origin_x, d.origin_y, d.width, d.height)?;
        self.committed.write().unwrap_or_else(|e| e.into_inner())[(d.grid_row * self.cols + d.grid_col) as usize] =
            true;
        Ok(())
    }

    fn refresh(&self, mut x: u32, mut y: u32, mut w: u32, mut h: u32) -> Result<(), PatchError> {
        for k in 1..self.pyramid.level_count() {
            let (pw, ph) = self.pyramid.level_dims(k - 1).expect("level");
            let (x0, y0) = (x / 2, y / 2);
            let (x1, y1) = ((x + w).div_ceil(2), (y + h).div_ceil(2));
            let (sx, sy) = (x0 * 2, y0 * 2);
            let (sw, sh) = ((x1 * 2).min(pw) - sx, (y1 * 2).min(ph) - sy);
            let src = self.pyramid.read_region(k - 1, sx, sy, sw, sh)?;
            let out = majority_downsample(&src, sw, sh);
            (x, y, w, h) = (x0, y0, x1 - x0, y1 - y0);
            self.pyramid.write_region(k, x, y, w, h, &out)?;
        }
        Ok(())
    }
}

/// Most frequent label in each 2x2 block (blocks at odd borders use the pixels they have); ties
/// go to the larger label.
pub fn majority_downsample(src: &[u8], w: u32, h: u32) -> Vec<u8> {
    let (w, h) = (w as usize, h as usize);
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut vals = [0u8; 4];
            let mut n = 0;
            for y in oy * 2..(oy * 2 + 2).min(h) {
                for x in ox * 2..(ox * 2 + 2).min(w) {
                    vals[n] = src[y * w + x];
                    n += 1;
                }
            }
            let vals = &vals[..n];
            let mut best = vals[0];
            let mut best_count = 0;
            for &v in vals {
                let count = vals.iter().filter(|&&u| u == v).count();
                if count > best_count || (count == best_count && v > best) {
                    best = v;
                    best_count = count;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Detections gathered so far, level-0 coordinates, with the patches that produced them.
#[derive(Debug)]
pub struct DetectionLayer<S> {
    pub(crate) accumulator: DetectionAccumulator<S>,
    nms_iou: S,
    slide: (u32, u32),
}

impl<S: Scalar> DetectionLayer<S> {
    pub fn new(nms_iou: S, slide_width: u32, slide_height: u32) -> Self {
        Self { accumulator: DetectionAccumulator::new(), nms_iou, slide: (slide_width, slide_height) }
    }

    pub fn commit(&self, d: &PatchDescriptor, local: &[super::Detection<S>]) {
        self.accumulator.push(d, local);
    }

    /// Raw accumulated boxes, before suppression.
    pub fn raw(&self) -> Vec<super::Detection<S>> {
        self.accumulator.snapshot()
    }

    /// Suppressed and clamped to the slide.
    pub fn finish(&self) -> Vec<super::Detection<S>> {
        self.accumulator
            .finish(self.nms_iou)
            .iter()
            .map(|b| super::clamp_to_slide(b, self.slide.0, self.slide.1))
            .collect()
    }
}

/// One pipeline's output.
#[derive(Debug)]
pub enum ResultLayer<S> {
    Heatmap(HeatmapLayer<S>),
    Segmentation(SegmentationLayer),
    Detections(DetectionLayer<S>),
}

impl<S: Scalar> ResultLayer<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            ResultLayer::Heatmap(_) => "heatmap",
            ResultLayer::Segmentation(_) => "segmentation",
            ResultLayer::Detections(_) => "detections",
        }
    }

    /// Class/confidence pairs for a region of slide level `level`, interleaved
    /// (`w * h * 2` bytes). Pixels without a committed result read as class [`UNPROCESSED`],
    /// confidence 0.
    pub fn overlay_region(&self, level: u32, x: u32, y: u32, w: u32, h: u32) -> Result<Vec<u8>, PatchError> {
        let mut out = vec![0u8; w as usize * h as usize * 2];
        for px in out.chunks_mut(2) {
            px[0] = UNPROCESSED;
        }
        // level-0 pixel for an output pixel
        let l0 = |v: u32| u64::from(v) << level;
        match self {
            ResultLayer::Heatmap(layer) => {
                let hm = layer.snapshot();
                let pitch = u64::from(layer.cell) << layer.source_level;
                for oy in 0..h {
                    let row = l0(y + oy) / pitch;
                    for ox in 0..w {
                        let col = l0(x + ox) / pitch;
                        if col >= u64::from(hm.cols) || row >= u64::from(hm.rows) {
                            continue;
                        }
                        if let Some(v) = hm.cell(col as u32, row as u32) {
                            let k = argmax(v);
                            let i = (oy as usize * w as usize + ox as usize) * 2;
                            out[i] = k as u8;
                            out[i + 1] = quantize(v[k as usize]);
                        }
                    }
                }
            }
            ResultLayer::Segmentation(layer) => {
                let s = layer.source_level;
                let p = &layer.pyramid;
                let r = level.saturating_sub(s).min(p.lowest_level());
                let (rw, rh) = p.level_dims(r).expect("level");
                let shift = s + r;
                let to_r = |v: u32| (l0(v) >> shift) as u32;
                let (xs, ys): (Vec<u32>, Vec<u32>) =
                    ((x..x + w).map(to_r).collect(), (y..y + h).map(to_r).collect());
                let in_x: Vec<&u32> = xs.iter().filter(|&&v| v < rw).collect();
                let in_y: Vec<&u32> = ys.iter().filter(|&&v| v < rh).collect();
                if in_x.is_empty() || in_y.is_empty() {
                    return Ok(out);
                }
                let (bx0, bx1) = (*in_x[0], **in_x.last().unwrap());
                let (by0, by1) = (*in_y[0], **in_y.last().unwrap());
                let bw = bx1 - bx0 + 1;
                let block = p.read_region(r, bx0, by0, bw, by1 - by0 + 1)?;
                for (oy, &ry) in ys.iter().enumerate() {
                    if ry >= rh {
                        continue;
                    }
                    for (ox, &rx) in xs.iter().enumerate() {
                        if rx >= rw {
                            continue;
                        }
                        let sx = (l0(x + ox as u32) >> s) as u32;
                        let sy = (l0(y + oy as u32) >> s) as u32;
                        if !layer.pixel_committed(sx, sy) {
                            continue;
                        }
                        let i = (oy * w as usize + ox) * 2;
                        out[i] = block[((ry - by0) * bw + (rx - bx0)) as usize];
                        out[i + 1] = 255;
                    }
                }
            }
            ResultLayer::Detections(layer) => {
                let boxes = layer.raw();
                for b in boxes.iter().rev() {
                    let s = f64::from(1u32 << level);
                    let bx0 = (b.x.as_f64() / s).floor().max(f64::from(x)) as u32;
                    let by0 = (b.y.as_f64() / s).floor().max(f64::from(y)) as u32;
                    let bx1 = ((b.x + b.w).as_f64() / s).ceil().min(f64::from(x + w)) as u32;
                    let by1 = ((b.y + b.h).as_f64() / s).ceil().min(f64::from(y + h)) as u32;
                    for py in by0..by1 {
                        for px in bx0..bx1 {
                            let i = ((py - y) as usize * w as usize + (px - x) as usize) * 2;
                            out[i] = b.class_id.min(254) as u8;
                            out[i + 1] = quantize(b.score);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchflow::plan_patches;

    fn probs(k: usize) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[k] = 1.0;
        v
    }

    #[test]
    fn heatmap_cells_and_order_independence() {
        let cells = vec![(0, 0, probs(0)), (1, 0, probs(2)), (0, 1, probs(1)), (1, 1, probs(3))];
        let h = stitch_classification(2, 2, 4, cells.clone()).unwrap();
        assert_eq!(h.processed_cells(), 4);
        assert_eq!(h.class_raster(), vec![0, 2, 1, 3]);
        let mut rev = cells;
        rev.reverse();
        assert_eq!(stitch_classification(2, 2, 4, rev).unwrap(), h);
        let empty = stitch_classification::<f64>(2, 2, 4, vec![]).unwrap();
        assert_eq!(empty.class_raster(), vec![UNPROCESSED; 4]);
        assert!(stitch_classification(2, 2, 4, vec![(2, 0, probs(0))]).is_err());
    }

    #[test]
    fn duplicate_cell_last_write_wins() {
        let mut h = Heatmap::new(1, 1, 4);
        assert!(!h.commit(0, 0, &probs(1)).unwrap());
        assert!(h.commit(0, 0, &probs(2)).unwrap());
        assert_eq!(h.argmax(0, 0), Some(2));
    }

    #[test]
    fn majority_votes() {
        assert_eq!(majority_downsample(&[1, 1, 0, 0], 2, 2), vec![1]);
        assert_eq!(majority_downsample(&[0, 0, 0, 1], 2, 2), vec![0]);
        assert_eq!(majority_downsample(&[0, 3, 2, 2], 2, 2), vec![2]);
        assert_eq!(majority_downsample(&[0, 1, 2], 3, 1), vec![1, 2]);
    }

    fn small_layer() -> (ImagePyramid, PatchPlan, SegmentationLayer) {
        let policy = PyramidPolicy { min_level_extent: 64, ..Default::default() };
        let p = create_pyramid(600, 300, 3, &policy).unwrap();
        let plan = plan_patches(&p, None, 256, 40.0, 0.1).unwrap();
        let layer = SegmentationLayer::new(&plan, &policy).unwrap();
        (p, plan, layer)
    }

    #[test]
    fn segmentation_writes_only_its_region() {
        let (_, plan, layer) = small_layer();
        let d = plan.patches[0];
        let ones = ClassRaster { width: 256, height: 256, data: vec![1; 256 * 256] };
        layer.commit(&d, &ones).unwrap();
        let full = layer.pyramid().read_level(0).unwrap();
        for y in 0..300usize {
            for x in 0..600usize {
                assert_eq!(full[y * 600 + x], u8::from(x < 256 && y < 256));
            }
        }
        assert!(layer.is_committed(0, 0) && !layer.is_committed(1, 0));
        let lvl1 = layer.pyramid().read_level(1).unwrap();
        assert_eq!(lvl1[0], 1);
        assert_eq!(lvl1[128], 0);
        let bad = ClassRaster { width: 10, height: 10, data: vec![0; 100] };
        let err = layer.commit(&d, &bad).unwrap_err();
        assert!(matches!(err, PatchError::Shape { patch, .. } if patch == d));
    }

    #[test]
    fn adjacent_patches_leave_no_seam() {
        let (_, plan, layer) = small_layer();
        for d in &plan.patches {
            let raster = ClassRaster { width: 256, height: 256, data: vec![1; 256 * 256] };
            layer.commit(d, &raster).unwrap();
        }
        assert!(layer.pyramid().read_level(0).unwrap().iter().all(|&v| v == 1));
        assert!(layer.pyramid().read_level(1).unwrap().iter().all(|&v| v == 1));
    }

    #[test]
    fn overlay_marks_uncommitted() {
        let (_, plan, layer) = small_layer();
        let ones = ClassRaster { width: 256, height: 256, data: vec![1; 256 * 256] };
        layer.commit(&plan.patches[1], &ones).unwrap();
        let result = ResultLayer::<f32>::Segmentation(layer);
        let o = result.overlay_region(0, 250, 0, 10, 1).unwrap();
        assert_eq!(&o[..4], &[UNPROCESSED, 0, UNPROCESSED, 0]);
        assert_eq!(&o[12..14], &[1, 255]);
        let coarse = result.overlay_region(1, 0, 0, 150, 1).unwrap();
        assert_eq!(coarse[2 * 127], UNPROCESSED);
        assert_eq!(coarse[2 * 128], 1);
    }

    #[test]
    fn heatmap_overlay_follows_cells() {
        let (_, plan, _) = small_layer();
        let layer = HeatmapLayer::<f64>::new(&plan, 4);
        layer.commit(&plan.patches[1], &[0.1, 0.2, 0.5, 0.2]).unwrap();
        let result = ResultLayer::Heatmap(layer);
        let o = result.overlay_region(0, 255, 0, 2, 1).unwrap();
        assert_eq!(o, vec![UNPROCESSED, 0, 2, 128]);
        let o = result.overlay_region(1, 127, 0, 2, 1).unwrap();
        assert_eq!(o, vec![UNPROCESSED, 0, 2, 128]);
    }
}
