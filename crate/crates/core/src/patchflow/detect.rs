//! Box overlap, class-aware greedy non-maximum suppression and detection accumulation.

use std::cmp::Ordering;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::PatchDescriptor;
use crate::scalar::Scalar;

/// Axis-aligned box with class and confidence. Coordinates are level-0 pixels once
/// accumulated, patch-local before.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection<S> {
    pub x: S,
    pub y: S,
    pub w: S,
    pub h: S,
    pub class_id: u32,
    pub score: S,
}

impl<S: Scalar> Detection<S> {
    pub fn new(x: S, y: S, w: S, h: S, class_id: u32, score: S) -> Self {
        Self { x, y, w, h, class_id, score }
    }

    pub fn area(&self) -> S {
        self.w * self.h
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou<S: Scalar>(a: &Detection<S>, b: &Detection<S>) -> S {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(S::zero());
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(S::zero());
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= S::zero() {
        S::zero()
    } else {
        inter / union
    }
}

/// Ranking used by NMS: score descending, then x ascending, then y ascending.
pub fn rank<S: Scalar>(a: &Detection<S>, b: &Detection<S>) -> Ordering {
    let total = |u: S, v: S| u.as_f64().total_cmp(&v.as_f64());
    total(b.score, a.score).then(total(a.x, b.x)).then(total(a.y, b.y))
}

/// Greedy class-aware NMS: keep the best remaining box, drop same-class boxes overlapping it
/// with IoU at or above `iou_threshold`, repeat.
pub fn nms<S: Scalar>(detections: &[Detection<S>], iou_threshold: S) -> Vec<Detection<S>> {
    let mut order: Vec<&Detection<S>> = detections.iter().collect();
    order.sort_by(|a, b| rank(a, b));
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let best = order[i];
        kept.push(*best);
        for j in i + 1..order.len() {
            if !suppressed[j] && order[j].class_id == best.class_id && iou(best, order[j]) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Maps a patch-local box (source-level pixels relative to the patch origin) to level 0.
pub fn local_to_level0<S: Scalar>(patch: &PatchDescriptor, local: &Detection<S>) -> Detection<S> {
    let scale = S::from_f64_lossy(f64::from(1u32 << patch.level));
    let ox = S::from_f64_lossy(f64::from(patch.origin_x));
    let oy = S::from_f64_lossy(f64::from(patch.origin_y));
    Detection {
        x: (ox + local.x) * scale,
        y: (oy + local.y) * scale,
        w: local.w * scale,
        h: local.h * scale,
        class_id: local.class_id,
        score: local.score,
    }
}

/// Concatenates per-patch detections in level-0 coordinates; NMS runs once over the union.
#[derive(Debug, Default)]
pub struct DetectionAccumulator<S> {
    items: RwLock<Vec<Detection<S>>>,
}

impl<S: Scalar> DetectionAccumulator<S> {
    pub fn new() -> Self {
        Self { items: RwLock::new(Vec::new()) }
    }

    pub fn push(&self, patch: &PatchDescriptor, local: &[Detection<S>]) {
        let mapped: Vec<_> = local.iter().map(|d| local_to_level0(patch, d)).collect();
        self.items.write().unwrap_or_else(|e| e.into_inner()).extend(mapped);
    }

    pub fn len(&self) -> usize {
        self.items.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<Detection<S>> {
        self.items.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn finish(&self, iou_threshold: S) -> Vec<Detection<S>> {
        nms(&self.snapshot(), iou_threshold)
    }
}

/// Clamps boxes to the slide rectangle.
pub fn clamp_to_slide<S: Scalar>(d: &Detection<S>, width: u32, height: u32) -> Detection<S> {
    let (w, h) = (S::from_f64_lossy(f64::from(width)), S::from_f64_lossy(f64::from(height)));
    let x0 = d.x.max(S::zero()).min(w);
    let y0 = d.y.max(S::zero()).min(h);
    let x1 = (d.x + d.w).max(S::zero()).min(w);
    let y1 = (d.y + d.h).max(S::zero()).min(h);
    Detection { x: x0, y: y0, w: x1 - x0, h: y1 - y0, ..*d }
}
