use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use pyraflow::models::{connected_components, ModelRegistry, ModelRunner};
use pyraflow::patchflow::{
    clamp_to_slide, iou, level0_to_level, level_to_level0, local_to_level0, nms, plan_patches, postprocess,
    preprocess, read_patch, Detection, PatchDescriptor, PatchPlan, PipelineRun, ResultLayer, RunConfig,
    RunObserver, RunProgress, RunStatus, StageOutput,
};
use pyraflow::pyramid::{generate_synthetic_slide, ImagePyramid, SyntheticSpec};
use pyraflow::tensor::Tensor;

fn slide(w: u32, h: u32) -> Arc<ImagePyramid> {
    Arc::new(generate_synthetic_slide(42, w, h, &SyntheticSpec::default()).unwrap())
}

fn runner(name: &str) -> Arc<dyn ModelRunner<f32>> {
    ModelRegistry::<f32>::with_mocks().get(name).unwrap()
}

fn plan_for(p: &ImagePyramid, r: &dyn ModelRunner<f32>) -> PatchPlan {
    let d = r.descriptor();
    plan_patches(p, None, d.patch_size, d.target_magnification, 0.1).unwrap()
}

/// One patch at a time, no threads, no queues.
fn sequential(p: &ImagePyramid, plan: &PatchPlan, r: &dyn ModelRunner<f32>) -> Vec<(PatchDescriptor, StageOutput<f32>)> {
    plan.patches
        .iter()
        .map(|d| {
            let t = preprocess::<f32>(&read_patch(p, d).unwrap(), r.descriptor());
            let out = r.invoke(&[t]).unwrap().pop().unwrap();
            (*d, postprocess(d, r.descriptor(), out).unwrap())
        })
        .collect()
}

fn run(p: &Arc<ImagePyramid>, plan: PatchPlan, r: Arc<dyn ModelRunner<f32>>) -> Arc<ResultLayer<f32>> {
    let run = PipelineRun::new(p.clone(), plan, r, RunConfig { buffer_capacity: 4, ..Default::default() }).unwrap();
    assert_eq!(run.run(&()).unwrap().status, RunStatus::Finished);
    run.layer().clone()
}

#[test]
fn segmentation_equals_whole_level_oracle() {
    let p = slide(1024, 768);
    let r = runner("mock_segmenter_v1");
    let plan = plan_for(&p, r.as_ref());
    assert_eq!(plan.level, 0);
    let layer = run(&p, plan, r);
    let ResultLayer::Segmentation(seg) = layer.as_ref() else { panic!("segmentation layer") };
    let stitched = seg.pyramid().read_level(0).unwrap();
    let rgb = p.read_level(0).unwrap();
    let oracle: Vec<u8> = rgb.chunks(3).map(|c| u8::from(u32::from(c[0]) + u32::from(c[1]) + u32::from(c[2]) <= 382)).collect();
    assert_eq!(stitched, oracle);
    assert!(oracle.iter().any(|&v| v == 1) && oracle.iter().any(|&v| v == 0));
}

#[test]
fn streaming_matches_sequential_for_every_task() {
    let p = slide(1100, 900);
    for name in ["mock_classifier_v1", "mock_segmenter_v1", "mock_detector_v1"] {
        let r = runner(name);
        let plan = plan_for(&p, r.as_ref());
        let expected = sequential(&p, &plan, r.as_ref());
        let layer = run(&p, plan.clone(), r.clone());
        match layer.as_ref() {
            ResultLayer::Heatmap(h) => {
                let snap = h.snapshot();
                for (d, out) in &expected {
                    let StageOutput::Probabilities(probs) = out else { panic!() };
                    assert_eq!(snap.cell(d.grid_col, d.grid_row).unwrap(), probs.as_slice());
                }
                assert_eq!(snap.processed_cells(), plan.total());
            }
            ResultLayer::Segmentation(s) => {
                let (lw, lh) = (plan.level_width as usize, plan.level_height as usize);
                let mut full = vec![0u8; lw * lh];
                for (d, out) in &expected {
                    let StageOutput::Raster(r) = out else { panic!() };
                    for y in 0..d.height as usize {
                        for x in 0..d.width as usize {
                            full[(d.origin_y as usize + y) * lw + d.origin_x as usize + x] =
                                r.data[y * r.width as usize + x];
                        }
                    }
                }
                assert_eq!(s.pyramid().read_level(0).unwrap(), full);
            }
            ResultLayer::Detections(det) => {
                let mut all = Vec::new();
                for (d, out) in &expected {
                    let StageOutput::Boxes(b) = out else { panic!() };
                    all.extend(b.iter().map(|x| local_to_level0(d, x)));
                }
                assert_eq!(det.raw(), all);
                let want: Vec<_> = nms(&all, 0.5).iter().map(|d| clamp_to_slide(d, p.width(), p.height())).collect();
                assert_eq!(det.finish(), want);
                assert!(!want.is_empty());
            }
        }
    }
}

struct HaltAfter {
    events: AtomicUsize,
    at: usize,
    halt: Arc<std::sync::atomic::AtomicBool>,
}

impl RunObserver for HaltAfter {
    fn on_progress(&self, _: &RunProgress) {
        if self.events.fetch_add(1, Ordering::SeqCst) + 1 == self.at {
            self.halt.store(true, Ordering::SeqCst);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn halted_runs_are_prefix_consistent(at in 1usize..40, buffer in 1usize..6) {
        let p = slide(1600, 1200);
        let r = runner("mock_classifier_v1");
        let plan = plan_for(&p, r.as_ref());
        let full = run(&p, plan.clone(), r.clone());
        let ResultLayer::Heatmap(full) = full.as_ref() else { panic!() };
        let full = full.snapshot();
        let cfg = RunConfig { buffer_capacity: buffer, ..Default::default() };
        let partial = PipelineRun::new(p.clone(), plan.clone(), r, cfg).unwrap();
        let obs = HaltAfter { events: AtomicUsize::new(0), at, halt: partial.halt_handle() };
        let summary = partial.run(&obs).unwrap();
        let ResultLayer::Heatmap(h) = partial.layer().as_ref() else { panic!() };
        let snap = h.snapshot();
        prop_assert_eq!(snap.processed_cells(), summary.done);
        for row in 0..snap.rows {
            for col in 0..snap.cols {
                if let Some(v) = snap.cell(col, row) {
                    prop_assert_eq!(Some(v), full.cell(col, row));
                }
            }
        }
        // commits follow plan order, so the processed cells are the first `done` patches
        for (i, d) in plan.patches.iter().enumerate() {
            prop_assert_eq!(snap.cell(d.grid_col, d.grid_row).is_some(), i < summary.done);
        }
        if summary.status == RunStatus::Halted {
            prop_assert!(summary.done < plan.total());
        }
    }

    #[test]
    fn coordinates_round_trip(level in 0u32..8, x in 0.0f64..1e6, y in 0.0f64..1e6, ox in 0u32..10_000, oy in 0u32..10_000) {
        let (lx, ly) = level0_to_level(level, x, y);
        let (bx, by) = level_to_level0(level, lx, ly);
        prop_assert!((bx - x).abs() <= 1e-9 * x.max(1.0) && (by - y).abs() <= 1e-9 * y.max(1.0));
        let mut d = PatchDescriptor::for_test(level, ox, oy);
        d.footprint_w = 300;
        d.footprint_h = 300;
        let (u, v) = d.level_to_patch(lx, ly);
        let (rx, ry) = d.patch_to_level(u, v);
        prop_assert!((rx - lx).abs() < 1e-6 && (ry - ly).abs() < 1e-6);
    }

    #[test]
    fn nms_equals_quadratic_reference(boxes in prop::collection::vec(
        (0u32..400, 0u32..400, 1u32..80, 1u32..80, 0u32..3, 0u32..20), 0..120), thr in 0.05f64..0.95) {
        let dets: Vec<Detection<f64>> = boxes
            .iter()
            .map(|&(x, y, w, h, c, s)| Detection::new(x as f64, y as f64, w as f64, h as f64, c, s as f64 / 20.0))
            .collect();
        prop_assert_eq!(nms(&dets, thr), reference_nms(&dets, thr));
    }

    #[test]
    fn components_match_union_find(w in 1u32..40, h in 1u32..40, bits in prop::collection::vec(any::<bool>(), 1600)) {
        let mask: Vec<u8> = bits[..(w * h) as usize].iter().map(|&b| u8::from(b)).collect();
        let got = connected_components(&mask, w, h);
        let want = union_find_components(&mask, w, h);
        let key = |c: &pyraflow::models::Component| (c.min_y, c.min_x, c.max_x, c.max_y, c.area);
        let mut g: Vec<_> = got.iter().map(key).collect();
        let mut e: Vec<_> = want.into_iter().collect();
        g.sort_unstable();
        e.sort_unstable();
        prop_assert_eq!(g, e);
    }

    #[test]
    fn mocks_are_deterministic_and_shaped(v in prop::collection::vec(0u8..=255, 48)) {
        let t = Tensor::<f32> { width: 4, height: 4, channels: 3, data: v.iter().map(|&b| b as f32 / 255.0).collect() };
        let seg = pyraflow::models::MockSegmenter::segment(&t);
        prop_assert_eq!((seg.width, seg.height, seg.data.len()), (4, 4, 16));
        prop_assert_eq!(&seg, &pyraflow::models::MockSegmenter::segment(&t));
        let c = pyraflow::models::MockClassifier::classify(&t);
        prop_assert!(c < 4);
        let boxes = pyraflow::models::MockDetector::detect(&t, 1);
        for b in &boxes {
            prop_assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 4.0 && b.y + b.h <= 4.0);
            prop_assert!(b.score > 0.0 && b.score <= 1.0);
        }
    }
}

/// Repeatedly picks the highest-scoring live box (ties: smaller x, then smaller y) and kills
/// every live box of its class overlapping it at or above the threshold.
fn reference_nms(dets: &[Detection<f64>], thr: f64) -> Vec<Detection<f64>> {
    let mut live: Vec<bool> = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !live[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (x, y) = (&dets[i], &dets[b]);
                    let better = x.score > y.score
                        || (x.score == y.score && (x.x < y.x || (x.x == y.x && x.y < y.y)));
                    Some(if better { i } else { b })
                }
            };
        }
        let Some(b) = best else { break };
        live[b] = false;
        out.push(dets[b]);
        for j in 0..dets.len() {
            if live[j] && dets[j].class_id == dets[b].class_id && iou(&dets[b], &dets[j]) >= thr {
                live[j] = false;
            }
        }
    }
    out
}

fn union_find_components(mask: &[u8], w: u32, h: u32) -> Vec<(u32, u32, u32, u32, u32)> {
    let n = mask.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let (w, h) = (w as usize, h as usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] == 0 {
                continue;
            }
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                if mask[j] != 0 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    let mut comps: std::collections::HashMap<usize, (u32, u32, u32, u32, u32)> = Default::default();
    for i in (0..n).filter(|&i| mask[i] != 0) {
        let r = find(&mut parent, i);
        let (x, y) = ((i % w) as u32, (i / w) as u32);
        let e = comps.entry(r).or_insert((y, x, x, y, 0));
        e.0 = e.0.min(y);
        e.1 = e.1.min(x);
        e.2 = e.2.max(x);
        e.3 = e.3.max(y);
        e.4 += 1;
    }
    comps.into_values().collect()
}
