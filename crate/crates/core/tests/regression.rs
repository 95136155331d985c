//! Seed-42 reference values, measured once from a reference run and frozen.

use std::sync::Arc;

use pyraflow::bench::{zoom_pan_trace, MemoryConfig};
use pyraflow::export::{class_histogram, heatmap_rasters, slide_level_call};
use pyraflow::models::ModelRegistry;
use pyraflow::orchestration::{execute_pipeline, parse_pipeline};
use pyraflow::patchflow::ResultLayer;
use pyraflow::pyramid::{generate_synthetic_slide, virtual_synthetic_slide, SyntheticSpec};
use pyraflow::tilecache::{tiles_for_viewport, CacheBudget, TileCache};
use pyraflow::tissue::{segment_tissue, TissueParams};

const HITS_MISSES: (u64, u64) = (31_708, 823);
const HISTOGRAM: [u64; 4] = [0, 0, 5, 59];
const DETECTIONS: usize = 632;
const TISSUE_PIXELS: usize = 4_019_260;

#[test]
fn pan_and_zoom_hit_ratio() {
    let slide = Arc::new(virtual_synthetic_slide(42, 30_000, 24_000, &SyntheticSpec::default()).unwrap());
    let cache = TileCache::new(slide, CacheBudget { max_bytes: 16 << 20 }).unwrap();
    let cfg = MemoryConfig { slide_width: 30_000, slide_height: 24_000, out_width: 1024, out_height: 768, ..Default::default() };
    for v in zoom_pan_trace(&cfg, 300) {
        for key in tiles_for_viewport(cache.pyramid(), &v) {
            cache.get_tile(key).unwrap();
        }
    }
    let s = cache.stats();
    assert_eq!((s.hits, s.misses), HITS_MISSES);
    let ratio = s.hits as f64 / (s.hits + s.misses) as f64;
    assert!((ratio - 0.974701).abs() < 1e-6);
}

#[test]
fn classification_histogram() {
    let slide = Arc::new(generate_synthetic_slide(42, 4096, 4096, &SyntheticSpec::default()).unwrap());
    let spec = parse_pipeline(
        "c",
        "stage gen patch_generator\n  attr patch_size 256\n  attr magnification 20\nstage net neural_network\n  attr model mock_classifier_v1\nstage out stitcher\n  attr kind classification\n",
    )
    .unwrap();
    let (layer, _) = execute_pipeline(&spec, slide, &ModelRegistry::<f32>::with_mocks(), &()).unwrap();
    let ResultLayer::Heatmap(h) = layer.as_ref() else { panic!() };
    let snap = h.snapshot();
    let hist = class_histogram(&snap);
    // independent recount from the exported class raster
    let (classes, _) = heatmap_rasters(&snap);
    let mut recount = [0u64; 4];
    for &c in &classes.data {
        if c != 255 {
            recount[c as usize] += 1;
        }
    }
    assert_eq!(hist, recount.to_vec());
    assert_eq!(hist, HISTOGRAM.to_vec());
    assert_eq!(hist.iter().sum::<u64>() as usize, snap.processed_cells());
    assert_eq!(slide_level_call(&hist, &[]), Some(3));
    assert_eq!(slide_level_call(&hist, &[3]), Some(2));
}

#[test]
fn detection_count() {
    let slide = Arc::new(generate_synthetic_slide(42, 2048, 2048, &SyntheticSpec::default()).unwrap());
    let spec = parse_pipeline(
        "d",
        "stage gen patch_generator\n  attr patch_size 256\n  attr magnification 40\nstage net neural_network\n  attr model mock_detector_v1\nstage acc accumulator\n",
    )
    .unwrap();
    let (layer, _) = execute_pipeline(&spec, slide, &ModelRegistry::<f32>::with_mocks(), &()).unwrap();
    let ResultLayer::Detections(d) = layer.as_ref() else { panic!() };
    let n = d.finish().len();
    assert_eq!(n, DETECTIONS);
}

#[test]
fn tissue_area() {
    let slide = generate_synthetic_slide(42, 4096, 4096, &SyntheticSpec::default()).unwrap();
    let mask = segment_tissue(&slide, &TissueParams::default()).unwrap();
    assert_eq!(mask.tissue_pixels(), TISSUE_PIXELS);
}
