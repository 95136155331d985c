use std::path::PathBuf;
use std::sync::Arc;

use pyraflow::export::{import_metaimage, TensorContainer};
use pyraflow::models::ModelRegistry;
use pyraflow::orchestration::{
    execute_pipeline, parse_pipeline, run_for_project, PipelineError, Project, ProjectOptions, SlideStatus,
};
use pyraflow::patchflow::{plan_patches, PipelineRun, ResultLayer, RunConfig, RunStatus};
use pyraflow::pyramid::{generate_synthetic_slide, save_container, ImagePyramid, SyntheticSpec};

const CLASSIFY: &str = "\
stage gen patch_generator
  attr patch_size 256
  attr magnification 20.0
stage net neural_network
  attr model mock_classifier_v1
stage out stitcher
  attr kind classification
stage save exporter
  attr format mhd
stage tensor exporter
  attr format tensor
";

fn slide(seed: u64, spec: &SyntheticSpec) -> Arc<ImagePyramid> {
    Arc::new(generate_synthetic_slide(seed, 1500, 1100, spec).unwrap())
}

#[test]
fn execution_delegates_to_the_pipeline() {
    let registry = ModelRegistry::<f32>::with_mocks();
    let s = slide(42, &SyntheticSpec::default());
    let spec = parse_pipeline("classify", CLASSIFY).unwrap();
    let (layer, summary) = execute_pipeline(&spec, s.clone(), &registry, &()).unwrap();
    assert_eq!(summary.status, RunStatus::Finished);

    let plan = plan_patches(&s, None, 256, 20.0, 0.1).unwrap();
    let direct = PipelineRun::new(s, plan, registry.get("mock_classifier_v1").unwrap(), RunConfig::default()).unwrap();
    direct.run(&()).unwrap();
    let (ResultLayer::Heatmap(a), ResultLayer::Heatmap(b)) = (layer.as_ref(), direct.layer().as_ref()) else {
        panic!("heatmaps expected")
    };
    assert_eq!(a.snapshot(), b.snapshot());
}

#[test]
fn white_slide_with_tissue_stage_yields_empty_success() {
    let registry = ModelRegistry::<f32>::with_mocks();
    let white = slide(1, &SyntheticSpec { blobs: 0, ..Default::default() });
    let text = format!("stage tissue tissue_segmentation\n  attr threshold 30.0\n{CLASSIFY}");
    let (layer, summary) = execute_pipeline(&parse_pipeline("t", &text).unwrap(), white, &registry, &()).unwrap();
    assert_eq!((summary.status, summary.total), (RunStatus::Finished, 0));
    let ResultLayer::Heatmap(h) = layer.as_ref() else { panic!() };
    assert_eq!(h.snapshot().processed_cells(), 0);
}

#[test]
fn absent_model_fails_before_running() {
    let registry = ModelRegistry::<f32>::with_mocks();
    let spec = parse_pipeline("x", &CLASSIFY.replace("mock_classifier_v1", "missing_v9")).unwrap();
    let err = execute_pipeline(&spec, slide(42, &SyntheticSpec::default()), &registry, &()).unwrap_err();
    assert!(matches!(err, PipelineError::Invalid { line: 4, .. }), "{err}");
}

fn project_with(slides: &[&str]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("proj");
    for (i, name) in slides.iter().enumerate() {
        let path = root.join("slides").join(name);
        if name.starts_with("corrupt") {
            std::fs::create_dir_all(&path).unwrap();
            std::fs::write(path.join("manifest.json"), b"{ not json").unwrap();
        } else {
            save_container(&slide(40 + i as u64, &SyntheticSpec::default()), &path).unwrap();
        }
    }
    let project = Project {
        name: "p".into(),
        slides: slides.iter().map(|n| PathBuf::from("slides").join(n)).collect(),
        history: Vec::new(),
    };
    project.save(&root).unwrap();
    (dir, root)
}

#[test]
fn project_runs_each_slide_in_order() {
    let registry = ModelRegistry::<f32>::with_mocks();
    let spec = parse_pipeline("classify", CLASSIFY).unwrap();
    let (_dir, root) = project_with(&["a", "corrupt_b", "c"]);
    let m = run_for_project(&root, &spec, &registry, ProjectOptions::default()).unwrap();
    assert_eq!((m.successes(), m.failures()), (2, 1));
    let stems: Vec<_> = m.slides.iter().map(|s| s.stem.as_str()).collect();
    assert_eq!(stems, ["a", "corrupt_b", "c"]);
    assert_eq!(m.slides[1].status, SlideStatus::Failed);
    assert!(m.slides[1].error.as_deref().unwrap().contains("manifest"));
    for stem in ["a", "c"] {
        let dir = root.join("results").join(stem);
        let classes = import_metaimage(dir.join("heatmap_classes.mhd")).unwrap();
        let tensor = TensorContainer::read(dir.join("heatmap.ptns")).unwrap();
        assert_eq!(tensor.shape, vec![u64::from(classes.height), u64::from(classes.width), 4]);
        assert!(dir.join("stats.json").exists());
    }
    assert!(!root.join("results").join("corrupt_b").join("heatmap_classes.mhd").exists());
    let saved: pyraflow::orchestration::ResultManifest =
        serde_json::from_slice(&std::fs::read(root.join("results/manifest.json")).unwrap()).unwrap();
    assert_eq!(saved, m);
    assert_eq!(Project::load(&root).unwrap().history, vec!["classify".to_string()]);
}

#[test]
fn resume_skips_finished_slides() {
    let registry = ModelRegistry::<f32>::with_mocks();
    let spec = parse_pipeline("classify", CLASSIFY).unwrap();
    let (_dir, root) = project_with(&["a", "b"]);
    run_for_project(&root, &spec, &registry, ProjectOptions::default()).unwrap();
    let marker = root.join("results/a/heatmap_classes.raw");
    std::fs::write(&marker, b"sentinel").unwrap();
    let m = run_for_project(&root, &spec, &registry, ProjectOptions { resume: true }).unwrap();
    assert_eq!(m.successes(), 2);
    assert_eq!(std::fs::read(&marker).unwrap(), b"sentinel");
    run_for_project(&root, &spec, &registry, ProjectOptions::default()).unwrap();
    assert_ne!(std::fs::read(&marker).unwrap(), b"sentinel");
}

#[test]
fn empty_project_gives_empty_manifest() {
    let registry = ModelRegistry::<f32>::with_mocks();
    let (_dir, root) = project_with(&[]);
    let m = run_for_project(&root, &parse_pipeline("c", CLASSIFY).unwrap(), &registry, ProjectOptions::default()).unwrap();
    assert!(m.slides.is_empty());
    assert!(root.join("results/manifest.json").exists());
}

#[test]
fn missing_project_root_is_fatal() {
    let registry = ModelRegistry::<f32>::with_mocks();
    let r = run_for_project(
        std::path::Path::new("/nonexistent/project"),
        &parse_pipeline("c", CLASSIFY).unwrap(),
        &registry,
        ProjectOptions::default(),
    );
    assert!(matches!(r, Err(PipelineError::Project { .. })));
}

#[test]
fn detection_and_segmentation_exports() {
    let registry = ModelRegistry::<f32>::with_mocks();
    let dir = tempfile::tempdir().unwrap();
    let s = slide(42, &SyntheticSpec::default());
    let det = parse_pipeline(
        "det",
        "stage gen patch_generator\n  attr patch_size 256\n  attr magnification 40\nstage net neural_network\n  attr model mock_detector_v1\nstage acc accumulator\n  attr nms_iou 0.3\nstage csv exporter\n  attr format csv\n",
    )
    .unwrap();
    let compiled = det.compile(&registry).unwrap();
    assert_eq!(compiled.nms_iou, 0.3);
    let (layer, _) = execute_pipeline(&det, s.clone(), &registry, &()).unwrap();
    let files = pyraflow::orchestration::write_results(&layer, &compiled.exports, dir.path()).unwrap();
    assert_eq!(files, vec!["detections.csv".to_string()]);
    let ResultLayer::Detections(d) = layer.as_ref() else { panic!() };
    let back = pyraflow::export::import_detections_csv::<f32>(dir.path().join("detections.csv")).unwrap();
    assert_eq!(back.len(), d.finish().len());

    let seg = parse_pipeline(
        "seg",
        "stage gen patch_generator\n  attr patch_size 256\n  attr magnification 40\nstage net neural_network\n  attr model mock_segmenter_v1\nstage out stitcher\n  attr kind segmentation\n",
    )
    .unwrap();
    let (layer, _) = execute_pipeline(&seg, s, &registry, &()).unwrap();
    pyraflow::orchestration::write_results(&layer, &[], dir.path()).unwrap();
    let ResultLayer::Segmentation(sl) = layer.as_ref() else { panic!() };
    let raster = import_metaimage(dir.path().join("segmentation.mhd")).unwrap();
    assert_eq!(raster.data, sl.pyramid().read_level(0).unwrap());
}
