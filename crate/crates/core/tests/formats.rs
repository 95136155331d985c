use std::collections::BTreeMap;

use proptest::prelude::*;
use pyraflow::export::{
    export_detections_csv, export_metaimage, import_detections_csv, import_metaimage, metaimage_header, DType,
    Raster, TensorContainer,
};
use pyraflow::orchestration::{parse_pipeline, PipelineSpec, StageKind, StageSpec};
use pyraflow::patchflow::Detection;
use pyraflow::pyramid::{create_pyramid, open_container, rebuild_levels, save_container, PyramidPolicy};

#[test]
fn metaimage_header_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.mhd");
    export_metaimage(&Raster { width: 4, height: 2, data: vec![0; 8] }, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "ObjectType = Image\nNDims = 2\nDimSize = 4 2\nElementType = MET_UCHAR\nElementDataFile = mask.raw\n"
    );
    assert_eq!(text, metaimage_header(4, 2, "mask.raw"));
    assert_eq!(std::fs::read(dir.path().join("mask.raw")).unwrap().len(), 8);
}

#[test]
fn empty_detection_csv_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    export_detections_csv::<f32>(&[], &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "x,y,w,h,class,score\n");
    assert!(import_detections_csv::<f32>(&path).unwrap().is_empty());
}

fn stage_strategy() -> impl Strategy<Value = (StageKind, BTreeMap<String, String>)> {
    let int = || (1u32..5000).prop_map(|v| v.to_string());
    let real = || (1u32..10_000).prop_map(|v| format!("{}.{}", v / 100, v % 100));
    let frac = || (0u32..=100).prop_map(|v| format!("0.{v:02}"));
    prop_oneof![
        (real(), 0u32..6, prop::option::of(prop::sample::select(vec!["distance", "otsu"])), prop::option::of(frac()))
            .prop_map(|(t, r, m, k)| {
                let mut a = BTreeMap::from([("threshold".to_string(), t), ("closing_radius".to_string(), r.to_string())]);
                if let Some(m) = m {
                    a.insert("method".into(), m.into());
                }
                if let Some(k) = k {
                    a.insert("keep_fraction".into(), k);
                }
                (StageKind::TissueSegmentation, a)
            }),
        (int(), real()).prop_map(|(p, m)| (
            StageKind::PatchGenerator,
            BTreeMap::from([("patch_size".into(), p), ("magnification".into(), m)])
        )),
        int().prop_map(|b| (StageKind::BatchGenerator, BTreeMap::from([("batch_size".into(), b)]))),
        "[a-z][a-z0-9_]{0,12}".prop_map(|m| (StageKind::NeuralNetwork, BTreeMap::from([("model".into(), m)]))),
        prop::sample::select(vec!["classification", "segmentation"])
            .prop_map(|k| (StageKind::Stitcher, BTreeMap::from([("kind".into(), k.to_string())]))),
        prop::option::of(frac()).prop_map(|f| (
            StageKind::Accumulator,
            f.map(|f| BTreeMap::from([("nms_iou".to_string(), f)])).unwrap_or_default()
        )),
        prop::sample::select(vec!["mhd", "csv", "tensor"])
            .prop_map(|f| (StageKind::Exporter, BTreeMap::from([("format".into(), f.to_string())]))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metaimage_round_trip((w, h, data) in (1u32..64, 1u32..64).prop_flat_map(|(w, h)| {
        (Just(w), Just(h), prop::collection::vec(any::<u8>(), (w * h) as usize))
    })) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.mhd");
        let raster = Raster { width: w, height: h, data };
        export_metaimage(&raster, &path).unwrap();
        prop_assert_eq!(import_metaimage(&path).unwrap(), raster);
    }

    #[test]
    fn csv_round_trip(boxes in prop::collection::vec((0u32..200_000, 0u32..200_000, 1u32..500, 1u32..500, 0u32..5, 0u32..=1_000_000), 0..40)) {
        let dets: Vec<Detection<f64>> = boxes
            .iter()
            .map(|&(x, y, w, h, c, s)| Detection::new(x as f64, y as f64, w as f64, h as f64, c, s as f64 / 1e6))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        export_detections_csv(&dets, &path).unwrap();
        let back = import_detections_csv::<f64>(&path).unwrap();
        prop_assert_eq!(back.len(), dets.len());
        for (a, b) in back.iter().zip(&dets) {
            prop_assert_eq!((a.x, a.y, a.w, a.h, a.class_id), (b.x, b.y, b.w, b.h, b.class_id));
            prop_assert!((a.score - b.score).abs() < 5e-7);
        }
    }

    #[test]
    fn tensor_container_round_trip(shape in prop::collection::vec(1u64..6, 0..4), seed in any::<u32>()) {
        let n: u64 = shape.iter().product();
        let f: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32) * 0.37 - 11.0).collect();
        let d: Vec<f64> = f.iter().map(|&v| f64::from(v) / 3.0).collect();
        let b: Vec<u8> = (0..n).map(|i| (i as u32 ^ seed) as u8).collect();
        let dir = tempfile::tempdir().unwrap();
        for (i, c) in [
            TensorContainer::from_scalars(shape.clone(), &f).unwrap(),
            TensorContainer::from_scalars(shape.clone(), &d).unwrap(),
            TensorContainer::from_u8(shape.clone(), &b).unwrap(),
        ].into_iter().enumerate() {
            let path = dir.path().join(format!("t{i}.ptns"));
            c.write(&path).unwrap();
            let back = TensorContainer::read(&path).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.encode().len(), 5 + 2 + 8 * shape.len() + n as usize * back.dtype.size());
        }
        let back = TensorContainer::decode(&TensorContainer::from_scalars(shape.clone(), &f).unwrap().encode()).unwrap();
        prop_assert_eq!(back.dtype, DType::F32);
        prop_assert_eq!(back.to_scalars::<f32>().unwrap(), f);
    }

    #[test]
    fn pipeline_print_parse_round_trip(stages in prop::collection::vec(stage_strategy(), 1..8)) {
        let spec = PipelineSpec {
            name: "p".into(),
            stages: stages
                .into_iter()
                .enumerate()
                .map(|(i, (kind, attributes))| StageSpec { name: format!("s{i}"), kind, attributes, line: 0 })
                .collect(),
        };
        let parsed = parse_pipeline("p", &spec.to_string()).unwrap();
        prop_assert_eq!(&parsed, &spec);
        prop_assert_eq!(parsed.to_string(), spec.to_string());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn container_round_trip(w in 1u32..700, h in 1u32..700, tile_pow in 5u32..9, channels in prop::sample::select(vec![1u8, 3]), seed in any::<u32>()) {
        let policy = PyramidPolicy { min_level_extent: 64, tile_size: 1 << tile_pow, ..Default::default() };
        let p = create_pyramid(w, h, channels, &policy).unwrap();
        let px: Vec<u8> = (0..w as usize * h as usize * channels as usize)
            .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as u8)
            .collect();
        p.write_region(0, 0, 0, w, h, &px).unwrap();
        rebuild_levels(&p, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_container(&p, dir.path().join("slide")).unwrap();
        let q = open_container(dir.path().join("slide")).unwrap();
        prop_assert_eq!(q.level_count(), p.level_count());
        prop_assert_eq!(q.tile_size(), p.tile_size());
        for l in 0..p.level_count() {
            prop_assert_eq!(q.read_level(l).unwrap(), p.read_level(l).unwrap());
        }
    }
}
