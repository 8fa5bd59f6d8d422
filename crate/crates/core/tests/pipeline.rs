use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segpaint::depthlayer::{depth_accuracy, gt_pairs, infer_occlusions, layer_order, ObjectMasks};
use segpaint::evalsuite::{eval_segmentation, evaluate_model, Truth};
use segpaint::inference::Predictor;
use segpaint::netarch::NetConfig;
use segpaint::scenegen::{
    build_dataset, derive_masks, generate_scene, load_sample, DatasetConfig, DatasetManifest,
    SceneConfig, Split,
};
use segpaint::trainer::{load_split, train, TrainConfig, TrainOptions};

fn tiny_scene() -> SceneConfig {
    SceneConfig {
        canvas: [48, 48],
        sprite_count: [2, 4],
        scale: [8.0, 14.0],
        min_area: 30,
        ..SceneConfig::default()
    }
}

fn tiny_net() -> NetConfig {
    NetConfig {
        input_size: 48,
        roi_grid: 4,
        mask_size: 8,
        paint_size: 16,
        backbone_width: 4,
        backbone_depth: 1,
        generator_width: 4,
        generator_depth: 2,
        discriminator_width: 4,
        discriminator_depth: 3,
        ..NetConfig::default()
    }
}

#[test]
fn dataset_train_and_evaluate_through_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        scene: tiny_scene(),
        train_scenes: 3,
        test_scenes: 2,
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, dir.path()).unwrap();
    let manifest = DatasetManifest::open(dir.path()).unwrap();
    let test = load_split(&manifest, Split::Test).unwrap();
    assert!(!test.is_empty());

    let tc = TrainConfig {
        phase1_steps: 2,
        phase2_steps: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = train(&tc, &tiny_net(), &manifest, TrainOptions::default()).unwrap();
    assert_eq!(out.checkpoint.step, 3);
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().all(|l| l.losses.is_finite()));

    let net = tiny_net();
    let pr = Predictor::new(&out.checkpoint.params, &net, 0.5);
    let ids: Vec<usize> = manifest.sample_indices(Split::Test);
    let ev = evaluate_model(&pr, &test, &ids).unwrap();
    assert_eq!(ev.segmentation.count, test.len());
    for o in &ev.segmentation.objects {
        assert!((0.0..=1.0).contains(&o.union));
        assert!((0.0..=1.0).contains(&o.visible));
    }
    assert!(ev.painting.l1.is_finite() && ev.painting.l1 >= 0.0);

    // ground truth scores perfectly through the same report path
    let sf: Vec<_> = test.iter().map(|s| s.sf.clone()).collect();
    let truths: Vec<Truth> = test.iter().map(Truth::from).collect();
    let perfect = eval_segmentation(&sf, &truths, 0.5).unwrap();
    assert_eq!(perfect.iou_union, 1.0);
    assert_eq!(perfect.iou_visible, 1.0);
}

#[test]
fn stored_samples_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        scene: tiny_scene(),
        train_scenes: 2,
        test_scenes: 1,
        ..DatasetConfig::default()
    };
    let manifest = build_dataset(&cfg, dir.path()).unwrap();
    for scene in 0..manifest.scenes.len() {
        let fresh = derive_masks(&manifest.regenerate_scene(scene).unwrap());
        let stored: Vec<_> = manifest
            .samples_of_scene(scene)
            .into_iter()
            .map(|i| load_sample(&manifest, i).unwrap())
            .collect();
        assert_eq!(fresh, stored);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ground_truth_depth_is_perfect_and_layers_respect_edges(seed in 0u64..1_000_000) {
        let scene = generate_scene(&tiny_scene(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let samples = derive_masks(&scene);
        let objs: Vec<ObjectMasks> = samples
            .iter()
            .map(|s| ObjectMasks { id: s.object_id, sv: &s.sv, sf: &s.sf })
            .collect();
        let pred = infer_occlusions(0, &objs, 0.05).unwrap();
        let gt = gt_pairs(0, &samples, 0.05).unwrap();
        for e in &gt.pairs {
            prop_assert!(pred.has_edge(e.occluder, e.occludee));
        }
        let report = depth_accuracy(std::slice::from_ref(&pred), &[gt]).unwrap();
        prop_assert_eq!(report.accuracy, 1.0);

        // sprites are layered front to back, so ground-truth occlusion is acyclic
        let layering = layer_order(&pred);
        prop_assert!(layering.dropped.is_empty());
        let layer_of = |id: usize| layering.layers.iter().position(|l| l.contains(&id)).unwrap();
        for e in &pred.pairs {
            prop_assert!(layer_of(e.occluder) < layer_of(e.occludee));
        }
        let placed: usize = layering.layers.iter().map(Vec::len).sum();
        prop_assert_eq!(placed, samples.len());
    }

    #[test]
    fn every_sample_satisfies_mask_invariants(seed in 0u64..1_000_000) {
        let scene = generate_scene(&tiny_scene(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for s in derive_masks(&scene) {
            prop_assert!(s.check_invariants().is_ok());
            prop_assert!(s.bbox.contains_box(&s.sv.bbox().unwrap()));
        }
    }
}
