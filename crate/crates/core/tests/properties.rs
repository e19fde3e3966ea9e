use icm3d::eval::{ap_thresholds, average_precision, coverage_metrics, distance_overlap, prec_rec, GroundTruth};
use icm3d::infer::{decode, mask_nms, InferConfig, InstancePrediction};
use icm3d::scene::canonicalize;
use icm3d::{generate_scene, CubeGrid, HeadKind, ModelConfig, ModelParams, SceneSpec};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(head: HeadKind) -> ModelConfig {
    ModelConfig { head, n_s: 4, point_widths: vec![3, 12, 12], latent_width: 12, head_width: 8, context_k: 6, init_seed: 3, ..ModelConfig::default() }
}

#[test]
fn forward_is_permutation_equivariant() {
    let spec = SceneSpec { total_points: Some(90), rng_seed: 2, ..SceneSpec::default() };
    let cloud = generate_scene::<f64>(&spec).unwrap();
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let shuffled = cloud.permuted(&order).unwrap();
    let grid = CubeGrid::new(4).unwrap();
    for head in [HeadKind::Flatten, HeadKind::Project] {
        let p = ModelParams::<f64>::init(&small_model(head)).unwrap();
        let a = p.forward_inference(&cloud, &grid).unwrap();
        let b = p.forward_inference(&shuffled, &grid).unwrap();
        let (ea, eb) = (a.category.point_embeddings(), b.category.point_embeddings());
        for (new, &old) in order.iter().enumerate() {
            for (x, y) in ea.row(old).iter().zip(eb.row(new)) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.semantic_logits.row(old).iter().zip(b.semantic_logits.row(new)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let (sa, sb) = (a.cube_scores.unwrap(), b.cube_scores.unwrap());
        assert!(sa.iter().zip(sb.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn decoding_is_permutation_equivariant() {
    let spec = SceneSpec { total_points: Some(80), rng_seed: 6, ..SceneSpec::default() };
    let cloud = generate_scene::<f64>(&spec).unwrap();
    let n = cloud.len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = Array2::from_shape_fn((n, 64), |(i, j)| if (i * 7 + j * 3) % 5 < 2 { 0.9 } else { 0.1 });
    let scores = ndarray::Array1::from_shape_fn(64, |j| (j % 10) as f64 / 10.0 + 0.001 * j as f64);
    let sem = Array2::from_shape_fn((n, 2), |(i, c)| ((i + c) % 2) as f64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let fp = Array2::from_shape_fn((n, 64), |(i, j)| f[[order[i], j]]);
    let semp = Array2::from_shape_fn((n, 2), |(i, c)| sem[[order[i], c]]);
    let cfg = InferConfig::default();
    let a = icm3d::infer::decode_flatten(f.view(), scores.view(), sem.view(), &cfg).unwrap();
    let b = icm3d::infer::decode_flatten(fp.view(), scores.view(), semp.view(), &cfg).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        let mut mapped: Vec<usize> = y.points.iter().map(|&i| order[i]).collect();
        mapped.sort_unstable();
        assert_eq!(mapped, x.points);
        assert_eq!((x.score, x.cube_index, x.semantic_class), (y.score, y.cube_index, y.semantic_class));
    }
}

#[test]
fn untrained_embedding_decoding_is_defined() {
    let spec = SceneSpec { total_points: Some(50), ..SceneSpec::default() };
    let cloud = generate_scene::<f64>(&spec).unwrap();
    let p = ModelParams::<f64>::init(&small_model(HeadKind::Discriminative)).unwrap();
    let out = p.forward_inference(&cloud, &CubeGrid::new(4).unwrap()).unwrap();
    let preds = decode(&out, &InferConfig::default()).unwrap();
    let covered: usize = preds.iter().map(|p| p.points.len()).sum();
    assert_eq!(covered, cloud.len());
}

fn masks_strategy() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|m| {
        (
            prop::collection::vec(prop::collection::btree_set(0usize..12, 1..8), m),
            prop::collection::vec(0u32..1000, m),
        )
            .prop_map(|(sets, s)| {
                // Distinct scores make the visiting order unique.
                let scores = s.iter().enumerate().map(|(k, &v)| v as f64 + k as f64 * 1e-6).collect();
                (sets.into_iter().map(|s| s.into_iter().collect()).collect(), scores)
            })
    })
}

fn scene_strategy() -> impl Strategy<Value = (Vec<i32>, Vec<usize>, Vec<InstancePrediction>)> {
    (prop::collection::vec(-1i32..4, 4..12), prop::collection::vec(0usize..2, 12)).prop_flat_map(|(ids, sem)| {
        let n = ids.len();
        let preds = prop::collection::vec((prop::collection::btree_set(0..n, 1..=n), 0u32..20, 0usize..2), 0..6)
            .prop_map(|v| {
                v.into_iter()
                    .map(|(pts, s, c)| InstancePrediction {
                        points: pts.into_iter().collect(),
                        score: s as f64 / 20.0,
                        cube_index: None,
                        semantic_class: c,
                    })
                    .collect::<Vec<_>>()
            });
        (Just(ids), Just(sem[..n].to_vec()), preds)
    })
}

proptest! {
    #[test]
    fn canonicalize_is_idempotent(ids in prop::collection::vec(-1i32..50, 0..40)) {
        let once = canonicalize(&ids);
        prop_assert_eq!(canonicalize(&once), once.clone());
        prop_assert_eq!(once.iter().filter(|&&v| v < 0).count(), ids.iter().filter(|&&v| v < 0).count());
    }

    #[test]
    fn nms_ignores_input_order((masks, scores) in masks_strategy(), seed in 0u64..1000, iou in 0.0f64..1.0) {
        let kept = |m: &[Vec<usize>], s: &[f64]| {
            let mut v: Vec<Vec<usize>> = mask_nms(m, s, iou).into_iter().map(|k| m[k].clone()).collect();
            v.sort();
            v
        };
        let mut order: Vec<usize> = (0..masks.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let m2: Vec<Vec<usize>> = order.iter().map(|&o| masks[o].clone()).collect();
        let s2: Vec<f64> = order.iter().map(|&o| scores[o]).collect();
        prop_assert_eq!(kept(&masks, &scores), kept(&m2, &s2));
    }

    #[test]
    fn metrics_stay_in_unit_range((ids, sem, preds) in scene_strategy()) {
        let gt = GroundTruth::new(&ids, &sem).unwrap();
        prop_assume!(!gt.instances.is_empty());
        let (c, w) = coverage_metrics(&gt, &preds).unwrap();
        let pr = prec_rec(&gt, &preds, 0.5).unwrap();
        let (ap, _) = average_precision(&[(&gt, &preds[..])], &ap_thresholds()).unwrap();
        for v in [c, w, pr.precision, pr.recall].iter().chain(&ap) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        for k in 1..ap.len() {
            prop_assert!(ap[k] <= ap[k - 1] + 1e-12, "ap {:?}", ap);
        }
    }

    #[test]
    fn distance_overlap_ignores_labels_and_order(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 6..20),
        seed in 0u64..100,
    ) {
        let n = rows.len();
        let ids: Vec<i32> = (0..n).map(|i| (i % 3) as i32).collect();
        let e = Array2::from_shape_fn((n, 3), |(i, j)| rows[i][j]);
        let base = distance_overlap::<f64>(&[(e.view(), &ids)], 100).unwrap();
        let relabeled: Vec<i32> = ids.iter().map(|&i| 2 - i).collect();
        let r = distance_overlap::<f64>(&[(e.view(), &relabeled)], 100).unwrap();
        prop_assert_eq!(&r, &base);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let ep = Array2::from_shape_fn((n, 3), |(i, j)| rows[order[i]][j]);
        let idp: Vec<i32> = order.iter().map(|&o| ids[o]).collect();
        let p = distance_overlap::<f64>(&[(ep.view(), &idp)], 100).unwrap();
        prop_assert_eq!(p.intra.iter().sum::<u64>(), base.intra.iter().sum::<u64>());
        prop_assert!((p.overlap_probability - base.overlap_probability).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&base.overlap_probability));
    }
}
