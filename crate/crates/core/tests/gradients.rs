//! Analytic gradients against central finite differences in 64-bit.

use icm3d::grid::{build_targets, CubeGrid, Paradigm, TargetSet};
use icm3d::loss::{
    dice, dice_grad, discriminative_grad, discriminative_loss, pcate_flatten, pcate_flatten_grad,
    pcate_project, pcate_project_grad, score_bce, score_bce_grad, semantic_ce, semantic_ce_grad,
    total_loss, total_loss_with_grads, DiscriminativeConfig, Distance, LossConfig, ProjectDice, SceneTargets,
};
use icm3d::model::{HeadKind, ModelConfig, ModelParams};
use icm3d::scene::{generate_scene, PointCloud, SceneSpec};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;

/// Norm-wise relative error between two gradient vectors.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(&x);
            x[i] = orig - H;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Central differences plus a flag for coordinates whose `[x-h, x+h]` window
/// straddles a ReLU or max-pool kink. On a smooth stretch the one-sided slope
/// gap scales linearly with the step; across a kink it does not.
fn numeric_with_kinks(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> (Vec<f64>, Vec<bool>) {
    let f0 = f(x);
    let mut x = x.to_vec();
    let mut grads = Vec::with_capacity(x.len());
    let mut kinks = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let mut at = |d: f64| {
            x[i] = orig + d;
            let v = f(&x);
            x[i] = orig;
            v
        };
        let (up, down, up2, down2) = (at(H), at(-H), at(H / 2.0), at(-H / 2.0));
        let gap = (up - f0) - (f0 - down);
        let gap2 = (up2 - f0) - (f0 - down2);
        grads.push((up - down) / (2.0 * H));
        kinks.push((gap2 - gap / 4.0).abs() > 1e-10);
    }
    (grads, kinks)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

fn small_scene(seed: u64, points: usize) -> PointCloud<f64> {
    generate_scene(&SceneSpec {
        instance_count_range: (2, 3),
        total_points: Some(points),
        min_centroid_separation: 0.1,
        rng_seed: seed,
        ..SceneSpec::default()
    })
    .unwrap()
}

fn targets(seed: u64, points: usize, paradigm: Paradigm) -> TargetSet {
    build_targets(&small_scene(seed, points), &CubeGrid::new(4).unwrap(), paradigm, 0.5).unwrap()
}

#[test]
fn dice_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(2..20);
        let f = Array1::from_shape_simple_fn(n, || rng.random_range(0.0..1.0));
        let g = Array1::from_shape_simple_fn(n, || if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let a = dice_grad(f.view(), g.view());
        let num = numeric(f.as_slice().unwrap(), |x| dice(Array1::from_vec(x.to_vec()).view(), g.view()));
        assert!(rel_err(a.as_slice().unwrap(), &num) <= TOL);
    }
}

#[test]
fn dice_gradient_vanishes_at_the_optimum() {
    let g = Array1::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
    let grad = dice_grad(g.view(), g.view());
    assert!(grad.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-6);
}

#[test]
fn pcate_flatten_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let t = targets(trial, 16, Paradigm::Flatten);
        let f = random_matrix(&mut rng, 16, 64, 0.01, 0.99);
        let a = pcate_flatten_grad(f.view(), &t).unwrap();
        let num = numeric(f.as_slice().unwrap(), |x| {
            pcate_flatten(Array2::from_shape_vec((16, 64), x.to_vec()).unwrap().view(), &t).unwrap()
        });
        assert!(rel_err(a.as_slice().unwrap(), &num) <= TOL, "trial {trial}");
    }
}

#[test]
fn pcate_project_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..100 {
        let t = targets(trial, 16, Paradigm::Project);
        let mode = if trial % 2 == 0 { ProjectDice::Matrix } else { ProjectDice::PositiveColumns };
        let fs: [Array2<f64>; 3] = std::array::from_fn(|_| random_matrix(&mut rng, 16, 4, 0.01, 0.99));
        let a = pcate_project_grad(fs.each_ref().map(|m| m.view()), &t, mode).unwrap();
        for axis in 0..3 {
            let num = numeric(fs[axis].as_slice().unwrap(), |x| {
                let mut g = fs.clone();
                g[axis] = Array2::from_shape_vec((16, 4), x.to_vec()).unwrap();
                pcate_project(g.each_ref().map(|m| m.view()), &t, mode).unwrap()
            });
            assert!(rel_err(a[axis].as_slice().unwrap(), &num) <= TOL, "trial {trial} axis {axis}");
        }
    }
}

#[test]
fn score_bce_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let s = Array1::from_shape_simple_fn(n, || rng.random_range(0.05..0.95));
        let t = Array1::from_shape_simple_fn(n, || if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let a = score_bce_grad(s.view(), t.view());
        let num = numeric(s.as_slice().unwrap(), |x| score_bce(Array1::from_vec(x.to_vec()).view(), t.view()));
        assert!(rel_err(a.as_slice().unwrap(), &num) <= TOL);
    }
}

#[test]
fn semantic_ce_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let c = rng.random_range(2..5);
        let logits = random_matrix(&mut rng, n, c, -3.0, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let include: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let a = semantic_ce_grad(logits.view(), &labels, &include).unwrap();
        let num = numeric(logits.as_slice().unwrap(), |x| {
            semantic_ce(Array2::from_shape_vec((n, c), x.to_vec()).unwrap().view(), &labels, &include).unwrap()
        });
        assert!(rel_err(a.as_slice().unwrap(), &num) <= TOL);
    }
}

#[test]
fn discriminative_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let n = rng.random_range(4..24);
        let dim = rng.random_range(2..5);
        let k = rng.random_range(1..4);
        let e = random_matrix(&mut rng, n, dim, -1.5, 1.5);
        let ids: Vec<i32> = (0..n).map(|i| if i < k { i as i32 } else { rng.random_range(-1..k as i32) }).collect();
        let cfg = DiscriminativeConfig {
            distance: if trial % 4 == 3 { Distance::L1 } else { Distance::L2 },
            ..DiscriminativeConfig::default()
        };
        let a = discriminative_grad(e.view(), &ids, &cfg).unwrap();
        let eval = |x: &[f64]| {
            discriminative_loss(Array2::from_shape_vec((n, dim), x.to_vec()).unwrap().view(), &ids, &cfg).unwrap()
        };
        let pull = numeric(e.as_slice().unwrap(), |x| eval(x).pull);
        let push = numeric(e.as_slice().unwrap(), |x| eval(x).push);
        assert!(rel_err(a.pull.as_slice().unwrap(), &pull) <= TOL, "pull trial {trial}");
        assert!(rel_err(a.push.as_slice().unwrap(), &push) <= TOL, "push trial {trial}");
    }
}

fn network_check(head: HeadKind, seed: u64) {
    let cloud = small_scene(seed, 32);
    let grid = CubeGrid::new(4).unwrap();
    let config = ModelConfig {
        head,
        n_s: 4,
        point_widths: vec![3, 8, 8],
        latent_width: 8,
        head_width: 6,
        context_k: 6,
        embedding_dim: 3,
        init_seed: seed,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::<f64>::init(&config).unwrap();
    // Zero biases put ReLU inputs exactly on the kink for dead inputs; move to a
    // generic point first.
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let t = head.paradigm().map(|p| build_targets(&cloud, &grid, p, 0.5).unwrap());
    let truth = SceneTargets {
        targets: t.as_ref(),
        semantic_labels: cloud.semantic_labels(),
        instance_ids: cloud.instance_ids(),
    };
    let loss_cfg = LossConfig::default();
    let out = params.forward(&cloud, &grid).unwrap();
    let (_, out_grads) = total_loss_with_grads(&out, &truth, &loss_cfg).unwrap();
    let grads = params.backward(&out, &out_grads).unwrap();
    assert!(grads.is_finite());

    let analytic: Vec<(String, Vec<f64>)> =
        grads.tensors().iter().map(|t| (t.name.clone(), t.data.to_vec())).collect();
    let mut kinked = 0;
    let mut total = 0;
    for (ti, (name, a)) in analytic.iter().enumerate() {
        let mut p = params.clone();
        let base = p.tensors()[ti].data.to_vec();
        let (num, kinks) = numeric_with_kinks(&base, |x| {
            p.tensors_mut()[ti].copy_from_slice(x);
            let out = p.forward_inference(&cloud, &grid).unwrap();
            total_loss(&out, &truth, &loss_cfg).unwrap().total
        });
        let keep = |v: &[f64]| -> Vec<f64> { v.iter().zip(&kinks).filter(|(_, &k)| !k).map(|(x, _)| *x).collect() };
        kinked += kinks.iter().filter(|&&k| k).count();
        total += kinks.len();
        let err = rel_err(&keep(a), &keep(&num));
        assert!(err <= TOL, "{head:?} seed {seed} tensor {name}: relative error {err:e}");
    }
    assert!(kinked * 10 <= total, "{head:?} seed {seed}: {kinked} of {total} coordinates straddle a kink");
}

#[test]
fn network_backward_flatten() {
    for seed in 0..4 {
        network_check(HeadKind::Flatten, seed);
    }
}

#[test]
fn network_backward_project() {
    for seed in 0..4 {
        network_check(HeadKind::Project, seed);
    }
}

#[test]
fn network_backward_discriminative() {
    for seed in 0..4 {
        network_check(HeadKind::Discriminative, seed);
    }
}

#[test]
fn score_gradient_reaches_only_selected_points() {
    use icm3d::model::{cube_neighbors, OutputGrads};
    let cloud = small_scene(9, 40);
    let grid = CubeGrid::new(2).unwrap();
    let config = ModelConfig {
        n_s: 2,
        point_widths: vec![3, 4],
        latent_width: 4,
        head_width: 4,
        context_k: 2,
        ..ModelConfig::default()
    };
    let params = ModelParams::<f64>::init(&config).unwrap();
    let out = params.forward(&cloud, &grid).unwrap();
    let mut g = OutputGrads::zeros_like(&out);
    g.cube_scores = Some(Array1::ones(8));
    let selected: std::collections::BTreeSet<usize> =
        cube_neighbors(&cloud, &grid, 2).unwrap().indices.into_iter().collect();
    assert!(selected.len() < cloud.len());
    let d = params.feature_gradient(&out, &g).unwrap();
    for (i, row) in d.outer_iter().enumerate() {
        if !selected.contains(&i) {
            assert!(row.iter().all(|&v| v == 0.0), "point {i} is not selected but has gradient");
        }
    }
    assert!(d.iter().any(|&v| v != 0.0));
}
