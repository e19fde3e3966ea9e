use icm3d::alloc::{measure_peak, CountingAllocator};
use icm3d::infer::{decode_flatten, decode_project, InferConfig};
use ndarray::{Array1, Array2};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[test]
fn project_decoding_never_builds_a_dense_cube_matrix() {
    let (n, n_s) = (2048, 20);
    let cubes = n_s * n_s * n_s;
    let axis: [Array2<f32>; 3] = std::array::from_fn(|a| {
        Array2::from_shape_fn((n, n_s), |(i, k)| if (i + a) % n_s == k { 0.9 } else { 0.1 })
    });
    // Point i lies in cube (i, i + 1, i + 2) mod n_s; score exactly those cubes.
    let occupied = |j: usize| {
        let (x, y, z) = (j / (n_s * n_s), j / n_s % n_s, j % n_s);
        y == (x + 1) % n_s && z == (x + 2) % n_s
    };
    let scores = Array1::from_shape_fn(cubes, |j| if occupied(j) { 0.8 } else { 0.0 });
    let sem = Array2::<f32>::zeros((n, 2));
    let cfg = InferConfig::default();
    let (preds, peak) =
        measure_peak(|| decode_project(axis.each_ref().map(|m| m.view()), scores.view(), sem.view(), &cfg).unwrap());
    let peak = peak.expect("counting allocator installed");
    let dense = n * cubes * std::mem::size_of::<f32>();
    assert!(peak < dense / 100, "peak {peak} bytes against dense {dense}");
    assert_eq!(preds.len(), n_s);
}

#[test]
fn tracker_sees_flatten_inputs_as_larger() {
    let (n, n_s) = (512, 8);
    let cubes = n_s * n_s * n_s;
    let (f, peak_f) = measure_peak(|| Array2::<f32>::from_elem((n, cubes), 0.1));
    let (p, peak_p) = measure_peak(|| Array2::<f32>::from_elem((n, 3 * n_s), 0.1));
    assert!(peak_p.unwrap() < peak_f.unwrap());
    let scores = Array1::<f32>::zeros(cubes);
    let sem = Array2::<f32>::zeros((n, 2));
    assert!(decode_flatten(f.view(), scores.view(), sem.view(), &InferConfig::default()).unwrap().is_empty());
    drop(p);
}
