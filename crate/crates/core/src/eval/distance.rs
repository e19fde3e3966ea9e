use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::CubeGrid;
use crate::model::ModelParams;
use crate::scalar::Real;
use crate::scene::PointCloud;

/// Histograms of pairwise embedding distances within and across instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceOverlapReport {
    /// Upper edge of the shared range; the lower edge is 0.
    pub max_distance: f64,
    pub intra: Vec<u64>,
    pub inter: Vec<u64>,
    /// Sum over bins of the smaller normalized count.
    pub overlap_probability: f64,
}

impl DistanceOverlapReport {
    pub fn bins(&self) -> usize {
        self.intra.len()
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let b = self.bins();
        (0..=b).map(|k| self.max_distance * k as f64 / b as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let edges = self.bin_edges();
        let mut out = String::from("bin_lo,bin_hi,intra,inter\n");
        for k in 0..self.bins() {
            out.push_str(&format!("{},{},{},{}\n", edges[k], edges[k + 1], self.intra[k], self.inter[k]));
        }
        out
    }
}

/// `k` distinct indices out of `n`, sorted, from a seeded stream. All of them when `k >= n`.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = index::sample(&mut rng, n, k).into_vec();
    v.sort_unstable();
    v
}

fn pair_distances<T: Real>(e: ArrayView2<T>, ids: &[i32], intra: &mut Vec<f64>, inter: &mut Vec<f64>) {
    let keep: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] >= 0).collect();
    let e = Array2::from_shape_fn((keep.len(), e.ncols()), |(r, c)| e[[keep[r], c]].to_f64_lossy());
    let gram = e.dot(&e.t());
    for a in 0..keep.len() {
        for b in a + 1..keep.len() {
            let norms = gram[[a, a]] + gram[[b, b]];
            let d2 = norms - 2.0 * gram[[a, b]];
            // Cancellation noise on coincident rows.
            let d = if d2 <= 1e-12 * norms { 0.0 } else { d2.sqrt() };
            if ids[keep[a]] == ids[keep[b]] {
                intra.push(d);
            } else {
                inter.push(d);
            }
        }
    }
}

/// Pools intra- and inter-instance distance pairs of every scene (points with
/// id < 0 are skipped) into `bins` shared bins over `[0, max distance]`.
pub fn distance_overlap<T: Real>(scenes: &[(ArrayView2<T>, &[i32])], bins: usize) -> Result<DistanceOverlapReport> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for (e, ids) in scenes {
        if e.nrows() != ids.len() {
            return Err(Error::Config(format!("{} embeddings for {} instance ids", e.nrows(), ids.len())));
        }
        pair_distances(*e, ids, &mut intra, &mut inter);
    }
    if intra.is_empty() || inter.is_empty() {
        return Err(Error::Empty("distance overlap needs two instances and an instance with two points".into()));
    }
    let max_distance = intra.iter().chain(&inter).copied().fold(0.0, f64::max);
    let bin_of = |d: f64| {
        if max_distance == 0.0 {
            0
        } else {
            ((d / max_distance * bins as f64) as usize).min(bins - 1)
        }
    };
    let mut hi = vec![0u64; bins];
    let mut he = vec![0u64; bins];
    for &d in &intra {
        hi[bin_of(d)] += 1;
    }
    for &d in &inter {
        he[bin_of(d)] += 1;
    }
    let (ni, ne) = (intra.len() as f64, inter.len() as f64);
    let overlap_probability = hi.iter().zip(&he).map(|(&a, &b)| (a as f64 / ni).min(b as f64 / ne)).sum();
    Ok(DistanceOverlapReport { max_distance, intra: hi, inter: he, overlap_probability })
}

/// Distance overlap of a model's per-point category vectors. Each scene
/// contributes `sample_points` points drawn with seed `seed + scene index`.
pub fn model_distance_overlap<T: Real>(
    params: &ModelParams<T>,
    clouds: &[PointCloud<T>],
    sample_points: usize,
    seed: u64,
    bins: usize,
) -> Result<DistanceOverlapReport> {
    let grid = CubeGrid::new(params.config.n_s)?;
    let mut samples = Vec::with_capacity(clouds.len());
    for (k, cloud) in clouds.iter().enumerate() {
        let e = params.forward_inference(cloud, &grid)?.category.point_embeddings();
        let keep = sample_indices(cloud.len(), sample_points, seed.wrapping_add(k as u64));
        let rows = e.select(ndarray::Axis(0), &keep);
        let ids: Vec<i32> = keep.iter().map(|&i| cloud.instance_ids()[i]).collect();
        samples.push((rows, ids));
    }
    let views: Vec<(ArrayView2<T>, &[i32])> = samples.iter().map(|(e, ids)| (e.view(), ids.as_slice())).collect();
    distance_overlap(&views, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn orthogonal_instances_do_not_overlap() {
        let e = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let ids = [0, 0, 1, 1];
        let r = distance_overlap::<f64>(&[(e.view(), &ids)], 100).unwrap();
        assert_eq!(r.overlap_probability, 0.0);
        assert_eq!(r.intra[0], 2);
        assert_eq!(r.inter[99], 4);
    }

    #[test]
    fn identical_embeddings_overlap_fully() {
        let e = Array2::<f32>::from_elem((6, 3), 0.7);
        let ids = [0, 0, 1, 1, 2, -1];
        let r = distance_overlap(&[(e.view(), &ids)], 100).unwrap();
        assert!((r.overlap_probability - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_fail() {
        let e = Array2::<f64>::zeros((3, 2));
        assert!(distance_overlap(&[(e.view(), &[0, 0, 0][..])], 10).is_err());
        assert!(distance_overlap(&[(e.view(), &[0, 1, 2][..])], 10).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(sample_indices(100, 10, 3), sample_indices(100, 10, 3));
        assert_eq!(sample_indices(5, 10, 3), vec![0, 1, 2, 3, 4]);
    }
}
