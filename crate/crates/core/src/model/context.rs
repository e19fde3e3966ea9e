//! Per-cube context for the scoring head: the `k` points nearest to every cube
//! center and the average of their features.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::CubeGrid;
use crate::scalar::Real;
use crate::scene::PointCloud;

/// Number of extra geometric channels appended to the pooled features.
pub const GEOMETRY_CHANNELS: usize = 4;

/// Nearest points of every cube center, `k` per cube, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhoods {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Neighborhoods {
    pub fn of_cube(&self, j: usize) -> &[usize] {
        &self.indices[j * self.k..(j + 1) * self.k]
    }

    pub fn cube_count(&self) -> usize {
        self.indices.len() / self.k
    }
}

/// Euclidean `min(k, N_p)` nearest points to each cube center, ordered by
/// distance with ties broken by the smaller point index.
pub fn cube_neighbors<T: Real>(cloud: &PointCloud<T>, grid: &CubeGrid, k: usize) -> Result<Neighborhoods> {
    if k == 0 {
        return Err(Error::Config("context k must be at least 1".into()));
    }
    if cloud.is_empty() {
        return Err(Error::Empty("cube context needs at least one point".into()));
    }
    let k = k.min(cloud.len());
    let indices = if cloud.is_normalized() { bucketed(cloud, grid, k)? } else { exhaustive(cloud, grid, k) };
    Ok(Neighborhoods { k, indices })
}

fn by_distance<T: Real>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

fn dist2<T: Real>(p: &[T; 3], c: &[T; 3]) -> T {
    (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)
}

/// Keeps the `k` smallest entries of `scratch`, sorted.
fn take_nearest<T: Real>(scratch: &mut Vec<(T, usize)>, k: usize) {
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, by_distance);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(by_distance);
}

fn exhaustive<T: Real>(cloud: &PointCloud<T>, grid: &CubeGrid, k: usize) -> Vec<usize> {
    let mut indices = Vec::with_capacity(grid.cube_count() * k);
    let mut scratch = Vec::with_capacity(cloud.len());
    for j in 0..grid.cube_count() {
        let c: [T; 3] = grid.cube_center(j);
        scratch.clear();
        scratch.extend(cloud.positions().iter().enumerate().map(|(i, p)| (dist2(p, &c), i)));
        take_nearest(&mut scratch, k);
        indices.extend(scratch.iter().map(|e| e.1));
    }
    indices
}

/// Searches cube cells in growing Chebyshev rings around each center. A point
/// outside ring `r` is at least `(r + 1/2)` edges away, so the search stops
/// once the k-th candidate is strictly closer than that.
fn bucketed<T: Real>(cloud: &PointCloud<T>, grid: &CubeGrid, k: usize) -> Result<Vec<usize>> {
    let n = grid.n_s();
    let cells = grid.cube_count();
    let mut cell_of = Vec::with_capacity(cloud.len());
    let mut start = vec![0usize; cells + 1];
    for p in cloud.positions() {
        let j = grid.flatten_index(grid.cube_of(p)?)?;
        cell_of.push(j);
        start[j + 1] += 1;
    }
    for j in 0..cells {
        start[j + 1] += start[j];
    }
    let mut fill = start.clone();
    let mut members = vec![0usize; cloud.len()];
    for (i, &j) in cell_of.iter().enumerate() {
        members[fill[j]] = i;
        fill[j] += 1;
    }

    let edge: T = grid.cube_edge();
    let positions = cloud.positions();
    let mut indices = Vec::with_capacity(cells * k);
    let mut cand: Vec<(T, usize)> = Vec::new();
    let mut best: Vec<(T, usize)> = Vec::new();
    for j in 0..cells {
        let c: [T; 3] = grid.cube_center(j);
        let home = grid.unflatten_index(j)?.map(|v| v as i64);
        cand.clear();
        for r in 0..n as i64 {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let q = [home[0] + dx, home[1] + dy, home[2] + dz];
                        if q.iter().any(|&v| v < 0 || v >= n as i64) {
                            continue;
                        }
                        let cell = grid.flatten_index(q.map(|v| v as usize))?;
                        for &i in &members[start[cell]..start[cell + 1]] {
                            cand.push((dist2(&positions[i], &c), i));
                        }
                    }
                }
            }
            if cand.len() >= k {
                best.clear();
                best.extend_from_slice(&cand);
                take_nearest(&mut best, k);
                // Slack against rounding in the cell assignment.
                let reach = (T::of_usize(r as usize) + T::of(0.5 - 1e-6)) * edge;
                if best[k - 1].0 < reach * reach {
                    break;
                }
            }
        }
        if cand.len() < k || best.len() != k {
            best.clear();
            best.extend_from_slice(&cand);
            take_nearest(&mut best, k);
        }
        indices.extend(best.iter().map(|e| e.1));
    }
    Ok(indices)
}

/// Average-pooled features of the nearest points of every cube: `n_s^3 x N_l`.
pub fn score_head_context<T: Real>(
    features: ArrayView2<T>,
    cloud: &PointCloud<T>,
    grid: &CubeGrid,
    k: usize,
) -> Result<Array2<T>> {
    if features.nrows() != cloud.len() {
        return Err(Error::Config("feature rows do not match the cloud".into()));
    }
    let nbrs = cube_neighbors(cloud, grid, k)?;
    Ok(pool_features(features, &nbrs))
}

pub(crate) fn pool_features<T: Real>(features: ArrayView2<T>, nbrs: &Neighborhoods) -> Array2<T> {
    let width = features.ncols();
    let mut out = Array2::zeros((nbrs.cube_count(), width));
    let inv = T::one() / T::of_usize(nbrs.k);
    for (j, mut row) in out.outer_iter_mut().enumerate() {
        for &i in nbrs.of_cube(j) {
            row += &features.row(i);
        }
        row *= inv;
    }
    out
}

/// Mean offset of the selected points from the cube center and their mean
/// distance, both in units of the cube edge: `n_s^3 x 4`.
pub(crate) fn cube_geometry<T: Real>(cloud: &PointCloud<T>, grid: &CubeGrid, nbrs: &Neighborhoods) -> Array2<T> {
    let n = T::of_usize(grid.n_s());
    let inv = T::one() / T::of_usize(nbrs.k);
    let mut out = Array2::zeros((nbrs.cube_count(), GEOMETRY_CHANNELS));
    for (j, mut row) in out.outer_iter_mut().enumerate() {
        let c: [T; 3] = grid.cube_center(j);
        for &i in nbrs.of_cube(j) {
            let p = cloud.positions()[i];
            let mut d2 = T::zero();
            for a in 0..3 {
                let off = (p[a] - c[a]) * n;
                row[a] += off;
                d2 += off * off;
            }
            row[3] += d2.sqrt();
        }
        row *= inv;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn single_point_context_is_its_feature() {
        let cloud = PointCloud::<f64>::unlabeled(vec![[0.3, 0.6, 0.9]]).unwrap();
        let grid = CubeGrid::new(3).unwrap();
        let f = Array2::from_shape_vec((1, 2), vec![1.5, -2.0]).unwrap();
        let ctx = score_head_context(f.view(), &cloud, &grid, 32).unwrap();
        assert_eq!(ctx.nrows(), 27);
        assert!(ctx.outer_iter().all(|r| r.to_vec() == vec![1.5, -2.0]));
    }

    #[test]
    fn constant_features_give_constant_context() {
        let pts: Vec<[f64; 3]> = (0..40).map(|i| [i as f64 / 40.0, 0.5, (i % 7) as f64 / 7.0]).collect();
        let cloud = PointCloud::unlabeled(pts).unwrap();
        let grid = CubeGrid::new(4).unwrap();
        let f = Array2::from_elem((40, 3), 0.25);
        let ctx = score_head_context(f.view(), &cloud, &grid, 8).unwrap();
        assert!(ctx.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_k_is_rejected() {
        let cloud = PointCloud::<f64>::unlabeled(vec![[0.5; 3]]).unwrap();
        assert!(cube_neighbors(&cloud, &CubeGrid::new(2).unwrap(), 0).is_err());
    }

    #[test]
    fn bucketed_search_matches_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for (n_pts, n_s, k) in [(50, 4, 8), (300, 7, 32), (20, 5, 32), (200, 3, 1)] {
            // Clustered points with exact duplicates and grid-aligned coordinates.
            let mut pts: Vec<[f64; 3]> = (0..n_pts)
                .map(|_| {
                    let c = rng.random_range(0.0..0.3);
                    [c + rng.random_range(0.0..0.1), 0.5, rng.random_range(0.0..1.0)]
                })
                .collect();
            pts[1] = pts[0];
            pts[2] = [0.25, 0.5, 0.75];
            pts[3] = [1.0, 1.0, 0.0];
            let cloud = PointCloud::unlabeled(pts).unwrap();
            let grid = CubeGrid::new(n_s).unwrap();
            let k = k.min(n_pts);
            assert_eq!(bucketed(&cloud, &grid, k).unwrap(), exhaustive(&cloud, &grid, k));
        }
    }
}
