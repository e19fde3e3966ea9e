//! Cube quantization of the unit cube and instance-category targets.
//!
//! Space is divided into `n_s^3` cubes. An instance is labeled with the cubes
//! around its centroid (center sampling) and every one of its points is
//! classified into those cubes, either directly over all `n_s^3` flat indices
//! (flatten paradigm) or through three per-axis index sets whose element-wise
//! product recovers the flat cube (project paradigm).

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::scene::PointCloud;

/// `n_s` cubes per axis over `[0,1]^3`. Cells are half-open `[a, b)` except the
/// last one on each axis, which is closed so that `1.0` has a cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeGrid {
    n_s: usize,
}

impl CubeGrid {
    pub fn new(n_s: usize) -> Result<Self> {
        if n_s < 2 {
            return Err(Error::Domain(format!("n_s must be at least 2, got {n_s}")));
        }
        Ok(Self { n_s })
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    /// Number of instance categories, `n_s^3`.
    pub fn cube_count(&self) -> usize {
        self.n_s.pow(3)
    }

    pub fn cube_edge<T: Real>(&self) -> T {
        T::one() / T::of_usize(self.n_s)
    }

    pub fn cube_of<T: Real>(&self, p: &[T; 3]) -> Result<[usize; 3]> {
        let mut idx = [0; 3];
        for a in 0..3 {
            let c = p[a];
            if !(c >= T::zero() && c <= T::one()) {
                return Err(Error::Domain(format!("coordinate {c} outside [0,1]")));
            }
            let k = (c * T::of_usize(self.n_s)).floor().to_usize().unwrap_or(0);
            idx[a] = k.min(self.n_s - 1);
        }
        Ok(idx)
    }

    pub fn flatten_index(&self, idx: [usize; 3]) -> Result<usize> {
        flatten_index(idx[0], idx[1], idx[2], self.n_s)
    }

    pub fn unflatten_index(&self, j: usize) -> Result<[usize; 3]> {
        if j >= self.cube_count() {
            return Err(Error::Domain(format!("flat index {j} >= {}", self.cube_count())));
        }
        let n = self.n_s;
        Ok([j / (n * n), (j / n) % n, j % n])
    }

    /// Geometric center of the cube along one axis.
    pub fn axis_center<T: Real>(&self, k: usize) -> T {
        (T::of_usize(k) + T::of(0.5)) / T::of_usize(self.n_s)
    }

    pub fn cube_center<T: Real>(&self, j: usize) -> [T; 3] {
        let idx = self.unflatten_index(j).expect("flat index in range");
        idx.map(|k| self.axis_center(k))
    }
}

/// `j = ix * n_s^2 + iy * n_s + iz`.
pub fn flatten_index(ix: usize, iy: usize, iz: usize, n_s: usize) -> Result<usize> {
    if ix >= n_s || iy >= n_s || iz >= n_s {
        return Err(Error::Domain(format!("cube index ({ix},{iy},{iz}) outside 0..{n_s}")));
    }
    Ok(ix * n_s * n_s + iy * n_s + iz)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Flatten,
    Project,
}

/// Centroid, bounding box and members of one ground-truth instance.
#[derive(Clone, Debug)]
pub struct InstanceStats<T> {
    pub id: i32,
    pub points: Vec<usize>,
    pub centroid: [T; 3],
    pub bbox_min: [T; 3],
    pub bbox_max: [T; 3],
}

pub fn instance_stats<T: Real>(cloud: &PointCloud<T>) -> Vec<InstanceStats<T>> {
    cloud
        .instance_members()
        .into_iter()
        .map(|(id, points)| {
            let mut sum = [T::zero(); 3];
            let mut lo = [T::infinity(); 3];
            let mut hi = [T::neg_infinity(); 3];
            for &i in &points {
                let p = cloud.positions()[i];
                for a in 0..3 {
                    sum[a] += p[a];
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            let n = T::of_usize(points.len());
            InstanceStats { id, centroid: sum.map(|s| s / n), bbox_min: lo, bbox_max: hi, points }
        })
        .collect()
}

/// Mean position of every labeled instance.
pub fn instance_centroids<T: Real>(cloud: &PointCloud<T>) -> Result<BTreeMap<i32, [T; 3]>> {
    let stats = instance_stats(cloud);
    if stats.is_empty() {
        return Err(Error::InvalidCloud("cloud has no labeled instance".into()));
    }
    Ok(stats.into_iter().map(|s| (s.id, s.centroid)).collect())
}

/// Cubes whose centers lie in the box around the instance centroid with
/// per-axis extent `scale` times the instance bounding-box extent, plus the
/// centroid's own cube. Sorted flat indices.
pub fn center_region_cubes<T: Real>(
    cloud: &PointCloud<T>,
    instance_id: i32,
    grid: &CubeGrid,
    scale: T,
) -> Result<Vec<usize>> {
    let stats = instance_stats(cloud)
        .into_iter()
        .find(|s| s.id == instance_id)
        .ok_or_else(|| Error::Domain(format!("no instance with id {instance_id}")))?;
    region_cubes(&stats, grid, scale)
}

fn check_scale<T: Real>(scale: T) -> Result<()> {
    if !(scale > T::zero() && scale <= T::one()) {
        return Err(Error::Domain(format!("center scale {scale} outside (0,1]")));
    }
    Ok(())
}

fn region_cubes<T: Real>(stats: &InstanceStats<T>, grid: &CubeGrid, scale: T) -> Result<Vec<usize>> {
    check_scale(scale)?;
    let n = grid.n_s();
    let half = T::of(0.5);
    let mut ranges: [Vec<usize>; 3] = Default::default();
    for a in 0..3 {
        let c = stats.centroid[a];
        let h = scale * (stats.bbox_max[a] - stats.bbox_min[a]) * half;
        let (lo, hi) = (c - h, c + h);
        // Candidate window, then the exact same predicate a brute-force scan uses.
        let first = ((lo * T::of_usize(n) - half).floor().to_f64_lossy() as i64 - 1).max(0) as usize;
        let last = ((hi * T::of_usize(n) - half).ceil().to_f64_lossy() as i64 + 1).clamp(0, n as i64 - 1) as usize;
        ranges[a] = (first..=last)
            .filter(|&k| {
                let center: T = grid.axis_center(k);
                lo <= center && center <= hi
            })
            .collect();
    }
    let mut cubes = Vec::new();
    for &x in &ranges[0] {
        for &y in &ranges[1] {
            for &z in &ranges[2] {
                cubes.push(flatten_index(x, y, z, n)?);
            }
        }
    }
    let own = grid.flatten_index(grid.cube_of(&stats.centroid)?)?;
    if let Err(pos) = cubes.binary_search(&own) {
        cubes.insert(pos, own);
    }
    Ok(cubes)
}

/// Per-instance category targets in one of the two paradigms.
#[derive(Clone, Debug, PartialEq)]
pub enum CategoryTargets {
    /// For every point, its positive flat cube indices (sorted).
    Flatten(Vec<Vec<usize>>),
    /// For every axis and point, its positive axis indices (sorted).
    Project([Vec<Vec<usize>>; 3]),
}

/// Ground truth for one scene: category targets, cube-score targets and the
/// ownership of every positive cube.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub paradigm: Paradigm,
    pub n_s: usize,
    pub n_points: usize,
    pub targets: CategoryTargets,
    /// Sorted flat indices of the cubes with score target 1.
    pub positive_cubes: Vec<usize>,
    /// Owning instance of each positive cube after collision resolution.
    pub instance_of_cube: BTreeMap<usize, i32>,
    /// Points of the owning instance of each positive cube (the flatten column support).
    pub cube_members: BTreeMap<usize, Vec<usize>>,
    /// Positive cubes claimed by more than one instance.
    pub collisions: Vec<usize>,
    /// Instances left without any owned cube by collision resolution.
    pub lost_instances: Vec<i32>,
    /// Number of labeled instances in the scene.
    pub instance_count: usize,
}

impl TargetSet {
    pub fn cube_count(&self) -> usize {
        self.n_s.pow(3)
    }

    /// Binary score target over all `n_s^3` cubes.
    pub fn score_target(&self) -> Vec<bool> {
        let mut t = vec![false; self.cube_count()];
        for &j in &self.positive_cubes {
            t[j] = true;
        }
        t
    }

    pub fn score_target_array<T: Real>(&self) -> ndarray::Array1<T> {
        self.score_target().into_iter().map(|b| if b { T::one() } else { T::zero() }).collect()
    }

    /// Dense `N_p x n_s^3` flatten target. Only meaningful for small grids.
    pub fn dense_flatten<T: Real>(&self) -> Array2<T> {
        let mut g = Array2::zeros((self.n_points, self.cube_count()));
        for (&j, members) in &self.cube_members {
            for &i in members {
                g[[i, j]] = T::one();
            }
        }
        g
    }

    /// Dense `N_p x n_s` project targets, derived from cube ownership when this
    /// set was built for the flatten paradigm.
    pub fn dense_project<T: Real>(&self) -> [Array2<T>; 3] {
        let rows = match &self.targets {
            CategoryTargets::Project(rows) => rows.clone(),
            CategoryTargets::Flatten(_) => project_rows(self.n_points, self.n_s, &self.cube_members),
        };
        rows.map(|axis| {
            let mut g = Array2::zeros((self.n_points, self.n_s));
            for (i, row) in axis.iter().enumerate() {
                for &k in row {
                    g[[i, k]] = T::one();
                }
            }
            g
        })
    }

    /// Debug form used by golden-file tests.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let rows = match &self.targets {
            CategoryTargets::Flatten(rows) => json!(rows),
            CategoryTargets::Project([x, y, z]) => json!({ "x": x, "y": y, "z": z }),
        };
        json!({
            "paradigm": self.paradigm,
            "n_s": self.n_s,
            "positive_cubes": self.positive_cubes,
            "rows": rows,
        })
    }
}

fn project_rows(
    n_points: usize,
    n_s: usize,
    cube_members: &BTreeMap<usize, Vec<usize>>,
) -> [Vec<Vec<usize>>; 3] {
    let mut rows: [Vec<Vec<usize>>; 3] = std::array::from_fn(|_| vec![Vec::new(); n_points]);
    for (&j, members) in cube_members {
        let idx = [j / (n_s * n_s), (j / n_s) % n_s, j % n_s];
        for &i in members {
            for a in 0..3 {
                rows[a][i].push(idx[a]);
            }
        }
    }
    for axis in &mut rows {
        for row in axis.iter_mut() {
            row.sort_unstable();
            row.dedup();
        }
    }
    rows
}

/// Builds the training targets of one labeled scene.
///
/// A cube claimed by several instances goes to the instance whose centroid lies
/// in it, otherwise to the instance whose centroid is nearest to the cube
/// center (ties: lower id). Only the owner's points are positive for that cube.
pub fn build_targets<T: Real>(
    cloud: &PointCloud<T>,
    grid: &CubeGrid,
    paradigm: Paradigm,
    scale: T,
) -> Result<TargetSet> {
    check_scale(scale)?;
    let stats = instance_stats(cloud);
    if stats.is_empty() {
        return Err(Error::InvalidCloud("cannot build targets for a cloud without instances".into()));
    }
    let mut claims: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut home = Vec::with_capacity(stats.len());
    for (s, st) in stats.iter().enumerate() {
        for j in region_cubes(st, grid, scale)? {
            claims.entry(j).or_default().push(s);
        }
        home.push(grid.flatten_index(grid.cube_of(&st.centroid)?)?);
    }

    let mut instance_of_cube = BTreeMap::new();
    let mut cube_members = BTreeMap::new();
    let mut collisions = Vec::new();
    let mut owned = vec![0usize; stats.len()];
    for (&j, claimants) in &claims {
        let owner = if claimants.len() == 1 {
            claimants[0]
        } else {
            collisions.push(j);
            resolve_collision(j, claimants, &stats, &home, grid)
        };
        owned[owner] += 1;
        instance_of_cube.insert(j, stats[owner].id);
        cube_members.insert(j, stats[owner].points.clone());
    }
    let lost_instances =
        stats.iter().zip(&owned).filter(|(_, &n)| n == 0).map(|(s, _)| s.id).collect();

    let n_points = cloud.len();
    let targets = match paradigm {
        Paradigm::Flatten => {
            let mut rows = vec![Vec::new(); n_points];
            for (&j, members) in &cube_members {
                for &i in members {
                    rows[i].push(j);
                }
            }
            CategoryTargets::Flatten(rows)
        }
        Paradigm::Project => CategoryTargets::Project(project_rows(n_points, grid.n_s(), &cube_members)),
    };
    Ok(TargetSet {
        paradigm,
        n_s: grid.n_s(),
        n_points,
        targets,
        positive_cubes: claims.keys().copied().collect(),
        instance_of_cube,
        cube_members,
        collisions,
        lost_instances,
        instance_count: stats.len(),
    })
}

fn resolve_collision<T: Real>(
    j: usize,
    claimants: &[usize],
    stats: &[InstanceStats<T>],
    home: &[usize],
    grid: &CubeGrid,
) -> usize {
    let center: [T; 3] = grid.cube_center(j);
    let d2 = |s: usize| -> T { (0..3).map(|a| (stats[s].centroid[a] - center[a]).powi(2)).sum() };
    let containing: Vec<usize> = claimants.iter().copied().filter(|&s| home[s] == j).collect();
    let pool = if containing.is_empty() { claimants.to_vec() } else { containing };
    // Claimants are in ascending id order, so strict comparison keeps the lower id on ties.
    pool.into_iter()
        .reduce(|best, s| if d2(s) < d2(best) { s } else { best })
        .expect("at least one claimant")
}

/// Points of collision-free positive cubes where the product of the three
/// project targets differs from the flatten target, as `(cube, point)` pairs.
pub fn equivalence_violations(flatten: &TargetSet, project: &TargetSet) -> Result<Vec<(usize, usize)>> {
    let rows = match (&flatten.targets, &project.targets) {
        (CategoryTargets::Flatten(_), CategoryTargets::Project(rows)) => rows,
        _ => return Err(Error::Config("expected one flatten and one project target set".into())),
    };
    if flatten.n_s != project.n_s || flatten.n_points != project.n_points {
        return Err(Error::Config("target sets describe different grids or clouds".into()));
    }
    let n_s = flatten.n_s;
    let mut out = Vec::new();
    for &j in flatten.positive_cubes.iter().filter(|j| flatten.collisions.binary_search(j).is_err()) {
        let idx = [j / (n_s * n_s), (j / n_s) % n_s, j % n_s];
        let members = flatten.cube_members.get(&j).map_or(&[][..], |m| m.as_slice());
        for i in 0..flatten.n_points {
            let product = (0..3).all(|a| rows[a][i].binary_search(&idx[a]).is_ok());
            if product != members.binary_search(&i).is_ok() {
                out.push((j, i));
            }
        }
    }
    Ok(out)
}

/// Collision statistics of a dataset at one grid resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub positive_cubes: usize,
    pub overlapped_cubes: usize,
    pub instances: usize,
    pub lost_instances: usize,
}

impl OverlapStats {
    pub fn rate(&self) -> f64 {
        if self.positive_cubes == 0 {
            0.0
        } else {
            self.overlapped_cubes as f64 / self.positive_cubes as f64
        }
    }
}

pub fn overlap_stats<T: Real>(clouds: &[PointCloud<T>], grid: &CubeGrid, scale: T) -> Result<OverlapStats> {
    if clouds.is_empty() {
        return Err(Error::Empty("overlap statistics need at least one cloud".into()));
    }
    let mut acc = OverlapStats::default();
    for cloud in clouds {
        let t = build_targets(cloud, grid, Paradigm::Flatten, scale)?;
        acc.positive_cubes += t.positive_cubes.len();
        acc.overlapped_cubes += t.collisions.len();
        acc.instances += t.instance_count;
        acc.lost_instances += t.lost_instances.len();
    }
    Ok(acc)
}

/// Fraction of positive cubes, pooled over the dataset, claimed by more than one instance.
pub fn overlap_rate<T: Real>(clouds: &[PointCloud<T>], grid: &CubeGrid, scale: T) -> Result<f64> {
    Ok(overlap_stats(clouds, grid, scale)?.rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[([f64; 3], i32)]) -> PointCloud<f64> {
        PointCloud::new(
            points.iter().map(|p| p.0).collect(),
            vec![0; points.len()],
            points.iter().map(|p| p.1).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cube_of_examples() {
        let g = CubeGrid::new(20).unwrap();
        assert_eq!(g.cube_of(&[0.0, 0.0, 0.0]).unwrap(), [0, 0, 0]);
        assert_eq!(g.cube_of(&[1.0, 1.0, 1.0]).unwrap(), [19, 19, 19]);
        assert_eq!(g.cube_of(&[0.13, 0.51, 0.99]).unwrap(), [2, 10, 19]);
        assert!(g.cube_of(&[1.01, 0.0, 0.0]).is_err());
        assert!(g.cube_of(&[f64::NAN, 0.0, 0.0]).is_err());
        assert!(CubeGrid::new(1).is_err());
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(flatten_index(0, 0, 0, 20).unwrap(), 0);
        assert_eq!(flatten_index(2, 3, 4, 20).unwrap(), 2 * 400 + 3 * 20 + 4);
        assert_eq!(flatten_index(2, 3, 4, 20).unwrap(), 864);
        assert!(flatten_index(20, 0, 0, 20).is_err());
        let g = CubeGrid::new(5).unwrap();
        let mut seen = vec![false; 125];
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..5 {
                    let j = g.flatten_index([x, y, z]).unwrap();
                    assert!(!std::mem::replace(&mut seen[j], true));
                    assert_eq!(g.unflatten_index(j).unwrap(), [x, y, z]);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert!(g.unflatten_index(125).is_err());
    }

    #[test]
    fn centroid_examples() {
        let c = cloud(&[([0.2, 0.2, 0.2], 0), ([0.4, 0.4, 0.4], 0), ([0.9, 0.1, 0.5], 1)]);
        let m = instance_centroids(&c).unwrap();
        for a in 0..3 {
            assert!((m[&0][a] - 0.3).abs() < 1e-15);
        }
        assert_eq!(m[&1], [0.9, 0.1, 0.5]);
        let empty = PointCloud::<f64>::unlabeled(vec![[0.5; 3]]).unwrap();
        assert!(instance_centroids(&empty).is_err());
    }

    #[test]
    fn degenerate_instance_gets_its_centroid_cube() {
        let g = CubeGrid::new(10).unwrap();
        let c = cloud(&[([0.33, 0.47, 0.81], 0); 5]);
        let cubes = center_region_cubes(&c, 0, &g, 0.2).unwrap();
        assert_eq!(cubes, vec![flatten_index(3, 4, 8, 10).unwrap()]);
        assert!(center_region_cubes(&c, 0, &g, 0.0).is_err());
        assert!(center_region_cubes(&c, 3, &g, 0.2).is_err());
    }

    #[test]
    fn one_instance_tiny_scale_is_one_hot() {
        let g = CubeGrid::new(8).unwrap();
        let c = cloud(&[([0.1, 0.1, 0.1], 0), ([0.3, 0.2, 0.15], 0), ([0.9, 0.9, 0.9], -1)]);
        let t = build_targets(&c, &g, Paradigm::Flatten, 1e-9).unwrap();
        let j = g.flatten_index(g.cube_of(&[0.2, 0.15, 0.125]).unwrap()).unwrap();
        assert_eq!(t.positive_cubes, vec![j]);
        match &t.targets {
            CategoryTargets::Flatten(rows) => {
                assert_eq!(rows[0], vec![j]);
                assert_eq!(rows[1], vec![j]);
                assert!(rows[2].is_empty());
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn distinct_cubes_have_disjoint_columns() {
        let g = CubeGrid::new(4).unwrap();
        let c = cloud(&[([0.1; 3], 0), ([0.12; 3], 0), ([0.8; 3], 1), ([0.85; 3], 1)]);
        let t = build_targets(&c, &g, Paradigm::Flatten, 0.2).unwrap();
        assert!(t.collisions.is_empty());
        let a = &t.cube_members[&t.positive_cubes[0]];
        let b = &t.cube_members[&t.positive_cubes[1]];
        assert!(a.iter().all(|i| !b.contains(i)));
    }

    #[test]
    fn identical_centroids_collide() {
        let g = CubeGrid::new(8).unwrap();
        let c = cloud(&[([0.4; 3], 0), ([0.6; 3], 0), ([0.45; 3], 1), ([0.55; 3], 1)]);
        let t = build_targets(&c, &g, Paradigm::Flatten, 1e-6).unwrap();
        assert_eq!(t.collisions.len(), 1);
        assert_eq!(t.lost_instances, vec![1]);
        let rate = overlap_rate(&[c], &g, 1e-6).unwrap();
        assert!((rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn debug_json_shape() {
        let g = CubeGrid::new(4).unwrap();
        let c = cloud(&[([0.1; 3], 0), ([0.12; 3], 0)]);
        let t = build_targets(&c, &g, Paradigm::Project, 0.2).unwrap();
        let v = t.to_debug_json();
        assert_eq!(v["paradigm"], "project");
        assert_eq!(v["n_s"], 4);
        assert_eq!(v["rows"]["x"][0], json!([0]));
    }
}
