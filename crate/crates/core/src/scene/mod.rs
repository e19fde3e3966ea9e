//! Point clouds, the synthetic scene generator, and cloud file I/O.

mod io;

pub use io::{load_cloud, load_cloud_lenient, read_cloud, save_cloud, write_cloud, CloudFormat};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Instance id carried by points that belong to no instance.
pub const BACKGROUND: i32 = -1;

/// Number of rotations and reflections mapping the unit cube onto itself.
pub const CUBE_SYMMETRIES: usize = 48;

/// Points with coordinates, semantic labels and ground-truth instance ids.
///
/// The three arrays always have the same length and hold at least one point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    positions: Vec<[T; 3]>,
    semantic_labels: Vec<usize>,
    instance_ids: Vec<i32>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(
        positions: Vec<[T; 3]>,
        semantic_labels: Vec<usize>,
        instance_ids: Vec<i32>,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidCloud("a cloud needs at least one point".into()));
        }
        if positions.len() != semantic_labels.len() || positions.len() != instance_ids.len() {
            return Err(Error::InvalidCloud(format!(
                "length mismatch: {} positions, {} semantic labels, {} instance ids",
                positions.len(),
                semantic_labels.len(),
                instance_ids.len()
            )));
        }
        if let Some(id) = instance_ids.iter().find(|&&id| id < BACKGROUND) {
            return Err(Error::InvalidCloud(format!("instance id {id} is below -1")));
        }
        if positions.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidCloud("non-finite coordinate".into()));
        }
        Ok(Self { positions, semantic_labels, instance_ids })
    }

    /// A cloud without labels: every point is background of semantic class 0.
    pub fn unlabeled(positions: Vec<[T; 3]>) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, vec![0; n], vec![BACKGROUND; n])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[T; 3]] {
        &self.positions
    }

    pub fn semantic_labels(&self) -> &[usize] {
        &self.semantic_labels
    }

    pub fn instance_ids(&self) -> &[i32] {
        &self.instance_ids
    }

    /// Distinct non-background instance ids, ascending.
    pub fn instances(&self) -> Vec<i32> {
        let mut ids: Vec<i32> =
            self.instance_ids.iter().copied().filter(|&id| id != BACKGROUND).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Point indices of every instance, keyed by id.
    pub fn instance_members(&self) -> BTreeMap<i32, Vec<usize>> {
        let mut members: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.instance_ids.iter().enumerate() {
            if id != BACKGROUND {
                members.entry(id).or_default().push(i);
            }
        }
        members
    }

    /// Relabels instances densely as 0..K-1 in order of first appearance.
    pub fn canonicalized(&self) -> Self {
        Self {
            positions: self.positions.clone(),
            semantic_labels: self.semantic_labels.clone(),
            instance_ids: canonicalize(&self.instance_ids),
        }
    }

    pub fn with_instance_ids(&self, instance_ids: Vec<i32>) -> Result<Self> {
        Self::new(self.positions.clone(), self.semantic_labels.clone(), instance_ids)
    }

    /// Applies `order` (new index -> old index) to every per-point array.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::InvalidCloud("permutation length mismatch".into()));
        }
        let mut seen = vec![false; order.len()];
        for &o in order {
            if o >= order.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::InvalidCloud("not a permutation".into()));
            }
        }
        Ok(Self {
            positions: order.iter().map(|&o| self.positions[o]).collect(),
            semantic_labels: order.iter().map(|&o| self.semantic_labels[o]).collect(),
            instance_ids: order.iter().map(|&o| self.instance_ids[o]).collect(),
        })
    }

    /// True when every coordinate lies in the unit cube.
    pub fn is_normalized(&self) -> bool {
        self.positions.iter().flatten().all(|&c| c >= T::zero() && c <= T::one())
    }

    /// Uniformly rescales and translates the cloud into `[0,1]^3`, preserving aspect ratio.
    pub fn normalized(&self) -> Self {
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(T::zero(), T::max);
        let scale = if extent > T::zero() { T::one() / extent } else { T::one() };
        let positions = self
            .positions
            .iter()
            .map(|p| {
                let mut q = [T::zero(); 3];
                for a in 0..3 {
                    q[a] = ((p[a] - lo[a]) * scale).max(T::zero()).min(T::one());
                }
                q
            })
            .collect();
        Self { positions, ..self.clone() }
    }

    /// Applies one of the 48 symmetries of the unit cube: `symmetry / 8`
    /// selects the axis permutation, the low three bits mirror x, y, z.
    pub fn with_symmetry(&self, symmetry: usize) -> Result<Self> {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        if symmetry >= CUBE_SYMMETRIES {
            return Err(Error::Domain(format!("symmetry {symmetry} outside 0..{CUBE_SYMMETRIES}")));
        }
        let perm = PERMS[symmetry / 8];
        let positions = self
            .positions
            .iter()
            .map(|p| {
                std::array::from_fn(|a| {
                    let v = p[perm[a]];
                    if symmetry >> a & 1 == 1 { T::one() - v } else { v }
                })
            })
            .collect();
        Ok(Self { positions, ..self.clone() })
    }

    /// Converts coordinates to another scalar type.
    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            positions: self
                .positions
                .iter()
                .map(|p| p.map(|c| U::of(c.to_f64_lossy())))
                .collect(),
            semantic_labels: self.semantic_labels.clone(),
            instance_ids: self.instance_ids.clone(),
        }
    }
}

/// Dense relabeling of instance ids in order of first appearance; background stays -1.
pub fn canonicalize(ids: &[i32]) -> Vec<i32> {
    let mut map = BTreeMap::new();
    ids.iter()
        .map(|&id| {
            if id == BACKGROUND {
                BACKGROUND
            } else {
                let next = map.len() as i32;
                *map.entry(id).or_insert(next)
            }
        })
        .collect()
}

/// Shape of a generated instance. The kind doubles as its semantic class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Box,
    Ellipsoid,
}

impl ShapeKind {
    pub fn semantic_class(self) -> usize {
        match self {
            ShapeKind::Box => 0,
            ShapeKind::Ellipsoid => 1,
        }
    }
}

/// Parameters of the synthetic scene generator. Lengths are in normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Inclusive bounds on the number of instances.
    pub instance_count_range: (usize, usize),
    /// Inclusive bounds on the points sampled per instance.
    pub points_per_instance_range: (usize, usize),
    /// When set, the scene has exactly this many points (background included) and
    /// `points_per_instance_range` is ignored.
    pub total_points: Option<usize>,
    pub shape_kinds: Vec<ShapeKind>,
    /// Inclusive bounds on each axis extent of an instance.
    pub size_range: (f64, f64),
    pub noise_sigma: f64,
    /// Minimum distance between the centroids of any two instances.
    pub min_centroid_separation: f64,
    /// Unlabeled clutter points scattered uniformly over the scene.
    pub background_points: usize,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            instance_count_range: (3, 6),
            points_per_instance_range: (150, 250),
            total_points: None,
            shape_kinds: vec![ShapeKind::Box, ShapeKind::Ellipsoid],
            size_range: (0.08, 0.2),
            noise_sigma: 0.002,
            min_centroid_separation: 0.2,
            background_points: 0,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        let (kmin, kmax) = self.instance_count_range;
        if kmin == 0 || kmin > kmax {
            return bad("instance_count_range must be non-empty with min >= 1");
        }
        let (pmin, pmax) = self.points_per_instance_range;
        if self.total_points.is_none() && (pmin == 0 || pmin > pmax) {
            return bad("points_per_instance_range must be non-empty with min >= 1");
        }
        if let Some(total) = self.total_points {
            if total < self.background_points + kmax {
                return bad("total_points leaves fewer than one point per instance");
            }
        }
        if self.shape_kinds.is_empty() {
            return bad("shape_kinds is empty");
        }
        let (smin, smax) = self.size_range;
        if !(smin > 0.0 && smin <= smax && smax < 1.0) {
            return bad("size_range must satisfy 0 < min <= max < 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        if !(self.min_centroid_separation >= 0.0 && self.min_centroid_separation.is_finite()) {
            return bad("min_centroid_separation must be finite and >= 0");
        }
        Ok(())
    }

    /// Settings of the `index`-th scene of a dataset drawn from `self`.
    pub fn for_scene(&self, index: usize) -> Self {
        Self {
            rng_seed: self
                .rng_seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(index as u64 + 1),
            ..self.clone()
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 500;
const SCENE_ATTEMPTS: usize = 50;

/// Samples a scene. Points are generated in `f64` and converted to `T` at the end,
/// so separation guarantees are exact in `f64`.
pub fn generate_scene<T: Real>(spec: &SceneSpec) -> Result<PointCloud<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let k = rng.random_range(spec.instance_count_range.0..=spec.instance_count_range.1);
    let counts = instance_point_counts(spec, k, &mut rng);
    for _ in 0..SCENE_ATTEMPTS {
        if let Some(cloud) = try_generate(spec, &counts, &mut rng)? {
            return Ok(cloud.cast());
        }
    }
    Err(Error::InfeasibleSpec(format!(
        "could not place {k} instances {} apart after {SCENE_ATTEMPTS} attempts",
        spec.min_centroid_separation
    )))
}

/// Generates `count` scenes with per-scene seeds derived from `spec.rng_seed`.
pub fn generate_dataset<T: Real>(spec: &SceneSpec, count: usize) -> Result<Vec<PointCloud<T>>> {
    (0..count).map(|i| generate_scene(&spec.for_scene(i))).collect()
}

fn instance_point_counts(spec: &SceneSpec, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match spec.total_points {
        Some(total) => {
            let labeled = total - spec.background_points;
            (0..k).map(|i| labeled / k + usize::from(i < labeled % k)).collect()
        }
        None => (0..k)
            .map(|_| {
                rng.random_range(spec.points_per_instance_range.0..=spec.points_per_instance_range.1)
            })
            .collect(),
    }
}

fn try_generate(
    spec: &SceneSpec,
    counts: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Option<PointCloud<f64>>> {
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut centroids: Vec<[f64; 3]> = Vec::with_capacity(counts.len());
    let mut points: Vec<([f64; 3], usize, i32)> = Vec::new();

    for (id, &n) in counts.iter().enumerate() {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let kind = spec.shape_kinds[rng.random_range(0..spec.shape_kinds.len())];
            let extent: [f64; 3] =
                std::array::from_fn(|_| rng.random_range(spec.size_range.0..=spec.size_range.1));
            let center: [f64; 3] =
                std::array::from_fn(|a| rng.random_range(extent[a] / 2.0..=1.0 - extent[a] / 2.0));
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    let local = sample_shape(kind, rng);
                    std::array::from_fn(|a| {
                        let jitter = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                        (center[a] + local[a] * extent[a] / 2.0 + jitter).clamp(0.0, 1.0)
                    })
                })
                .collect();
            let c = mean(&pts);
            if centroids.iter().all(|o| dist(o, &c) >= spec.min_centroid_separation) {
                placed = Some((kind, pts, c));
                break;
            }
        }
        let Some((kind, pts, c)) = placed else {
            return Ok(None);
        };
        centroids.push(c);
        points.extend(pts.into_iter().map(|p| (p, kind.semantic_class(), id as i32)));
    }
    for _ in 0..spec.background_points {
        let p = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
        points.push((p, 0, BACKGROUND));
    }
    // Fisher-Yates so that point order carries no instance information.
    for i in (1..points.len()).rev() {
        let j = rng.random_range(0..=i);
        points.swap(i, j);
    }
    let cloud = PointCloud::new(
        points.iter().map(|p| p.0).collect(),
        points.iter().map(|p| p.1).collect(),
        points.iter().map(|p| p.2).collect(),
    )?;
    Ok(Some(cloud.canonicalized()))
}

/// A point uniformly distributed in the canonical shape spanning `[-1,1]^3`.
fn sample_shape(kind: ShapeKind, rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        match kind {
            ShapeKind::Box => return p,
            ShapeKind::Ellipsoid if p.iter().map(|c| c * c).sum::<f64>() <= 1.0 => return p,
            ShapeKind::Ellipsoid => {}
        }
    }
}

fn mean(pts: &[[f64; 3]]) -> [f64; 3] {
    let n = pts.len() as f64;
    std::array::from_fn(|a| pts.iter().map(|p| p[a]).sum::<f64>() / n)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}
