//! Point-feature network with the category, scoring and semantic heads.
//!
//! The backbone is a shared per-point MLP whose output is max-pooled over the
//! cloud and concatenated back onto every point before a fusion layer
//! producing the latent features `F_l`. Heads read `F_l`:
//!
//! * flatten: `N_l -> 32 -> 32 -> n_s^3`, sigmoid
//! * project: three independent `N_l -> 32 -> 32 -> 32 -> n_s` stacks, sigmoid
//! * embedding (discriminative baseline): `N_l -> 32 -> 32 -> N_c`, linear
//! * score: features of the 32 points nearest to each cube center, average
//!   pooled, plus their mean offset and distance to the center, `-> 32 -> 1`, sigmoid
//! * semantic: `N_l -> 32 -> C_sem` logits
//!
//! Forward and backward are written out explicitly; [`ModelParams`] doubles as
//! the gradient container.

mod context;
mod layers;

pub use context::{cube_neighbors, score_head_context, Neighborhoods, GEOMETRY_CHANNELS};
pub use layers::{Dense, Mlp, MlpCache};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CubeGrid, Paradigm};
use crate::scalar::{sigmoid, Real};
use crate::scene::PointCloud;

use context::{cube_geometry, pool_features};
use layers::{relu_backward_inplace, relu_inplace};

/// Which instance head the network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Flatten,
    Project,
    /// Embedding head trained with the discriminative pull/push loss.
    Discriminative,
}

impl HeadKind {
    pub fn paradigm(self) -> Option<Paradigm> {
        match self {
            HeadKind::Flatten => Some(Paradigm::Flatten),
            HeadKind::Project => Some(Paradigm::Project),
            HeadKind::Discriminative => None,
        }
    }
}

impl From<Paradigm> for HeadKind {
    fn from(p: Paradigm) -> Self {
        match p {
            Paradigm::Flatten => HeadKind::Flatten,
            Paradigm::Project => HeadKind::Project,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub n_s: usize,
    /// Per-point MLP widths; the first entry is the input width and must be 3.
    pub point_widths: Vec<usize>,
    /// `N_l`, width of the fused point features.
    pub latent_width: usize,
    /// Width of every hidden head layer.
    pub head_width: usize,
    pub semantic_classes: usize,
    /// Points pooled around each cube center by the scoring head.
    pub context_k: usize,
    /// `N_c` of the discriminative embedding head.
    pub embedding_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Flatten,
            n_s: 20,
            point_widths: vec![3, 64, 64],
            latent_width: 64,
            head_width: 32,
            semantic_classes: 2,
            context_k: 32,
            embedding_dim: 8,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.point_widths.len() < 2 || self.point_widths[0] != 3 {
            return bad(format!("point_widths must start with 3 and have >= 2 entries: {:?}", self.point_widths));
        }
        if self.point_widths.contains(&0) || self.latent_width == 0 || self.head_width == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.n_s < 2 {
            return bad(format!("n_s must be >= 2, got {}", self.n_s));
        }
        if self.semantic_classes == 0 || self.context_k == 0 || self.embedding_dim == 0 {
            return bad("semantic_classes, context_k and embedding_dim must be positive".into());
        }
        Ok(())
    }
}

/// Instance head weights.
#[derive(Clone, Debug, PartialEq)]
pub enum CategoryHead<T> {
    Flatten(Mlp<T>),
    Project([Mlp<T>; 3]),
    Embedding(Mlp<T>),
}

/// All trainable tensors. Also used to hold gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub point_mlp: Mlp<T>,
    pub fuse: Dense<T>,
    pub category: CategoryHead<T>,
    pub score: Option<Mlp<T>>,
    pub semantic: Mlp<T>,
}

/// Gradients share the parameter layout.
pub type ParamGrads<T> = ModelParams<T>;

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Instance-head output: probabilities for the category heads, raw vectors for
/// the embedding head.
#[derive(Clone, Debug, PartialEq)]
pub enum CategoryOutput<T> {
    Flatten(Array2<T>),
    Project([Array2<T>; 3]),
    Embedding(Array2<T>),
}

impl<T: Real> CategoryOutput<T> {
    fn zeros_like(&self) -> Self {
        match self {
            CategoryOutput::Flatten(f) => CategoryOutput::Flatten(Array2::zeros(f.raw_dim())),
            CategoryOutput::Project(f) => CategoryOutput::Project(f.each_ref().map(|m| Array2::zeros(m.raw_dim()))),
            CategoryOutput::Embedding(f) => CategoryOutput::Embedding(Array2::zeros(f.raw_dim())),
        }
    }

    /// Per-point vector used for embedding-distance analysis: the flatten row,
    /// the concatenated project rows, or the embedding.
    pub fn point_embeddings(&self) -> Array2<T> {
        match self {
            CategoryOutput::Flatten(f) | CategoryOutput::Embedding(f) => f.clone(),
            CategoryOutput::Project([x, y, z]) => {
                concatenate(Axis(1), &[x.view(), y.view(), z.view()]).expect("equal row counts")
            }
        }
    }

    /// Number of scalars held.
    pub fn len(&self) -> usize {
        match self {
            CategoryOutput::Flatten(f) | CategoryOutput::Embedding(f) => f.len(),
            CategoryOutput::Project(f) => f.iter().map(|m| m.len()).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct HeadCache<T> {
    mlp: MlpCache<T>,
}

struct ForwardCache<T> {
    input: Array2<T>,
    point_cache: MlpCache<T>,
    point_out: Array2<T>,
    argmax: Vec<usize>,
    fuse_input: Array2<T>,
    category: Vec<HeadCache<T>>,
    score: Option<(Neighborhoods, Array2<T>, MlpCache<T>)>,
    semantic: MlpCache<T>,
}

/// Everything a forward pass produces; training passes also keep the
/// intermediates needed by [`ModelParams::backward`].
pub struct ForwardOutputs<T> {
    pub point_features: Array2<T>,
    pub category: CategoryOutput<T>,
    /// Per-cube validity probability (absent for the embedding head).
    pub cube_scores: Option<Array1<T>>,
    pub semantic_logits: Array2<T>,
    cache: Option<ForwardCache<T>>,
}

impl<T> ForwardOutputs<T> {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Drops the cached intermediates.
    pub fn into_inference(mut self) -> Self {
        self.cache = None;
        self
    }
}

/// Loss gradients w.r.t. the forward outputs (probabilities, not logits).
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads<T> {
    pub category: CategoryOutput<T>,
    pub cube_scores: Option<Array1<T>>,
    pub semantic_logits: Array2<T>,
}

impl<T: Real> OutputGrads<T> {
    pub fn zeros_like(outputs: &ForwardOutputs<T>) -> Self {
        Self {
            category: outputs.category.zeros_like(),
            cube_scores: outputs.cube_scores.as_ref().map(|s| Array1::zeros(s.len())),
            semantic_logits: Array2::zeros(outputs.semantic_logits.raw_dim()),
        }
    }
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters drawn from `config.init_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c = config;
        let h = c.head_width;
        let pooled = *c.point_widths.last().expect("validated");
        let point_mlp = Mlp::init(&c.point_widths, true, &mut rng);
        let fuse = Dense::init(2 * pooled, c.latent_width, &mut rng);
        let category = match c.head {
            HeadKind::Flatten => CategoryHead::Flatten(Mlp::init(&[c.latent_width, h, h, c.n_s.pow(3)], false, &mut rng)),
            HeadKind::Project => CategoryHead::Project(std::array::from_fn(|_| {
                Mlp::init(&[c.latent_width, h, h, h, c.n_s], false, &mut rng)
            })),
            HeadKind::Discriminative => {
                CategoryHead::Embedding(Mlp::init(&[c.latent_width, h, h, c.embedding_dim], false, &mut rng))
            }
        };
        let score = (c.head != HeadKind::Discriminative)
            .then(|| Mlp::init(&[c.latent_width + GEOMETRY_CHANNELS, h, 1], false, &mut rng));
        let semantic = Mlp::init(&[c.latent_width, h, c.semantic_classes], false, &mut rng);
        Ok(Self { config: config.clone(), point_mlp, fuse, category, score, semantic })
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            point_mlp: self.point_mlp.zeros_like(),
            fuse: Dense::zeros(self.fuse.fan_in(), self.fuse.fan_out()),
            category: match &self.category {
                CategoryHead::Flatten(m) => CategoryHead::Flatten(m.zeros_like()),
                CategoryHead::Project(m) => CategoryHead::Project(m.each_ref().map(Mlp::zeros_like)),
                CategoryHead::Embedding(m) => CategoryHead::Embedding(m.zeros_like()),
            },
            score: self.score.as_ref().map(Mlp::zeros_like),
            semantic: self.semantic.zeros_like(),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        self.point_mlp.tensors("point_mlp", &mut out);
        out.push(TensorRef {
            name: "fuse.weight".into(),
            shape: vec![self.fuse.fan_in(), self.fuse.fan_out()],
            data: self.fuse.weight.as_slice().expect("standard layout"),
        });
        out.push(TensorRef {
            name: "fuse.bias".into(),
            shape: vec![self.fuse.fan_out()],
            data: self.fuse.bias.as_slice().expect("standard layout"),
        });
        match &self.category {
            CategoryHead::Flatten(m) => m.tensors("flatten_head", &mut out),
            CategoryHead::Project(ms) => {
                for (m, axis) in ms.iter().zip(["x", "y", "z"]) {
                    m.tensors(&format!("project_head.{axis}"), &mut out);
                }
            }
            CategoryHead::Embedding(m) => m.tensors("embedding_head", &mut out),
        }
        if let Some(m) = &self.score {
            m.tensors("score_head", &mut out);
        }
        self.semantic.tensors("semantic_head", &mut out);
        out
    }

    /// Mutable tensor slices in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        self.point_mlp.tensors_mut(&mut out);
        out.push(self.fuse.weight.as_slice_mut().expect("standard layout"));
        out.push(self.fuse.bias.as_slice_mut().expect("standard layout"));
        match &mut self.category {
            CategoryHead::Flatten(m) | CategoryHead::Embedding(m) => m.tensors_mut(&mut out),
            CategoryHead::Project(ms) => {
                for m in ms {
                    m.tensors_mut(&mut out);
                }
            }
        }
        if let Some(m) = &mut self.score {
            m.tensors_mut(&mut out);
        }
        self.semantic.tensors_mut(&mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.iter_mut().zip(s.data) {
                *d += alpha * v;
            }
        }
    }

    fn check(&self, cloud: &PointCloud<T>, grid: &CubeGrid) -> Result<()> {
        if grid.n_s() != self.config.n_s {
            return Err(Error::Config(format!(
                "model built for n_s = {} used with grid n_s = {}",
                self.config.n_s,
                grid.n_s()
            )));
        }
        if cloud.is_empty() {
            return Err(Error::Empty("forward needs at least one point".into()));
        }
        Ok(())
    }

    /// Training forward pass; keeps the intermediates for [`Self::backward`].
    pub fn forward(&self, cloud: &PointCloud<T>, grid: &CubeGrid) -> Result<ForwardOutputs<T>> {
        self.run(cloud, grid, true, None)
    }

    /// Training forward pass reusing cube neighborhoods computed by
    /// [`cube_neighbors`] for this cloud, grid and `context_k`.
    pub fn forward_with_neighbors(
        &self,
        cloud: &PointCloud<T>,
        grid: &CubeGrid,
        nbrs: &Neighborhoods,
    ) -> Result<ForwardOutputs<T>> {
        self.run(cloud, grid, true, Some(nbrs))
    }

    /// Forward pass without the backward cache.
    pub fn forward_inference(&self, cloud: &PointCloud<T>, grid: &CubeGrid) -> Result<ForwardOutputs<T>> {
        self.run(cloud, grid, false, None)
    }

    fn run(
        &self,
        cloud: &PointCloud<T>,
        grid: &CubeGrid,
        keep: bool,
        given: Option<&Neighborhoods>,
    ) -> Result<ForwardOutputs<T>> {
        self.check(cloud, grid)?;
        let n = cloud.len();
        let input = Array2::from_shape_fn((n, 3), |(i, a)| cloud.positions()[i][a]);

        let (point_out, point_cache) = self.point_mlp.forward_cached(input.view(), keep);
        let width = point_out.ncols();
        let mut argmax = vec![0usize; width];
        let mut pooled = point_out.row(0).to_owned();
        for (i, row) in point_out.outer_iter().enumerate().skip(1) {
            for c in 0..width {
                if row[c] > pooled[c] {
                    pooled[c] = row[c];
                    argmax[c] = i;
                }
            }
        }
        let mut fuse_input = Array2::zeros((n, 2 * width));
        fuse_input.slice_mut(s![.., ..width]).assign(&point_out);
        fuse_input.slice_mut(s![.., width..]).assign(&pooled.broadcast((n, width)).expect("broadcast"));
        let mut features = self.fuse.forward(fuse_input.view());
        relu_inplace(&mut features);

        let mut head_caches = Vec::new();
        let category = match &self.category {
            CategoryHead::Flatten(m) => {
                let (mut out, c) = m.forward_cached(features.view(), keep);
                out.mapv_inplace(sigmoid);
                head_caches.push(HeadCache { mlp: c });
                CategoryOutput::Flatten(out)
            }
            CategoryHead::Project(ms) => CategoryOutput::Project(std::array::from_fn(|a| {
                let (mut out, c) = ms[a].forward_cached(features.view(), keep);
                out.mapv_inplace(sigmoid);
                head_caches.push(HeadCache { mlp: c });
                out
            })),
            CategoryHead::Embedding(m) => {
                let (out, c) = m.forward_cached(features.view(), keep);
                head_caches.push(HeadCache { mlp: c });
                CategoryOutput::Embedding(out)
            }
        };

        let mut score_cache = None;
        let cube_scores = match &self.score {
            Some(m) => {
                let nbrs = match given {
                    Some(n) if n.cube_count() == grid.cube_count() => n.clone(),
                    Some(_) => return Err(Error::Config("neighborhoods built for another grid".into())),
                    None => cube_neighbors(cloud, grid, self.config.context_k)?,
                };
                let pooled = pool_features(features.view(), &nbrs);
                let geometry = cube_geometry(cloud, grid, &nbrs);
                let ctx = concatenate(Axis(1), &[pooled.view(), geometry.view()]).expect("equal rows");
                let (logits, c) = m.forward_cached(ctx.view(), keep);
                let scores = logits.column(0).mapv(sigmoid);
                if keep {
                    score_cache = Some((nbrs, ctx, c));
                }
                Some(scores)
            }
            None => None,
        };

        let (semantic_logits, semantic_cache) = self.semantic.forward_cached(features.view(), keep);

        let cache = keep.then(|| ForwardCache {
            input,
            point_cache,
            point_out,
            argmax,
            fuse_input,
            category: head_caches,
            score: score_cache,
            semantic: semantic_cache,
        });
        Ok(ForwardOutputs { point_features: features, category, cube_scores, semantic_logits, cache })
    }

    /// Parameter gradients for the given output gradients.
    pub fn backward(&self, outputs: &ForwardOutputs<T>, grads: &OutputGrads<T>) -> Result<ParamGrads<T>> {
        let cache = outputs.cache.as_ref().ok_or(Error::MissingCache)?;
        let mut g = self.zeros_like();
        let mut d_features = self.head_backward(outputs, cache, grads, &mut g)?;
        relu_backward_inplace(&mut d_features, &outputs.point_features);
        let d_fuse_in = self.fuse.backward(cache.fuse_input.view(), d_features.view(), &mut g.fuse);
        let width = cache.point_out.ncols();
        let mut d_point = d_fuse_in.slice(s![.., ..width]).to_owned();
        let d_pooled = d_fuse_in.slice(s![.., width..]).sum_axis(Axis(0));
        for (c, &i) in cache.argmax.iter().enumerate() {
            d_point[[i, c]] += d_pooled[c];
        }
        self.point_mlp.backward(cache.input.view(), &cache.point_cache, &cache.point_out, d_point, &mut g.point_mlp);
        Ok(g)
    }

    /// Gradient with respect to the fused point features `F_l`.
    pub fn feature_gradient(&self, outputs: &ForwardOutputs<T>, grads: &OutputGrads<T>) -> Result<Array2<T>> {
        let cache = outputs.cache.as_ref().ok_or(Error::MissingCache)?;
        self.head_backward(outputs, cache, grads, &mut self.zeros_like())
    }

    fn head_backward(
        &self,
        outputs: &ForwardOutputs<T>,
        cache: &ForwardCache<T>,
        grads: &OutputGrads<T>,
        g: &mut ParamGrads<T>,
    ) -> Result<Array2<T>> {
        let features = &outputs.point_features;
        let mut d_features: Array2<T> = Array2::zeros(features.raw_dim());

        let sigmoid_grad = |d: &Array2<T>, p: &Array2<T>| -> Array2<T> {
            let mut z = d.clone();
            z.zip_mut_with(p, |dz, &pv| *dz *= pv * (T::one() - pv));
            z
        };
        match (&self.category, &outputs.category, &grads.category, &mut g.category) {
            (CategoryHead::Flatten(m), CategoryOutput::Flatten(p), CategoryOutput::Flatten(d), CategoryHead::Flatten(gm)) => {
                let dz = sigmoid_grad(d, p);
                d_features += &m.backward(features.view(), &cache.category[0].mlp, p, dz, gm);
            }
            (CategoryHead::Project(ms), CategoryOutput::Project(ps), CategoryOutput::Project(ds), CategoryHead::Project(gms)) => {
                for a in 0..3 {
                    let dz = sigmoid_grad(&ds[a], &ps[a]);
                    d_features += &ms[a].backward(features.view(), &cache.category[a].mlp, &ps[a], dz, &mut gms[a]);
                }
            }
            (
                CategoryHead::Embedding(m),
                CategoryOutput::Embedding(e),
                CategoryOutput::Embedding(d),
                CategoryHead::Embedding(gm),
            ) => {
                d_features += &m.backward(features.view(), &cache.category[0].mlp, e, d.clone(), gm);
            }
            _ => return Err(Error::Config("output gradients do not match the model head".into())),
        }

        if let (Some(m), Some((nbrs, ctx, mc)), Some(scores), Some(ds), Some(gm)) = (
            &self.score,
            &cache.score,
            &outputs.cube_scores,
            &grads.cube_scores,
            g.score.as_mut(),
        ) {
            let dz: Array1<T> = ds.iter().zip(scores).map(|(&d, &p)| d * p * (T::one() - p)).collect();
            let out = scores.clone().insert_axis(Axis(1));
            let d_ctx = m.backward(ctx.view(), mc, &out, dz.insert_axis(Axis(1)), gm);
            let inv = T::one() / T::of_usize(nbrs.k);
            let width = features.ncols();
            for j in 0..nbrs.cube_count() {
                let d_row = d_ctx.slice(s![j, ..width]);
                for &i in nbrs.of_cube(j) {
                    let mut target = d_features.row_mut(i);
                    target.scaled_add(inv, &d_row);
                }
            }
        }

        d_features += &self.semantic.backward(
            features.view(),
            &cache.semantic,
            &outputs.semantic_logits,
            grads.semantic_logits.clone(),
            &mut g.semantic,
        );

        Ok(d_features)
    }

    /// Output memory of the instance head in scalars: `N_p n_s^3` for flatten,
    /// `3 N_p n_s` for project.
    pub fn category_output_len(&self, n_points: usize) -> usize {
        match self.config.head {
            HeadKind::Flatten => n_points * self.config.n_s.pow(3),
            HeadKind::Project => 3 * n_points * self.config.n_s,
            HeadKind::Discriminative => n_points * self.config.embedding_dim,
        }
    }
}

/// Borrowed category output for decoders that accept injected targets.
pub fn view_rows<T>(m: &Array2<T>) -> ArrayView2<'_, T> {
    m.view()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn small_config(head: HeadKind) -> ModelConfig {
        ModelConfig {
            head,
            n_s: 4,
            point_widths: vec![3, 8, 8],
            latent_width: 8,
            head_width: 6,
            context_k: 5,
            ..ModelConfig::default()
        }
    }

    fn cloud() -> PointCloud<f64> {
        generate_scene(&SceneSpec {
            total_points: Some(40),
            instance_count_range: (2, 3),
            min_centroid_separation: 0.1,
            rng_seed: 3,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn zero(params: &mut ModelParams<f64>) {
        for t in params.tensors_mut() {
            t.fill(0.0);
        }
    }

    #[test]
    fn zero_weights_give_half_probabilities() {
        let grid = CubeGrid::new(4).unwrap();
        for head in [HeadKind::Flatten, HeadKind::Project] {
            let mut p = ModelParams::init(&small_config(head)).unwrap();
            zero(&mut p);
            let out = p.forward(&cloud(), &grid).unwrap();
            let probs = out.category.point_embeddings();
            assert!(probs.iter().all(|&v| v == 0.5));
            assert!(out.cube_scores.unwrap().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn output_shapes() {
        let grid = CubeGrid::new(4).unwrap();
        let c = cloud();
        let p = ModelParams::<f64>::init(&small_config(HeadKind::Flatten)).unwrap();
        let out = p.forward(&c, &grid).unwrap();
        assert_eq!(out.point_features.dim(), (40, 8));
        assert_eq!(out.category.len(), 40 * 64);
        assert_eq!(out.cube_scores.as_ref().unwrap().len(), 64);
        assert_eq!(out.semantic_logits.dim(), (40, 2));
        let p = ModelParams::<f64>::init(&small_config(HeadKind::Project)).unwrap();
        let out = p.forward(&c, &grid).unwrap();
        assert_eq!(out.category.len(), 3 * 40 * 4);
        assert_eq!(p.category_output_len(40), out.category.len());
        let p = ModelParams::<f64>::init(&small_config(HeadKind::Discriminative)).unwrap();
        let out = p.forward(&c, &grid).unwrap();
        assert!(out.cube_scores.is_none());
        assert_eq!(out.category.len(), 40 * 8);
    }

    #[test]
    fn grid_mismatch_is_a_configuration_error() {
        let p = ModelParams::<f64>::init(&small_config(HeadKind::Flatten)).unwrap();
        let err = p.forward(&cloud(), &CubeGrid::new(5).unwrap()).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn backward_requires_cache() {
        let grid = CubeGrid::new(4).unwrap();
        let p = ModelParams::<f64>::init(&small_config(HeadKind::Flatten)).unwrap();
        let out = p.forward_inference(&cloud(), &grid).unwrap();
        let grads = OutputGrads::zeros_like(&out);
        assert!(matches!(p.backward(&out, &grads), Err(Error::MissingCache)));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let grid = CubeGrid::new(4).unwrap();
        for head in [HeadKind::Flatten, HeadKind::Project, HeadKind::Discriminative] {
            let p = ModelParams::<f64>::init(&small_config(head)).unwrap();
            let out = p.forward(&cloud(), &grid).unwrap();
            let g = p.backward(&out, &OutputGrads::zeros_like(&out)).unwrap();
            assert!(g.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn tensor_views_agree() {
        let mut p = ModelParams::<f32>::init(&small_config(HeadKind::Project)).unwrap();
        let lens: Vec<usize> = p.tensors().iter().map(|t| t.data.len()).collect();
        let lens_mut: Vec<usize> = p.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(lens, lens_mut);
        assert!(p.tensors().iter().all(|t| t.shape.iter().product::<usize>() == t.data.len()));
    }
}
