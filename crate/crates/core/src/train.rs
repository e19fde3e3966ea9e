//! Adam training loop over lists of scenes.
//!
//! A step draws `batch_size` scenes from the current epoch's shuffled order,
//! averages their gradients and applies one Adam update. The shuffle of epoch
//! `e` is a pure function of `(seed, e)`, so the step counter is the only
//! position a resumed run needs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fill_from_records, records, Checkpoint, OptimizerRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate_clouds, MetricsReport};
use crate::infer::{decode, InferConfig};
use crate::grid::{build_targets, CubeGrid, TargetSet};
use crate::loss::{log_csv, total_loss_with_grads, LossBreakdown, LossConfig, SceneTargets};
use crate::model::{cube_neighbors, HeadKind, ModelConfig, ModelParams, Neighborhoods};
use crate::scalar::Real;
use crate::scene::{PointCloud, CUBE_SYMMETRIES};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Layer sizes of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkShape {
    pub point_widths: Vec<usize>,
    pub latent_width: usize,
    pub head_width: usize,
    pub semantic_classes: usize,
    pub context_k: usize,
    pub embedding_dim: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            point_widths: m.point_widths,
            latent_width: m.latent_width,
            head_width: m.head_width,
            semantic_classes: m.semantic_classes,
            context_k: m.context_k,
            embedding_dim: m.embedding_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    /// Steps between learning-rate decays.
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `flatten`, `project`, or `discriminative` for the embed-and-cluster arm.
    pub paradigm: HeadKind,
    pub n_s: usize,
    pub center_scale: f64,
    /// Stops early once this many steps have run.
    pub max_steps: Option<usize>,
    /// Presents each batch scene under a random symmetry of the unit cube.
    pub augment: bool,
    pub network: NetworkShape,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            decay_factor: 0.5,
            decay_every: 2000,
            epochs: 100,
            batch_size: 4,
            seed: 0,
            paradigm: HeadKind::Flatten,
            n_s: 20,
            center_scale: 0.2,
            max_steps: None,
            augment: false,
            network: NetworkShape::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return bad("batch_size and decay_every must be at least 1".into());
        }
        if !(self.center_scale > 0.0 && self.center_scale <= 1.0) {
            return bad(format!("center_scale must be in (0, 1], got {}", self.center_scale));
        }
        self.loss.discriminative.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let n = &self.network;
        ModelConfig {
            head: self.paradigm,
            n_s: self.n_s,
            point_widths: n.point_widths.clone(),
            latent_width: n.latent_width,
            head_width: n.head_width,
            semantic_classes: n.semantic_classes,
            context_k: n.context_k,
            embedding_dim: n.embedding_dim,
            init_seed: self.seed,
        }
    }

    /// `lr0 * decay_factor^floor(step / decay_every)` for the 0-based step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((step / self.decay_every) as i32)
    }

    pub fn steps_per_epoch(&self, scenes: usize) -> usize {
        scenes.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, scenes: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(scenes);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let c1 = T::one() - T::of(ADAM_BETA1.powi(self.t as i32));
        let c2 = T::one() - T::of(ADAM_BETA2.powi(self.t as i32));
        let (lr, eps) = (T::of(lr), T::of(ADAM_EPS));
        let g = grads.tensors();
        for (((p, m), v), g) in params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut()).zip(g) {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Per-step mean loss of a run; step numbers start at 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<(usize, LossBreakdown)>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        log_csv(&self.rows)
    }

    pub fn last(&self) -> Option<LossBreakdown> {
        self.rows.last().map(|r| r.1)
    }
}

struct PreparedScene<T> {
    cloud: PointCloud<T>,
    targets: Option<TargetSet>,
    neighbors: Option<Neighborhoods>,
}

fn prepare_scene<T: Real>(config: &TrainConfig, grid: &CubeGrid, cloud: &PointCloud<T>) -> Result<PreparedScene<T>> {
    let targets = match config.paradigm.paradigm() {
        Some(p) => Some(build_targets(cloud, grid, p, T::of(config.center_scale))?),
        None => None,
    };
    let neighbors = match config.paradigm {
        HeadKind::Discriminative => None,
        _ => Some(cube_neighbors(cloud, grid, config.network.context_k)?),
    };
    Ok(PreparedScene { cloud: cloud.clone(), targets, neighbors })
}

/// Resumable training state.
pub struct Trainer<T: Real> {
    config: TrainConfig,
    grid: CubeGrid,
    params: ModelParams<T>,
    adam: Adam<T>,
    step: usize,
    scenes: Vec<PreparedScene<T>>,
    pool: Option<rayon::ThreadPool>,
    log: TrainingLog,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: &TrainConfig, dataset: &[PointCloud<T>]) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config.model_config())?;
        Self::with_state(config, dataset, params, None, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: &TrainConfig, dataset: &[PointCloud<T>], checkpoint: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if let Some(stored) = &checkpoint.training {
            // The step budget may grow between runs.
            let budgetless = |mut v: serde_json::Value| {
                if let Some(m) = v.as_object_mut() {
                    m.remove("max_steps");
                }
                v
            };
            if budgetless(stored.clone()) != budgetless(serde_json::to_value(config)?) {
                return Err(Error::Config("checkpoint was written with a different training configuration".into()));
            }
        }
        let params = checkpoint.params::<T>(Some(&config.model_config()))?;
        let opt = checkpoint
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        let mut adam = Adam::new(&params);
        fill_from_records(&mut adam.m, &opt.first_moment)?;
        fill_from_records(&mut adam.v, &opt.second_moment)?;
        adam.t = opt.step;
        Self::with_state(config, dataset, params, Some(adam), opt.step as usize)
    }

    fn with_state(
        config: &TrainConfig,
        dataset: &[PointCloud<T>],
        params: ModelParams<T>,
        adam: Option<Adam<T>>,
        step: usize,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("training needs at least one scene".into()));
        }
        let grid = CubeGrid::new(config.n_s)?;
        let scenes = dataset.iter().map(|cloud| prepare_scene(config, &grid, cloud)).collect::<Result<Vec<_>>>()?;
        let adam = adam.unwrap_or_else(|| Adam::new(&params));
        Ok(Self { config: config.clone(), grid, params, adam, step, scenes, pool: None, log: TrainingLog::default() })
    }

    /// Computes per-scene gradients on `threads` workers. The reduction order is
    /// fixed, so results do not depend on the thread count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))?,
            )
        } else {
            None
        };
        Ok(self)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.scenes.len())
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn grid(&self) -> &CubeGrid {
        &self.grid
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    /// Scene indices of the batch for a 0-based step.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.scenes.len();
        let per_epoch = self.config.steps_per_epoch(n);
        let epoch = step / per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let start = (step % per_epoch) * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(n)].to_vec()
    }

    fn prepare(&self, cloud: &PointCloud<T>) -> Result<PreparedScene<T>> {
        prepare_scene(&self.config, &self.grid, cloud)
    }

    fn scene_gradient(&self, scene: &PreparedScene<T>) -> Result<(LossBreakdown, ModelParams<T>)> {
        let out = match &scene.neighbors {
            Some(nbrs) => self.params.forward_with_neighbors(&scene.cloud, &self.grid, nbrs)?,
            None => self.params.forward(&scene.cloud, &self.grid)?,
        };
        let truth = SceneTargets {
            targets: scene.targets.as_ref(),
            semantic_labels: scene.cloud.semantic_labels(),
            instance_ids: scene.cloud.instance_ids(),
        };
        let (loss, out_grads) = total_loss_with_grads(&out, &truth, &self.config.loss)?;
        let grads = self.params.backward(&out, &out_grads)?;
        Ok((loss, grads))
    }

    fn gradient_at(&self, index: usize, symmetry: Option<usize>) -> Result<(LossBreakdown, ModelParams<T>)> {
        match symmetry {
            None | Some(0) => self.scene_gradient(&self.scenes[index]),
            Some(s) => self.scene_gradient(&self.prepare(&self.scenes[index].cloud.with_symmetry(s)?)?),
        }
    }

    /// Symmetry applied to each batch slot of a step, when augmenting.
    pub fn batch_symmetries(&self, step: usize, slots: usize) -> Vec<Option<usize>> {
        if !self.config.augment {
            return vec![None; slots];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream((1u64 << 40) + step as u64);
        (0..slots).map(|_| Some(rng.random_range(0..CUBE_SYMMETRIES))).collect()
    }

    /// Mean loss and mean gradient over the given scenes.
    pub fn batch_gradient(&self, indices: &[usize]) -> Result<(LossBreakdown, ModelParams<T>)> {
        self.batch_gradient_with(indices, &vec![None; indices.len()])
    }

    fn batch_gradient_with(
        &self,
        indices: &[usize],
        symmetries: &[Option<usize>],
    ) -> Result<(LossBreakdown, ModelParams<T>)> {
        let work: Vec<(usize, Option<usize>)> = indices.iter().copied().zip(symmetries.iter().copied()).collect();
        let per_scene: Vec<Result<(LossBreakdown, ModelParams<T>)>> = match &self.pool {
            Some(pool) => pool.install(|| work.par_iter().map(|&(i, s)| self.gradient_at(i, s)).collect()),
            None => work.iter().map(|&(i, s)| self.gradient_at(i, s)).collect(),
        };
        let per_scene = per_scene.into_iter().collect::<Result<Vec<_>>>()?;
        let mut mean = self.params.zeros_like();
        let inv = T::one() / T::of_usize(per_scene.len());
        for (_, g) in &per_scene {
            mean.add_scaled(g, inv);
        }
        let losses: Vec<LossBreakdown> = per_scene.iter().map(|(l, _)| *l).collect();
        Ok((LossBreakdown::mean(&losses), mean))
    }

    /// Runs one optimization step and returns its mean loss.
    pub fn step_once(&mut self) -> Result<LossBreakdown> {
        let step = self.step;
        let indices = self.batch_indices(step);
        let (loss, grads) = self.batch_gradient_with(&indices, &self.batch_symmetries(step, indices.len()))?;
        if let Some(component) = loss.non_finite_component() {
            return Err(Error::NonFinite { step: step + 1, component });
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite { step: step + 1, component: "gradient" });
        }
        let lr = self.config.learning_rate(step);
        self.adam.update(&mut self.params, &grads, lr);
        self.step += 1;
        self.log.rows.push((self.step, loss));
        Ok(loss)
    }

    /// Trains until the configured number of steps.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps())
    }

    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.step < step.min(self.total_steps()) {
            self.step_once()?;
        }
        Ok(())
    }

    /// Parameters, optimizer state and configuration.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::from_params(&self.params);
        c.optimizer = Some(OptimizerRecord {
            step: self.adam.t,
            first_moment: records(&self.adam.m),
            second_moment: records(&self.adam.v),
        });
        c.training = Some(serde_json::to_value(&self.config)?);
        Ok(c)
    }

    pub fn into_parts(self) -> (ModelParams<T>, TrainingLog) {
        (self.params, self.log)
    }
}

/// Trains from scratch and returns the final parameters and the per-step log.
pub fn train<T: Real>(dataset: &[PointCloud<T>], config: &TrainConfig) -> Result<(ModelParams<T>, TrainingLog)> {
    let mut t = Trainer::new(config, dataset)?;
    t.run()?;
    Ok(t.into_parts())
}

/// Inference and metrics on a held-out split. Parameters are not modified.
pub fn evaluate_epoch<T: Real>(
    params: &ModelParams<T>,
    dataset: &[PointCloud<T>],
    grid: &CubeGrid,
    cfg: &InferConfig,
) -> Result<MetricsReport> {
    let predictions = dataset
        .iter()
        .map(|cloud| decode(&params.forward_inference(cloud, grid)?, cfg))
        .collect::<Result<Vec<_>>>()?;
    evaluate_clouds(dataset, &predictions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, SceneSpec};

    fn tiny_config(paradigm: HeadKind) -> TrainConfig {
        TrainConfig {
            paradigm,
            n_s: 4,
            batch_size: 2,
            epochs: 3,
            network: NetworkShape {
                point_widths: vec![3, 16, 16],
                latent_width: 16,
                head_width: 16,
                context_k: 8,
                ..NetworkShape::default()
            },
            ..TrainConfig::default()
        }
    }

    fn data() -> Vec<PointCloud<f64>> {
        let spec = SceneSpec { total_points: Some(60), instance_count_range: (2, 3), min_centroid_separation: 0.15, ..SceneSpec::default() };
        generate_dataset(&spec, 5).unwrap()
    }

    #[test]
    fn schedule_arithmetic() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate(0), 0.001);
        assert_eq!(c.learning_rate(1999), 0.001);
        assert_eq!(c.learning_rate(2 * c.decay_every), 0.00025);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { lr0: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { decay_factor: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn epochs_cover_every_scene_once() {
        let t = Trainer::new(&tiny_config(HeadKind::Flatten), &data()).unwrap();
        for epoch in 0..2 {
            let mut seen: Vec<usize> = (0..3).flat_map(|b| t.batch_indices(epoch * 3 + b)).collect();
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(t.total_steps(), 9);
    }

    #[test]
    fn batch_gradient_is_mean_of_scene_gradients() {
        let t = Trainer::new(&tiny_config(HeadKind::Project), &data()).unwrap();
        let (_, mean) = t.batch_gradient(&[1, 3]).unwrap();
        let (_, a) = t.batch_gradient(&[1]).unwrap();
        let (_, b) = t.batch_gradient(&[3]).unwrap();
        let mut expected = a.zeros_like();
        expected.add_scaled(&a, 0.5);
        expected.add_scaled(&b, 0.5);
        for (x, y) in mean.tensors().iter().zip(expected.tensors()) {
            for (u, v) in x.data.iter().zip(y.data) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        for paradigm in [HeadKind::Flatten, HeadKind::Discriminative] {
            let cfg = tiny_config(paradigm);
            let mut full = Trainer::new(&cfg, &data()).unwrap();
            full.run().unwrap();
            let mut first = Trainer::new(&cfg, &data()).unwrap();
            first.run_until(4).unwrap();
            let text = first.checkpoint().unwrap().to_json().unwrap();
            let mut second = Trainer::resume(&cfg, &data(), &Checkpoint::from_json(&text).unwrap()).unwrap();
            second.run().unwrap();
            assert_eq!(second.params(), full.params());
            assert_eq!(second.checkpoint().unwrap(), full.checkpoint().unwrap());
        }
    }

    #[test]
    fn threads_do_not_change_results() {
        let cfg = tiny_config(HeadKind::Flatten);
        let mut a = Trainer::new(&cfg, &data()).unwrap();
        let mut b = Trainer::new(&cfg, &data()).unwrap().with_threads(3).unwrap();
        a.run().unwrap();
        b.run().unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn non_finite_loss_names_step_and_component() {
        let cfg = tiny_config(HeadKind::Flatten);
        let mut t = Trainer::new(&cfg, &data()).unwrap();
        t.step_once().unwrap();
        for v in t.params.tensors_mut() {
            v.fill(f64::NAN);
        }
        match t.step_once() {
            Err(Error::NonFinite { step, component }) => {
                assert_eq!(step, 2);
                assert_eq!(component, "l_pcate");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn evaluation_is_pure_and_tolerates_untrained_params() {
        let cfg = tiny_config(HeadKind::Project);
        let params = ModelParams::<f64>::init(&cfg.model_config()).unwrap();
        let before = params.clone();
        let grid = CubeGrid::new(cfg.n_s).unwrap();
        let a = evaluate_epoch(&params, &data(), &grid, &InferConfig::default()).unwrap();
        let b = evaluate_epoch(&params, &data(), &grid, &InferConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(params, before);
        assert!((0.0..=1.0).contains(&a.mprec));
    }
}
