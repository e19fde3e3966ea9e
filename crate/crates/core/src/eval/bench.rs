use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alloc::measure_peak;
use crate::error::{Error, Result};
use crate::grid::{CubeGrid, Paradigm};
use crate::infer::{decode, InferConfig};
use crate::model::ModelParams;
use crate::scalar::Real;
use crate::scene::PointCloud;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_points: usize,
    pub n_s: usize,
    pub repeats: usize,
    /// Median forward plus decode time per scene.
    pub flatten_ms: f64,
    pub project_ms: f64,
    /// `flatten_ms / project_ms`.
    pub ratio: f64,
    /// Peak bytes allocated by one forward plus decode, when the counting allocator is installed.
    pub flatten_peak_bytes: Option<usize>,
    pub project_peak_bytes: Option<usize>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_one<T: Real>(
    params: &ModelParams<T>,
    clouds: &[PointCloud<T>],
    repeats: usize,
    cfg: &InferConfig,
) -> Result<(f64, Option<usize>)> {
    let grid = CubeGrid::new(params.config.n_s)?;
    let run = |cloud: &PointCloud<T>| -> Result<usize> {
        let out = params.forward_inference(cloud, &grid)?;
        Ok(decode(&out, cfg)?.len())
    };
    let (warm, peak) = measure_peak(|| run(&clouds[0]));
    warm?;
    let mut times = Vec::with_capacity(repeats * clouds.len());
    for _ in 0..repeats {
        for cloud in clouds {
            let t0 = Instant::now();
            std::hint::black_box(run(cloud)?);
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok((median(times), peak))
}

/// Median per-scene latency of forward plus decode for a flatten and a project
/// model over the same clouds. One untimed warm-up pass measures peak memory.
pub fn latency_bench<T: Real>(
    flatten: &ModelParams<T>,
    project: &ModelParams<T>,
    clouds: &[PointCloud<T>],
    repeats: usize,
    cfg: &InferConfig,
) -> Result<LatencyReport> {
    if clouds.is_empty() || repeats == 0 {
        return Err(Error::Empty("benchmark needs clouds and at least one repeat".into()));
    }
    if flatten.config.head.paradigm() != Some(Paradigm::Flatten)
        || project.config.head.paradigm() != Some(Paradigm::Project)
    {
        return Err(Error::Config("benchmark needs one flatten and one project model".into()));
    }
    if flatten.config.n_s != project.config.n_s {
        return Err(Error::Config("benchmarked models use different grids".into()));
    }
    let (flatten_ms, flatten_peak_bytes) = time_one(flatten, clouds, repeats, cfg)?;
    let (project_ms, project_peak_bytes) = time_one(project, clouds, repeats, cfg)?;
    Ok(LatencyReport {
        n_points: clouds[0].len(),
        n_s: flatten.config.n_s,
        repeats,
        flatten_ms,
        project_ms,
        ratio: flatten_ms / project_ms,
        flatten_peak_bytes,
        project_peak_bytes,
    })
}
