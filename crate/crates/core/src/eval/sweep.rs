use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{prec_rec, GroundTruth};
use crate::error::{Error, Result};
use crate::grid::{build_targets, CubeGrid, Paradigm, TargetSet};
use crate::infer::{candidate_cubes, finish, InferConfig, InstancePrediction};
use crate::scalar::Real;
use crate::scene::PointCloud;

/// Flatten decoding of the ground truth itself, read from the sparse targets.
/// Matches `decode_flatten` on the dense target matrix without building it.
pub fn oracle_predictions(
    targets: &TargetSet,
    semantic_labels: &[usize],
    classes: usize,
    cfg: &InferConfig,
) -> Vec<InstancePrediction> {
    let scores: Array1<f64> = targets.score_target_array();
    let mut logits = Array2::<f64>::zeros((semantic_labels.len(), classes.max(1)));
    for (i, &c) in semantic_labels.iter().enumerate() {
        logits[[i, c]] = 1.0;
    }
    let proposals = candidate_cubes(scores.view(), cfg)
        .into_iter()
        .map(|j| (j, targets.cube_members.get(&j).cloned().unwrap_or_default()))
        .collect();
    finish(proposals, scores.view(), logits.view(), cfg)
}

/// Collision statistics and oracle quality at one grid resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_s: usize,
    pub overlap_rate: f64,
    pub positive_cubes: usize,
    pub overlapped_cubes: usize,
    pub instances: usize,
    pub lost_instances: usize,
    /// Scene-averaged precision of oracle decoding at IoU 0.5.
    pub oracle_mprec: f64,
    /// Scene-averaged recall of oracle decoding at IoU 0.5.
    pub oracle_mrec: f64,
    /// Scene-averaged share of instances keeping at least one cube.
    pub retained_share: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "n_s,overlap_rate,positive_cubes,overlapped_cubes,instances,lost_instances,oracle_mprec,oracle_mrec,retained_share";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n_s,
            self.overlap_rate,
            self.positive_cubes,
            self.overlapped_cubes,
            self.instances,
            self.lost_instances,
            self.oracle_mprec,
            self.oracle_mrec,
            self.retained_share
        )
    }

    pub fn to_csv(rows: &[SweepRow]) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }
}

/// Overlap rate and oracle decoding quality for every grid size in `sizes`.
pub fn overlap_sweep<T: Real>(
    clouds: &[PointCloud<T>],
    sizes: &[usize],
    scale: T,
    cfg: &InferConfig,
) -> Result<Vec<SweepRow>> {
    if clouds.is_empty() {
        return Err(Error::Empty("overlap sweep needs at least one cloud".into()));
    }
    let classes = clouds.iter().flat_map(|c| c.semantic_labels().iter().copied()).max().unwrap_or(0) + 1;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n_s in sizes {
        let grid = CubeGrid::new(n_s)?;
        let mut row = SweepRow {
            n_s,
            overlap_rate: 0.0,
            positive_cubes: 0,
            overlapped_cubes: 0,
            instances: 0,
            lost_instances: 0,
            oracle_mprec: 0.0,
            oracle_mrec: 0.0,
            retained_share: 0.0,
        };
        for cloud in clouds {
            let t = build_targets(cloud, &grid, Paradigm::Flatten, scale)?;
            row.positive_cubes += t.positive_cubes.len();
            row.overlapped_cubes += t.collisions.len();
            row.instances += t.instance_count;
            row.lost_instances += t.lost_instances.len();
            row.retained_share += 1.0 - t.lost_instances.len() as f64 / t.instance_count as f64;
            let gt = GroundTruth::new(cloud.instance_ids(), cloud.semantic_labels())?;
            let preds = oracle_predictions(&t, cloud.semantic_labels(), classes, cfg);
            let pr = prec_rec(&gt, &preds, 0.5)?;
            row.oracle_mprec += pr.precision;
            row.oracle_mrec += pr.recall;
        }
        let n = clouds.len() as f64;
        row.oracle_mprec /= n;
        row.oracle_mrec /= n;
        row.retained_share /= n;
        row.overlap_rate =
            if row.positive_cubes == 0 { 0.0 } else { row.overlapped_cubes as f64 / row.positive_cubes as f64 };
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::OracleOutputs;
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn sparse_oracle_matches_dense_decoding() {
        let spec = SceneSpec { total_points: Some(300), rng_seed: 5, ..SceneSpec::default() };
        let cloud = generate_scene::<f64>(&spec).unwrap();
        let grid = CubeGrid::new(6).unwrap();
        let t = build_targets(&cloud, &grid, Paradigm::Flatten, 0.2).unwrap();
        let cfg = InferConfig::default();
        let dense = OracleOutputs::<f64>::from_targets(&t, cloud.semantic_labels(), 2).decode(&cfg).unwrap();
        assert_eq!(oracle_predictions(&t, cloud.semantic_labels(), 2, &cfg), dense);
    }

    #[test]
    fn sweep_rows() {
        let spec = SceneSpec { total_points: Some(300), ..SceneSpec::default() };
        let clouds = crate::scene::generate_dataset::<f64>(&spec, 3).unwrap();
        let rows = overlap_sweep(&clouds, &[4, 12], 0.2, &InferConfig::default()).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.oracle_mprec, 1.0);
            assert!((r.oracle_mrec - r.retained_share).abs() < 1e-12);
        }
        assert!(SweepRow::to_csv(&rows).starts_with("n_s,overlap_rate"));
    }
}
