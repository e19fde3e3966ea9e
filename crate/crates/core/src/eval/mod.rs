//! Instance metrics, embedding-distance overlap, grid sweeps and latency.
//!
//! Coverage (mCov, mWCov) is measured on the point partition, so every point
//! counts for at most one prediction. Precision, recall and AP consume the raw
//! NMS survivors. Scene-level metrics are averaged over scenes; AP pools the
//! ranked predictions of all scenes per class and averages over classes.

mod bench;
mod distance;
pub mod svg;
mod sweep;

pub use bench::{latency_bench, LatencyReport};
pub use distance::{distance_overlap, model_distance_overlap, sample_indices, DistanceOverlapReport};
pub use sweep::{oracle_predictions, overlap_sweep, SweepRow};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{mask_iou as iou, partition_points, InstancePrediction};

/// IoU thresholds reported by [`MetricsReport`]: 0.25, then 0.50 to 0.95 in steps of 0.05.
pub fn ap_thresholds() -> Vec<f64> {
    let mut t = vec![0.25];
    t.extend((0..10).map(|k| (50 + 5 * k) as f64 / 100.0));
    t
}

/// Ground-truth instances of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Sorted member points per instance, by ascending id.
    pub instances: Vec<Vec<usize>>,
    /// Majority semantic label per instance (ties: lower class).
    pub classes: Vec<usize>,
    pub n_points: usize,
}

impl GroundTruth {
    pub fn new(instance_ids: &[i32], semantic_labels: &[usize]) -> Result<Self> {
        if instance_ids.len() != semantic_labels.len() {
            return Err(Error::Config("instance ids and semantic labels differ in length".into()));
        }
        let mut by_id: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in instance_ids.iter().enumerate() {
            if id >= 0 {
                by_id.entry(id).or_default().push(i);
            }
        }
        let instances: Vec<Vec<usize>> = by_id.into_values().collect();
        let classes = instances
            .iter()
            .map(|m| {
                let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
                for &i in m {
                    *counts.entry(semantic_labels[i]).or_default() += 1;
                }
                counts.iter().fold((0, 0), |best, (&c, &n)| if n > best.1 { (c, n) } else { best }).0
            })
            .collect();
        Ok(Self { instances, classes, n_points: instance_ids.len() })
    }

    /// Class-agnostic ground truth from instance ids alone.
    pub fn from_ids(instance_ids: &[i32]) -> Self {
        Self::new(instance_ids, &vec![0; instance_ids.len()]).expect("lengths match")
    }

    fn require_instances(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::Empty("scene has no ground-truth instances".into()));
        }
        Ok(())
    }
}

/// Mean best IoU over ground-truth instances, unweighted and weighted by
/// instance size.
pub fn coverage_metrics(gt: &GroundTruth, predictions: &[InstancePrediction]) -> Result<(f64, f64)> {
    gt.require_instances()?;
    let total: usize = gt.instances.iter().map(Vec::len).sum();
    let mut cov = 0.0;
    let mut wcov = 0.0;
    for g in &gt.instances {
        let best = predictions.iter().map(|p| iou(g, &p.points)).fold(0.0, f64::max);
        cov += best;
        wcov += best * g.len() as f64 / total as f64;
    }
    Ok((cov / gt.instances.len() as f64, wcov))
}

/// Precision and recall of one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecRec {
    pub precision: f64,
    pub recall: f64,
    /// Set when there were no predictions; precision is then 0.
    pub no_predictions: bool,
}

fn score_order(predictions: &[InstancePrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b].score.partial_cmp(&predictions[a].score).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order
}

/// Greedy one-to-one matching: predictions in descending score order each take
/// the unmatched ground-truth instance of highest IoU (ties: lower index) if
/// that IoU reaches `threshold`. Returns the matched instance per prediction.
pub fn greedy_match(
    gt: &[&Vec<usize>],
    predictions: &[&InstancePrediction],
    threshold: f64,
) -> Vec<Option<usize>> {
    let owned: Vec<InstancePrediction> = predictions.iter().map(|p| (*p).clone()).collect();
    let mut taken = vec![false; gt.len()];
    let mut matched = vec![None; predictions.len()];
    for p in score_order(&owned) {
        let mut best: Option<(usize, f64)> = None;
        for (g, members) in gt.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(members, &predictions[p].points);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matched[p] = Some(g);
        }
    }
    matched
}

/// Class-agnostic precision and recall at the given IoU threshold.
pub fn prec_rec(gt: &GroundTruth, predictions: &[InstancePrediction], threshold: f64) -> Result<PrecRec> {
    gt.require_instances()?;
    let g: Vec<&Vec<usize>> = gt.instances.iter().collect();
    let p: Vec<&InstancePrediction> = predictions.iter().collect();
    let matched = greedy_match(&g, &p, threshold).iter().filter(|m| m.is_some()).count();
    Ok(PrecRec {
        precision: if predictions.is_empty() { 0.0 } else { matched as f64 / predictions.len() as f64 },
        recall: matched as f64 / gt.instances.len() as f64,
        no_predictions: predictions.is_empty(),
    })
}

/// Area under the precision/recall curve with the precision envelope
/// (all-points interpolation). `ranked` holds true-positive flags in rank order.
pub fn ap_from_ranked(ranked: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (k, &hit) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let (r, _) = points[k];
        if r > prev_recall {
            let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    ap
}

/// Ranked detections of one class pooled over scenes.
#[derive(Clone, Debug, Default)]
struct ClassPool {
    detections: Vec<(f64, usize, bool)>,
    n_gt: usize,
}

/// Per-class AP at every threshold, pooling scenes. Classes without ground
/// truth are skipped.
pub fn average_precision(
    scenes: &[(&GroundTruth, &[InstancePrediction])],
    thresholds: &[f64],
) -> Result<(Vec<f64>, BTreeMap<usize, Vec<f64>>)> {
    let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let classes: std::collections::BTreeSet<usize> =
        scenes.iter().flat_map(|(gt, _)| gt.classes.iter().copied()).collect();
    if classes.is_empty() {
        return Err(Error::Empty("no ground-truth instances to score".into()));
    }
    for &c in &classes {
        let mut aps = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let mut pool = ClassPool::default();
            let mut seq = 0;
            for (gt, preds) in scenes {
                let g: Vec<&Vec<usize>> =
                    gt.instances.iter().zip(&gt.classes).filter(|(_, &k)| k == c).map(|(m, _)| m).collect();
                let p: Vec<&InstancePrediction> = preds.iter().filter(|p| p.semantic_class == c).collect();
                pool.n_gt += g.len();
                let matched = greedy_match(&g, &p, t);
                let owned: Vec<InstancePrediction> = p.iter().map(|x| (*x).clone()).collect();
                for i in score_order(&owned) {
                    pool.detections.push((p[i].score, seq, matched[i].is_some()));
                    seq += 1;
                }
            }
            pool.detections.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
            let ranked: Vec<bool> = pool.detections.iter().map(|d| d.2).collect();
            aps.push(ap_from_ranked(&ranked, pool.n_gt));
        }
        per_class.insert(c, aps);
    }
    let mean = (0..thresholds.len())
        .map(|k| per_class.values().map(|v| v[k]).sum::<f64>() / per_class.len() as f64)
        .collect();
    Ok((mean, per_class))
}

/// Disjoint predictions formed by the point partition.
pub fn partition_predictions(predictions: &[InstancePrediction], n_points: usize) -> Vec<InstancePrediction> {
    let ids = partition_points(predictions, n_points);
    let mut members = vec![Vec::new(); predictions.len()];
    for (i, &id) in ids.iter().enumerate() {
        if id >= 0 {
            members[id as usize].push(i);
        }
    }
    predictions
        .iter()
        .zip(members)
        .filter(|(_, m)| !m.is_empty())
        .map(|(p, points)| InstancePrediction { points, ..p.clone() })
        .collect()
}

/// Evaluation of one scene's predictions.
pub struct SceneEval<'a> {
    pub gt: &'a GroundTruth,
    pub predictions: &'a [InstancePrediction],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: usize,
    pub mcov: f64,
    pub mwcov: f64,
    pub mprec: f64,
    pub mrec: f64,
    /// Scenes that produced no prediction.
    pub empty_scenes: usize,
    pub ap_thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    /// Mean AP over 0.50:0.95.
    pub map_avg: f64,
    pub per_class_ap: BTreeMap<usize, Vec<f64>>,
}

impl MetricsReport {
    pub fn compute(scenes: &[SceneEval]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Empty("no scenes to evaluate".into()));
        }
        let (mut mcov, mut mwcov, mut mprec, mut mrec) = (0.0, 0.0, 0.0, 0.0);
        let mut empty = 0;
        for s in scenes {
            let part = partition_predictions(s.predictions, s.gt.n_points);
            let (c, w) = coverage_metrics(s.gt, &part)?;
            let pr = prec_rec(s.gt, s.predictions, 0.5)?;
            mcov += c;
            mwcov += w;
            mprec += pr.precision;
            mrec += pr.recall;
            empty += usize::from(pr.no_predictions);
        }
        let n = scenes.len() as f64;
        let thresholds = ap_thresholds();
        let pairs: Vec<(&GroundTruth, &[InstancePrediction])> = scenes.iter().map(|s| (s.gt, s.predictions)).collect();
        let (ap, per_class_ap) = average_precision(&pairs, &thresholds)?;
        let map_avg = ap[1..].iter().sum::<f64>() / (ap.len() - 1) as f64;
        Ok(Self {
            scenes: scenes.len(),
            mcov: mcov / n,
            mwcov: mwcov / n,
            mprec: mprec / n,
            mrec: mrec / n,
            empty_scenes: empty,
            ap_thresholds: thresholds,
            ap,
            map_avg,
            per_class_ap,
        })
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in [("mcov", self.mcov), ("mwcov", self.mwcov), ("mprec", self.mprec), ("mrec", self.mrec)] {
            let _ = writeln!(out, "{name},{v}");
        }
        for (t, v) in self.ap_thresholds.iter().zip(&self.ap) {
            let _ = writeln!(out, "ap@{t:.2},{v}");
        }
        let _ = writeln!(out, "map_avg,{}", self.map_avg);
        for (c, aps) in &self.per_class_ap {
            for (t, v) in self.ap_thresholds.iter().zip(aps) {
                let _ = writeln!(out, "class{c}_ap@{t:.2},{v}");
            }
        }
        let _ = writeln!(out, "scenes,{}", self.scenes);
        let _ = writeln!(out, "empty_scenes,{}", self.empty_scenes);
        out
    }

    /// `key=value` lines for the command line.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        for line in self.to_csv().lines().skip(1) {
            let (k, v) = line.split_once(',').expect("two columns");
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Metrics of per-scene predictions against labeled clouds.
pub fn evaluate_clouds<T: crate::scalar::Real>(
    clouds: &[crate::scene::PointCloud<T>],
    predictions: &[Vec<InstancePrediction>],
) -> Result<MetricsReport> {
    if clouds.len() != predictions.len() {
        return Err(Error::Config(format!("{} clouds but {} prediction sets", clouds.len(), predictions.len())));
    }
    let gts = clouds
        .iter()
        .map(|c| GroundTruth::new(c.instance_ids(), c.semantic_labels()))
        .collect::<Result<Vec<_>>>()?;
    let scenes: Vec<SceneEval> =
        gts.iter().zip(predictions).map(|(gt, p)| SceneEval { gt, predictions: p }).collect();
    MetricsReport::compute(&scenes)
}
