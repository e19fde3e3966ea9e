//! Decoding network outputs into instances.
//!
//! The category heads decode without clustering: every cube whose score passes
//! the threshold proposes the points classified into it, proposals go through
//! mask NMS, and each survivor takes the majority semantic class of its
//! points. The embedding head of the baseline is decoded with mean-shift.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CubeGrid, TargetSet};
use crate::model::{CategoryOutput, ForwardOutputs};
use crate::scalar::Real;

/// How a project-paradigm point is admitted to a cube's mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectBinarize {
    /// Each of the three axis probabilities must reach the threshold.
    #[default]
    PerAxis,
    /// The product of the three must reach the threshold.
    Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub mask_binarize: f64,
    pub nms_iou: f64,
    /// Cap on the predictions returned after NMS.
    pub max_predictions: Option<usize>,
    /// Cap on the cubes decoded before NMS, highest scores first.
    pub pre_nms_top_k: Option<usize>,
    pub project_binarize: ProjectBinarize,
    /// Mean-shift bandwidth for the embedding head.
    pub bandwidth: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            mask_binarize: 0.5,
            nms_iou: 0.3,
            max_predictions: None,
            pre_nms_top_k: None,
            project_binarize: ProjectBinarize::PerAxis,
            bandwidth: 0.5,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("mask_binarize", self.mask_binarize),
            ("nms_iou", self.nms_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::Config(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        Ok(())
    }
}

/// One decoded instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    /// Sorted indices of the member points.
    pub points: Vec<usize>,
    pub score: f64,
    /// Proposing cube; `None` for clustered instances.
    pub cube_index: Option<usize>,
    pub semantic_class: usize,
}

impl InstancePrediction {
    pub fn mask(&self, n_points: usize) -> Vec<bool> {
        let mut m = vec![false; n_points];
        for &i in &self.points {
            m[i] = true;
        }
        m
    }
}

/// Intersection over union of two sorted index sets.
pub fn mask_iou(a: &[usize], b: &[usize]) -> f64 {
    let inter = intersection_len(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub(crate) fn intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Descending score, ties by lower position.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Greedy mask NMS over sorted index sets. Visits masks by descending score
/// (ties: lower position first) and keeps a mask when its IoU with every kept
/// mask is at most `iou_threshold`. Returns kept positions in visiting order.
pub fn mask_nms(masks: &[Vec<usize>], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(masks.len(), scores.len(), "masks and scores differ in length");
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.iter().all(|&k| mask_iou(&masks[i], &masks[k]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Most frequent argmax class over the given points; ties go to the lower class.
pub fn majority_class<T: Real>(semantic_logits: ArrayView2<T>, points: &[usize]) -> usize {
    let mut counts = vec![0usize; semantic_logits.ncols()];
    for &i in points {
        counts[argmax(semantic_logits.row(i))] += 1;
    }
    argmax_usize(&counts)
}

fn argmax<T: Real>(row: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

fn argmax_usize(v: &[usize]) -> usize {
    let mut best = 0;
    for (c, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = c;
        }
    }
    best
}

/// Cubes passing the score threshold, in ascending cube order, cut to the
/// `pre_nms_top_k` best if set.
pub(crate) fn candidate_cubes<T: Real>(cube_scores: ArrayView1<T>, cfg: &InferConfig) -> Vec<usize> {
    let t = cfg.score_threshold;
    let mut cubes: Vec<usize> =
        cube_scores.iter().enumerate().filter(|(_, &s)| s.to_f64_lossy() >= t).map(|(j, _)| j).collect();
    if let Some(k) = cfg.pre_nms_top_k {
        if cubes.len() > k {
            let scores: Vec<f64> = cubes.iter().map(|&j| cube_scores[j].to_f64_lossy()).collect();
            let mut keep: Vec<usize> = score_order(&scores).into_iter().take(k).map(|p| cubes[p]).collect();
            keep.sort_unstable();
            cubes = keep;
        }
    }
    cubes
}

pub(crate) fn finish<T: Real>(
    proposals: Vec<(usize, Vec<usize>)>,
    cube_scores: ArrayView1<T>,
    semantic_logits: ArrayView2<T>,
    cfg: &InferConfig,
) -> Vec<InstancePrediction> {
    let (cubes, masks): (Vec<usize>, Vec<Vec<usize>>) = proposals.into_iter().filter(|(_, m)| !m.is_empty()).unzip();
    let scores: Vec<f64> = cubes.iter().map(|&j| cube_scores[j].to_f64_lossy()).collect();
    let mut kept = mask_nms(&masks, &scores, cfg.nms_iou);
    if let Some(cap) = cfg.max_predictions {
        kept.truncate(cap);
    }
    kept.into_iter()
        .map(|p| InstancePrediction {
            semantic_class: majority_class(semantic_logits, &masks[p]),
            points: masks[p].clone(),
            score: scores[p],
            cube_index: Some(cubes[p]),
        })
        .collect()
}

fn check_rows<T>(what: &str, m: &ArrayView2<T>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Config(format!("{what} has shape {:?}, expected ({rows}, {cols})", m.dim())));
    }
    Ok(())
}

/// Flatten decoding: column `j` of `f`, binarized, is the mask proposed by cube `j`.
pub fn decode_flatten<T: Real>(
    f: ArrayView2<T>,
    cube_scores: ArrayView1<T>,
    semantic_logits: ArrayView2<T>,
    cfg: &InferConfig,
) -> Result<Vec<InstancePrediction>> {
    let n = f.nrows();
    check_rows("flatten output", &f, n, cube_scores.len())?;
    check_rows("semantic logits", &semantic_logits, n, semantic_logits.ncols())?;
    let b = T::of(cfg.mask_binarize);
    let proposals = candidate_cubes(cube_scores, cfg)
        .into_iter()
        .map(|j| (j, f.column(j).iter().enumerate().filter(|(_, &v)| v >= b).map(|(i, _)| i).collect()))
        .collect();
    Ok(finish(proposals, cube_scores, semantic_logits, cfg))
}

/// Project decoding: the mask of cube `(ix, iy, iz)` combines columns `ix`,
/// `iy`, `iz` of the three axis outputs. Only passing cubes are visited.
pub fn decode_project<T: Real>(
    f: [ArrayView2<T>; 3],
    cube_scores: ArrayView1<T>,
    semantic_logits: ArrayView2<T>,
    cfg: &InferConfig,
) -> Result<Vec<InstancePrediction>> {
    let n = f[0].nrows();
    let n_s = f[0].ncols();
    for m in &f {
        check_rows("project output", m, n, n_s)?;
    }
    if cube_scores.len() != n_s.pow(3) {
        return Err(Error::Config(format!("{} cube scores for n_s = {n_s}", cube_scores.len())));
    }
    check_rows("semantic logits", &semantic_logits, n, semantic_logits.ncols())?;
    let grid = CubeGrid::new(n_s)?;
    let b = T::of(cfg.mask_binarize);
    let proposals = candidate_cubes(cube_scores, cfg)
        .into_iter()
        .map(|j| {
            let [ix, iy, iz] = grid.unflatten_index(j).expect("cube in range");
            let (cx, cy, cz) = (f[0].column(ix), f[1].column(iy), f[2].column(iz));
            let points = (0..n)
                .filter(|&i| match cfg.project_binarize {
                    ProjectBinarize::PerAxis => cx[i] >= b && cy[i] >= b && cz[i] >= b,
                    ProjectBinarize::Product => cx[i] * cy[i] * cz[i] >= b,
                })
                .collect();
            (j, points)
        })
        .collect();
    Ok(finish(proposals, cube_scores, semantic_logits, cfg))
}

/// Decodes whatever head produced `outputs`.
pub fn decode<T: Real>(outputs: &ForwardOutputs<T>, cfg: &InferConfig) -> Result<Vec<InstancePrediction>> {
    let sem = outputs.semantic_logits.view();
    match (&outputs.category, &outputs.cube_scores) {
        (CategoryOutput::Flatten(f), Some(s)) => decode_flatten(f.view(), s.view(), sem, cfg),
        (CategoryOutput::Project(f), Some(s)) => decode_project(f.each_ref().map(|m| m.view()), s.view(), sem, cfg),
        (CategoryOutput::Embedding(e), _) => {
            let labels = mean_shift(e.view(), cfg.bandwidth)?;
            Ok(clusters_to_predictions(&labels, sem))
        }
        _ => Err(Error::Config("category output without cube scores".into())),
    }
}

/// One prediction per cluster, score 1, largest cluster first.
pub fn clusters_to_predictions<T: Real>(labels: &[i32], semantic_logits: ArrayView2<T>) -> Vec<InstancePrediction> {
    let k = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            members[l as usize].push(i);
        }
    }
    members.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    members
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|points| InstancePrediction {
            semantic_class: majority_class(semantic_logits, &points),
            points,
            score: 1.0,
            cube_index: None,
        })
        .collect()
}

/// Instance id per point: the position of the highest-scoring prediction
/// containing it (ties: earlier prediction), or -1.
pub fn partition_points(predictions: &[InstancePrediction], n_points: usize) -> Vec<i32> {
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let mut ids = vec![-1; n_points];
    for p in score_order(&scores) {
        for &i in &predictions[p].points {
            if i < n_points && ids[i] < 0 {
                ids[i] = p as i32;
            }
        }
    }
    ids
}

pub const MEAN_SHIFT_TOL: f64 = 1e-4;
pub const MEAN_SHIFT_MAX_ITER: usize = 300;

/// Flat-kernel mean-shift seeded at every point. Modes closer than
/// `bandwidth / 2` merge, each point joins its nearest mode, and labels are
/// numbered by first appearance.
pub fn mean_shift<T: Real>(embeddings: ArrayView2<T>, bandwidth: f64) -> Result<Vec<i32>> {
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let n = embeddings.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let x: Array2<f64> = embeddings.mapv(|v| v.to_f64_lossy());
    let bw2 = bandwidth * bandwidth;
    let dist2 = |a: ArrayView1<f64>, b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();

    let mut modes: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for seed in x.outer_iter() {
        let mut c = seed.to_vec();
        let mut support = 0;
        for _ in 0..MEAN_SHIFT_MAX_ITER {
            let mut sum = vec![0.0; c.len()];
            let mut count = 0usize;
            for row in x.outer_iter() {
                if dist2(row, &c) <= bw2 {
                    for (s, v) in sum.iter_mut().zip(row) {
                        *s += v;
                    }
                    count += 1;
                }
            }
            if count == 0 {
                break;
            }
            sum.iter_mut().for_each(|s| *s /= count as f64);
            let shift = sum.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            c = sum;
            support = count;
            if shift < MEAN_SHIFT_TOL {
                break;
            }
        }
        modes.push((c, support));
    }
    // Strongest modes first; coordinates break ties so the order does not depend
    // on the point order.
    modes.sort_by(|a, b| {
        b.1.cmp(&a.1).then_with(|| {
            a.0.iter()
                .zip(&b.0)
                .map(|(p, q)| p.partial_cmp(q).unwrap_or(Ordering::Equal))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    let merge2 = bw2 / 4.0;
    let mut centers: Vec<Vec<f64>> = Vec::new();
    for (m, _) in modes {
        let near = centers.iter().any(|c| c.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < merge2);
        if !near {
            centers.push(m);
        }
    }
    let raw: Vec<i32> = x
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d = dist2(row, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best as i32
        })
        .collect();
    Ok(crate::scene::canonicalize(&raw))
}

/// Outputs that reproduce the ground truth: target columns as probabilities,
/// the score target as cube scores and one-hot semantic logits.
pub struct OracleOutputs<T> {
    pub category: CategoryOutput<T>,
    pub cube_scores: ndarray::Array1<T>,
    pub semantic_logits: Array2<T>,
}

impl<T: Real> OracleOutputs<T> {
    pub fn from_targets(targets: &TargetSet, semantic_labels: &[usize], classes: usize) -> Self {
        let category = match targets.paradigm {
            crate::grid::Paradigm::Flatten => CategoryOutput::Flatten(targets.dense_flatten()),
            crate::grid::Paradigm::Project => CategoryOutput::Project(targets.dense_project()),
        };
        let mut semantic_logits = Array2::zeros((semantic_labels.len(), classes));
        for (i, &c) in semantic_labels.iter().enumerate() {
            semantic_logits[[i, c]] = T::one();
        }
        Self { category, cube_scores: targets.score_target_array(), semantic_logits }
    }

    pub fn decode(&self, cfg: &InferConfig) -> Result<Vec<InstancePrediction>> {
        let (s, sem) = (self.cube_scores.view(), self.semantic_logits.view());
        match &self.category {
            CategoryOutput::Flatten(f) => decode_flatten(f.view(), s, sem, cfg),
            CategoryOutput::Project(f) => decode_project(f.each_ref().map(|m| m.view()), s, sem, cfg),
            CategoryOutput::Embedding(_) => Err(Error::Config("no oracle for embeddings".into())),
        }
    }
}

pub const PREDICTIONS_HEADER: &str = "cube_index,score,semantic_class,mask_rle";

/// Runs of set points as `start:length` pairs joined by `;`.
pub fn encode_rle(points: &[usize]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < points.len() {
        let start = points[i];
        let mut len = 1;
        while i + len < points.len() && points[i + len] == start + len {
            len += 1;
        }
        if !out.is_empty() {
            out.push(';');
        }
        let _ = write!(out, "{start}:{len}");
        i += len;
    }
    out
}

pub fn decode_rle(text: &str) -> Result<Vec<usize>> {
    let mut points = Vec::new();
    for run in text.split(';').filter(|r| !r.is_empty()) {
        let (a, b) = run.split_once(':').ok_or_else(|| Error::Config(format!("bad run {run:?}")))?;
        let start: usize = a.parse().map_err(|_| Error::Config(format!("bad run start {a:?}")))?;
        let len: usize = b.parse().map_err(|_| Error::Config(format!("bad run length {b:?}")))?;
        points.extend(start..start + len);
    }
    Ok(points)
}

pub fn predictions_csv(predictions: &[InstancePrediction]) -> String {
    let mut out = format!("{PREDICTIONS_HEADER}\n");
    for p in predictions {
        let cube = p.cube_index.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{cube},{},{},{}", p.score, p.semantic_class, encode_rle(&p.points));
    }
    out
}

pub fn parse_predictions_csv(text: &str) -> Result<Vec<InstancePrediction>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTIONS_HEADER => {}
        _ => return Err(Error::Parse { line: 1, message: format!("expected header {PREDICTIONS_HEADER}") }),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let err = |m: String| Error::Parse { line: line_no, message: m };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(err(format!("row {line_no}: expected 4 fields")));
        }
        let cube_index = if fields[0].is_empty() {
            None
        } else {
            Some(fields[0].parse().map_err(|_| err(format!("row {line_no}: bad cube index")))?)
        };
        out.push(InstancePrediction {
            cube_index,
            score: fields[1].parse().map_err(|_| err(format!("row {line_no}: bad score")))?,
            semantic_class: fields[2].parse().map_err(|_| err(format!("row {line_no}: bad class")))?,
            points: decode_rle(fields[3]).map_err(|e| err(format!("row {line_no}: {e}")))?,
        });
    }
    Ok(out)
}

pub fn partition_csv(ids: &[i32]) -> String {
    let mut out = String::from("point_index,instance_id\n");
    for (i, id) in ids.iter().enumerate() {
        let _ = writeln!(out, "{i},{id}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn pred(points: Vec<usize>, score: f64) -> InstancePrediction {
        InstancePrediction { points, score, cube_index: Some(0), semantic_class: 0 }
    }

    #[test]
    fn nms_examples() {
        let disjoint = vec![vec![0, 1], vec![2, 3], vec![4]];
        assert_eq!(mask_nms(&disjoint, &[0.5, 0.9, 0.7], 0.3), vec![1, 2, 0]);
        // A has 5 points, B is a 3-point subset: IoU 0.6.
        let nested = vec![vec![0, 1, 2, 3, 4], vec![0, 1, 2]];
        assert_eq!(mask_iou(&nested[0], &nested[1]), 0.6);
        assert_eq!(mask_nms(&nested, &[0.5, 0.9], 0.3), vec![1]);
        let same = vec![vec![1, 2], vec![1, 2]];
        assert_eq!(mask_nms(&same, &[0.9, 0.8], 0.3), vec![0]);
        assert_eq!(mask_nms(&same, &[0.8, 0.8], 0.3), vec![0]);
    }

    #[test]
    fn flatten_decoding() {
        let f = array![[0.9, 0.1, 0.9], [0.9, 0.2, 0.9], [0.1, 0.8, 0.2]];
        let sem = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let cfg = InferConfig::default();
        let preds = decode_flatten(f.view(), array![0.9, 0.8, 0.8].view(), sem.view(), &cfg).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].points, vec![0, 1]);
        assert_eq!(preds[0].cube_index, Some(0));
        assert_eq!(preds[1].points, vec![2]);
        assert_eq!(preds[1].semantic_class, 1);
        let none = decode_flatten(f.view(), array![0.1, 0.2, 0.29].view(), sem.view(), &cfg).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn project_per_axis_rule() {
        let n_s = 2;
        let fx = array![[0.9, 0.0], [0.9, 0.0]];
        let fy = array![[0.9, 0.0], [0.9, 0.0]];
        let fz = array![[0.9, 0.0], [0.4, 0.0]];
        let mut scores = Array1::zeros(n_s * n_s * n_s);
        scores[0] = 0.9;
        scores[1] = 0.9;
        let sem = Array2::<f64>::zeros((2, 2));
        let cfg = InferConfig::default();
        let preds = decode_project([fx.view(), fy.view(), fz.view()], scores.view(), sem.view(), &cfg).unwrap();
        // Cube 1 uses the all-zero z column 1 and yields nothing.
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].points, vec![0]);
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_points(&[], 3), vec![-1, -1, -1]);
        let preds = vec![pred(vec![0, 1], 0.6), pred(vec![1, 2], 0.8)];
        assert_eq!(partition_points(&preds, 4), vec![0, 1, 1, -1]);
    }

    #[test]
    fn mean_shift_examples() {
        let e = array![[0.0, 0.0], [0.05, 0.0], [5.0, 5.0], [5.0, 5.05], [0.0, 0.04]];
        assert_eq!(mean_shift(e.view(), 0.5).unwrap(), vec![0, 0, 1, 1, 0]);
        let same = Array2::<f64>::ones((6, 3));
        assert_eq!(mean_shift(same.view(), 0.2).unwrap(), vec![0; 6]);
        assert!(mean_shift(same.view(), 0.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let preds = vec![pred(vec![0, 1, 2, 7, 9, 10], 0.75), pred(vec![], 0.5)];
        assert_eq!(encode_rle(&preds[0].points), "0:3;7:1;9:2");
        let back = parse_predictions_csv(&predictions_csv(&preds)).unwrap();
        assert_eq!(back, preds);
        assert_eq!(partition_csv(&[0, -1]), "point_index,instance_id\n0,0\n1,-1\n");
    }
}
