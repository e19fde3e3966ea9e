//! Training objectives and their analytic gradients.
//!
//! Gradients are taken with respect to the network outputs that the model's
//! backward pass consumes: probabilities for the category and score heads,
//! logits for the semantic head, raw vectors for the embedding head.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array, Array1, Array2, ArrayView, ArrayView1, ArrayView2, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CategoryTargets, Paradigm, TargetSet};
use crate::model::{CategoryOutput, ForwardOutputs, OutputGrads};
use crate::scalar::Real;

pub const DICE_EPS: f64 = 1e-8;
pub const BCE_CLAMP: f64 = 1e-7;

/// `1 - 2 sum(F G) / (sum(F^2) + sum(G^2) + eps)`.
///
/// Panics if the shapes differ.
pub fn dice<T: Real, D: Dimension>(f: ArrayView<T, D>, g: ArrayView<T, D>) -> T {
    let (inter, denom) = dice_terms(&f, &g);
    T::one() - (inter + inter) / denom
}

fn dice_terms<T: Real, D: Dimension>(f: &ArrayView<T, D>, g: &ArrayView<T, D>) -> (T, T) {
    let mut inter = T::zero();
    let mut denom = T::of(DICE_EPS);
    Zip::from(f).and(g).for_each(|&a, &b| {
        inter += a * b;
        denom += a * a + b * b;
    });
    (inter, denom)
}

/// Gradient of [`dice`] with respect to `f`.
pub fn dice_grad<T: Real, D: Dimension>(f: ArrayView<T, D>, g: ArrayView<T, D>) -> Array<T, D> {
    let (inter, denom) = dice_terms(&f, &g);
    let two = T::of(2.0);
    let a = -two / denom;
    let b = two * two * inter / (denom * denom);
    Zip::from(&f).and(&g).map_collect(|&fv, &gv| a * gv + b * fv)
}

/// Dice of one column of `f` against the binary column whose ones are `members`,
/// returned with the gradient coefficients `(a, b)` such that
/// `d dice / d f_i = a * g_i + b * f_i`.
fn column_dice<T: Real>(col: ArrayView1<T>, members: &[usize]) -> (T, T, T) {
    let mut inter = T::zero();
    for &i in members {
        inter += col[i];
    }
    let denom = col.iter().fold(T::of(DICE_EPS), |acc, &v| acc + v * v) + T::of_usize(members.len());
    let two = T::of(2.0);
    let loss = T::one() - two * inter / denom;
    (loss, -two / denom, two * two * inter / (denom * denom))
}

fn require(targets: &TargetSet, paradigm: Paradigm) -> Result<()> {
    if targets.paradigm != paradigm {
        return Err(Error::Config(format!(
            "targets were built for {:?}, loss expects {:?}",
            targets.paradigm, paradigm
        )));
    }
    Ok(())
}

fn flatten_columns<'a>(targets: &'a TargetSet) -> Result<&'a BTreeMap<usize, Vec<usize>>> {
    require(targets, Paradigm::Flatten)?;
    if targets.positive_cubes.is_empty() {
        return Err(Error::NoPositiveCubes);
    }
    Ok(&targets.cube_members)
}

fn check_shape<T>(m: &ArrayView2<T>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::Config(format!("{what} has shape {:?}, expected ({rows}, {cols})", m.dim())));
    }
    Ok(())
}

/// Mean dice over the positive cube columns only. Negative columns do not
/// contribute.
pub fn pcate_flatten<T: Real>(f: ArrayView2<T>, targets: &TargetSet) -> Result<T> {
    Ok(pcate_flatten_impl(f, targets, false)?.0)
}

/// Gradient of [`pcate_flatten`]; zero on every negative column.
pub fn pcate_flatten_grad<T: Real>(f: ArrayView2<T>, targets: &TargetSet) -> Result<Array2<T>> {
    Ok(pcate_flatten_impl(f, targets, true)?.1.expect("requested"))
}

fn pcate_flatten_impl<T: Real>(
    f: ArrayView2<T>,
    targets: &TargetSet,
    want_grad: bool,
) -> Result<(T, Option<Array2<T>>)> {
    let columns = flatten_columns(targets)?;
    check_shape(&f, targets.n_points, targets.cube_count(), "flatten output")?;
    let inv = T::one() / T::of_usize(columns.len());
    let mut grad = want_grad.then(|| Array2::zeros(f.raw_dim()));
    let mut total = T::zero();
    for (&j, members) in columns {
        let col = f.column(j);
        let (loss, a, b) = column_dice(col, members);
        total += loss;
        if let Some(g) = grad.as_mut() {
            let mut gc = g.column_mut(j);
            Zip::from(&mut gc).and(&col).for_each(|d, &v| *d = b * v * inv);
            for &i in members {
                gc[i] += a * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

/// How the project loss reduces each axis matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectDice {
    /// One dice over the whole `N_p x n_s` matrix per axis.
    #[default]
    Matrix,
    /// Mean dice over the axis columns that hold at least one positive.
    PositiveColumns,
}

/// Sum over the three axes of the dice between predicted and target matrices.
pub fn pcate_project<T: Real>(f: [ArrayView2<T>; 3], targets: &TargetSet, mode: ProjectDice) -> Result<T> {
    Ok(pcate_project_impl(f, targets, mode, false)?.0)
}

pub fn pcate_project_grad<T: Real>(
    f: [ArrayView2<T>; 3],
    targets: &TargetSet,
    mode: ProjectDice,
) -> Result<[Array2<T>; 3]> {
    let grads = pcate_project_impl(f, targets, mode, true)?.1;
    Ok(grads.map(|g| g.expect("requested")))
}

fn pcate_project_impl<T: Real>(
    f: [ArrayView2<T>; 3],
    targets: &TargetSet,
    mode: ProjectDice,
    want_grad: bool,
) -> Result<(T, [Option<Array2<T>>; 3])> {
    require(targets, Paradigm::Project)?;
    let CategoryTargets::Project(rows) = &targets.targets else {
        return Err(Error::Config("project targets missing".into()));
    };
    let mut total = T::zero();
    let mut grads: [Option<Array2<T>>; 3] = [None, None, None];
    for a in 0..3 {
        check_shape(&f[a], targets.n_points, targets.n_s, "project output")?;
        match mode {
            ProjectDice::Matrix => {
                let g = axis_matrix(&rows[a], targets.n_s);
                total += dice(f[a], g.view());
                if want_grad {
                    grads[a] = Some(dice_grad(f[a], g.view()));
                }
            }
            ProjectDice::PositiveColumns => {
                let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, row) in rows[a].iter().enumerate() {
                    for &k in row {
                        members.entry(k).or_default().push(i);
                    }
                }
                if members.is_empty() {
                    return Err(Error::NoPositiveCubes);
                }
                let inv = T::one() / T::of_usize(members.len());
                let mut grad = want_grad.then(|| Array2::zeros(f[a].raw_dim()));
                for (&k, m) in &members {
                    let col = f[a].column(k);
                    let (loss, ca, cb) = column_dice(col, m);
                    total += loss * inv;
                    if let Some(g) = grad.as_mut() {
                        let mut gc = g.column_mut(k);
                        Zip::from(&mut gc).and(&col).for_each(|d, &v| *d = cb * v * inv);
                        for &i in m {
                            gc[i] += ca * inv;
                        }
                    }
                }
                grads[a] = grad;
            }
        }
    }
    Ok((total, grads))
}

fn axis_matrix<T: Real>(rows: &[Vec<usize>], n_s: usize) -> Array2<T> {
    let mut g = Array2::zeros((rows.len(), n_s));
    for (i, row) in rows.iter().enumerate() {
        for &k in row {
            g[[i, k]] = T::one();
        }
    }
    g
}

fn clamp_prob<T: Real>(s: T) -> T {
    let c = T::of(BCE_CLAMP);
    s.max(c).min(T::one() - c)
}

/// Mean binary cross-entropy over cubes with predictions clamped to
/// `[1e-7, 1 - 1e-7]`.
///
/// Panics if the lengths differ.
pub fn score_bce<T: Real>(scores: ArrayView1<T>, target: ArrayView1<T>) -> T {
    assert_eq!(scores.len(), target.len(), "score and target lengths differ");
    let n = T::of_usize(scores.len().max(1));
    let sum = Zip::from(&scores).and(&target).fold(T::zero(), |acc, &s, &t| {
        let s = clamp_prob(s);
        acc - (t * s.ln() + (T::one() - t) * (T::one() - s).ln())
    });
    sum / n
}

/// Gradient of [`score_bce`]; zero where the clamp is active.
pub fn score_bce_grad<T: Real>(scores: ArrayView1<T>, target: ArrayView1<T>) -> Array1<T> {
    assert_eq!(scores.len(), target.len(), "score and target lengths differ");
    let n = T::of_usize(scores.len().max(1));
    Zip::from(&scores).and(&target).map_collect(|&s, &t| {
        if s != clamp_prob(s) {
            return T::zero();
        }
        (-t / s + (T::one() - t) / (T::one() - s)) / n
    })
}

fn log_softmax_row<T: Real>(row: ArrayView1<T>) -> (T, T) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln() + m;
    (m, lse)
}

/// Mean softmax cross-entropy over the points with `include[i]`; zero when no
/// point is included.
pub fn semantic_ce<T: Real>(logits: ArrayView2<T>, labels: &[usize], include: &[bool]) -> Result<T> {
    check_semantic(&logits, labels, include)?;
    let mut sum = T::zero();
    let mut n = 0usize;
    for (i, row) in logits.outer_iter().enumerate() {
        if include[i] {
            let (_, lse) = log_softmax_row(row);
            sum += lse - row[labels[i]];
            n += 1;
        }
    }
    Ok(if n == 0 { T::zero() } else { sum / T::of_usize(n) })
}

pub fn semantic_ce_grad<T: Real>(logits: ArrayView2<T>, labels: &[usize], include: &[bool]) -> Result<Array2<T>> {
    check_semantic(&logits, labels, include)?;
    let n = include.iter().filter(|&&b| b).count();
    let mut grad = Array2::zeros(logits.raw_dim());
    if n == 0 {
        return Ok(grad);
    }
    let inv = T::one() / T::of_usize(n);
    for (i, row) in logits.outer_iter().enumerate() {
        if !include[i] {
            continue;
        }
        let (_, lse) = log_softmax_row(row);
        let mut g = grad.row_mut(i);
        for (c, &v) in row.iter().enumerate() {
            g[c] = (v - lse).exp() * inv;
        }
        g[labels[i]] -= inv;
    }
    Ok(grad)
}

fn check_semantic<T>(logits: &ArrayView2<T>, labels: &[usize], include: &[bool]) -> Result<()> {
    if logits.nrows() != labels.len() || labels.len() != include.len() {
        return Err(Error::Config("semantic logits, labels and mask differ in length".into()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(i, &l)| include[*i] && l >= logits.ncols()) {
        return Err(Error::Config(format!("semantic label {l} of point {i} out of range 0..{}", logits.ncols())));
    }
    Ok(())
}

/// Embedding distance used by the discriminative loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    L2,
    L1,
}

impl Distance {
    fn eval<T: Real>(self, a: ArrayView1<T>, b: ArrayView1<T>) -> T {
        match self {
            Distance::L2 => Zip::from(&a).and(&b).fold(T::zero(), |s, &x, &y| s + (x - y) * (x - y)).sqrt(),
            Distance::L1 => Zip::from(&a).and(&b).fold(T::zero(), |s, &x, &y| s + (x - y).abs()),
        }
    }

    /// Gradient of the distance with respect to `a`; zero at `a = b`.
    fn grad<T: Real>(self, a: ArrayView1<T>, b: ArrayView1<T>, d: T) -> Array1<T> {
        match self {
            Distance::L2 if d > T::zero() => Zip::from(&a).and(&b).map_collect(|&x, &y| (x - y) / d),
            Distance::L2 => Array1::zeros(a.len()),
            Distance::L1 => Zip::from(&a).and(&b).map_collect(|&x, &y| {
                if x > y {
                    T::one()
                } else if x < y {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminativeConfig {
    /// Pull margin.
    pub delta_v: f64,
    /// Push margin.
    pub delta_d: f64,
    pub distance: Distance,
}

impl Default for DiscriminativeConfig {
    fn default() -> Self {
        Self { delta_v: 0.5, delta_d: 1.5, distance: Distance::L2 }
    }
}

impl DiscriminativeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v > 0.0 && self.delta_d > self.delta_v) {
            return Err(Error::Config(format!(
                "discriminative margins need delta_d > delta_v > 0, got {} and {}",
                self.delta_v, self.delta_d
            )));
        }
        Ok(())
    }
}

/// Pull and push terms of the discriminative loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discriminative<T> {
    pub pull: T,
    pub push: T,
}

struct Groups<T> {
    members: Vec<Vec<usize>>,
    means: Array2<T>,
}

fn groups<T: Real>(e: &ArrayView2<T>, ids: &[i32]) -> Result<Groups<T>> {
    if e.nrows() != ids.len() {
        return Err(Error::Config("embedding rows and instance ids differ in length".into()));
    }
    let mut by_id: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        if id >= 0 {
            by_id.entry(id).or_default().push(i);
        }
    }
    if by_id.is_empty() {
        return Err(Error::Empty("discriminative loss needs at least one instance".into()));
    }
    let members: Vec<Vec<usize>> = by_id.into_values().collect();
    let mut means = Array2::zeros((members.len(), e.ncols()));
    for (k, m) in members.iter().enumerate() {
        let mut row = means.row_mut(k);
        for &i in m {
            row += &e.row(i);
        }
        row /= T::of_usize(m.len());
    }
    Ok(Groups { members, means })
}

/// Pull points toward their instance mean within `delta_v`; push instance means
/// at least `2 delta_d` apart. Background points (id -1) are ignored. With a
/// single instance the push term is 0.
pub fn discriminative_loss<T: Real>(
    e: ArrayView2<T>,
    ids: &[i32],
    cfg: &DiscriminativeConfig,
) -> Result<Discriminative<T>> {
    Ok(discriminative_impl(e, ids, cfg, false)?.0)
}

/// Gradients of the pull and push terms with respect to the embeddings.
pub fn discriminative_grad<T: Real>(
    e: ArrayView2<T>,
    ids: &[i32],
    cfg: &DiscriminativeConfig,
) -> Result<Discriminative<Array2<T>>> {
    Ok(discriminative_impl(e, ids, cfg, true)?.1.expect("requested"))
}

fn discriminative_impl<T: Real>(
    e: ArrayView2<T>,
    ids: &[i32],
    cfg: &DiscriminativeConfig,
    want_grad: bool,
) -> Result<(Discriminative<T>, Option<Discriminative<Array2<T>>>)> {
    cfg.validate()?;
    let Groups { members, means } = groups(&e, ids)?;
    let k_count = members.len();
    let kk = T::of_usize(k_count);
    let dv = T::of(cfg.delta_v);
    let dd = T::of(cfg.delta_d);
    let two = T::of(2.0);

    let mut pull = T::zero();
    let mut g_pull = want_grad.then(|| Array2::zeros(e.raw_dim()));
    for (k, m) in members.iter().enumerate() {
        let nk = T::of_usize(m.len());
        let mu = means.row(k);
        let mut g_mu: Array1<T> = Array1::zeros(e.ncols());
        for &i in m {
            let d = cfg.distance.eval(e.row(i), mu);
            let h = (d - dv).max(T::zero());
            pull += h * h / (nk * kk);
            if let Some(g) = g_pull.as_mut() {
                if h > T::zero() {
                    let dir = cfg.distance.grad(e.row(i), mu, d) * (two * h / (nk * kk));
                    g.row_mut(i).scaled_add(T::one(), &dir);
                    g_mu -= &dir;
                }
            }
        }
        if let Some(g) = g_pull.as_mut() {
            for &i in m {
                g.row_mut(i).scaled_add(T::one() / nk, &g_mu);
            }
        }
    }

    let mut push = T::zero();
    let mut g_push = want_grad.then(|| Array2::zeros(e.raw_dim()));
    if k_count >= 2 {
        let norm = T::one() / (kk * (kk - T::one()));
        let mut g_means: Array2<T> = Array2::zeros(means.raw_dim());
        for a in 0..k_count {
            for b in 0..k_count {
                if a == b {
                    continue;
                }
                let d = cfg.distance.eval(means.row(a), means.row(b));
                let h = (two * dd - d).max(T::zero());
                push += h * h * norm;
                if want_grad && h > T::zero() {
                    // d/dmu_a of h^2 for the ordered pair (a, b); the pair (b, a)
                    // contributes the same amount when b is visited as `a`.
                    let dir = cfg.distance.grad(means.row(a), means.row(b), d) * (-two * h * norm);
                    let mut ga = g_means.row_mut(a);
                    ga.scaled_add(two, &dir);
                }
            }
        }
        if let Some(g) = g_push.as_mut() {
            for (k, m) in members.iter().enumerate() {
                let share = g_means.row(k).mapv(|v| v / T::of_usize(m.len()));
                for &i in m {
                    g.row_mut(i).scaled_add(T::one(), &share);
                }
            }
        }
    }
    let grads = match (g_pull, g_push) {
        (Some(pull), Some(push)) => Some(Discriminative { pull, push }),
        _ => None,
    };
    Ok((Discriminative { pull, push }, grads))
}

/// Per-term multipliers of the total loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub pcate: f64,
    pub score: f64,
    pub sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pcate: 1.0, score: 1.0, sem: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub project_dice: ProjectDice,
    pub discriminative: DiscriminativeConfig,
}

/// Loss components of one scene or the mean over a batch. For the
/// discriminative head `l_pcate` holds pull + push and `l_score` is 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pcate: f64,
    pub l_score: f64,
    pub l_sem: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(l_pcate: f64, l_score: f64, l_sem: f64, weights: &LossWeights) -> Self {
        Self {
            l_pcate,
            l_score,
            l_sem,
            total: weights.pcate * l_pcate + weights.score * l_score + weights.sem * l_sem,
        }
    }

    /// First non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [("l_pcate", self.l_pcate), ("l_score", self.l_score), ("l_sem", self.l_sem), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.l_pcate += b.l_pcate;
            m.l_score += b.l_score;
            m.l_sem += b.l_sem;
            m.total += b.total;
        }
        m.l_pcate /= n;
        m.l_score /= n;
        m.l_sem /= n;
        m.total /= n;
        m
    }
}

pub const LOG_HEADER: &str = "step,l_pcate,l_score,l_sem,total";

/// Training-log rows in `step,l_pcate,l_score,l_sem,total` layout.
pub fn log_csv(rows: &[(usize, LossBreakdown)]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for (step, b) in rows {
        let _ = writeln!(out, "{step},{},{},{},{}", b.l_pcate, b.l_score, b.l_sem, b.total);
    }
    out
}

/// Ground truth a scene's loss is computed against.
pub struct SceneTargets<'a> {
    /// Category targets; `None` for the discriminative head.
    pub targets: Option<&'a TargetSet>,
    pub semantic_labels: &'a [usize],
    pub instance_ids: &'a [i32],
}

fn labeled_mask(ids: &[i32]) -> Vec<bool> {
    ids.iter().map(|&id| id >= 0).collect()
}

/// Loss components of one forward pass.
pub fn total_loss<T: Real>(outputs: &ForwardOutputs<T>, truth: &SceneTargets, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(total_loss_impl(outputs, truth, cfg, false)?.0)
}

/// Loss components and the gradient of the weighted total with respect to
/// the forward outputs.
pub fn total_loss_with_grads<T: Real>(
    outputs: &ForwardOutputs<T>,
    truth: &SceneTargets,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    let (b, g) = total_loss_impl(outputs, truth, cfg, true)?;
    Ok((b, g.expect("requested")))
}

fn total_loss_impl<T: Real>(
    outputs: &ForwardOutputs<T>,
    truth: &SceneTargets,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<OutputGrads<T>>)> {
    let w = &cfg.weights;
    let include = labeled_mask(truth.instance_ids);
    let l_sem = semantic_ce(outputs.semantic_logits.view(), truth.semantic_labels, &include)?;
    let mut grads = want_grad.then(|| OutputGrads::zeros_like(outputs));
    if let Some(g) = grads.as_mut() {
        g.semantic_logits = semantic_ce_grad(outputs.semantic_logits.view(), truth.semantic_labels, &include)?
            * T::of(w.sem);
    }

    let (l_pcate, l_score) = match (&outputs.category, truth.targets) {
        (CategoryOutput::Embedding(e), _) => {
            let d = discriminative_loss(e.view(), truth.instance_ids, &cfg.discriminative)?;
            if let Some(g) = grads.as_mut() {
                let dg = discriminative_grad(e.view(), truth.instance_ids, &cfg.discriminative)?;
                g.category = CategoryOutput::Embedding((dg.pull + dg.push) * T::of(w.pcate));
            }
            (d.pull + d.push, T::zero())
        }
        (category, Some(targets)) => {
            let l_pcate = match category {
                CategoryOutput::Flatten(f) => {
                    let (l, g) = pcate_flatten_impl(f.view(), targets, want_grad)?;
                    if let (Some(gr), Some(g)) = (grads.as_mut(), g) {
                        gr.category = CategoryOutput::Flatten(g * T::of(w.pcate));
                    }
                    l
                }
                CategoryOutput::Project(f) => {
                    let views = f.each_ref().map(|m| m.view());
                    let (l, g) = pcate_project_impl(views, targets, cfg.project_dice, want_grad)?;
                    if let Some(gr) = grads.as_mut() {
                        gr.category = CategoryOutput::Project(g.map(|m| m.expect("requested") * T::of(w.pcate)));
                    }
                    l
                }
                CategoryOutput::Embedding(_) => unreachable!("handled above"),
            };
            let scores = outputs
                .cube_scores
                .as_ref()
                .ok_or_else(|| Error::Config("category head without cube scores".into()))?;
            let t = targets.score_target_array::<T>();
            if scores.len() != t.len() {
                return Err(Error::Config("cube score length does not match the targets".into()));
            }
            let l_score = score_bce(scores.view(), t.view());
            if let Some(g) = grads.as_mut() {
                g.cube_scores = Some(score_bce_grad(scores.view(), t.view()) * T::of(w.score));
            }
            (l_pcate, l_score)
        }
        (_, None) => return Err(Error::Config("category head needs targets".into())),
    };
    let b = LossBreakdown::from_components(
        l_pcate.to_f64_lossy(),
        l_score.to_f64_lossy(),
        l_sem.to_f64_lossy(),
        w,
    );
    Ok((b, grads))
}
