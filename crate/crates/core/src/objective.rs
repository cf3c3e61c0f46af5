//! Temperature sharpening, cross-view distillation losses, the EMA teacher
//! update and output centering.
//!
//! Two routes compute the same loss: plain `f64` functions over probability
//! vectors (the reference used by tests and metrics) and [`distill_loss`],
//! which records it on a graph for backpropagation into the student.

use serde::{Deserialize, Serialize};

use crate::model::{ModelError, ModelParams};
use crate::tensor::{Graph, NdArray, Scalar, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("momentum {0} outside [0, 1]")]
    InvalidMomentum(f64),
    #[error("vector sums to {0}, expected a probability distribution")]
    NotDistribution(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("direction {0:?} enabled but it has no {1} views")]
    EmptyViews(Direction, &'static str),
    #[error("no loss direction enabled")]
    NoDirections,
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which student view predicts which teacher view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Student local-temporal views predict teacher globals.
    LtToGt,
    /// Student local-spatial views predict teacher globals.
    LsToGt,
    /// Student local-spatial views predict teacher local-temporal views.
    LsToLt,
    /// Student globals predict teacher local-temporal views.
    GtToLt,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::LtToGt, Direction::LsToGt, Direction::LsToLt, Direction::GtToLt];

    fn needs_teacher_lt(self) -> bool {
        matches!(self, Direction::LsToLt | Direction::GtToLt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub directions: Vec<Direction>,
    pub centering: bool,
    pub center_momentum: f64,
    /// EMA momentum at the first and the last step.
    pub ema_momentum: (f64, f64),
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_student: 0.1,
            tau_teacher: 0.04,
            directions: vec![Direction::LtToGt, Direction::LsToGt],
            centering: true,
            center_momentum: 0.9,
            ema_momentum: (0.996, 1.0),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let (ts, tt) = (self.tau_student, self.tau_teacher);
        if !(tt > 0.0 && tt <= ts) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "temperatures need 0 < tau_teacher ({tt}) <= tau_student ({ts})"
            )));
        }
        for m in [self.center_momentum, self.ema_momentum.0, self.ema_momentum.1] {
            if !(0.0..=1.0).contains(&m) {
                return Err(ObjectiveError::InvalidMomentum(m));
            }
        }
        if self.directions.is_empty() {
            return Err(ObjectiveError::NoDirections);
        }
        Ok(())
    }

    pub fn has(&self, d: Direction) -> bool {
        self.directions.contains(&d)
    }

    /// Whether the teacher must also encode the local-temporal views.
    pub fn needs_teacher_lt(&self) -> bool {
        self.directions.iter().any(|d| d.needs_teacher_lt())
    }

    pub fn needs_student(&self, kind: StudentView) -> bool {
        self.directions.iter().any(|d| student_view(*d) == kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentView {
    Global,
    LocalTemporal,
    LocalSpatial,
}

fn student_view(d: Direction) -> StudentView {
    match d {
        Direction::LtToGt => StudentView::LocalTemporal,
        Direction::LsToGt | Direction::LsToLt => StudentView::LocalSpatial,
        Direction::GtToLt => StudentView::Global,
    }
}

/// Per-step loss values. Only the directions that are enabled are nonzero;
/// the two extra directions are omitted from the log when absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    #[serde(rename = "L_gt_lt")]
    pub l_gt_lt: f64,
    #[serde(rename = "L_gt_ls")]
    pub l_gt_ls: f64,
    #[serde(rename = "L_lt_ls", skip_serializing_if = "Option::is_none", default)]
    pub l_lt_ls: Option<f64>,
    #[serde(rename = "L_lt_gt", skip_serializing_if = "Option::is_none", default)]
    pub l_lt_gt: Option<f64>,
    pub total: f64,
    pub teacher_entropy: f64,
}

/// `softmax((f - c) / tau)` with the row maximum subtracted first.
pub fn sharpen(f: &[f64], tau: f64, center: Option<&[f64]>) -> Result<Vec<f64>, ObjectiveError> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::InvalidTemperature(tau));
    }
    let mut z: Vec<f64> = match center {
        Some(c) => {
            if c.len() != f.len() {
                return Err(ObjectiveError::DimMismatch(f.len(), c.len()));
            }
            f.iter().zip(c).map(|(a, b)| (a - b) / tau).collect()
        }
        None => f.iter().map(|a| a / tau).collect(),
    };
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
    Ok(z)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

const LOG_FLOOR: f64 = 1e-12;
const SUM_TOL: f64 = 1e-5;

fn check_distribution(p: &[f64]) -> Result<(), ObjectiveError> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL || p.iter().any(|&x| x < 0.0) {
        return Err(ObjectiveError::NotDistribution(s));
    }
    Ok(())
}

/// `-sum_i target_i * ln(max(online_i, 1e-12))`. The target is a constant.
pub fn cross_view_ce(target: &[f64], online: &[f64]) -> Result<f64, ObjectiveError> {
    if target.len() != online.len() {
        return Err(ObjectiveError::DimMismatch(target.len(), online.len()));
    }
    check_distribution(target)?;
    check_distribution(online)?;
    Ok(-target
        .iter()
        .zip(online)
        .map(|(t, o)| t * o.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

/// Mean cross-entropy over every (teacher, student) pair.
pub fn pairwise_ce(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
    let mut total = 0.0;
    for t in teacher {
        for s in student {
            total += cross_view_ce(t, s)?;
        }
    }
    Ok(total / (teacher.len() * student.len()) as f64)
}

/// Teacher globals as targets for the student's local-temporal views.
pub fn inter_teacher_inter_student(teacher_globals: &[Vec<f64>], student_lt: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
    if teacher_globals.is_empty() {
        return Err(ObjectiveError::EmptyViews(Direction::LtToGt, "teacher global"));
    }
    if student_lt.is_empty() {
        return Err(ObjectiveError::EmptyViews(Direction::LtToGt, "student local-temporal"));
    }
    pairwise_ce(teacher_globals, student_lt)
}

/// Teacher globals as targets for the student's `q` local-spatial views.
/// Pairs are averaged rather than summed so the scale does not grow with `q`.
pub fn inter_teacher_intra_student(teacher_globals: &[Vec<f64>], student_ls: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
    if teacher_globals.is_empty() {
        return Err(ObjectiveError::EmptyViews(Direction::LsToGt, "teacher global"));
    }
    if student_ls.is_empty() {
        return Err(ObjectiveError::EmptyViews(Direction::LsToGt, "student local-spatial"));
    }
    pairwise_ce(teacher_globals, student_ls)
}

/// Sharpened distributions for one training item. Teacher vectors use
/// `tau_teacher` (and the center), student vectors `tau_student`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemForwards {
    pub teacher_gt: Vec<Vec<f64>>,
    pub teacher_lt: Vec<Vec<f64>>,
    pub student_gt: Vec<Vec<f64>>,
    pub student_lt: Vec<Vec<f64>>,
    pub student_ls: Vec<Vec<f64>>,
}

impl ItemForwards {
    fn pair(&self, d: Direction) -> (&[Vec<f64>], &[Vec<f64>], &'static str, &'static str) {
        match d {
            Direction::LtToGt => (&self.teacher_gt, &self.student_lt, "teacher global", "student local-temporal"),
            Direction::LsToGt => (&self.teacher_gt, &self.student_ls, "teacher global", "student local-spatial"),
            Direction::LsToLt => (&self.teacher_lt, &self.student_ls, "teacher local-temporal", "student local-spatial"),
            Direction::GtToLt => (&self.teacher_lt, &self.student_gt, "teacher local-temporal", "student global"),
        }
    }
}

fn check_views(items: &[ItemForwards], d: Direction) -> Result<(), ObjectiveError> {
    for item in items {
        let (t, s, tn, sn) = item.pair(d);
        if t.is_empty() {
            return Err(ObjectiveError::EmptyViews(d, tn));
        }
        if s.is_empty() {
            return Err(ObjectiveError::EmptyViews(d, sn));
        }
    }
    Ok(())
}

/// Every enabled direction averaged over items, summed with unit weights.
pub fn total_loss(items: &[ItemForwards], cfg: &DistillConfig) -> Result<LossTerms, ObjectiveError> {
    if cfg.directions.is_empty() {
        return Err(ObjectiveError::NoDirections);
    }
    let mut terms = LossTerms::default();
    let n = items.len() as f64;
    for d in Direction::ALL {
        if !cfg.has(d) {
            continue;
        }
        check_views(items, d)?;
        let mut value = 0.0;
        for item in items {
            let (t, s, _, _) = item.pair(d);
            value += pairwise_ce(t, s)? / n;
        }
        match d {
            Direction::LtToGt => terms.l_gt_lt = value,
            Direction::LsToGt => terms.l_gt_ls = value,
            Direction::LsToLt => terms.l_lt_ls = Some(value),
            Direction::GtToLt => terms.l_lt_gt = Some(value),
        }
        terms.total += value;
    }
    terms.teacher_entropy = teacher_entropy(items);
    Ok(terms)
}

/// Mean entropy of the teacher's global targets.
pub fn teacher_entropy(items: &[ItemForwards]) -> f64 {
    let all: Vec<f64> = items.iter().flat_map(|i| i.teacher_gt.iter().map(|p| entropy(p))).collect();
    if all.is_empty() {
        0.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    }
}

/// Rows of the packed student feature matrix that belong to one item.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StudentRows {
    pub gt: Vec<usize>,
    pub lt: Vec<usize>,
    pub ls: Vec<usize>,
}

/// Teacher targets for one item (already sharpened).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemTargets {
    pub gt: Vec<Vec<f64>>,
    pub lt: Vec<Vec<f64>>,
}

/// Graph nodes of the distillation loss.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub terms: Vec<(Direction, Var)>,
}

/// Records the loss on `g` for student head outputs `features` (`[R, n]`).
/// Each direction is `-<log_softmax(features / tau_s), W>` where the
/// constant `W` spreads every item's mean target over its student rows with
/// pair and item averaging folded in.
pub fn distill_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    rows: &[StudentRows],
    targets: &[ItemTargets],
    cfg: &DistillConfig,
) -> Result<LossVars, ObjectiveError> {
    if cfg.directions.is_empty() {
        return Err(ObjectiveError::NoDirections);
    }
    if rows.len() != targets.len() {
        return Err(ObjectiveError::DimMismatch(rows.len(), targets.len()));
    }
    let shape = g.value(features).shape().to_vec();
    let (r, n) = (shape[0], shape[1]);
    let scaled = g.scale(features, 1.0 / cfg.tau_student)?;
    let logp = g.log_softmax(scaled)?;
    let items = rows.len() as f64;
    let mut terms = Vec::new();
    for d in Direction::ALL {
        if !cfg.has(d) {
            continue;
        }
        let mut w = vec![0.0f64; r * n];
        for (row_set, tgt) in rows.iter().zip(targets) {
            let (teacher, students) = match d {
                Direction::LtToGt => (&tgt.gt, &row_set.lt),
                Direction::LsToGt => (&tgt.gt, &row_set.ls),
                Direction::LsToLt => (&tgt.lt, &row_set.ls),
                Direction::GtToLt => (&tgt.lt, &row_set.gt),
            };
            if teacher.is_empty() || students.is_empty() {
                return Err(ObjectiveError::EmptyViews(d, if teacher.is_empty() { "teacher" } else { "student" }));
            }
            let scale = 1.0 / (items * (teacher.len() * students.len()) as f64);
            for t in teacher {
                if t.len() != n {
                    return Err(ObjectiveError::DimMismatch(t.len(), n));
                }
                for &s in students {
                    for (wv, tv) in w[s * n..(s + 1) * n].iter_mut().zip(t) {
                        *wv += tv * scale;
                    }
                }
            }
        }
        let wc = g.constant(NdArray::from_f64s(&[r, n], &w)?);
        let dot = g.dot(logp, wc)?;
        terms.push((d, g.scale(dot, -1.0)?));
    }
    let mut total = terms[0].1;
    for &(_, v) in &terms[1..] {
        total = g.add(total, v)?;
    }
    Ok(LossVars { total, terms })
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise in `f32`.
/// `m = 0` copies the student and `m = 1` leaves the teacher untouched.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, m: f64) -> Result<(), ObjectiveError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(ObjectiveError::InvalidMomentum(m));
    }
    teacher.check_same_layout(student)?;
    if m == 1.0 {
        return Ok(());
    }
    let (a, b) = (m as f32, (1.0 - m) as f32);
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name).expect("layouts checked");
        if m == 0.0 {
            t.data_mut().copy_from_slice(s.data());
            continue;
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

/// `center <- momentum * center + (1 - momentum) * mean(batch rows)`.
pub fn update_center(center: &mut [f64], batch: &[Vec<f64>], momentum: f64) -> Result<(), ObjectiveError> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(ObjectiveError::InvalidMomentum(momentum));
    }
    if batch.is_empty() || momentum == 1.0 {
        return Ok(());
    }
    let n = center.len();
    let mut mean = vec![0.0; n];
    for row in batch {
        if row.len() != n {
            return Err(ObjectiveError::DimMismatch(row.len(), n));
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for (c, m) in center.iter_mut().zip(&mean) {
        *c = momentum * *c + (1.0 - momentum) * (m / batch.len() as f64);
    }
    Ok(())
}
