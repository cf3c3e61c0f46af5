//! Pre-training: schedules, AdamW, the distillation step and the epoch loop
//! with checkpoints and resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::io::{create_dir, IoError, JsonlWriter};
use crate::model::{forward_clips, is_decayed, ModelConfig, ModelError, ModelParams, ModelVars};
use crate::objective::{
    distill_loss, ema_update, entropy, sharpen, update_center, Direction, DistillConfig, ItemTargets, LossTerms,
    ObjectiveError, StudentRows, StudentView,
};
use crate::sampling::{build_view_batch, RawVideo, SamplingError, ViewBatch, ViewConfig};
use crate::tensor::{
    finite_difference_check_with, FdOptions, GradCheckReport, GradMap, Graph, NdArray, Scalar, Stencil, TensorError,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    /// The cosine decay ends at `final_lr_fraction * base_lr`.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub grad_clip_norm: Option<f64>,
    /// Also checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Fill `wall_ms` in the metrics log. Off by default so that logs of
    /// identical runs compare byte for byte.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            base_lr: 5e-4,
            warmup_epochs: 5,
            wd_start: 0.04,
            wd_end: 0.1,
            final_lr_fraction: 0.01,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip_norm: None,
            checkpoint_every: 10,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.wd_start >= 0.0 && self.wd_start <= self.wd_end) {
            return fail(format!("need 0 <= wd_start ({}) <= wd_end ({})", self.wd_start, self.wd_end));
        }
        if !(self.base_lr >= 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return fail("base_lr must be >= 0 and final_lr_fraction in [0, 1]".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.eps > 0.0) {
            return fail("betas must lie in [0, 1) and eps must be positive".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return fail(format!("grad_clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, steps_per_epoch: usize) -> u64 {
        (self.epochs * steps_per_epoch) as u64
    }
}

/// Position in `[0, 1]` of `step` along a phase of `len` steps whose last
/// step maps to 1.
fn progress(step: u64, start: u64, len: u64) -> f64 {
    if len <= 1 || step <= start {
        return 0.0;
    }
    ((step - start) as f64 / (len - 1) as f64).min(1.0)
}

/// Cosine interpolation that returns `from` and `to` exactly at `p = 0`
/// and `p = 1`.
fn cosine(from: f64, to: f64, p: f64) -> f64 {
    let w = 0.5 * (1.0 - (std::f64::consts::PI * p).cos());
    if p >= 1.0 {
        return to;
    }
    from * (1.0 - w) + to * w
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to
/// `final_lr_fraction * base_lr` at the last step.
pub fn lr_at(step: u64, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let warm = (cfg.warmup_epochs * steps_per_epoch) as u64;
    let total = cfg.total_steps(steps_per_epoch);
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let p = progress(step, warm, total.saturating_sub(warm));
    cosine(cfg.base_lr, cfg.base_lr * cfg.final_lr_fraction, p)
}

/// Cosine ramp from `wd_start` at step 0 to `wd_end` at the last step.
pub fn wd_at(step: u64, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    cosine(cfg.wd_start, cfg.wd_end, progress(step, 0, cfg.total_steps(steps_per_epoch)))
}

/// Cosine ramp of the EMA momentum across the whole run.
pub fn ema_momentum_at(step: u64, cfg: &TrainConfig, range: (f64, f64), steps_per_epoch: usize) -> f64 {
    cosine(range.0, range.1, progress(step, 0, cfg.total_steps(steps_per_epoch)))
}

/// First and second moment estimates of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zeros = ModelParams::from_map(
            params
                .iter()
                .map(|(k, v)| (k.to_string(), NdArray::zeros(v.shape())))
                .collect(),
        );
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Global L2 norm of a gradient map.
pub fn grad_norm<T: Scalar>(grads: &GradMap<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// One AdamW update with decoupled weight decay on weight matrices only.
pub fn adamw_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    grads: &GradMap<f32>,
    lr: f64,
    wd: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let clip = match cfg.grad_clip_norm {
        Some(max) => {
            let norm = grad_norm(grads);
            if norm > max {
                max / (norm + 1e-6)
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    opt.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(opt.t as i32);
    let c2 = 1.0 - b2.powi(opt.t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(format!("gradient of {name}")))?;
        let m = opt.m.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let v = opt.v.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let decay = if is_decayed(name) { wd } else { 0.0 };
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gv = gv as f64 * clip;
            let m1 = b1 * *mv as f64 + (1.0 - b1) * gv;
            let v1 = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
            *mv = m1 as f32;
            *vv = v1 as f32;
            let x = *pv as f64;
            let update = (m1 / c1) / ((v1 / c2).sqrt() + cfg.eps) + decay * x;
            *pv = (x - lr * update) as f32;
        }
    }
    Ok(())
}

/// Everything that changes during pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub opt: AdamState,
    pub center: Vec<f64>,
    pub global_step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl DistillState {
    /// Fresh student with an exact teacher copy.
    pub fn new(model: &ModelConfig, seed: u64) -> Result<Self, TrainError> {
        let student = ModelParams::init(model, seed)?;
        Ok(Self {
            teacher: student.clone(),
            opt: AdamState::zeros_like(&student),
            center: vec![0.0; model.proj_out],
            student,
            global_step: 0,
            epoch: 0,
        })
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
    #[serde(flatten)]
    pub loss: LossTerms,
    pub wall_ms: f64,
}

/// The configuration slices a training step reads.
#[derive(Clone, Copy, Debug)]
pub struct StepConfig<'a> {
    pub model: &'a ModelConfig,
    pub distill: &'a DistillConfig,
    pub train: &'a TrainConfig,
    pub steps_per_epoch: usize,
}

/// Raw teacher head outputs for every item: globals, then local-temporal
/// views when a direction needs them.
struct TeacherOut {
    gt: Vec<Vec<Vec<f64>>>,
    lt: Vec<Vec<Vec<f64>>>,
}

fn teacher_forward<T: Scalar>(
    teacher: &ModelParams<T>,
    batch: &[ViewBatch],
    cfg: StepConfig<'_>,
) -> Result<TeacherOut, TrainError> {
    let with_lt = cfg.distill.needs_teacher_lt();
    let mut clips: Vec<NdArray<T>> = Vec::new();
    for item in batch {
        clips.extend(item.globals.iter().map(|v| v.clip.cast()));
        if with_lt {
            clips.extend(item.locals_t.iter().map(|v| v.clip.cast()));
        }
    }
    let mut g = Graph::new();
    let vars = ModelVars::frozen(&mut g, teacher);
    let refs: Vec<&NdArray<T>> = clips.iter().collect();
    let out = forward_clips(&mut g, &vars, cfg.model, &refs)?;
    let f = g.value(out.features);
    let mut row = 0;
    let mut take = |count: usize| -> Vec<Vec<f64>> {
        let rows = (row..row + count).map(|r| f.row(r).iter().map(|v| v.as_f64()).collect()).collect();
        row += count;
        rows
    };
    let mut gt = Vec::with_capacity(batch.len());
    let mut lt = Vec::with_capacity(batch.len());
    for item in batch {
        gt.push(take(item.globals.len()));
        lt.push(if with_lt { take(item.locals_t.len()) } else { Vec::new() });
    }
    Ok(TeacherOut { gt, lt })
}

fn targets(out: &TeacherOut, center: &[f64], cfg: &DistillConfig) -> Result<Vec<ItemTargets>, TrainError> {
    let c = cfg.centering.then_some(center);
    let sharpen_all = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>, ObjectiveError> {
        rows.iter().map(|f| sharpen(f, cfg.tau_teacher, c)).collect()
    };
    out.gt
        .iter()
        .zip(&out.lt)
        .map(|(gt, lt)| {
            Ok(ItemTargets {
                gt: sharpen_all(gt)?,
                lt: sharpen_all(lt)?,
            })
        })
        .collect()
}

/// The student graph of one step, ready for backward.
pub struct StudentGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub loss: crate::objective::LossVars,
}

/// Records the student forward on the views the enabled directions use and
/// the loss against fixed teacher targets.
fn student_graph<T: Scalar>(
    student: &ModelParams<T>,
    batch: &[ViewBatch],
    targets: &[ItemTargets],
    cfg: StepConfig<'_>,
) -> Result<StudentGraph<T>, TrainError> {
    let d = cfg.distill;
    let (want_g, want_t, want_s) = (
        d.needs_student(StudentView::Global),
        d.needs_student(StudentView::LocalTemporal),
        d.needs_student(StudentView::LocalSpatial),
    );
    let mut clips: Vec<NdArray<T>> = Vec::new();
    let mut rows = Vec::with_capacity(batch.len());
    for item in batch {
        let mut r = StudentRows::default();
        for (want, views, slot) in [
            (want_g, &item.globals, &mut r.gt),
            (want_t, &item.locals_t, &mut r.lt),
            (want_s, &item.locals_s, &mut r.ls),
        ] {
            if want {
                for v in views {
                    slot.push(clips.len());
                    clips.push(v.clip.cast());
                }
            }
        }
        rows.push(r);
    }
    let mut graph = Graph::new();
    let vars = ModelVars::trainable(&mut graph, student)?;
    let refs: Vec<&NdArray<T>> = clips.iter().collect();
    let out = forward_clips(&mut graph, &vars, cfg.model, &refs)?;
    let loss = distill_loss(&mut graph, out.features, &rows, targets, d)?;
    Ok(StudentGraph { graph, loss })
}

fn loss_terms<T: Scalar>(sg: &StudentGraph<T>, teacher_entropy: f64) -> LossTerms {
    let mut terms = LossTerms {
        total: sg.graph.value(sg.loss.total).data()[0].as_f64(),
        teacher_entropy,
        ..LossTerms::default()
    };
    for &(d, v) in &sg.loss.terms {
        let x = sg.graph.value(v).data()[0].as_f64();
        match d {
            Direction::LtToGt => terms.l_gt_lt = x,
            Direction::LsToGt => terms.l_gt_ls = x,
            Direction::LsToLt => terms.l_lt_ls = Some(x),
            Direction::GtToLt => terms.l_lt_gt = Some(x),
        }
    }
    terms
}

fn mean_entropy(targets: &[ItemTargets]) -> f64 {
    let all: Vec<f64> = targets.iter().flat_map(|t| t.gt.iter().map(|p| entropy(p))).collect();
    all.iter().sum::<f64>() / all.len().max(1) as f64
}

/// One optimization step: teacher targets, student loss and backward,
/// AdamW, EMA, center update.
pub fn train_step(state: &mut DistillState, batch: &[ViewBatch], cfg: StepConfig<'_>) -> Result<MetricsRecord, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let started = Instant::now();
    let step = state.global_step;
    let non_finite = |e: TensorError| match e {
        TensorError::NonFinite { .. } => TrainError::NonFinite {
            step,
            detail: e.to_string(),
        },
        other => other.into(),
    };
    let spe = cfg.steps_per_epoch;
    let lr = lr_at(step, cfg.train, spe);
    let wd = wd_at(step, cfg.train, spe);
    let ema_m = ema_momentum_at(step, cfg.train, cfg.distill.ema_momentum, spe);

    let teacher = teacher_forward(&state.teacher, batch, cfg)?;
    let tgts = targets(&teacher, &state.center, cfg.distill)?;
    let sg = student_graph(&state.student, batch, &tgts, cfg)?;
    sg.graph.check_finite().map_err(non_finite)?;
    let grads = sg.graph.backward(sg.loss.total)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(TrainError::NonFinite {
            step,
            detail: format!("gradient of `{name}`"),
        });
    }
    let loss = loss_terms(&sg, mean_entropy(&tgts));
    drop(sg);

    adamw_step(&mut state.student, &mut state.opt, &grads, lr, wd, cfg.train)?;
    ema_update(&mut state.teacher, &state.student, ema_m)?;
    if cfg.distill.centering {
        let raw: Vec<Vec<f64>> = teacher.gt.into_iter().flatten().collect();
        update_center(&mut state.center, &raw, cfg.distill.center_momentum)?;
    }
    state.global_step += 1;
    let wall_ms = if cfg.train.record_wall_clock {
        started.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    Ok(MetricsRecord {
        step,
        epoch: state.epoch,
        lr,
        wd,
        ema_m,
        loss,
        wall_ms,
    })
}

/// Builds the loss of one step in `f64` and checks its gradient against
/// central differences of the same graph.
pub fn gradcheck_step(
    student: &ModelParams<f64>,
    teacher: &ModelParams<f64>,
    center: &[f64],
    batch: &[ViewBatch],
    cfg: StepConfig<'_>,
    epsilon: f64,
    options: FdOptions,
) -> Result<GradCheckReport, TrainError> {
    let teacher_out = teacher_forward(teacher, batch, cfg)?;
    let tgts = targets(&teacher_out, center, cfg.distill)?;
    let mut sg = student_graph(student, batch, &tgts, cfg)?;
    Ok(finite_difference_check_with(&mut sg.graph, sg.loss.total, epsilon, options)?)
}

/// Small views and a one-item batch for the gradient oracle. The model
/// itself is left as configured.
pub fn gradcheck_views(view: &ViewConfig, model: &ModelConfig) -> ViewConfig {
    let p = model.patch_size;
    ViewConfig {
        k_g: 4,
        k_l_choices: vec![2, 4],
        n_global: 2,
        n_lt: 1,
        q: 2,
        global_size: (2 * p, 2 * p),
        local_size: (p, p),
        ..view.clone()
    }
}

/// Step size that suits [`run_gradcheck`]'s fourth-order stencil.
pub const GRADCHECK_EPSILON: f64 = 1e-3;

/// [`run_gradcheck_with`] using the fourth-order stencil. Second-order
/// differences at a small step lose the smallest gradient entries to
/// round-off on the desk model.
pub fn run_gradcheck(run: &RunConfig, video: &RawVideo, epsilon: f64) -> Result<GradCheckReport, TrainError> {
    let options = FdOptions {
        stencil: Stencil::Central5,
        ..FdOptions::default()
    };
    run_gradcheck_with(run, video, epsilon, options)
}

/// Gradient check of one full training step on `video` with the configured
/// model in `f64`. The temporal output projections start from random
/// values instead of zero so that every parameter receives a gradient.
pub fn run_gradcheck_with(
    run: &RunConfig,
    video: &RawVideo,
    epsilon: f64,
    options: FdOptions,
) -> Result<GradCheckReport, TrainError> {
    let model = ModelConfig {
        zero_init_temporal_proj: false,
        ..run.model.clone()
    };
    let view = gradcheck_views(&run.view, &model);
    let batch = build_view_batch(&[video], &view)?;
    let student = ModelParams::init(&model, run.train.seed)?.cast::<f64>();
    let teacher = ModelParams::init(&model, run.train.seed.wrapping_add(1))?.cast::<f64>();
    let center = vec![0.0; model.proj_out];
    let cfg = StepConfig {
        model: &model,
        distill: &run.distill,
        train: &run.train,
        steps_per_epoch: 1,
    };
    gradcheck_step(&student, &teacher, &center, &batch, cfg, epsilon, options)
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// View seed of an epoch, so that each epoch draws fresh views.
pub fn epoch_view_seed(view_seed: u64, epoch: usize) -> u64 {
    mix(view_seed, epoch as u64)
}

/// Seeded order in which the training set is visited during `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64 ^ 0x5348_5546)));
    order
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub state: DistillState,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Runs (or resumes) pre-training on `videos`, appending to
/// `out_dir/metrics.jsonl` and writing checkpoints into `out_dir`.
/// `on_step` sees every metrics record as it is produced.
pub fn pretrain(
    videos: &[RawVideo],
    run: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&MetricsRecord),
) -> Result<PretrainOutcome, TrainError> {
    if videos.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    run.train.validate()?;
    create_dir(out_dir)?;
    let spe = steps_per_epoch(videos.len(), run.train.batch_size);
    let cfg = StepConfig {
        model: &run.model,
        distill: &run.distill,
        train: &run.train,
        steps_per_epoch: spe,
    };
    let metrics = out_dir.join(METRICS_FILE);
    let mut state = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.state.student.check_config(&run.model)?;
            if ck.state.global_step != (ck.state.epoch * spe) as u64 {
                return Err(TrainError::InvalidConfig(format!(
                    "checkpoint step {} is not at an epoch boundary of {spe} steps",
                    ck.state.global_step
                )));
            }
            log::info!("resuming from {} at epoch {}", path.display(), ck.state.epoch);
            ck.state
        }
        None => {
            if metrics.exists() {
                std::fs::remove_file(&metrics).map_err(|e| IoError::io(&metrics, e))?;
            }
            DistillState::new(&run.model, run.train.seed)?
        }
    };
    let mut log_out = JsonlWriter::append(&metrics)?;
    while state.epoch < run.train.epochs {
        let epoch = state.epoch;
        let view = ViewConfig {
            seed: epoch_view_seed(run.view.seed, epoch),
            ..run.view.clone()
        };
        let order = epoch_order(videos.len(), run.train.seed, epoch);
        for chunk in order.chunks(run.train.batch_size) {
            let items: Vec<&RawVideo> = chunk.iter().map(|&i| &videos[i]).collect();
            let batch = build_view_batch(&items, &view)?;
            let record = train_step(&mut state, &batch, cfg)?;
            log_out.write(&record)?;
            on_step(&record);
        }
        log_out.flush()?;
        state.epoch += 1;
        log::info!("epoch {} done at step {}", state.epoch, state.global_step);
        let every = run.train.checkpoint_every;
        if every > 0 && state.epoch % every == 0 && state.epoch < run.train.epochs {
            save_checkpoint(&out_dir.join(epoch_checkpoint_name(state.epoch)), run, &state)?;
        }
    }
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&checkpoint, run, &state)?;
    if run.train.checkpoint_every > 0 && state.epoch % run.train.checkpoint_every == 0 {
        save_checkpoint(&out_dir.join(epoch_checkpoint_name(state.epoch)), run, &state)?;
    }
    Ok(PretrainOutcome {
        state,
        checkpoint,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            proj_hidden: 16,
            proj_bottleneck: 8,
            proj_out: 32,
            ..ModelConfig::default()
        };
        run.view = ViewConfig {
            k_g: 4,
            k_l_choices: vec![2, 4],
            n_global: 2,
            n_lt: 1,
            q: 2,
            global_size: (16, 16),
            local_size: (8, 8),
            ..ViewConfig::default()
        };
        run.train = TrainConfig {
            epochs: 2,
            batch_size: 2,
            warmup_epochs: 1,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        run
    }

    fn videos(n: usize) -> Vec<RawVideo> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|i| {
                let frames = NdArray::from_fn(&[8, 3, 16, 16], |_| rng.random::<f32>());
                RawVideo::new(&format!("v{i}"), frames, Some(i % 2)).unwrap()
            })
            .collect()
    }

    fn step_cfg(run: &RunConfig, spe: usize) -> StepConfig<'_> {
        StepConfig {
            model: &run.model,
            distill: &run.distill,
            train: &run.train,
            steps_per_epoch: spe,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        let spe = 10;
        let last = cfg.total_steps(spe) - 1;
        let warm = (cfg.warmup_epochs * spe) as u64;
        assert_eq!(lr_at(0, &cfg, spe), 0.0);
        assert_eq!(lr_at(warm, &cfg, spe), 5e-4);
        assert!((lr_at(warm / 2, &cfg, spe) - 2.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(last, &cfg, spe), 5e-4 * 0.01);
        // the decay phase spans warm..=last; its midpoint is the cosine's
        let mid = warm + (last - warm) / 2;
        assert_eq!((last - warm) % 2, 1);
        let p = (mid - warm) as f64 / (last - warm) as f64;
        let expect = 5e-6 + (5e-4 - 5e-6) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        assert!((lr_at(mid, &cfg, spe) - expect).abs() < 1e-15);

        assert_eq!(wd_at(0, &cfg, spe), 0.04);
        assert_eq!(wd_at(last, &cfg, spe), 0.1);
        let odd = TrainConfig { epochs: 3, warmup_epochs: 1, ..cfg.clone() };
        // 3 epochs of 7 steps: last step 20, midpoint 10
        assert!((wd_at(10, &odd, 7) - 0.07).abs() < 1e-15);
        let decay_mid = lr_at(7 + 13 / 2, &TrainConfig { epochs: 3, warmup_epochs: 1, ..cfg.clone() }, 7);
        assert!(decay_mid < 5e-4);

        let range = (0.996, 1.0);
        assert_eq!(ema_momentum_at(0, &cfg, range, spe), 0.996);
        assert_eq!(ema_momentum_at(last, &cfg, range, spe), 1.0);
        let ms: Vec<f64> = (0..=last).map(|s| ema_momentum_at(s, &cfg, range, spe)).collect();
        assert!(ms.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn decay_phase_midpoint_closed_form() {
        // warmup 1 epoch of 4 steps, then steps 4..=12: midpoint 8
        let cfg = TrainConfig { epochs: 13, warmup_epochs: 4, ..TrainConfig::default() };
        let v = lr_at(8, &cfg, 1);
        assert!((v - 5e-4 * (1.0 + 0.01) / 2.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn null_update_leaves_weights_bit_identical() {
        let mut run = tiny_run();
        run.train.base_lr = 0.0;
        run.distill.ema_momentum = (1.0, 1.0);
        let vids = videos(2);
        let refs: Vec<&RawVideo> = vids.iter().collect();
        let batch = build_view_batch(&refs, &run.view).unwrap();
        let mut state = DistillState::new(&run.model, 0).unwrap();
        state.teacher = ModelParams::init(&run.model, 1).unwrap();
        let (s0, t0) = (state.student.digest(), state.teacher.digest());
        for _ in 0..3 {
            train_step(&mut state, &batch, step_cfg(&run, 3)).unwrap();
        }
        assert_eq!(state.student.digest(), s0);
        assert_eq!(state.teacher.digest(), t0);
        assert_eq!(state.global_step, 3);
    }

    #[test]
    fn fixed_batch_loss_decreases() {
        let mut run = tiny_run();
        run.train.epochs = 50;
        run.train.warmup_epochs = 0;
        run.train.base_lr = 3e-3;
        run.distill.ema_momentum = (1.0, 1.0);
        let vids = videos(2);
        let refs: Vec<&RawVideo> = vids.iter().collect();
        let batch = build_view_batch(&refs, &run.view).unwrap();
        let mut state = DistillState::new(&run.model, 0).unwrap();
        state.teacher = ModelParams::init(&run.model, 5).unwrap();
        let losses: Vec<f64> = (0..50)
            .map(|_| train_step(&mut state, &batch, step_cfg(&run, 1)).unwrap().loss.total)
            .collect();
        assert!(losses[49] < losses[0] - 0.1, "{} -> {}", losses[0], losses[49]);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut run = tiny_run();
        run.distill.directions = Direction::ALL.to_vec();
        let vids = videos(2);
        let refs: Vec<&RawVideo> = vids.iter().collect();
        let batch = build_view_batch(&refs, &run.view).unwrap();
        let state = DistillState::new(&run.model, 0).unwrap();
        let teacher = ModelParams::init(&run.model, 1).unwrap();
        let cfg = step_cfg(&run, 1);
        let out = teacher_forward(&teacher, &batch, cfg).unwrap();
        let tgts = targets(&out, &state.center, &run.distill).unwrap();
        let sg = student_graph(&state.student, &batch, &tgts, cfg).unwrap();
        let grads = sg.graph.backward(sg.loss.total).unwrap();
        assert_eq!(grads.len(), state.student.len());
        for (name, g) in &grads {
            let zero = g.data().iter().all(|&v| v == 0.0);
            // a zero output projection blocks the temporal attention path
            let blocked = name.contains(".temporal.") && (name.contains(".qkv.") || name.contains(".qv.") || name.contains(".norm."));
            assert_eq!(zero, blocked, "{name}");
        }
    }

    #[test]
    fn teacher_graph_has_no_parameters() {
        let run = tiny_run();
        let teacher = ModelParams::init(&run.model, 1).unwrap();
        let mut g = Graph::new();
        let vars = ModelVars::frozen(&mut g, &teacher);
        let clip = NdArray::<f32>::full(&[2, 3, 16, 16], 0.5);
        let out = forward_clips(&mut g, &vars, &run.model, &[&clip]).unwrap();
        let s = g.sum(out.features).unwrap();
        assert!(g.backward(s).unwrap().is_empty());
        assert_eq!(g.param_names().count(), 0);
    }

    #[test]
    fn gradient_oracle_on_one_step() {
        let run = tiny_run();
        let vids = videos(1);
        let report = run_gradcheck(&run, &vids[0], GRADCHECK_EPSILON).unwrap();
        assert!(report.global_max_rel_error < 1e-4, "{:?}", report.worst());
        assert_eq!(report.per_param.len(), ModelParams::<f32>::expected_shapes(&run.model).len());
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let run = tiny_run();
        let vids = videos(4);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = pretrain(&vids, &run, a.path(), None, |_| {}).unwrap();
        let rb = pretrain(&vids, &run, b.path(), None, |_| {}).unwrap();
        let la = std::fs::read(&ra.metrics).unwrap();
        assert_eq!(la, std::fs::read(&rb.metrics).unwrap());
        assert_eq!(ra.state, rb.state);
        assert_eq!(la.split(|&c| c == b'\n').filter(|l| !l.is_empty()).count(), 4);
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let run = tiny_run();
        let vids = videos(4);
        let full = tempfile::tempdir().unwrap();
        let whole = pretrain(&vids, &run, full.path(), None, |_| {}).unwrap();
        assert!(full.path().join(epoch_checkpoint_name(1)).exists());

        let part = tempfile::tempdir().unwrap();
        let mut first = run.clone();
        first.train.epochs = 2;
        let mut steps = Vec::new();
        // stop after the first epoch by resuming from its checkpoint
        pretrain(&vids, &first, part.path(), None, |r| steps.push(r.step)).unwrap();
        let ck = part.path().join(epoch_checkpoint_name(1));
        let resumed_dir = tempfile::tempdir().unwrap();
        let mut seen = Vec::new();
        let resumed = pretrain(&vids, &run, resumed_dir.path(), Some(&ck), |r| seen.push(r.step)).unwrap();
        assert_eq!(seen, vec![2, 3]);
        assert_eq!(resumed.state.global_step, whole.state.global_step);
        assert_eq!(resumed.state, whole.state);
        let tail: Vec<_> = crate::io::read_jsonl(&whole.metrics).unwrap().split_off(2);
        assert_eq!(crate::io::read_jsonl(&resumed.metrics).unwrap(), tail);
    }

    #[test]
    fn non_finite_inputs_are_fatal() {
        let run = tiny_run();
        let vids = videos(2);
        let refs: Vec<&RawVideo> = vids.iter().collect();
        let batch = build_view_batch(&refs, &run.view).unwrap();
        let mut state = DistillState::new(&run.model, 0).unwrap();
        state.student.get_mut("head.fc1.bias").unwrap().data_mut()[0] = f32::NAN;
        match train_step(&mut state, &batch, step_cfg(&run, 1)) {
            Err(TrainError::NonFinite { step: 0, detail }) => assert!(detail.contains("head.fc1.bias"), "{detail}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weight_decay_skips_biases_and_gains() {
        let run = tiny_run();
        let mut params = ModelParams::init(&run.model, 0).unwrap();
        params.get_mut("norm.gain").unwrap().data_mut()[0] = 2.0;
        let mut opt = AdamState::zeros_like(&params);
        let grads: GradMap<f32> = params.iter().map(|(k, v)| (k.to_string(), NdArray::zeros(v.shape()))).collect();
        let before = params.clone();
        adamw_step(&mut params, &mut opt, &grads, 0.1, 0.5, &run.train).unwrap();
        for (name, p) in params.iter() {
            let b = before.get(name).unwrap();
            for (x, y) in p.data().iter().zip(b.data()) {
                let expect = if is_decayed(name) { (*y as f64 * (1.0 - 0.05)) as f32 } else { *y };
                assert_eq!(*x, expect, "{name}");
            }
        }
    }
}
