//! Frozen-backbone evaluation: feature extraction, a linear classifier
//! trained with momentum SGD, single- and multi-view inference, MCA/MPCA.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::IoError;
use crate::model::{forward_clips, ModelConfig, ModelError, ModelParams, ModelVars};
use crate::sampling::{inference_clip, RawVideo, SamplingError, ViewConfig};
use crate::tensor::{Graph, NdArray};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("head has {head} classes but the data has {data}")]
    ClassMismatch { head: usize, data: usize },
    #[error("feature length {found} does not match the head's {expected}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("label {label} outside {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("video `{0}` has no label")]
    Unlabeled(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Where the clip feature is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// Class token after the final norm (`m` values).
    Backbone,
    /// Projection head output (`n` values).
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Single,
    Multi,
}

/// One extra inference resolution: frame count and spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceView {
    pub frames: usize,
    pub size: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Extract with the EMA teacher (default) or the student.
    pub use_teacher: bool,
    pub feature: FeatureTap,
    /// Views added to the global clip in multi-view mode.
    pub local_views: Vec<InferenceView>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            use_teacher: true,
            feature: FeatureTap::Backbone,
            local_views: vec![
                InferenceView { frames: 4, size: (32, 32) },
                InferenceView { frames: 8, size: (16, 16) },
            ],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let fail = |m: String| Err(ProbeError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("need lr > 0, momentum in [0, 1) and weight_decay >= 0".into());
        }
        if self.local_views.iter().any(|v| v.frames == 0 || v.size.0 == 0 || v.size.1 == 0) {
            return fail("local views need positive frame counts and sizes".into());
        }
        Ok(())
    }
}

/// The clips a video is encoded from: the global clip first, then each
/// configured local view in multi mode.
pub fn inference_clips(
    video: &RawVideo,
    view: &ViewConfig,
    probe: &ProbeConfig,
    mode: ViewMode,
) -> Result<Vec<NdArray<f32>>, ProbeError> {
    let mut clips = vec![inference_clip(video, view.k_g, view.global_size)?];
    if mode == ViewMode::Multi {
        for v in &probe.local_views {
            clips.push(inference_clip(video, v.frames, v.size)?);
        }
    }
    Ok(clips)
}

/// One feature per clip from a single packed forward.
pub fn encode_clips(
    clips: &[NdArray<f32>],
    params: &ModelParams,
    model: &ModelConfig,
    tap: FeatureTap,
) -> Result<Vec<Vec<f32>>, ProbeError> {
    let mut g = Graph::new();
    let vars = ModelVars::frozen(&mut g, params);
    let refs: Vec<&NdArray<f32>> = clips.iter().collect();
    let out = forward_clips(&mut g, &vars, model, &refs)?;
    let f = g.value(match tap {
        FeatureTap::Backbone => out.cls,
        FeatureTap::Projection => out.features,
    });
    Ok((0..clips.len()).map(|r| f.row(r).to_vec()).collect())
}

/// Per-view features of one video.
pub fn extract_features(
    video: &RawVideo,
    params: &ModelParams,
    model: &ModelConfig,
    view: &ViewConfig,
    probe: &ProbeConfig,
    mode: ViewMode,
) -> Result<Vec<Vec<f32>>, ProbeError> {
    let clips = inference_clips(video, view, probe, mode)?;
    encode_clips(&clips, params, model, probe.feature)
}

/// Features of one labeled video, one vector per view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub views: Vec<Vec<f32>>,
    pub label: usize,
}

/// Extracts every video in parallel on the current rayon pool.
pub fn extract_dataset(
    videos: &[RawVideo],
    params: &ModelParams,
    model: &ModelConfig,
    view: &ViewConfig,
    probe: &ProbeConfig,
    mode: ViewMode,
) -> Result<Vec<Sample>, ProbeError> {
    videos
        .par_iter()
        .map(|v| {
            let label = v.label.ok_or_else(|| ProbeError::Unlabeled(v.id.clone()))?;
            Ok(Sample {
                views: extract_features(v, params, model, view, probe, mode)?,
                label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `[classes, dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weight: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f64>, ProbeError> {
        if x.len() != self.dim {
            return Err(ProbeError::FeatureMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok((0..self.classes)
            .map(|c| {
                let w = &self.weight[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + w.iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>()
            })
            .collect())
    }

    /// Mean of the per-view logits.
    pub fn fused_logits(&self, views: &[Vec<f32>]) -> Result<Vec<f64>, ProbeError> {
        let mut acc = vec![0.0; self.classes];
        for v in views {
            for (a, l) in acc.iter_mut().zip(self.logits(v)?) {
                *a += l;
            }
        }
        acc.iter_mut().for_each(|a| *a /= views.len() as f64);
        Ok(acc)
    }

    pub fn predict(&self, views: &[Vec<f32>]) -> Result<usize, ProbeError> {
        Ok(argmax(&self.fused_logits(views)?))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a softmax classifier on standardized features with momentum SGD
/// and a cosine learning rate, then folds the standardization into the
/// weights. Every view of a sample is a training example.
pub fn train_linear_probe(samples: &[Sample], classes: usize, cfg: &ProbeConfig) -> Result<LinearHead, ProbeError> {
    cfg.validate()?;
    let rows: Vec<(&[f32], usize)> = samples
        .iter()
        .flat_map(|s| s.views.iter().map(move |v| (v.as_slice(), s.label)))
        .collect();
    if rows.is_empty() {
        return Err(ProbeError::Empty("training"));
    }
    let dim = rows[0].0.len();
    for &(x, label) in &rows {
        if x.len() != dim {
            return Err(ProbeError::FeatureMismatch { expected: dim, found: x.len() });
        }
        if label >= classes {
            return Err(ProbeError::BadLabel { label, classes });
        }
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for (x, _) in &rows {
        for (m, &v) in mean.iter_mut().zip(x.iter()) {
            *m += v as f64 / n;
        }
    }
    let mut std = vec![0.0f64; dim];
    for (x, _) in &rows {
        for ((s, &v), m) in std.iter_mut().zip(x.iter()).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|(x, _)| x.iter().zip(&mean).zip(&std).map(|((&v, m), s)| (v as f64 - m) / s).collect())
        .collect();

    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    let mut vw = vec![0.0f64; classes * dim];
    let mut vb = vec![0.0f64; classes];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let per_epoch = rows.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * per_epoch) as f64;
    let mut step = 0usize;
    let mut gw = vec![0.0f64; classes * dim];
    let mut gb = vec![0.0f64; classes];
    let mut p = vec![0.0f64; classes];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &z[i];
                for c in 0..classes {
                    p[c] = b[c] + w[c * dim..(c + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                p.iter_mut().for_each(|v| {
                    *v = (*v - max).exp();
                    sum += *v;
                });
                for c in 0..classes {
                    let d = (p[c] / sum - if c == rows[i].1 { 1.0 } else { 0.0 }) * scale;
                    gb[c] += d;
                    for (g, xv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                        *g += d * xv;
                    }
                }
            }
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            for ((wv, g), v) in w.iter_mut().zip(&gw).zip(vw.iter_mut()) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *wv;
                *wv -= lr * *v;
            }
            for ((bv, g), v) in b.iter_mut().zip(&gb).zip(vb.iter_mut()) {
                *v = cfg.momentum * *v + g;
                *bv -= lr * *v;
            }
            step += 1;
        }
    }
    // logits = W (x - mean) / std + b
    let mut head = LinearHead::zeros(classes, dim);
    for c in 0..classes {
        let mut shift = 0.0;
        for d in 0..dim {
            let wf = w[c * dim + d] / std[d];
            head.weight[c * dim + d] = wf;
            shift += wf * mean[d];
        }
        head.bias[c] = b[c] - shift;
    }
    Ok(head)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mca: f64,
    pub mpca: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    /// Recall per class; classes without test videos report 0 and are left
    /// out of `mpca`.
    pub per_class_recall: Vec<f64>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
        let mut recalls = Vec::with_capacity(confusion.len());
        let mut present = Vec::new();
        for (i, row) in confusion.iter().enumerate() {
            let count: u64 = row.iter().sum();
            if count == 0 {
                recalls.push(0.0);
            } else {
                let r = row[i] as f64 / count as f64;
                recalls.push(r);
                present.push(r);
            }
        }
        Self {
            mca: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            mpca: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
            confusion,
            per_class_recall: recalls,
        }
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Self {
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in labels.iter().zip(predictions) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Fused-logit predictions for every sample, scored against the labels.
pub fn evaluate(head: &LinearHead, samples: &[Sample], classes: usize) -> Result<EvalReport, ProbeError> {
    if head.classes != classes {
        return Err(ProbeError::ClassMismatch {
            head: head.classes,
            data: classes,
        });
    }
    if samples.is_empty() {
        return Err(ProbeError::Empty("test"));
    }
    let mut labels = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        if s.label >= classes {
            return Err(ProbeError::BadLabel { label: s.label, classes });
        }
        labels.push(s.label);
        preds.push(head.predict(&s.views)?);
    }
    Ok(EvalReport::from_predictions(&labels, &preds, classes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EmbeddingRecord {
    id: String,
    label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EmbeddingHeader {
    dtype: String,
    count: usize,
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

/// Writes one JSON header line followed by `count * dim` little-endian
/// `f32` values, one row per video in input order.
pub fn write_embeddings(path: &Path, rows: &[(String, Option<usize>, Vec<f32>)]) -> Result<(), ProbeError> {
    let dim = rows.first().map(|r| r.2.len()).unwrap_or(0);
    if let Some(bad) = rows.iter().find(|r| r.2.len() != dim) {
        return Err(ProbeError::FeatureMismatch {
            expected: dim,
            found: bad.2.len(),
        });
    }
    let header = EmbeddingHeader {
        dtype: "f32".into(),
        count: rows.len(),
        dim,
        records: rows
            .iter()
            .map(|(id, label, _)| EmbeddingRecord { id: id.clone(), label: *label })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| IoError::json(path, e))?;
    out.push(b'\n');
    for (_, _, f) in rows {
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    file.write_all(&out).map_err(|e| IoError::io(path, e))?;
    Ok(())
}

/// Reads a file written by [`write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Option<usize>, Vec<f32>)>, ProbeError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| IoError::format(path, "missing header line"))?;
    let header: EmbeddingHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| IoError::json(path, e))?;
    let body = &bytes[nl + 1..];
    if body.len() != header.count * header.dim * 4 {
        return Err(IoError::format(path, "payload length does not match header").into());
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(header
        .records
        .into_iter()
        .zip(values.chunks(header.dim.max(1)))
        .map(|(r, f)| (r.id, r.label, f.to_vec()))
        .collect())
}
