//! Multi-rate view sampling: global clips over the whole video and local
//! clips restricted in time (and optionally space), with photometric
//! augmentation.
//!
//! Every view draws its randomness from streams keyed by
//! `(seed, video id, view index, purpose)`, so a view never depends on which
//! other videos or views were built alongside it.

mod augment;
mod crop;
mod views;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{NdArray, TensorError};

pub use augment::{augment, AugScope, AppliedAugs};
pub use crop::{random_resized_crop, resize_bilinear, CropRect};
pub use views::{
    build_view_batch, inference_clip, make_global_view, make_local_view, LocalKind, View, ViewBatch, ViewKind,
    ViewMeta,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplingError {
    #[error("cannot draw {k} frames from {total}")]
    TooFewFrames { k: usize, total: usize },
    #[error("invalid video `{id}`: {reason}")]
    InvalidVideo { id: String, reason: String },
    #[error("invalid view config: {0}")]
    InvalidConfig(String),
    #[error("empty video list")]
    NoVideos,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A decoded frame sequence `[T, 3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVideo {
    pub id: String,
    pub label: Option<usize>,
    frames: NdArray<f32>,
}

impl RawVideo {
    /// Validates the layout and clamps pixels into `[0, 1]`.
    pub fn new(id: &str, frames: NdArray<f32>, label: Option<usize>) -> Result<Self, SamplingError> {
        let bad = |reason: String| SamplingError::InvalidVideo {
            id: id.to_string(),
            reason,
        };
        let s = frames.shape();
        if s.len() != 4 {
            return Err(bad(format!("expected [T, C, H, W], got {s:?}")));
        }
        if s[0] < 2 {
            return Err(bad(format!("need at least 2 frames, got {}", s[0])));
        }
        if s[1] != 3 {
            return Err(bad(format!("expected 3 channels, got {}", s[1])));
        }
        if s[2] == 0 || s[3] == 0 {
            return Err(bad("empty frames".into()));
        }
        let frames = frames.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Ok(Self {
            id: id.to_string(),
            label,
            frames,
        })
    }

    pub fn frames(&self) -> &NdArray<f32> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Channel-major pixels of frame `t`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = 3 * self.height() * self.width();
        &self.frames.data()[t * n..(t + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugProbs {
    pub color_jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub solarize_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_threshold: f64,
}

impl Default for AugProbs {
    fn default() -> Self {
        Self {
            color_jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_p: 0.1,
            solarize_p: 0.2,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            blur_sigma: (0.1, 2.0),
            solarize_threshold: 0.5,
        }
    }
}

impl AugProbs {
    /// Every augmentation switched off.
    pub fn none() -> Self {
        Self {
            color_jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            solarize_p: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub k_g: usize,
    pub k_l_choices: Vec<usize>,
    pub n_global: usize,
    pub n_lt: usize,
    pub q: usize,
    /// `(height, width)` of global and local-temporal views.
    pub global_size: (usize, usize),
    /// `(height, width)` of local-spatial views.
    pub local_size: (usize, usize),
    pub local_window_fraction: (f64, f64),
    pub global_crop_scale: (f64, f64),
    pub local_crop_scale: (f64, f64),
    pub aspect_ratio: (f64, f64),
    pub aug: AugProbs,
    pub seed: u64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            k_g: 8,
            k_l_choices: vec![2, 4, 8],
            n_global: 2,
            n_lt: 2,
            q: 8,
            global_size: (32, 32),
            local_size: (16, 16),
            local_window_fraction: (0.3, 0.7),
            global_crop_scale: (0.4, 1.0),
            local_crop_scale: (0.05, 0.4),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            aug: AugProbs::default(),
            seed: 0,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        let fail = |m: String| Err(SamplingError::InvalidConfig(m));
        if self.k_g == 0 {
            return fail("k_g must be positive".into());
        }
        if self.k_l_choices.is_empty() {
            return fail("k_l_choices is empty".into());
        }
        if let Some(k) = self.k_l_choices.iter().find(|&&k| k == 0 || k > self.k_g) {
            return fail(format!("local frame count {k} not in 1..={}", self.k_g));
        }
        if self.n_global == 0 || self.q == 0 {
            return fail("n_global and q must be at least 1".into());
        }
        let (gh, gw) = self.global_size;
        let (lh, lw) = self.local_size;
        if gh == 0 || gw == 0 || lh == 0 || lw == 0 {
            return fail("view sizes must be positive".into());
        }
        if lh > gh || lw > gw {
            return fail(format!("local size {:?} exceeds global size {:?}", self.local_size, self.global_size));
        }
        for (name, (lo, hi)) in [
            ("local_window_fraction", self.local_window_fraction),
            ("global_crop_scale", self.global_crop_scale),
            ("local_crop_scale", self.local_crop_scale),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return fail(format!("{name} ({lo}, {hi}) must satisfy 0 < min <= max <= 1"));
            }
        }
        let (r0, r1) = self.aspect_ratio;
        if !(r0 > 0.0 && r0 <= r1) {
            return fail(format!("aspect_ratio ({r0}, {r1}) is not a valid range"));
        }
        let a = &self.aug;
        for (name, p) in [
            ("color_jitter_p", a.color_jitter_p),
            ("grayscale_p", a.grayscale_p),
            ("blur_p", a.blur_p),
            ("solarize_p", a.solarize_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} is not a probability"));
            }
        }
        Ok(())
    }

    /// Largest frame count any view may request.
    pub fn max_frames(&self) -> usize {
        self.k_l_choices.iter().copied().max().unwrap_or(0).max(self.k_g)
    }
}

/// Randomness for one view, split into independent purpose streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewRng {
    key: [u8; 32],
    view_index: usize,
}

impl ViewRng {
    pub fn new(seed: u64, video_id: &str, view_index: usize) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update((video_id.len() as u64).to_le_bytes());
        h.update(video_id.as_bytes());
        h.update((view_index as u64).to_le_bytes());
        Self {
            key: h.finalize().into(),
            view_index,
        }
    }

    pub fn view_index(&self) -> usize {
        self.view_index
    }

    /// Short identifier recorded in view metadata.
    pub fn id(&self) -> u64 {
        u64::from_le_bytes(self.key[..8].try_into().expect("8 bytes"))
    }

    pub fn stream(&self, purpose: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(purpose.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

/// Splits `0..total` into `k` equal segments and draws one index uniformly
/// from each. Segment `i` covers `[floor(i*T/k), floor((i+1)*T/k) - 1]`, so
/// the output is strictly increasing.
pub fn segment_sample<R: Rng + ?Sized>(total: usize, k: usize, rng: &mut R) -> Result<Vec<usize>, SamplingError> {
    if k == 0 || k > total {
        return Err(SamplingError::TooFewFrames { k, total });
    }
    Ok((0..k)
        .map(|i| {
            let (lo, hi) = segment_bounds(total, k, i);
            rng.random_range(lo..=hi)
        })
        .collect())
}

/// Midpoint of every segment; the deterministic variant used at inference.
pub fn segment_centers(total: usize, k: usize) -> Result<Vec<usize>, SamplingError> {
    if k == 0 || k > total {
        return Err(SamplingError::TooFewFrames { k, total });
    }
    Ok((0..k)
        .map(|i| {
            let (lo, hi) = segment_bounds(total, k, i);
            (lo + hi) / 2
        })
        .collect())
}

/// Inclusive bounds of segment `i`.
pub fn segment_bounds(total: usize, k: usize, i: usize) -> (usize, usize) {
    (i * total / k, (i + 1) * total / k - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn unit_segments_take_every_frame() {
        assert_eq!(segment_sample(18, 18, &mut rng(0)).unwrap(), (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn hundred_frames_in_five_segments() {
        let idx = segment_sample(100, 5, &mut rng(7)).unwrap();
        assert_eq!(idx.len(), 5);
        for (i, &t) in idx.iter().enumerate() {
            assert!((20 * i..=20 * i + 19).contains(&t), "{i}: {t}");
        }
    }

    #[test]
    fn too_many_frames_is_an_error() {
        assert_eq!(
            segment_sample(4, 5, &mut rng(0)),
            Err(SamplingError::TooFewFrames { k: 5, total: 4 })
        );
        assert!(segment_sample(4, 0, &mut rng(0)).is_err());
    }

    #[test]
    fn coverage_is_exhaustive_for_short_videos() {
        let mut r = rng(11);
        for total in 1..=64 {
            for k in 1..=total {
                let idx = segment_sample(total, k, &mut r).unwrap();
                let mut seg_hits = vec![0; k];
                for &t in &idx {
                    // Brute force the segment owning t from the floor formula.
                    let owner = (0..k).find(|&i| i * total / k <= t && t < (i + 1) * total / k).unwrap();
                    seg_hits[owner] += 1;
                }
                assert!(seg_hits.iter().all(|&h| h == 1), "T={total} K={k}: {idx:?}");
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn centers_lie_in_their_segments() {
        assert_eq!(segment_centers(18, 18).unwrap(), (0..18).collect::<Vec<_>>());
        assert_eq!(segment_centers(32, 8).unwrap(), vec![1, 5, 9, 13, 17, 21, 25, 29]);
    }

    #[test]
    fn view_streams_are_content_addressed() {
        let a = ViewRng::new(3, "clip", 1);
        assert_eq!(a, ViewRng::new(3, "clip", 1));
        assert_ne!(a, ViewRng::new(3, "clip", 2));
        assert_ne!(a, ViewRng::new(4, "clip", 1));
        // The length prefix keeps ("ab", 1) and ("a", ...) apart.
        assert_ne!(ViewRng::new(0, "ab", 0), ViewRng::new(0, "a", 0));
        let x: u64 = a.stream("crop").random();
        let y: u64 = a.stream("frames").random();
        assert_ne!(x, y);
        assert_eq!(x, a.stream("crop").random::<u64>());
    }

    #[test]
    fn video_validation() {
        let ok = NdArray::<f32>::full(&[2, 3, 4, 4], 2.0);
        let v = RawVideo::new("v", ok, Some(1)).unwrap();
        assert!(v.frames().data().iter().all(|&x| x == 1.0));
        assert!(RawVideo::new("v", NdArray::zeros(&[1, 3, 4, 4]), None).is_err());
        assert!(RawVideo::new("v", NdArray::zeros(&[2, 1, 4, 4]), None).is_err());
        assert!(RawVideo::new("v", NdArray::zeros(&[2, 3, 4]), None).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ViewConfig::default().validate().is_ok());
        let mut c = ViewConfig { k_l_choices: vec![9], ..ViewConfig::default() };
        assert!(c.validate().is_err());
        c = ViewConfig { local_size: (64, 64), ..ViewConfig::default() };
        assert!(c.validate().is_err());
        c = ViewConfig { q: 0, ..ViewConfig::default() };
        assert!(c.validate().is_err());
        c = ViewConfig::default();
        c.aug.blur_p = 1.5;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn samples_are_increasing_and_in_range(total in 1usize..500, kf in 0.0f64..1.0, seed: u64) {
            let k = 1 + ((total - 1) as f64 * kf) as usize;
            let idx = segment_sample(total, k, &mut rng(seed)).unwrap();
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (i, &t) in idx.iter().enumerate() {
                let (lo, hi) = segment_bounds(total, k, i);
                prop_assert!(lo <= t && t <= hi && t < total);
            }
        }
    }
}
