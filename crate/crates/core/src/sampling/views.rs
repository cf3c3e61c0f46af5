use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AppliedAugs, AugScope};
use super::crop::{random_resized_crop, resize_bilinear, CropRect};
use super::{segment_centers, segment_sample, RawVideo, SamplingError, ViewConfig, ViewRng};
use crate::tensor::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewKind {
    Global,
    LocalTemporal,
    LocalSpatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalKind {
    /// Restricted in time only; keeps the global spatial size.
    Temporal,
    /// Restricted in time and space; small crop at the local size.
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub kind: ViewKind,
    pub view_index: usize,
    pub stream_id: u64,
    pub frames: Vec<usize>,
    pub crop: CropRect,
    /// Half-open temporal window `[start, end)` the frames were drawn from.
    pub window: (usize, usize),
    pub augs: AppliedAugs,
}

/// A `[K, 3, H, W]` clip and how it was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub clip: NdArray<f32>,
    pub meta: ViewMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub video_id: String,
    pub label: Option<usize>,
    pub globals: Vec<View>,
    pub locals_t: Vec<View>,
    pub locals_s: Vec<View>,
}

/// Resamples `frames` of `video` through `rect` to `(out_h, out_w)`.
pub(crate) fn extract_clip(video: &RawVideo, frames: &[usize], rect: CropRect, (out_h, out_w): (usize, usize)) -> NdArray<f32> {
    let (h, w) = (video.height(), video.width());
    let per = 3 * out_h * out_w;
    let mut data = vec![0.0f32; frames.len() * per];
    for (dst, &t) in data.chunks_mut(per).zip(frames) {
        resize_bilinear(video.frame(t), 3, h, w, rect, out_h, out_w, dst);
    }
    NdArray::from_vec(&[frames.len(), 3, out_h, out_w], data).expect("clip extents")
}

/// Deterministic clip for inference: `k` segment midpoints over the whole
/// video, full frame resized to `size`, no augmentation.
pub fn inference_clip(video: &RawVideo, k: usize, size: (usize, usize)) -> Result<NdArray<f32>, SamplingError> {
    let frames = segment_centers(video.num_frames(), k)?;
    Ok(extract_clip(video, &frames, CropRect::full(video.height(), video.width()), size))
}

/// `K_g` segment-sampled frames over the whole video, a 40-100% area crop
/// resized to the global size, and global augmentations.
pub fn make_global_view(video: &RawVideo, cfg: &ViewConfig, rng: &ViewRng) -> Result<View, SamplingError> {
    let total = video.num_frames();
    let frames = segment_sample(total, cfg.k_g, &mut rng.stream("frames"))?;
    let crop = random_resized_crop(
        video.height(),
        video.width(),
        cfg.global_crop_scale,
        cfg.aspect_ratio,
        &mut rng.stream("crop"),
    );
    let clip = extract_clip(video, &frames, crop, cfg.global_size);
    let (clip, augs) = augment(clip, AugScope::Global, &cfg.aug, &mut rng.stream("aug"));
    Ok(View {
        clip,
        meta: ViewMeta {
            kind: ViewKind::Global,
            view_index: rng.view_index(),
            stream_id: rng.id(),
            frames,
            crop,
            window: (0, total),
            augs,
        },
    })
}

/// `K_l` frames segment-sampled inside a random contiguous window. A window
/// shorter than `K_l` frames is widened to exactly `K_l`.
pub fn make_local_view(video: &RawVideo, cfg: &ViewConfig, rng: &ViewRng, kind: LocalKind) -> Result<View, SamplingError> {
    let total = video.num_frames();
    let max_k = cfg.k_l_choices.iter().copied().max().unwrap_or(0);
    if max_k > total {
        return Err(SamplingError::TooFewFrames { k: max_k, total });
    }
    let mut wr = rng.stream("window");
    let k = cfg.k_l_choices[wr.random_range(0..cfg.k_l_choices.len())];
    let (lo, hi) = cfg.local_window_fraction;
    let frac = if hi > lo { wr.random_range(lo..=hi) } else { lo };
    let mut len = ((frac * total as f64).round() as usize).clamp(1, total);
    if len < k {
        log::debug!("video {}: window of {len} frames widened to {k}", video.id);
        len = k;
    }
    let start = wr.random_range(0..=total - len);
    let frames: Vec<usize> = segment_sample(len, k, &mut rng.stream("frames"))?
        .into_iter()
        .map(|t| t + start)
        .collect();
    let (scale, size, view_kind) = match kind {
        LocalKind::Temporal => (cfg.global_crop_scale, cfg.global_size, ViewKind::LocalTemporal),
        LocalKind::Spatial => (cfg.local_crop_scale, cfg.local_size, ViewKind::LocalSpatial),
    };
    let crop = random_resized_crop(video.height(), video.width(), scale, cfg.aspect_ratio, &mut rng.stream("crop"));
    let clip = extract_clip(video, &frames, crop, size);
    let (clip, augs) = augment(clip, AugScope::Local, &cfg.aug, &mut rng.stream("aug"));
    Ok(View {
        clip,
        meta: ViewMeta {
            kind: view_kind,
            view_index: rng.view_index(),
            stream_id: rng.id(),
            frames,
            crop,
            window: (start, start + len),
            augs,
        },
    })
}

fn build_one(video: &RawVideo, cfg: &ViewConfig) -> Result<ViewBatch, SamplingError> {
    if video.num_frames() < cfg.max_frames() {
        return Err(SamplingError::TooFewFrames {
            k: cfg.max_frames(),
            total: video.num_frames(),
        });
    }
    let stream = |i: usize| ViewRng::new(cfg.seed, &video.id, i);
    let globals = (0..cfg.n_global)
        .map(|i| make_global_view(video, cfg, &stream(i)))
        .collect::<Result<_, _>>()?;
    let base = cfg.n_global;
    let locals_t = (0..cfg.n_lt)
        .map(|i| make_local_view(video, cfg, &stream(base + i), LocalKind::Temporal))
        .collect::<Result<_, _>>()?;
    let base = base + cfg.n_lt;
    let locals_s = (0..cfg.q)
        .map(|i| make_local_view(video, cfg, &stream(base + i), LocalKind::Spatial))
        .collect::<Result<_, _>>()?;
    Ok(ViewBatch {
        video_id: video.id.clone(),
        label: video.label,
        globals,
        locals_t,
        locals_s,
    })
}

/// Builds every view of every video. View indices run globals first, then
/// local-temporal, then local-spatial. Videos are processed on the current
/// rayon pool; results are independent of the pool size.
pub fn build_view_batch(videos: &[&RawVideo], cfg: &ViewConfig) -> Result<Vec<ViewBatch>, SamplingError> {
    if videos.is_empty() {
        return Err(SamplingError::NoVideos);
    }
    cfg.validate()?;
    videos.par_iter().map(|v| build_one(v, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::super::AugProbs;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(id: &str, t: usize, seed: u64) -> RawVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = NdArray::from_fn(&[t, 3, 24, 20], |_| rng.random::<f32>());
        RawVideo::new(id, frames, Some(0)).unwrap()
    }

    fn small_cfg() -> ViewConfig {
        ViewConfig {
            k_g: 6,
            k_l_choices: vec![2, 3, 6],
            n_global: 2,
            n_lt: 2,
            q: 3,
            global_size: (16, 16),
            local_size: (8, 8),
            ..ViewConfig::default()
        }
    }

    #[test]
    fn shapes_and_counts() {
        let v = video("a", 20, 0);
        let cfg = small_cfg();
        let out = build_view_batch(&[&v], &cfg).unwrap();
        let b = &out[0];
        assert_eq!((b.globals.len(), b.locals_t.len(), b.locals_s.len()), (2, 2, 3));
        for g in &b.globals {
            assert_eq!(g.clip.shape(), &[6, 3, 16, 16]);
        }
        for l in &b.locals_t {
            assert_eq!(&l.clip.shape()[1..], &[3, 16, 16]);
            assert!(cfg.k_l_choices.contains(&l.clip.shape()[0]));
        }
        for l in &b.locals_s {
            assert_eq!(&l.clip.shape()[1..], &[3, 8, 8]);
        }
        let idx: Vec<usize> = b
            .globals
            .iter()
            .chain(&b.locals_t)
            .chain(&b.locals_s)
            .map(|v| v.meta.view_index)
            .collect();
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn full_crop_global_matches_direct_resize() {
        let v = video("b", 12, 1);
        let cfg = ViewConfig {
            global_crop_scale: (1.0, 1.0),
            aspect_ratio: (1.2, 1.2), // 24x20 frame
            aug: AugProbs::none(),
            ..small_cfg()
        };
        let g = make_global_view(&v, &cfg, &ViewRng::new(0, "b", 0)).unwrap();
        assert_eq!(g.meta.crop, CropRect::full(24, 20));
        let direct = extract_clip(&v, &g.meta.frames, CropRect::full(24, 20), (16, 16));
        assert_eq!(g.clip, direct);
    }

    #[test]
    fn degenerate_local_equals_global() {
        let v = video("c", 16, 2);
        let cfg = ViewConfig {
            k_l_choices: vec![6],
            local_window_fraction: (1.0, 1.0),
            global_crop_scale: (1.0, 1.0),
            aspect_ratio: (1.2, 1.2),
            aug: AugProbs::none(),
            ..small_cfg()
        };
        for view in 0..10 {
            let rng = ViewRng::new(5, "c", view);
            let g = make_global_view(&v, &cfg, &rng).unwrap();
            let l = make_local_view(&v, &cfg, &rng, LocalKind::Temporal).unwrap();
            assert_eq!(g.clip, l.clip);
            assert_eq!(g.meta.frames, l.meta.frames);
        }
    }

    #[test]
    fn short_windows_are_widened() {
        let v = video("d", 10, 3);
        let cfg = ViewConfig {
            k_g: 6,
            k_l_choices: vec![6],
            local_window_fraction: (0.1, 0.1),
            ..small_cfg()
        };
        let l = make_local_view(&v, &cfg, &ViewRng::new(0, "d", 0), LocalKind::Spatial).unwrap();
        assert_eq!(l.meta.window.1 - l.meta.window.0, 6);
        assert_eq!(l.meta.frames.len(), 6);
    }

    #[test]
    fn too_short_video_is_rejected() {
        let v = video("e", 4, 0);
        assert!(matches!(
            build_view_batch(&[&v], &small_cfg()),
            Err(SamplingError::TooFewFrames { k: 6, total: 4 })
        ));
        assert_eq!(build_view_batch(&[], &small_cfg()), Err(SamplingError::NoVideos));
    }

    #[test]
    fn input_order_does_not_change_views() {
        let (a, b, c) = (video("a", 14, 0), video("b", 14, 1), video("c", 14, 2));
        let cfg = small_cfg();
        let fwd = build_view_batch(&[&a, &b, &c], &cfg).unwrap();
        let rev = build_view_batch(&[&c, &a, &b], &cfg).unwrap();
        for item in &fwd {
            let other = rev.iter().find(|x| x.video_id == item.video_id).unwrap();
            assert_eq!(item, other);
        }
        let alone = build_view_batch(&[&b], &cfg).unwrap();
        assert_eq!(alone[0], fwd[1]);
    }

    #[test]
    fn thread_count_does_not_change_views() {
        let vids: Vec<RawVideo> = (0..6).map(|i| video(&format!("v{i}"), 12, i)).collect();
        let refs: Vec<&RawVideo> = vids.iter().collect();
        let cfg = small_cfg();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| build_view_batch(&refs, &cfg).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn metadata_is_contained() {
        let cfg = small_cfg();
        for i in 0..40 {
            let v = video(&format!("m{i}"), 6 + i % 30, i as u64);
            let b = build_view_batch(&[&v], &cfg).unwrap().remove(0);
            for view in b.globals.iter().chain(&b.locals_t).chain(&b.locals_s) {
                let m = &view.meta;
                assert!(m.crop.fits(24, 20));
                assert!(m.frames.iter().all(|&t| m.window.0 <= t && t < m.window.1));
                assert!(m.window.1 <= v.num_frames());
                assert!(m.frames.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
