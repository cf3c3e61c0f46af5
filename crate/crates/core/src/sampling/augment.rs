use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AugProbs;
use crate::tensor::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugScope {
    Global,
    Local,
}

/// Which augmentations fired for a view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AppliedAugs {
    pub color_jitter: bool,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarize: bool,
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Augments a `[K, 3, H, W]` clip. Every Bernoulli draw and every jitter
/// factor is taken once per view, so all frames receive the same transform.
/// Blur and solarization only apply to global views. The draw sequence is
/// fixed regardless of which augmentations fire.
pub fn augment<R: Rng + ?Sized>(
    mut clip: NdArray<f32>,
    scope: AugScope,
    probs: &AugProbs,
    rng: &mut R,
) -> (NdArray<f32>, AppliedAugs) {
    let jitter = rng.random::<f64>() < probs.color_jitter_p;
    let factors = [
        symmetric(rng, probs.brightness, 1.0),
        symmetric(rng, probs.contrast, 1.0),
        symmetric(rng, probs.saturation, 1.0),
        symmetric(rng, probs.hue, 0.0),
    ];
    let gray = rng.random::<f64>() < probs.grayscale_p;
    let (mut blur, mut solarize) = (None, false);
    if scope == AugScope::Global {
        let fire = rng.random::<f64>() < probs.blur_p;
        let (lo, hi) = probs.blur_sigma;
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
        if fire {
            blur = Some(sigma);
        }
        solarize = rng.random::<f64>() < probs.solarize_p;
    }
    let applied = AppliedAugs {
        color_jitter: jitter,
        grayscale: gray,
        blur_sigma: blur,
        solarize,
    };
    let (k, h, w) = (clip.shape()[0], clip.shape()[2], clip.shape()[3]);
    let plane = h * w;
    for frame in clip.data_mut().chunks_mut(3 * plane) {
        if jitter {
            color_jitter(frame, plane, factors);
        }
        if gray {
            grayscale(frame, plane);
        }
        if let Some(sigma) = blur {
            for ch in frame.chunks_mut(plane) {
                gaussian_blur(ch, h, w, sigma);
            }
        }
        if solarize {
            let t = probs.solarize_threshold as f32;
            for v in frame.iter_mut() {
                if *v >= t {
                    *v = 1.0 - *v;
                }
            }
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    debug_assert_eq!(clip.len(), k * 3 * plane);
    (clip, applied)
}

/// Uniform in `[center - s, center + s]` (lower end floored at 0 for
/// multiplicative factors).
fn symmetric<R: Rng + ?Sized>(rng: &mut R, s: f64, center: f64) -> f32 {
    let u: f64 = rng.random();
    let lo = if center > 0.0 { (center - s).max(0.0) } else { center - s };
    (lo + u * (center + s - lo)) as f32
}

fn luma(frame: &[f32], plane: usize, i: usize) -> f32 {
    LUMA[0] * frame[i] + LUMA[1] * frame[plane + i] + LUMA[2] * frame[2 * plane + i]
}

fn clamp_all(frame: &mut [f32]) {
    for v in frame.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Brightness, contrast, saturation, then hue, clamping after each step.
fn color_jitter(frame: &mut [f32], plane: usize, [b, c, s, hue]: [f32; 4]) {
    for v in frame.iter_mut() {
        *v *= b;
    }
    clamp_all(frame);
    let mean = (0..plane).map(|i| luma(frame, plane, i)).sum::<f32>() / plane as f32;
    for v in frame.iter_mut() {
        *v = (*v - mean) * c + mean;
    }
    clamp_all(frame);
    for i in 0..plane {
        let g = luma(frame, plane, i);
        for ch in 0..3 {
            let v = &mut frame[ch * plane + i];
            *v = (*v - g) * s + g;
        }
    }
    clamp_all(frame);
    if hue != 0.0 {
        for i in 0..plane {
            let (h, sat, val) = rgb_to_hsv(frame[i], frame[plane + i], frame[2 * plane + i]);
            let (r, g, bl) = hsv_to_rgb((h + hue).rem_euclid(1.0), sat, val);
            frame[i] = r;
            frame[plane + i] = g;
            frame[2 * plane + i] = bl;
        }
    }
}

fn grayscale(frame: &mut [f32], plane: usize) {
    for i in 0..plane {
        let g = luma(frame, plane, i);
        frame[i] = g;
        frame[plane + i] = g;
        frame[2 * plane + i] = g;
    }
}

/// Hue in turns `[0, 1)`.
fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian with clamp-to-edge borders.
fn gaussian_blur(ch: &mut [f32], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let xx = (x as isize + j as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * ch[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let yy = (y as isize + j as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            ch[y * w + x] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(seed: u64) -> NdArray<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NdArray::from_fn(&[3, 3, 6, 5], |_| rng.random::<f32>())
    }

    fn always() -> AugProbs {
        AugProbs {
            color_jitter_p: 1.0,
            grayscale_p: 1.0,
            blur_p: 1.0,
            solarize_p: 1.0,
            ..AugProbs::default()
        }
    }

    #[test]
    fn disabled_augmentations_are_identity() {
        let x = clip(0);
        for scope in [AugScope::Global, AugScope::Local] {
            let (y, a) = augment(x.clone(), scope, &AugProbs::none(), &mut ChaCha8Rng::seed_from_u64(4));
            assert_eq!(y, x);
            assert_eq!(a, AppliedAugs::default());
        }
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let probs = AugProbs {
            grayscale_p: 1.0,
            ..AugProbs::none()
        };
        let (y, a) = augment(clip(1), AugScope::Local, &probs, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(a.grayscale);
        let plane = 30;
        for f in y.data().chunks(3 * plane) {
            for i in 0..plane {
                assert_eq!(f[i], f[plane + i]);
                assert_eq!(f[i], f[2 * plane + i]);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let run = || augment(clip(2), AugScope::Global, &AugProbs::default(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(run(), run());
    }

    #[test]
    fn local_scope_never_blurs_or_solarizes() {
        for seed in 0..50 {
            let (_, a) = augment(clip(3), AugScope::Local, &always(), &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(a.blur_sigma.is_none() && !a.solarize);
            assert!(a.color_jitter && a.grayscale);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        for seed in 0..20 {
            let (y, _) = augment(clip(seed), AugScope::Global, &always(), &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn every_frame_gets_the_same_transform() {
        let frame: Vec<f32> = clip(4).data()[..90].to_vec();
        let repeated = NdArray::from_vec(&[3, 3, 6, 5], [frame.clone(), frame.clone(), frame].concat()).unwrap();
        let (y, _) = augment(repeated, AugScope::Global, &always(), &mut ChaCha8Rng::seed_from_u64(5));
        let d = y.data();
        assert_eq!(&d[..90], &d[90..180]);
        assert_eq!(&d[..90], &d[180..]);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let (r, g, b) = (rng.random(), rng.random(), rng.random());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let mut ch = vec![0.25f32; 7 * 9];
        gaussian_blur(&mut ch, 7, 9, 1.3);
        assert!(ch.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let mut spike = vec![0.0f32; 21 * 21];
        spike[10 * 21 + 10] = 1.0;
        gaussian_blur(&mut spike, 21, 21, 1.0);
        let total: f32 = spike.iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!(spike[10 * 21 + 10] < 0.2);
    }
}
