use rand::Rng;
use serde::{Deserialize, Serialize};

/// Pixel rectangle inside a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height > 0 && self.width > 0 && self.top + self.height <= height && self.left + self.width <= width
    }
}

const CROP_TRIES: usize = 10;

/// Draws a crop covering `scale` of the frame area with a log-uniform aspect
/// ratio in `ratio`. Falls back to the whole frame after ten rejected tries.
pub fn random_resized_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> CropRect {
    let area = (height * width) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..CROP_TRIES {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropRect {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    CropRect::full(height, width)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Bilinear resize of one channel-major frame region to `(out_h, out_w)`
/// using half-pixel centers (`align_corners = false`): output pixel `d` samples
/// source coordinate `(d + 0.5) * in / out - 0.5`, clamped to the region.
pub fn resize_bilinear(
    frame: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    rect: CropRect,
    out_h: usize,
    out_w: usize,
    out: &mut [f32],
) {
    debug_assert!(rect.fits(height, width));
    debug_assert_eq!(out.len(), channels * out_h * out_w);
    let ys = axis_weights(rect.top, rect.height, out_h);
    let xs = axis_weights(rect.left, rect.width, out_w);
    for c in 0..channels {
        let src = &frame[c * height * width..(c + 1) * height * width];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * width + x0] * (1.0 - fx) + src[y0 * width + x1] * fx;
                let bottom = src[y1 * width + x0] * (1.0 - fx) + src[y1 * width + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
}

/// Per output index: the two source indices and the weight of the second.
fn axis_weights(start: usize, len: usize, out: usize) -> Vec<(usize, usize, f32)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            let f = (s - i0 as f64) as f32;
            (start + i0, start + i1, f)
        })
        .collect()
}
