//! Fixed sinusoidal encodings over normalized coordinates. Positions are
//! mapped into `[0, 1]` before encoding, so any frame count or grid size is
//! covered without interpolation.

use crate::tensor::NdArray;

fn normalized(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Writes `dim` channels of `(sin, cos)` pairs for `coord * scale` at
/// frequencies `10000^(-2i / dim)`.
pub fn sinusoid(coord: f64, scale: f64, out: &mut [f64]) {
    let dim = out.len();
    for i in 0..dim / 2 {
        let angle = coord * scale / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
}

/// `[gh * gw, dim]`: the first half of the channels encodes the row, the
/// second half the column.
pub fn spatial_encoding(gh: usize, gw: usize, dim: usize, scale: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; gh * gw * dim];
    for r in 0..gh {
        for c in 0..gw {
            let row = &mut out[(r * gw + c) * dim..(r * gw + c + 1) * dim];
            sinusoid(normalized(r, gh), scale, &mut row[..half]);
            sinusoid(normalized(c, gw), scale, &mut row[half..]);
        }
    }
    out
}

/// `[frames, dim]` from `t / (frames - 1)` (zero for a single frame).
pub fn temporal_encoding(frames: usize, dim: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; frames * dim];
    for (t, row) in out.chunks_mut(dim).enumerate() {
        sinusoid(normalized(t, frames), scale, row);
    }
    out
}

/// Sum of spatial and temporal encodings for every patch token, laid out as
/// `[frames * gh * gw, dim]`.
pub fn positional_encoding(frames: usize, gh: usize, gw: usize, dim: usize, scale: f64) -> NdArray<f64> {
    let sp = spatial_encoding(gh, gw, dim, scale);
    let tp = temporal_encoding(frames, dim, scale);
    let ns = gh * gw;
    NdArray::from_fn(&[frames * ns, dim], |i| {
        let (row, ch) = (i / dim, i % dim);
        sp[(row % ns) * dim + ch] + tp[(row / ns) * dim + ch]
    })
}
