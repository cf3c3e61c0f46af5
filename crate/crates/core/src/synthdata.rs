//! Procedural "group activity" videos: a handful of discs whose collective
//! motion pattern is the class label. Every class shares the same initial
//! appearance distribution, so a single frame carries no label signal.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{create_dir, write_tensor, IoError, Manifest, ManifestEntry, Split};
use crate::sampling::{RawVideo, SamplingError};
use crate::tensor::NdArray;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Converge,
    Disperse,
    RotateCw,
    RotateCcw,
    FollowLeader,
    Split,
}

impl Kernel {
    pub const ALL: [Kernel; 6] = [
        Kernel::Converge,
        Kernel::Disperse,
        Kernel::RotateCw,
        Kernel::RotateCcw,
        Kernel::FollowLeader,
        Kernel::Split,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Converge => "converge",
            Kernel::Disperse => "disperse",
            Kernel::RotateCw => "rotate_cw",
            Kernel::RotateCcw => "rotate_ccw",
            Kernel::FollowLeader => "follow_leader",
            Kernel::Split => "split",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionClass {
    pub name: String,
    pub kernel: Kernel,
    /// Pixels per frame for translating kernels; for converge/disperse the
    /// total radial scale change is derived from it.
    pub speed: (f64, f64),
    /// Radians per frame for the rotating kernels.
    pub angular_velocity: (f64, f64),
}

impl MotionClass {
    pub fn new(kernel: Kernel) -> Self {
        Self {
            name: kernel.name().to_string(),
            kernel,
            speed: (0.6, 1.0),
            angular_velocity: (0.05, 0.09),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// `(height, width)`.
    pub canvas: (usize, usize),
    pub frames: usize,
    /// Inclusive agent count range.
    pub agents: (usize, usize),
    pub radius: (f64, f64),
    /// Agents start uniformly inside a disc of this radius around the
    /// canvas center.
    pub spawn_radius: f64,
    /// Standard deviation of per-frame positional jitter in pixels.
    pub noise: f64,
    pub background: (f64, f64),
    pub classes: Vec<MotionClass>,
    pub per_class: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: (64, 64),
            frames: 32,
            agents: (4, 8),
            radius: (2.5, 4.0),
            spawn_radius: 16.0,
            noise: 0.3,
            background: (0.25, 0.75),
            classes: Kernel::ALL.iter().map(|&k| MotionClass::new(k)).collect(),
            per_class: 100,
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::InvalidConfig(m));
        if self.classes.len() < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes.len()));
        }
        let (h, w) = self.canvas;
        if h < 8 || w < 8 {
            return fail(format!("canvas {h}x{w} is too small"));
        }
        if self.frames < 2 {
            return fail("need at least 2 frames".into());
        }
        if self.agents.0 == 0 || self.agents.0 > self.agents.1 {
            return fail(format!("agent range {:?} is empty", self.agents));
        }
        let (r0, r1) = self.radius;
        if !(r0 > 0.0 && r0 <= r1 && 2.0 * r1 < h.min(w) as f64) {
            return fail(format!("radius range {:?} does not fit the canvas", self.radius));
        }
        if self.per_class == 0 {
            return fail("per_class must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train_fraction must lie in (0, 1)".into());
        }
        if !(self.noise >= 0.0 && self.spawn_radius >= 0.0) {
            return fail("noise and spawn_radius must be nonnegative".into());
        }
        let (b0, b1) = self.background;
        if !(0.0..=1.0).contains(&b0) || !(b0..=1.0).contains(&b1) {
            return fail("background range must lie in [0, 1]".into());
        }
        for c in &self.classes {
            if !(c.speed.0 >= 0.0 && c.speed.0 <= c.speed.1 && c.angular_velocity.0 >= 0.0 && c.angular_velocity.0 <= c.angular_velocity.1) {
                return fail(format!("class `{}` has an invalid parameter range", c.name));
            }
        }
        Ok(())
    }

    /// Videos per class that go to the training split.
    pub fn train_per_class(&self) -> usize {
        ((self.per_class as f64 * self.train_fraction).floor() as usize).clamp(1, self.per_class.max(2) - 1)
    }
}

/// Static appearance shared by every class.
#[derive(Clone, Debug, PartialEq)]
pub struct Agents {
    pub start: Vec<(f64, f64)>,
    pub radius: Vec<f64>,
    pub color: Vec<[f32; 3]>,
    pub background: f32,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws agents and their start positions (`(x, y)`, uniform in the spawn
/// disc). Uses the same draws for every class.
pub fn draw_agents<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Agents {
    let n = rng.random_range(cfg.agents.0..=cfg.agents.1);
    let (h, w) = cfg.canvas;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut start = Vec::with_capacity(n);
    let mut radius = Vec::with_capacity(n);
    let mut color = Vec::with_capacity(n);
    for _ in 0..n {
        let r = cfg.spawn_radius * rng.random::<f64>().sqrt();
        let a = rng.random::<f64>() * TAU;
        start.push((cx + r * a.cos(), cy + r * a.sin()));
        radius.push(uniform(rng, cfg.radius));
        color.push([rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]);
    }
    Agents {
        start,
        radius,
        color,
        background: uniform(rng, cfg.background) as f32,
    }
}

/// Per-video kernel parameters drawn after the appearance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionParams {
    pub speed: f64,
    pub angular_velocity: f64,
    /// Heading (radians, `y` up) for follow_leader and the split axis.
    pub heading: f64,
    /// Curvature of the leader path in radians per frame.
    pub turn: f64,
}

pub fn draw_motion<R: Rng>(class: &MotionClass, rng: &mut R) -> MotionParams {
    MotionParams {
        speed: uniform(rng, class.speed),
        angular_velocity: uniform(rng, class.angular_velocity),
        heading: rng.random::<f64>() * TAU,
        turn: rng.random_range(-0.05..0.05),
    }
}

fn centroid(p: &[(f64, f64)]) -> (f64, f64) {
    let n = p.len() as f64;
    let (sx, sy) = p.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    (sx / n, sy / n)
}

/// Positions of every agent at every frame, before jitter and clamping.
/// Angles use the `y`-up convention, so clockwise on screen means a
/// decreasing angle.
pub fn trajectory(kernel: Kernel, m: &MotionParams, start: &[(f64, f64)], frames: usize) -> Vec<Vec<(f64, f64)>> {
    let (cx, cy) = centroid(start);
    let radial = |scale: f64| -> Vec<(f64, f64)> {
        start
            .iter()
            .map(|&(x, y)| (cx + (x - cx) * scale, cy + (y - cy) * scale))
            .collect()
    };
    let rotate = |angle: f64| -> Vec<(f64, f64)> {
        let (s, c) = angle.sin_cos();
        start
            .iter()
            .map(|&(x, y)| {
                // screen y grows downward, so flip before and after
                let (dx, dy) = (x - cx, cy - y);
                (cx + dx * c - dy * s, cy - (dx * s + dy * c))
            })
            .collect()
    };
    let last = (frames - 1).max(1) as f64;
    match kernel {
        Kernel::Converge | Kernel::Disperse => {
            // Total log-scale change grows with speed: 0.6 px/frame shrinks
            // the group to about a third over the clip.
            let k = (m.speed * 1.8).max(0.1);
            let sign = if kernel == Kernel::Converge { -1.0 } else { 1.0 };
            (0..frames).map(|t| radial((sign * k * t as f64 / last).exp())).collect()
        }
        Kernel::RotateCw => (0..frames).map(|t| rotate(-m.angular_velocity * t as f64)).collect(),
        Kernel::RotateCcw => (0..frames).map(|t| rotate(m.angular_velocity * t as f64)).collect(),
        Kernel::Split => {
            let (ux, uy) = (m.heading.cos(), -m.heading.sin());
            let side: Vec<f64> = start
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| {
                    let d = (x - cx) * ux + (y - cy) * uy;
                    if d > 0.0 || (d == 0.0 && i % 2 == 0) {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect();
            (0..frames)
                .map(|t| {
                    start
                        .iter()
                        .zip(&side)
                        .map(|(&(x, y), s)| (x + s * ux * m.speed * t as f64, y + s * uy * m.speed * t as f64))
                        .collect()
                })
                .collect()
        }
        Kernel::FollowLeader => {
            let mut pos = start.to_vec();
            let mut heading = m.heading;
            let mut out = Vec::with_capacity(frames);
            out.push(pos.clone());
            for _ in 1..frames {
                heading += m.turn;
                let prev = pos.clone();
                pos[0].0 += m.speed * heading.cos();
                pos[0].1 -= m.speed * heading.sin();
                for i in 1..pos.len() {
                    // each agent closes part of the gap to the one ahead
                    let (tx, ty) = prev[i - 1];
                    let (dx, dy) = (tx - pos[i].0, ty - pos[i].1);
                    let d = (dx * dx + dy * dy).sqrt();
                    if d > 1e-9 {
                        let step = (0.25 * d).min(1.5 * m.speed);
                        pos[i].0 += step * dx / d;
                        pos[i].1 += step * dy / d;
                    }
                }
                out.push(pos.clone());
            }
            out
        }
    }
}

/// Adds anti-aliased discs over a flat background. Coverage of a pixel is
/// `clamp(r + 0.5 - d, 0, 1)` with `d` the distance from its center.
pub fn render_frame(canvas: (usize, usize), agents: &Agents, positions: &[(f64, f64)], out: &mut [f32]) {
    let (h, w) = canvas;
    let plane = h * w;
    out.iter_mut().for_each(|v| *v = agents.background);
    for ((&(px, py), &r), color) in positions.iter().zip(&agents.radius).zip(&agents.color) {
        let y0 = ((py - r - 1.0).floor().max(0.0)) as usize;
        let y1 = ((py + r + 1.0).ceil() as usize).min(h);
        let x0 = ((px - r - 1.0).floor().max(0.0)) as usize;
        let x1 = ((px + r + 1.0).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((x as f64 + 0.5 - px).powi(2) + (y as f64 + 0.5 - py).powi(2)).sqrt();
                let a = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                if a > 0.0 {
                    for (c, &cv) in color.iter().enumerate() {
                        let v = &mut out[c * plane + y * w + x];
                        *v = (1.0 - a) * *v + a * cv;
                    }
                }
            }
        }
    }
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"synthvid");
    ChaCha8Rng::from_seed(key)
}

/// Frames `[T, 3, H, W]` of one video. Jitter is drawn per frame and agent,
/// then positions are clamped so that every disc stays on the canvas.
pub fn generate_video(class: &MotionClass, label: usize, id: &str, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<RawVideo, SynthError> {
    let agents = draw_agents(cfg, rng);
    let motion = draw_motion(class, rng);
    let path = trajectory(class.kernel, &motion, &agents.start, cfg.frames);
    let (h, w) = cfg.canvas;
    let jitter = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let per = 3 * h * w;
    let mut data = vec![0.0f32; cfg.frames * per];
    for (frame, positions) in data.chunks_mut(per).zip(&path) {
        let placed: Vec<(f64, f64)> = positions
            .iter()
            .zip(&agents.radius)
            .map(|(&(x, y), &r)| {
                let (jx, jy) = if cfg.noise > 0.0 {
                    (jitter.sample(rng), jitter.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                ((x + jx).clamp(r, w as f64 - r), (y + jy).clamp(r, h as f64 - r))
            })
            .collect();
        render_frame(cfg.canvas, &agents, &placed, frame);
    }
    let frames = NdArray::from_vec(&[cfg.frames, 3, h, w], data).expect("frame extents");
    Ok(RawVideo::new(id, frames, Some(label))?)
}

pub fn video_id(class: &MotionClass, i: usize) -> String {
    format!("{}_{i:04}", class.name)
}

/// Which per-class indices land in the training split.
fn train_members(cfg: &SceneConfig, label: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..cfg.per_class).collect();
    idx.shuffle(&mut video_rng(cfg.seed ^ 0x5b11_7000, label));
    let mut train = vec![false; cfg.per_class];
    for &i in &idx[..cfg.train_per_class()] {
        train[i] = true;
    }
    train
}

/// Every video of the dataset with its split, in class-major order.
pub fn generate_all(cfg: &SceneConfig) -> Result<Vec<(RawVideo, Split)>, SynthError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize, bool)> = (0..cfg.classes.len())
        .flat_map(|label| {
            let members = train_members(cfg, label);
            (0..cfg.per_class).map(move |i| (label, i, members[i]))
        })
        .collect();
    jobs.par_iter()
        .map(|&(label, i, train)| {
            let class = &cfg.classes[label];
            let mut rng = video_rng(cfg.seed, label * cfg.per_class + i);
            let v = generate_video(class, label, &video_id(class, i), cfg, &mut rng)?;
            Ok((v, if train { Split::Train } else { Split::Test }))
        })
        .collect()
}

/// Writes `videos/<id>.spvd` for every video plus `manifest.json`, and
/// returns the manifest path.
pub fn generate_dataset(cfg: &SceneConfig, out_dir: &Path) -> Result<PathBuf, SynthError> {
    let videos = generate_all(cfg)?;
    let dir = out_dir.join("videos");
    create_dir(&dir)?;
    let entries = videos
        .par_iter()
        .map(|(v, split)| {
            let file = format!("videos/{}.spvd", v.id);
            write_tensor(&out_dir.join(&file), v.frames())?;
            let label = v.label.expect("synthetic videos are labeled");
            Ok(ManifestEntry {
                id: v.id.clone(),
                file,
                label,
                class_name: cfg.classes[label].name.clone(),
                split: *split,
                shape: v.frames().shape().to_vec(),
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    let path = out_dir.join("manifest.json");
    Manifest {
        root: out_dir.to_path_buf(),
        entries,
    }
    .save(&path)?;
    Ok(path)
}

/// Per-channel mean of one frame.
pub fn mean_pooled_frame(video: &RawVideo, t: usize) -> Vec<f32> {
    let plane = video.height() * video.width();
    video
        .frame(t)
        .chunks(plane)
        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn angle(p: (f64, f64), c: (f64, f64)) -> f64 {
        (c.1 - p.1).atan2(p.0 - c.0)
    }

    fn unwrap_delta(a: f64, b: f64) -> f64 {
        let mut d = b - a;
        while d > std::f64::consts::PI {
            d -= TAU;
        }
        while d < -std::f64::consts::PI {
            d += TAU;
        }
        d
    }

    fn setup(kernel: Kernel, seed: u64) -> (Agents, MotionParams, Vec<Vec<(f64, f64)>>) {
        let cfg = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agents = draw_agents(&cfg, &mut rng);
        let m = draw_motion(&MotionClass::new(kernel), &mut rng);
        let path = trajectory(kernel, &m, &agents.start, cfg.frames);
        (agents, m, path)
    }

    #[test]
    fn rotate_cw_angles_decrease() {
        for seed in 0..20 {
            let (agents, _, path) = setup(Kernel::RotateCw, seed);
            let c = centroid(&agents.start);
            for pair in path.windows(2) {
                for (a, b) in pair[0].iter().zip(&pair[1]) {
                    if (a.0 - c.0).hypot(a.1 - c.1) > 1e-6 {
                        assert!(unwrap_delta(angle(*a, c), angle(*b, c)) < 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn reversed_cw_is_a_valid_ccw_trajectory() {
        let class = MotionClass::new(Kernel::RotateCcw);
        for seed in 0..20 {
            let (agents, m, path) = setup(Kernel::RotateCw, seed);
            let c = centroid(&agents.start);
            let reversed: Vec<_> = path.iter().rev().cloned().collect();
            // reversed path equals a ccw path from the reversed start
            let ccw = trajectory(Kernel::RotateCcw, &m, &reversed[0], reversed.len());
            for (a, b) in reversed.iter().flatten().zip(ccw.iter().flatten()) {
                assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
            }
            let (lo, hi) = class.angular_velocity;
            for pair in reversed.windows(2) {
                let d = unwrap_delta(angle(pair[0][0], c), angle(pair[1][0], c));
                assert!(d >= lo - 1e-12 && d <= hi + 1e-12, "{d}");
            }
        }
    }

    fn mean_pairwise(p: &[(f64, f64)]) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                total += (p[i].0 - p[j].0).hypot(p[i].1 - p[j].1);
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn converge_and_disperse_change_spread() {
        for seed in 0..20 {
            let (_, _, c) = setup(Kernel::Converge, seed);
            assert!(mean_pairwise(c.last().unwrap()) < mean_pairwise(&c[0]));
            let (_, _, d) = setup(Kernel::Disperse, seed);
            assert!(mean_pairwise(d.last().unwrap()) > mean_pairwise(&d[0]));
        }
    }

    #[test]
    fn first_frames_do_not_depend_on_the_class() {
        let cfg = SceneConfig { noise: 0.0, ..SceneConfig::default() };
        let frames: Vec<NdArray<f32>> = Kernel::ALL
            .iter()
            .map(|&k| {
                let mut rng = video_rng(5, 0);
                generate_video(&MotionClass::new(k), 0, "v", &cfg, &mut rng).unwrap().frames().clone()
            })
            .collect();
        let plane = 3 * 64 * 64;
        for f in &frames[1..] {
            assert_eq!(&f.data()[..plane], &frames[0].data()[..plane]);
        }
    }

    #[test]
    fn pixels_and_discs_stay_in_bounds() {
        let cfg = SceneConfig { per_class: 3, ..SceneConfig::default() };
        for (v, _) in generate_all(&cfg).unwrap() {
            assert!(v.frames().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        // an agent pushed far outside is clamped onto the canvas
        let agents = Agents {
            start: vec![(0.0, 0.0)],
            radius: vec![3.0],
            color: vec![[1.0, 1.0, 1.0]],
            background: 0.0,
        };
        let mut frame = vec![0.0f32; 3 * 16 * 16];
        let p = ((-40.0f64).clamp(3.0, 13.0), 90.0f64.clamp(3.0, 13.0));
        render_frame((16, 16), &agents, &[p], &mut frame);
        let mass: f32 = frame[..256].iter().sum();
        assert!((mass as f64 - std::f64::consts::PI * 9.0).abs() < 1.0, "{mass}");
    }

    #[test]
    fn disc_centroid_matches_position() {
        let agents = Agents {
            start: vec![(0.0, 0.0)],
            radius: vec![3.5],
            color: vec![[1.0, 0.0, 0.0]],
            background: 0.0,
        };
        let mut frame = vec![0.0f32; 3 * 32 * 32];
        render_frame((32, 32), &agents, &[(12.3, 20.7)], &mut frame);
        let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..32 {
            for x in 0..32 {
                let a = frame[y * 32 + x] as f64;
                m += a;
                sx += a * (x as f64 + 0.5);
                sy += a * (y as f64 + 0.5);
            }
        }
        assert!((sx / m - 12.3).abs() < 0.05 && (sy / m - 20.7).abs() < 0.05);
    }

    #[test]
    fn dataset_is_stratified_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            per_class: 8,
            frames: 6,
            canvas: (16, 16),
            radius: (1.5, 2.0),
            spawn_radius: 4.0,
            ..SceneConfig::default()
        };
        let path = generate_dataset(&cfg, dir.path()).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.entries.len(), 48);
        for label in 0..6 {
            let train = m.split(Split::Train).filter(|e| e.label == label).count();
            let test = m.split(Split::Test).filter(|e| e.label == label).count();
            assert_eq!((train, test), (6, 2));
        }
        let again = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, again.path()).unwrap();
        for e in &m.entries {
            let a = std::fs::read(dir.path().join(&e.file)).unwrap();
            let b = std::fs::read(again.path().join(&e.file)).unwrap();
            assert_eq!(a, b, "{}", e.id);
        }
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(again.path().join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn split_counts() {
        let cfg = SceneConfig::default();
        assert_eq!(cfg.train_per_class() * 6, 450);
        let cfg = SceneConfig { per_class: 134, ..cfg };
        assert_eq!(cfg.train_per_class(), 100);
        assert!(SceneConfig { classes: vec![MotionClass::new(Kernel::Split)], ..SceneConfig::default() }
            .validate()
            .is_err());
    }
}
