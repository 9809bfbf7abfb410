//! Procedural video/depth scenes: one sprite moving over a gradient
//! background, with analytic depth (larger = nearer), pose heatmaps,
//! foreground masks and the depth <-> RGB colormap codec.
//!
//! Dataset layout on disk:
//!
//! ```text
//! <root>/index.txt                 frames/size header, then `<scene_dir> <split>` lines
//! <root>/<scene_dir>/spec.txt      `key = value` scene parameters
//! <root>/<scene_dir>/video_LL.png  RGB frame
//! <root>/<scene_dir>/depth_LL.png  16-bit grayscale depth
//! <root>/<scene_dir>/depth_rgb_LL.png
//! <root>/<scene_dir>/mask_LL.png
//! <root>/<scene_dir>/pose_LL_K.png heatmap divided by its peak scale
//! <root>/<scene_dir>/fg.png, bg.png
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// Keypoints per sprite: center, leading edge, trailing edge.
pub const NUM_KEYPOINTS: usize = 3;
/// Gaussian width of a keypoint heatmap, in pixels.
pub const HEATMAP_SIGMA: f64 = 1.5;
/// Samples in the colormap inverse lookup table.
pub const COLORMAP_SAMPLES: usize = 1024;
/// Fraction of scenes assigned to the evaluation split.
pub const EVAL_FRACTION: f64 = 0.2;
/// Hue bins used to keep sprite colors disjoint between splits.
pub const COLOR_BINS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Circle,
    Square,
    Capsule,
}

impl SpriteShape {
    pub const ALL: [SpriteShape; 3] = [Self::Circle, Self::Square, Self::Capsule];

    /// Half extents `(x, y)` in units of the sprite radius.
    fn half_extent(self) -> (f64, f64) {
        match self {
            Self::Circle | Self::Square => (1.0, 1.0),
            Self::Capsule => (1.5, 0.5),
        }
    }

    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Square => dx.abs() <= r && dy.abs() <= r,
            Self::Capsule => {
                let cx = dx.clamp(-r, r);
                let (ex, ey) = (dx - cx, dy);
                ex * ex + ey * ey <= 0.25 * r * r
            }
        }
    }
}

impl fmt::Display for SpriteShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Capsule => "capsule",
        })
    }
}

impl FromStr for SpriteShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(Self::Circle),
            "square" => Ok(Self::Square),
            "capsule" => Ok(Self::Capsule),
            other => Err(Error::param("sprite_shape", format!("unknown shape `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    Grayscale,
    #[default]
    Hot,
}

impl fmt::Display for Colormap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Grayscale => "grayscale",
            Self::Hot => "hot",
        })
    }
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grayscale" => Ok(Self::Grayscale),
            "hot" => Ok(Self::Hot),
            other => Err(Error::param("colormap", format!("unknown colormap `{other}`"))),
        }
    }
}

/// Center path in frame fractions: `start + velocity * l`, plus a vertical
/// sway `amplitude * sin(2 pi l / period)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub sway_amplitude: f64,
    pub sway_period: f64,
}

impl Trajectory {
    pub fn center(&self, frame: usize) -> (f64, f64) {
        let l = frame as f64;
        let sway = if self.sway_period > 0.0 {
            self.sway_amplitude * (2.0 * std::f64::consts::PI * l / self.sway_period).sin()
        } else {
            0.0
        };
        (self.start.0 + self.velocity.0 * l, self.start.1 + self.velocity.1 * l + sway)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub sprite_shape: SpriteShape,
    pub sprite_color: [f64; 3],
    /// Radius as a fraction of the frame height.
    pub sprite_radius: f64,
    pub trajectory: Trajectory,
    pub sprite_depth: f64,
    /// Background depth at the top and bottom rows.
    pub bg_gradient: (f64, f64),
    /// Background tint multiplied by the gradient.
    pub bg_tint: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    /// Hue bin of the sprite color.
    pub fn color_bin(&self) -> usize {
        color_bin(self.sprite_color)
    }

    pub fn validate(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        let bad = |reason: String| Err(Error::Spec(reason));
        if !(self.sprite_radius > 0.0) {
            return bad(format!("sprite_radius must be > 0, got {}", self.sprite_radius));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !self.sprite_color.iter().chain(&self.bg_tint).all(|&c| unit(c)) {
            return bad("colors must lie in [0,1]".into());
        }
        let (top, bot) = self.bg_gradient;
        if !(unit(top) && unit(bot)) || !(self.sprite_depth > 0.0 && self.sprite_depth < 1.0) {
            return bad("depths must lie in [0,1] with sprite depth in (0,1)".into());
        }
        if (self.sprite_depth - top.max(bot)) < 0.1 && (top.min(bot) - self.sprite_depth) < 0.1 {
            return bad(format!(
                "sprite depth {} is within 0.1 of the background range [{}, {}]",
                self.sprite_depth,
                top.min(bot),
                top.max(bot)
            ));
        }
        let (ex, ey) = self.sprite_shape.half_extent();
        let r = self.sprite_radius * height as f64;
        for l in 0..frames {
            let (cx, cy) = self.trajectory.center(l);
            let (px, py) = (cx * width as f64, cy * height as f64);
            if px - ex * r < 1.0 || px + ex * r > width as f64 - 1.0 || py - ey * r < 1.0 || py + ey * r > height as f64 - 1.0
            {
                return bad(format!("trajectory leaves the frame at frame {l}"));
            }
        }
        Ok(())
    }
}

/// One rendered scene. Images are in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub spec: SceneSpec,
    /// `[L, 3, H, W]`.
    pub video: Tensor<f32>,
    /// `[L, 1, H, W]`.
    pub depth: Tensor<f32>,
    /// `[L, 3, H, W]`.
    pub depth_rgb: Tensor<f32>,
    /// `[L, K_p, H, W]`.
    pub pose_heatmaps: Tensor<f32>,
    /// `[L, H, W]` in {0, 1}.
    pub fg_mask: Tensor<f32>,
    /// Sprite at frame 0 over black, `[3, H, W]`.
    pub fg_image: Tensor<f32>,
    /// Background without the sprite, `[3, H, W]`.
    pub bg_image: Tensor<f32>,
    /// Sprite center per frame in pixels `(x, y)`.
    pub centers: Vec<(f64, f64)>,
    pub colormap: Colormap,
}

impl SceneSample {
    pub fn frames(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.video.shape()[2], self.video.shape()[3])
    }
}

fn hue_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn color_bin(c: [f64; 3]) -> usize {
    let [r, g, b] = c;
    let (mx, mn) = (r.max(g).max(b), r.min(g).min(b));
    let d = mx - mn;
    if d <= 0.0 {
        return 0;
    }
    let h = if mx == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if mx == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    ((h * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1)
}

static CLAMPED_DEPTHS: AtomicUsize = AtomicUsize::new(0);

/// Number of out-of-range depth values clamped by [`depth_to_rgb`] so far.
pub fn clamped_depth_count() -> usize {
    CLAMPED_DEPTHS.load(Ordering::Relaxed)
}

pub fn colormap_rgb(d: f64, cmap: Colormap) -> [f64; 3] {
    match cmap {
        Colormap::Grayscale => [d, d, d],
        Colormap::Hot => [
            (3.0 * d).clamp(0.0, 1.0),
            (3.0 * d - 1.0).clamp(0.0, 1.0),
            (3.0 * d - 2.0).clamp(0.0, 1.0),
        ],
    }
}

/// `[..., 1, H, W]` depth -> `[..., 3, H, W]` colors.
pub fn depth_to_rgb(depth: &Tensor<f32>, cmap: Colormap) -> Result<Tensor<f32>> {
    let s = depth.shape();
    if s.len() < 3 || s[s.len() - 3] != 1 {
        return Err(Error::shape("depth_to_rgb", &[1, 0, 0], s));
    }
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 3] = 3;
    let mut out = Tensor::zeros(&shape);
    let mut clamped = 0;
    for (img, dst) in depth.data().chunks(plane).zip(out.data_mut().chunks_mut(3 * plane)) {
        for (k, &d) in img.iter().enumerate() {
            let mut d = d as f64;
            if !(0.0..=1.0).contains(&d) {
                clamped += 1;
                d = d.clamp(0.0, 1.0);
            }
            let rgb = colormap_rgb(d, cmap);
            for c in 0..3 {
                dst[c * plane + k] = rgb[c] as f32;
            }
        }
    }
    CLAMPED_DEPTHS.fetch_add(clamped, Ordering::Relaxed);
    Ok(out)
}

/// Nearest point on the colormap curve: dense lookup over
/// [`COLORMAP_SAMPLES`] samples, refined by projecting onto the two adjacent
/// curve segments.
fn invert_hot(rgb: [f64; 3], lut: &[[f64; 3]]) -> f64 {
    let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
    let (best, _) = lut
        .iter()
        .enumerate()
        .map(|(k, &p)| (k, dist(rgb, p)))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    let step = 1.0 / (lut.len() - 1) as f64;
    let mut t_best = best as f64 * step;
    let mut d_best = dist(rgb, lut[best]);
    for (a, b) in [(best.saturating_sub(1), best), (best, (best + 1).min(lut.len() - 1))] {
        if a == b {
            continue;
        }
        let (pa, pb) = (lut[a], lut[b]);
        let seg: [f64; 3] = std::array::from_fn(|c| pb[c] - pa[c]);
        let len2: f64 = seg.iter().map(|x| x * x).sum();
        if len2 == 0.0 {
            continue;
        }
        let u = ((0..3).map(|c| (rgb[c] - pa[c]) * seg[c]).sum::<f64>() / len2).clamp(0.0, 1.0);
        let p: [f64; 3] = std::array::from_fn(|c| pa[c] + u * seg[c]);
        let dd = dist(rgb, p);
        if dd < d_best {
            d_best = dd;
            t_best = (a as f64 + u) * step;
        }
    }
    t_best
}

fn hot_lut() -> Vec<[f64; 3]> {
    (0..COLORMAP_SAMPLES)
        .map(|k| colormap_rgb(k as f64 / (COLORMAP_SAMPLES - 1) as f64, Colormap::Hot))
        .collect()
}

/// `[..., 3, H, W]` colors -> `[..., 1, H, W]` depth in `[0, 1]`.
pub fn rgb_to_depth(rgb: &Tensor<f32>, cmap: Colormap) -> Result<Tensor<f32>> {
    let s = rgb.shape();
    if s.len() < 3 || s[s.len() - 3] != 3 {
        return Err(Error::shape("rgb_to_depth", &[3, 0, 0], s));
    }
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 3] = 1;
    let mut out = Tensor::zeros(&shape);
    let lut = if cmap == Colormap::Hot { hot_lut() } else { Vec::new() };
    for (img, dst) in rgb.data().chunks(3 * plane).zip(out.data_mut().chunks_mut(plane)) {
        for (k, d) in dst.iter_mut().enumerate() {
            let px = [img[k] as f64, img[plane + k] as f64, img[2 * plane + k] as f64];
            *d = match cmap {
                Colormap::Grayscale => ((px[0] + px[1] + px[2]) / 3.0).clamp(0.0, 1.0),
                Colormap::Hot => invert_hot(px, &lut),
            } as f32;
        }
    }
    Ok(out)
}

fn keypoints(spec: &SceneSpec, center: (f64, f64), h: usize) -> [(f64, f64); NUM_KEYPOINTS] {
    let (vx, vy) = spec.trajectory.velocity;
    let norm = (vx * vx + vy * vy).sqrt();
    let (ux, uy) = if norm > 0.0 { (vx / norm, vy / norm) } else { (1.0, 0.0) };
    let (ex, ey) = spec.sprite_shape.half_extent();
    let r = spec.sprite_radius * h as f64;
    // distance from the center to the sprite boundary along the motion
    let reach = r * ((ex * ux).powi(2) + (ey * uy).powi(2)).sqrt();
    [
        center,
        (center.0 + reach * ux, center.1 + reach * uy),
        (center.0 - reach * ux, center.1 - reach * uy),
    ]
}

/// Unclipped lattice mass of a unit-peak Gaussian bump, so that normalized
/// heatmaps sum to at most one even before border clipping.
fn gaussian_lattice_mass(center: (f64, f64)) -> f64 {
    let (fx, fy) = (center.0 - center.0.floor(), center.1 - center.1.floor());
    let reach = (10.0 * HEATMAP_SIGMA).ceil() as i64;
    let axis = |f: f64| -> f64 {
        (-reach..=reach)
            .map(|i| {
                let d = i as f64 + 0.5 - f;
                (-d * d / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp()
            })
            .sum()
    };
    axis(fx) * axis(fy)
}

pub fn generate_scene(spec: &SceneSpec, frames: usize, height: usize, width: usize) -> Result<SceneSample> {
    spec.validate(frames, height, width)?;
    let (h, w) = (height, width);
    let plane = h * w;
    let r = spec.sprite_radius * h as f64;
    let (top, bot) = spec.bg_gradient;
    let bg_depth = |i: usize| top + (bot - top) * (i as f64 + 0.5) / h as f64;

    let bg_image = Tensor::from_fn(&[3, h, w], |k| {
        let (c, i) = (k / plane, (k % plane) / w);
        (spec.bg_tint[c] * (0.35 + 0.5 * bg_depth(i))) as f32
    });
    let mut video = Tensor::zeros(&[frames, 3, h, w]);
    let mut depth = Tensor::zeros(&[frames, 1, h, w]);
    let mut mask = Tensor::zeros(&[frames, h, w]);
    let mut pose = Tensor::zeros(&[frames, NUM_KEYPOINTS, h, w]);
    let mut centers = Vec::with_capacity(frames);
    for l in 0..frames {
        let (cx, cy) = spec.trajectory.center(l);
        let c = (cx * w as f64, cy * h as f64);
        centers.push(c);
        for i in 0..h {
            for j in 0..w {
                let (dx, dy) = (j as f64 + 0.5 - c.0, i as f64 + 0.5 - c.1);
                let fg = spec.sprite_shape.covers(dx, dy, r);
                let k = i * w + j;
                mask.data_mut()[l * plane + k] = fg as u8 as f32;
                depth.data_mut()[l * plane + k] = if fg { spec.sprite_depth } else { bg_depth(i) } as f32;
                for ch in 0..3 {
                    let v = if fg {
                        spec.sprite_color[ch] as f32
                    } else {
                        bg_image.data()[ch * plane + k]
                    };
                    video.data_mut()[(l * 3 + ch) * plane + k] = v;
                }
            }
        }
        for (kp, p) in keypoints(spec, c, h).into_iter().enumerate() {
            let mass = gaussian_lattice_mass(p);
            let dst = &mut pose.data_mut()[(l * NUM_KEYPOINTS + kp) * plane..][..plane];
            for i in 0..h {
                for j in 0..w {
                    let (dx, dy) = (j as f64 + 0.5 - p.0, i as f64 + 0.5 - p.1);
                    let g = (-(dx * dx + dy * dy) / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp();
                    dst[i * w + j] = (g / mass) as f32;
                }
            }
        }
    }
    let fg_image = Tensor::from_fn(&[3, h, w], |k| video.data()[k] * mask.data()[k % plane]);
    let colormap = Colormap::Hot;
    let depth_rgb = depth_to_rgb(&depth, colormap)?;
    Ok(SceneSample {
        spec: spec.clone(),
        video,
        depth,
        depth_rgb,
        pose_heatmaps: pose,
        fg_mask: mask,
        fg_image,
        bg_image,
        centers,
        colormap,
    })
}

/// Draws a valid scene for a given shape and hue bin.
pub fn random_spec<R: Rng>(
    rng: &mut R,
    shape: SpriteShape,
    bin: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<SceneSpec> {
    for _ in 0..1000 {
        let hue = (bin as f64 + rng.gen_range(0.1..0.9)) / COLOR_BINS as f64;
        let sprite_color = hue_to_rgb(hue, rng.gen_range(0.75..1.0), rng.gen_range(0.8..1.0));
        let sprite_radius = rng.gen_range(0.12..0.2);
        let (ex, ey) = shape.half_extent();
        let (rx, ry) = (sprite_radius * ex * height as f64 / width as f64, sprite_radius * ey);
        let span = (frames.saturating_sub(1)) as f64;
        let speed = rng.gen_range(0.3..1.5) / width as f64;
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let velocity = (speed * angle.cos(), speed * angle.sin());
        let sway_amplitude = rng.gen_range(0.0..1.5) / height as f64;
        let margin_x = rx + 1.5 / width as f64;
        let margin_y = ry + 1.5 / height as f64 + sway_amplitude;
        let (lo_x, hi_x) = (
            margin_x - velocity.0.min(0.0) * span,
            1.0 - margin_x - velocity.0.max(0.0) * span,
        );
        let (lo_y, hi_y) = (
            margin_y - velocity.1.min(0.0) * span,
            1.0 - margin_y - velocity.1.max(0.0) * span,
        );
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        let far = rng.gen_range(0.05..0.3);
        let near = far + rng.gen_range(0.0..0.15);
        let bg_gradient = if rng.gen_bool(0.5) { (far, near) } else { (near, far) };
        let grey: f64 = rng.gen_range(0.5..0.8);
        let tint: [f64; 3] = std::array::from_fn(|_| (grey + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
        let spec = SceneSpec {
            sprite_shape: shape,
            sprite_color,
            sprite_radius,
            trajectory: Trajectory {
                start: (rng.gen_range(lo_x..hi_x), rng.gen_range(lo_y..hi_y)),
                velocity,
                sway_amplitude,
                sway_period: rng.gen_range(4.0..9.0),
            },
            sprite_depth: rng.gen_range(0.6..0.95),
            bg_gradient,
            bg_tint: tint,
            seed: rng.gen(),
        };
        if spec.validate(frames, height, width).is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::Spec(format!("could not place a {shape} sprite in a {height}x{width} frame")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Eval => "eval",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub eval: Vec<SceneSample>,
}

/// Worker threads for data generation, from `IDOL_NUM_WORKERS` (default 1).
pub fn num_workers() -> usize {
    std::env::var("IDOL_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

fn render_all(specs: &[SceneSpec], frames: usize, h: usize, w: usize) -> Result<Vec<SceneSample>> {
    let workers = num_workers().min(specs.len().max(1));
    if workers <= 1 {
        return specs.iter().map(|s| generate_scene(s, frames, h, w)).collect();
    }
    let chunk = specs.len().div_ceil(workers);
    let parts: Vec<Result<Vec<SceneSample>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| generate_scene(s, frames, h, w)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|hd| hd.join().unwrap_or_else(|_| Err(Error::Precondition("generator thread panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(specs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scene specs for a split with disjoint (shape, hue-bin) combinations.
pub fn split_specs(
    num_train: usize,
    num_eval: usize,
    split_seed: u64,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<(Vec<SceneSpec>, Vec<SceneSpec>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut combos: Vec<(SpriteShape, usize)> = SpriteShape::ALL
        .iter()
        .flat_map(|&s| (0..COLOR_BINS).map(move |b| (s, b)))
        .collect();
    combos.shuffle(&mut rng);
    let n_eval_combos = ((combos.len() as f64 * EVAL_FRACTION).round() as usize).clamp(1, combos.len() - 1);
    let (eval_combos, train_combos) = combos.split_at(n_eval_combos);
    let mut draw = |n: usize, pool: &[(SpriteShape, usize)]| -> Result<Vec<SceneSpec>> {
        (0..n)
            .map(|i| {
                let (shape, bin) = pool[i % pool.len()];
                random_spec(&mut rng, shape, bin, frames, height, width)
            })
            .collect()
    };
    let train = draw(num_train, train_combos)?;
    let eval = draw(num_eval, eval_combos)?;
    Ok((train, eval))
}

/// `num_scenes` scenes, [`EVAL_FRACTION`] of them in the evaluation split.
pub fn make_dataset(num_scenes: usize, split_seed: u64, frames: usize, height: usize, width: usize) -> Result<Dataset> {
    if num_scenes == 0 {
        return Err(Error::param("num_scenes", "must be >= 1"));
    }
    let num_eval = (num_scenes as f64 * EVAL_FRACTION).round() as usize;
    make_split_dataset(num_scenes - num_eval, num_eval, split_seed, frames, height, width)
}

pub fn make_split_dataset(
    num_train: usize,
    num_eval: usize,
    split_seed: u64,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Dataset> {
    let (train, eval) = split_specs(num_train, num_eval, split_seed, frames, height, width)?;
    Ok(Dataset {
        train: render_all(&train, frames, height, width)?,
        eval: render_all(&eval, frames, height, width)?,
    })
}

// ---------------------------------------------------------------------------
// persistence

fn spec_to_text(s: &SceneSample) -> String {
    let p = &s.spec;
    let t = &p.trajectory;
    let f3 = |c: [f64; 3]| format!("{} {} {}", c[0], c[1], c[2]);
    let heat_scale = heatmap_scale(&s.pose_heatmaps);
    [
        format!("sprite_shape = {}", p.sprite_shape),
        format!("sprite_color = {}", f3(p.sprite_color)),
        format!("sprite_radius = {}", p.sprite_radius),
        format!("trajectory_start = {} {}", t.start.0, t.start.1),
        format!("trajectory_velocity = {} {}", t.velocity.0, t.velocity.1),
        format!("sway_amplitude = {}", t.sway_amplitude),
        format!("sway_period = {}", t.sway_period),
        format!("sprite_depth = {}", p.sprite_depth),
        format!("bg_gradient = {} {}", p.bg_gradient.0, p.bg_gradient.1),
        format!("bg_tint = {}", f3(p.bg_tint)),
        format!("seed = {}", p.seed),
        format!("colormap = {}", s.colormap),
        format!("frames = {}", s.frames()),
        format!("height = {}", s.size().0),
        format!("width = {}", s.size().1),
        format!("heatmap_scale = {heat_scale}"),
    ]
    .join("\n")
        + "\n"
}

fn heatmap_scale(t: &Tensor<f32>) -> f32 {
    t.data().iter().copied().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE)
}

fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

struct Fields<'a> {
    map: &'a BTreeMap<String, String>,
    path: &'a Path,
}

impl Fields<'_> {
    fn raw(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Format(format!("{}: missing `{key}`", self.path.display())))
    }

    fn nums<F: FromStr>(&self, key: &str, n: usize) -> Result<Vec<F>> {
        let vals: Vec<F> = self
            .raw(key)?
            .split_whitespace()
            .map(|x| x.parse::<F>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("{}: bad value for `{key}`", self.path.display())))?;
        if vals.len() != n {
            return Err(Error::Format(format!(
                "{}: `{key}` needs {n} values, got {}",
                self.path.display(),
                vals.len()
            )));
        }
        Ok(vals)
    }

    fn one<F: FromStr + Copy>(&self, key: &str) -> Result<F> {
        Ok(self.nums::<F>(key, 1)?[0])
    }
}

fn frame_slice(t: &Tensor<f32>, l: usize) -> Tensor<f32> {
    let s = t.slice_leading(l, 1).expect("frame index");
    let shape = s.shape()[1..].to_vec();
    s.reshape(&shape).expect("frame shape")
}

/// Writes one scene directory.
pub fn save_scene(sample: &SceneSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("spec.txt"), spec_to_text(sample)).map_err(|e| Error::io(dir.join("spec.txt"), e))?;
    let scale = heatmap_scale(&sample.pose_heatmaps);
    for l in 0..sample.frames() {
        imageio::write_rgb(&dir.join(format!("video_{l:02}.png")), &frame_slice(&sample.video, l))?;
        imageio::write_rgb(&dir.join(format!("depth_rgb_{l:02}.png")), &frame_slice(&sample.depth_rgb, l))?;
        imageio::write_gray16(&dir.join(format!("depth_{l:02}.png")), &frame_slice(&sample.depth, l))?;
        imageio::write_gray(&dir.join(format!("mask_{l:02}.png")), &frame_slice(&sample.fg_mask, l))?;
        let heat = frame_slice(&sample.pose_heatmaps, l);
        for k in 0..heat.shape()[0] {
            let hk = frame_slice(&heat, k).map(|x| x / scale);
            imageio::write_gray(&dir.join(format!("pose_{l:02}_{k}.png")), &hk)?;
        }
    }
    imageio::write_rgb(&dir.join("fg.png"), &sample.fg_image)?;
    imageio::write_rgb(&dir.join("bg.png"), &sample.bg_image)?;
    Ok(())
}

/// Reads a scene directory written by [`save_scene`]. Images come back
/// 8-bit quantized; depth is 16-bit.
pub fn load_scene(dir: &Path) -> Result<SceneSample> {
    let spec_path = dir.join("spec.txt");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let map = parse_kv(&text, &spec_path)?;
    let f = Fields {
        map: &map,
        path: &spec_path,
    };
    let c3 = |k: &str| -> Result<[f64; 3]> {
        let v = f.nums::<f64>(k, 3)?;
        Ok([v[0], v[1], v[2]])
    };
    let pair = |k: &str| -> Result<(f64, f64)> {
        let v = f.nums::<f64>(k, 2)?;
        Ok((v[0], v[1]))
    };
    let spec = SceneSpec {
        sprite_shape: f.raw("sprite_shape")?.parse()?,
        sprite_color: c3("sprite_color")?,
        sprite_radius: f.one("sprite_radius")?,
        trajectory: Trajectory {
            start: pair("trajectory_start")?,
            velocity: pair("trajectory_velocity")?,
            sway_amplitude: f.one("sway_amplitude")?,
            sway_period: f.one("sway_period")?,
        },
        sprite_depth: f.one("sprite_depth")?,
        bg_gradient: pair("bg_gradient")?,
        bg_tint: c3("bg_tint")?,
        seed: f.one("seed")?,
    };
    let colormap: Colormap = f.raw("colormap")?.parse()?;
    let frames: usize = f.one("frames")?;
    let (h, w): (usize, usize) = (f.one("height")?, f.one("width")?);
    let scale: f32 = f.one("heatmap_scale")?;
    let mut video = Vec::new();
    let mut depth = Vec::new();
    let mut depth_rgb = Vec::new();
    let mut mask = Vec::new();
    let mut pose = Vec::new();
    for l in 0..frames {
        video.push(imageio::read_rgb(&dir.join(format!("video_{l:02}.png")), h, w)?);
        depth_rgb.push(imageio::read_rgb(&dir.join(format!("depth_rgb_{l:02}.png")), h, w)?);
        depth.push(imageio::read_gray(&dir.join(format!("depth_{l:02}.png")), h, w)?.reshape(&[1, h, w])?);
        mask.push(imageio::read_gray(&dir.join(format!("mask_{l:02}.png")), h, w)?.map(|x| (x > 0.5) as u8 as f32));
        let mut ks = Vec::new();
        for k in 0..NUM_KEYPOINTS {
            ks.push(imageio::read_gray(&dir.join(format!("pose_{l:02}_{k}.png")), h, w)?.map(|x| x * scale));
        }
        pose.push(Tensor::stack(&ks)?);
    }
    let centers = (0..frames)
        .map(|l| {
            let (cx, cy) = spec.trajectory.center(l);
            (cx * w as f64, cy * h as f64)
        })
        .collect();
    Ok(SceneSample {
        spec,
        video: Tensor::stack(&video)?,
        depth: Tensor::stack(&depth)?,
        depth_rgb: Tensor::stack(&depth_rgb)?,
        pose_heatmaps: Tensor::stack(&pose)?,
        fg_mask: Tensor::stack(&mask)?,
        fg_image: imageio::read_rgb(&dir.join("fg.png"), h, w)?,
        bg_image: imageio::read_rgb(&dir.join("bg.png"), h, w)?,
        centers,
        colormap,
    })
}

/// Writes a dataset under `root` (see the module docs for the layout).
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let first = ds.train.first().or(ds.eval.first());
    let (frames, (h, w)) = first.map(|s| (s.frames(), s.size())).unwrap_or((0, (0, 0)));
    let mut index = format!("frames = {frames}\nheight = {h}\nwidth = {w}\n");
    let mut n = 0;
    for (split, samples) in [(Split::Train, &ds.train), (Split::Eval, &ds.eval)] {
        for s in samples {
            let name = format!("scene_{n:04}");
            save_scene(s, &root.join(&name))?;
            index.push_str(&format!("{name} {split}\n"));
            n += 1;
        }
    }
    let path = root.join("index.txt");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// Scene directories listed in `<root>/index.txt`, with their split.
pub fn dataset_index(root: &Path) -> Result<Vec<(PathBuf, Split)>> {
    let path = root.join("index.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.contains('=') {
            continue;
        }
        let (name, split) = line
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected `<dir> <split>`", path.display(), n + 1)))?;
        let split = match split.trim() {
            "train" => Split::Train,
            "eval" => Split::Eval,
            other => return Err(Error::Format(format!("{}:{}: unknown split `{other}`", path.display(), n + 1))),
        };
        out.push((root.join(name), split));
    }
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut ds = Dataset {
        train: Vec::new(),
        eval: Vec::new(),
    };
    for (dir, split) in dataset_index(root)? {
        let s = load_scene(&dir)?;
        match split {
            Split::Train => ds.train.push(s),
            Split::Eval => ds.eval.push(s),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn centered_circle(radius: f64) -> SceneSpec {
        SceneSpec {
            sprite_shape: SpriteShape::Circle,
            sprite_color: [0.9, 0.2, 0.1],
            sprite_radius: radius,
            trajectory: Trajectory {
                start: (0.5, 0.5),
                velocity: (0.0, 0.0),
                sway_amplitude: 0.0,
                sway_period: 0.0,
            },
            sprite_depth: 0.8,
            bg_gradient: (0.1, 0.4),
            bg_tint: [0.6, 0.6, 0.6],
            seed: 1,
        }
    }

    #[test]
    fn hot_and_gray_examples() {
        assert_eq!(colormap_rgb(0.0, Colormap::Hot), [0.0, 0.0, 0.0]);
        assert_eq!(colormap_rgb(1.0, Colormap::Hot), [1.0, 1.0, 1.0]);
        assert_eq!(colormap_rgb(0.5, Colormap::Hot), [1.0, 0.5, 0.0]);
        assert_eq!(colormap_rgb(0.25, Colormap::Grayscale), [0.25, 0.25, 0.25]);
        let px = |r: f32, g: f32, b: f32| Tensor::from_vec(&[3, 1, 1], vec![r, g, b]).unwrap();
        assert!((rgb_to_depth(&px(0.3, 0.3, 0.3), Colormap::Grayscale).unwrap().item() - 0.3).abs() < 1e-7);
        assert_eq!(rgb_to_depth(&px(1.0, 1.0, 1.0), Colormap::Hot).unwrap().item(), 1.0);
    }

    #[test]
    fn codec_round_trip_sweep() {
        let n = 1024;
        let d = Tensor::from_fn(&[1, 1, n], |k| k as f32 / (n - 1) as f32);
        for cmap in [Colormap::Grayscale, Colormap::Hot] {
            let back = rgb_to_depth(&depth_to_rgb(&d, cmap).unwrap(), cmap).unwrap();
            assert!(back.max_abs_diff(&d) <= 1e-3, "{cmap}: {}", back.max_abs_diff(&d));
        }
    }

    #[test]
    fn out_of_range_depth_is_clamped_and_counted() {
        let before = clamped_depth_count();
        let d = Tensor::from_vec(&[1, 1, 2], vec![-0.5, 1.5]).unwrap();
        let rgb = depth_to_rgb(&d, Colormap::Hot).unwrap();
        assert_eq!(rgb.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(clamped_depth_count() >= before + 2);
    }

    #[test]
    fn static_scene_and_determinism() {
        let spec = centered_circle(0.2);
        let a = generate_scene(&spec, 4, 32, 32).unwrap();
        let b = generate_scene(&spec, 4, 32, 32).unwrap();
        assert_eq!(a, b);
        let f0 = frame_slice(&a.video, 0);
        for l in 1..4 {
            assert_eq!(frame_slice(&a.video, l), f0);
        }
        let area = std::f64::consts::PI * (0.2f64 * 32.0).powi(2);
        let count = frame_slice(&a.fg_mask, 0).sum() as f64;
        assert!((count - area).abs() <= 0.1 * area, "{count} vs {area}");
    }

    #[test]
    fn scene_invariants() {
        let ds = make_dataset(20, 3, 8, 32, 32).unwrap();
        for s in ds.train.iter().chain(&ds.eval) {
            let plane = 32 * 32;
            for l in 0..8 {
                for k in 0..plane {
                    let fg = s.fg_mask.data()[l * plane + k] == 1.0;
                    let d = s.depth.data()[l * plane + k] as f64;
                    if fg {
                        assert_eq!(d, s.spec.sprite_depth as f32 as f64);
                        let (a, b) = s.spec.bg_gradient;
                        assert!(d - a.max(b) >= 0.1 - 1e-6);
                    }
                }
                for kp in 0..NUM_KEYPOINTS {
                    let heat = &s.pose_heatmaps.data()[(l * NUM_KEYPOINTS + kp) * plane..][..plane];
                    assert!(heat.iter().map(|&x| x as f64).sum::<f64>() <= 1.0 + 1e-6);
                }
                // center keypoint peak at the analytic center
                let heat = &s.pose_heatmaps.data()[(l * NUM_KEYPOINTS) * plane..][..plane];
                let (arg, _) = heat
                    .iter()
                    .enumerate()
                    .fold((0, f32::MIN), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
                let (px, py) = ((arg % 32) as f64 + 0.5, (arg / 32) as f64 + 0.5);
                let (cx, cy) = s.centers[l];
                assert!((px - cx).abs() <= 1.0 && (py - cy).abs() <= 1.0);
            }
            let back = rgb_to_depth(&s.depth_rgb, s.colormap).unwrap();
            let mae = back.zip_map(&s.depth, |a, b| (a - b).abs()).unwrap().mean();
            assert!(mae <= 1e-3);
        }
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let a = make_dataset(80, 11, 8, 32, 32).unwrap();
        assert_eq!((a.train.len(), a.eval.len()), (64, 16));
        let combos = |v: &[SceneSample]| -> HashSet<(SpriteShape, usize)> {
            v.iter().map(|s| (s.spec.sprite_shape, s.spec.color_bin())).collect()
        };
        assert!(combos(&a.train).is_disjoint(&combos(&a.eval)));
        let (ta, ea) = split_specs(64, 16, 11, 8, 32, 32).unwrap();
        let (tb, eb) = split_specs(64, 16, 11, 8, 32, 32).unwrap();
        assert_eq!((ta, ea), (tb, eb));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = centered_circle(0.2);
        s.trajectory.velocity = (0.2, 0.0);
        assert!(matches!(generate_scene(&s, 8, 32, 32), Err(Error::Spec(_))));
        let mut s = centered_circle(0.2);
        s.sprite_depth = 0.45;
        assert!(matches!(generate_scene(&s, 8, 32, 32), Err(Error::Spec(_))));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_dataset(3, 5, 2, 16, 16).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.eval.len(), ds.eval.len());
        for (a, b) in ds.train.iter().chain(&ds.eval).zip(back.train.iter().chain(&back.eval)) {
            assert_eq!(a.spec, b.spec);
            assert!(a.video.max_abs_diff(&b.video) <= 0.5 / 255.0 + 1e-6);
            assert!(a.depth.max_abs_diff(&b.depth) <= 0.5 / 65535.0 + 1e-6);
            assert_eq!(a.fg_mask, b.fg_mask);
            let scale = heatmap_scale(&a.pose_heatmaps);
            assert!(a.pose_heatmaps.max_abs_diff(&b.pose_heatmaps) <= scale * 0.5 / 255.0 + 1e-6);
        }
    }
}
