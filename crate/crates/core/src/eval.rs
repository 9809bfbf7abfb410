//! Evaluation: depth error against ground truth, agreement between the
//! generated video and depth silhouettes, and motion-field divergence
//! between the two streams' features.
//!
//! Depth error is the RMS difference after scaling each sequence to
//! `[0, 1]` on its own (min-max over the whole sequence, not per frame).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionBundle, Denoiser, DenoiserTaps, ForwardOptions, ParameterStore};
use crate::error::{Error, Result};
use crate::haop::BinaryMask;
use crate::losses::{motion_consistency_loss, motion_temperature};
use crate::sampler::sample_joint;
use crate::schedule::{forward_diffuse, to_latent, NoiseSchedule};
use crate::synth::{rgb_to_depth, SceneSample, SceneSpec};
use crate::tensor::{Real, Tensor};
use crate::train::joint_example;

/// Min-max scales `x` into `[0, 1]`; a constant input is returned unchanged
/// and flagged.
pub fn minmax_scale(x: &[f64]) -> (Vec<f64>, bool) {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return (x.to_vec(), true);
    }
    (x.iter().map(|v| (v - lo) / range).collect(), false)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthL2 {
    pub rms: f64,
    /// One of the sequences was constant, so it was compared unscaled.
    pub flagged: bool,
}

/// RMS difference of two depth sequences `[L, 1, H, W]` after independent
/// min-max scaling.
pub fn depth_l2(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<DepthL2> {
    gt.expect_shape(pred.shape(), "depth_l2")?;
    if pred.is_empty() {
        return Err(Error::Precondition("depth_l2 of empty sequences".into()));
    }
    let (p, fp) = minmax_scale(&pred.to_f64_vec());
    let (g, fg) = minmax_scale(&gt.to_f64_vec());
    let mse = p.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
    Ok(DepthL2 {
        rms: mse.sqrt(),
        flagged: fp || fg,
    })
}

/// Intersection over union; two empty masks agree perfectly.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape("mask_iou", &[a.height(), a.width()], &[b.height(), b.width()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// How foreground is found in each modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteRule {
    pub sprite_color: [f64; 3],
    /// Maximum Euclidean RGB distance to the sprite color.
    pub color_tolerance: f64,
    pub depth_threshold: f64,
    /// Foreground lies above the threshold (the sprite is nearer).
    pub fg_above: bool,
}

pub const DEFAULT_COLOR_TOLERANCE: f64 = 0.25;

impl SilhouetteRule {
    /// Threshold halfway between the sprite depth and the nearest
    /// background depth.
    pub fn from_spec(spec: &SceneSpec) -> Self {
        let (a, b) = spec.bg_gradient;
        let (lo, hi) = (a.min(b), a.max(b));
        let fg_above = spec.sprite_depth > hi;
        let edge = if fg_above { hi } else { lo };
        Self {
            sprite_color: spec.sprite_color,
            color_tolerance: DEFAULT_COLOR_TOLERANCE,
            depth_threshold: 0.5 * (spec.sprite_depth + edge),
            fg_above,
        }
    }

    pub fn video_mask(&self, frame: &Tensor<f32>) -> Result<BinaryMask> {
        let (h, w) = match *frame.shape() {
            [3, h, w] => (h, w),
            _ => return Err(Error::shape("video_mask", &[3, 0, 0], frame.shape())),
        };
        let d = frame.data();
        let tol2 = self.color_tolerance * self.color_tolerance;
        Ok(BinaryMask::from_fn(h, w, |i, j| {
            let k = i * w + j;
            let dist2: f64 = (0..3)
                .map(|c| {
                    let e = d[c * h * w + k] as f64 - self.sprite_color[c];
                    e * e
                })
                .sum();
            dist2 <= tol2
        }))
    }

    pub fn depth_mask(&self, depth: &Tensor<f32>) -> Result<BinaryMask> {
        let (h, w) = match *depth.shape() {
            [1, h, w] | [h, w] => (h, w),
            _ => return Err(Error::shape("depth_mask", &[1, 0, 0], depth.shape())),
        };
        Ok(BinaryMask::from_fn(h, w, |i, j| {
            let v = depth.data()[i * w + j] as f64;
            if self.fg_above {
                v > self.depth_threshold
            } else {
                v < self.depth_threshold
            }
        }))
    }
}

/// Mean over frames of the IoU between the color-based silhouette of
/// `video` `[L, 3, H, W]` and the threshold-based one of `depth`
/// `[L, 1, H, W]`.
pub fn silhouette_iou(video: &Tensor<f32>, depth: &Tensor<f32>, rule: &SilhouetteRule) -> Result<f64> {
    let (l, h, w) = match *video.shape() {
        [l, 3, h, w] if l > 0 => (l, h, w),
        _ => return Err(Error::shape("silhouette_iou video", &[0, 3, 0, 0], video.shape())),
    };
    depth.expect_shape(&[l, 1, h, w], "silhouette_iou depth")?;
    let mut acc = 0.0;
    for f in 0..l {
        let vm = rule.video_mask(&video.slice_leading(f, 1)?.reshape(&[3, h, w])?)?;
        let dm = rule.depth_mask(&depth.slice_leading(f, 1)?.reshape(&[1, h, w])?)?;
        acc += mask_iou(&vm, &dm)?;
    }
    Ok(acc / l as f64)
}

/// Taps of both streams from one joint forward pass at timestep `t`, with
/// the same noise added to the video and depth clips.
#[allow(clippy::too_many_arguments)]
pub fn probe_taps<T: Real>(
    denoiser: &Denoiser,
    params: &ParameterStore<T>,
    video: &Tensor<T>,
    depth_rgb: &Tensor<T>,
    cond: &ConditionBundle<T>,
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<(DenoiserTaps<T>, DenoiserTaps<T>)> {
    depth_rgb.expect_shape(video.shape(), "probe_taps depth")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::from_fn(video.shape(), |_| T::lit(StandardNormal.sample(&mut rng)));
    let z_v = forward_diffuse(&to_latent(video), t, &eps, sched)?;
    let z_d = forward_diffuse(&to_latent(depth_rgb), t, &eps, sched)?;
    let opts = ForwardOptions {
        capture_taps: true,
        ..ForwardOptions::default()
    };
    let out = denoiser.joint_forward(&z_v, &z_d, t, cond, params, &opts)?;
    match (out.taps_video, out.taps_depth) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Precondition("joint forward returned no taps".into())),
    }
}

/// Mean over up blocks of the motion consistency loss between the two
/// streams' features, read from [`probe_taps`].
#[allow(clippy::too_many_arguments)]
pub fn motion_divergence<T: Real>(
    denoiser: &Denoiser,
    params: &ParameterStore<T>,
    video: &Tensor<T>,
    depth_rgb: &Tensor<T>,
    cond: &ConditionBundle<T>,
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<f64> {
    let (tv, td) = probe_taps(denoiser, params, video, depth_rgb, cond, sched, t, seed)?;
    let fv: Vec<_> = tv.blocks.into_iter().map(|b| b.self_attn_feat).collect();
    let fd: Vec<_> = td.blocks.into_iter().map(|b| b.self_attn_feat).collect();
    let taus: Vec<f64> = fv.iter().map(|f| motion_temperature(f.shape()[1])).collect();
    let per_block = motion_consistency_loss(&fv, &fd, &taus)?;
    let n = per_block.len().max(1) as f64;
    Ok(per_block.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    DepthL2,
    Iou,
    MotionDiv,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Self::DepthL2, Self::Iou, Self::MotionDiv];

    pub fn name(self) -> &'static str {
        match self {
            Self::DepthL2 => "depth_l2",
            Self::Iou => "iou",
            Self::MotionDiv => "motion_div",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param("metrics", format!("unknown metric `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub metrics: Vec<Metric>,
    /// Sample `i` uses seed `seed + i`.
    pub seed: u64,
    /// Timestep for motion divergence; `None` means `T / 2`.
    pub probe_t: Option<usize>,
    pub color_tolerance: f64,
    pub couple_streams: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            seed: 0,
            probe_t: None,
            color_tolerance: DEFAULT_COLOR_TOLERANCE,
            couple_streams: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub scene: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_l2: Option<f64>,
    pub depth_l2_flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion_div: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Metric name to mean over samples.
    pub metrics: BTreeMap<String, f64>,
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.metrics.get(m.name()).copied()
    }

    fn from_samples(per_sample: Vec<SampleMetrics>, metrics: &[Metric]) -> Self {
        let mut out = BTreeMap::new();
        for &m in metrics {
            let vals: Vec<f64> = per_sample
                .iter()
                .filter_map(|s| match m {
                    Metric::DepthL2 => s.depth_l2,
                    Metric::Iou => s.iou,
                    Metric::MotionDiv => s.motion_div,
                })
                .collect();
            if !vals.is_empty() {
                out.insert(m.name().to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Self {
            metrics: out,
            per_sample,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Summary rows `metric,value,samples`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Format(format!("csv {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["metric", "value", "samples"]).map_err(csv_err)?;
        for (name, v) in &self.metrics {
            w.write_record([name.clone(), format!("{v}"), self.per_sample.len().to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A generated pair for one evaluation scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPair {
    pub scene: usize,
    pub video: Tensor<f32>,
    pub depth_rgb: Tensor<f32>,
}

fn eval_one(
    denoiser: &Denoiser,
    params: &ParameterStore<f32>,
    sched: &NoiseSchedule,
    scene_idx: usize,
    scene: &SceneSample,
    settings: &EvalSettings,
) -> Result<(SampleMetrics, GeneratedPair)> {
    let ex = joint_example(scene, denoiser.config().pose_adapter);
    let opts = ForwardOptions {
        couple_streams: settings.couple_streams,
        ..ForwardOptions::default()
    };
    let seed = settings.seed.wrapping_add(scene_idx as u64);
    let (video, depth_rgb) = sample_joint(denoiser, &ex.cond, sched, params, &opts, seed)?;
    let depth = rgb_to_depth(&depth_rgb, scene.colormap)?;
    let mut m = SampleMetrics {
        scene: scene_idx,
        depth_l2: None,
        depth_l2_flagged: false,
        iou: None,
        motion_div: None,
    };
    for metric in &settings.metrics {
        match metric {
            Metric::DepthL2 => {
                let d = depth_l2(&depth, &scene.depth)?;
                m.depth_l2 = Some(d.rms);
                m.depth_l2_flagged = d.flagged;
            }
            Metric::Iou => {
                let rule = SilhouetteRule {
                    color_tolerance: settings.color_tolerance,
                    ..SilhouetteRule::from_spec(&scene.spec)
                };
                m.iou = Some(silhouette_iou(&video, &depth, &rule)?);
            }
            Metric::MotionDiv => {
                let t = settings.probe_t.unwrap_or(sched.steps() / 2);
                m.motion_div = Some(motion_divergence(
                    denoiser, params, &video, &depth_rgb, &ex.cond, sched, t, seed,
                )?);
            }
        }
    }
    Ok((
        m,
        GeneratedPair {
            scene: scene_idx,
            video,
            depth_rgb,
        },
    ))
}

/// Samples one pair per scene and scores it. Work is spread over
/// `workers` threads; results do not depend on the thread count.
pub fn evaluate(
    denoiser: &Denoiser,
    params: &ParameterStore<f32>,
    sched: &NoiseSchedule,
    scenes: &[SceneSample],
    settings: &EvalSettings,
    workers: usize,
) -> Result<(EvalReport, Vec<GeneratedPair>)> {
    if scenes.is_empty() {
        return Err(Error::Precondition("no evaluation scenes".into()));
    }
    let workers = workers.clamp(1, scenes.len());
    let indexed: Vec<(usize, &SceneSample)> = scenes.iter().enumerate().collect();
    let chunk = indexed.len().div_ceil(workers);
    let results: Vec<Result<Vec<(SampleMetrics, GeneratedPair)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = indexed
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&(i, s)| eval_one(denoiser, params, sched, i, s, settings))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Precondition("evaluation thread panicked".into()))))
            .collect()
    });
    let mut per_sample = Vec::with_capacity(scenes.len());
    let mut pairs = Vec::with_capacity(scenes.len());
    for r in results {
        for (m, p) in r? {
            per_sample.push(m);
            pairs.push(p);
        }
    }
    Ok((EvalReport::from_samples(per_sample, &settings.metrics), pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::make_linear_schedule;
    use crate::synth::make_dataset;
    use proptest::prelude::{prop_assert, proptest};

    fn seq(vals: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, 1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn depth_l2_examples() {
        let gt = seq(&[0.2, 0.4, 0.9, 0.5]);
        assert_eq!(depth_l2(&gt, &gt).unwrap().rms, 0.0);
        let half = gt.map(|v| 0.5 * v);
        assert!(depth_l2(&half, &gt).unwrap().rms < 1e-7);
        let r = depth_l2(&seq(&[0.0, 1.0]), &seq(&[1.0, 0.0])).unwrap();
        assert!((r.rms - 1.0).abs() < 1e-12 && !r.flagged);
        let flat = depth_l2(&seq(&[0.3, 0.3]), &seq(&[0.0, 1.0])).unwrap();
        assert!(flat.flagged);
    }

    proptest! {
        #[test]
        fn depth_l2_ignores_increasing_affine_maps(
            vals in proptest::collection::vec(0.0f32..1.0, 2..20),
            other in proptest::collection::vec(0.0f32..1.0, 20),
            a in 0.1f32..3.0,
            b in -1.0f32..1.0,
        ) {
            let pred = seq(&vals);
            let gt = seq(&other[..vals.len()]);
            let base = depth_l2(&pred, &gt).unwrap();
            let moved = depth_l2(&pred.map(|v| a * v + b), &gt.map(|v| a * v + b)).unwrap();
            prop_assert!((base.rms - moved.rms).abs() < 1e-4);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            use rand::Rng;
            let mut ra = ChaCha8Rng::seed_from_u64(seed_a);
            let mut rb = ChaCha8Rng::seed_from_u64(seed_b);
            let a = BinaryMask::from_fn(5, 6, |_, _| ra.gen_bool(0.4));
            let b = BinaryMask::from_fn(5, 6, |_, _| rb.gen_bool(0.4));
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!(ab == mask_iou(&b, &a).unwrap());
        }
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_fn(2, 2, |i, j| i == 0 || j == 0);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let x = BinaryMask::from_fn(2, 2, |i, j| i == 0 && j == 0);
        let y = BinaryMask::from_fn(2, 2, |i, j| i == 1 && j == 1);
        assert_eq!(mask_iou(&x, &y).unwrap(), 0.0);
        // occupied cells {(0,0),(0,1),(1,0)}, shared only (0,0)
        let p = BinaryMask::from_fn(2, 2, |i, j| i == 0 && j <= 1);
        let q = BinaryMask::from_fn(2, 2, |i, j| j == 0 && i <= 1);
        assert!((mask_iou(&p, &q).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::zeros(2, 2);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert_eq!(mask_iou(&e, &x).unwrap(), 0.0);
    }

    #[test]
    fn ground_truth_silhouettes_agree() {
        let ds = make_dataset(5, 3, 4, 32, 32).unwrap();
        for s in ds.train.iter().chain(&ds.eval) {
            let rule = SilhouetteRule::from_spec(&s.spec);
            let iou = silhouette_iou(&s.video, &s.depth, &rule).unwrap();
            assert!(iou > 0.999, "{iou}");
            let decoded = rgb_to_depth(&s.depth_rgb, s.colormap).unwrap();
            assert!(silhouette_iou(&s.video, &decoded, &rule).unwrap() > 0.999);
            assert!(depth_l2(&decoded, &s.depth).unwrap().rms < 1e-2);
        }
    }

    fn tiny_setup() -> (Denoiser, ParameterStore<f32>, ConditionBundle<f32>, NoiseSchedule, Tensor<f32>) {
        let d = Denoiser::new(DenoiserConfig::tiny()).unwrap();
        let mut p = d.init_params::<f32>(1);
        p.perturb(0.1, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let video = Tensor::from_fn(&[2, 3, 8, 8], |_| rand::Rng::gen_range(&mut rng, 0.0f32..1.0));
        let cond = ConditionBundle::empty(d.config());
        (d, p, cond, make_linear_schedule(10, 1e-3, 0.2).unwrap(), video)
    }

    #[test]
    fn motion_divergence_is_zero_for_identical_streams() {
        let (d, mut p, cond, sched, video) = tiny_setup();
        // With equal modality embeddings the two streams are indistinguishable.
        for v in p.get_mut("modality_embed").unwrap().data_mut() {
            *v = 0.0;
        }
        let md = motion_divergence(&d, &p, &video, &video, &cond, &sched, 5, 0).unwrap();
        assert_eq!(md, 0.0);
    }

    #[test]
    fn motion_divergence_is_nonnegative_and_deterministic() {
        let (d, p, cond, sched, video) = tiny_setup();
        let other = video.map(|v| 1.0 - v);
        let a = motion_divergence(&d, &p, &video, &other, &cond, &sched, 5, 0).unwrap();
        let b = motion_divergence(&d, &p, &video, &other, &cond, &sched, 5, 0).unwrap();
        assert!(a > 0.0 && a == b);
    }

    #[test]
    fn report_serializes() {
        let rep = EvalReport::from_samples(
            vec![
                SampleMetrics {
                    scene: 0,
                    depth_l2: Some(0.5),
                    depth_l2_flagged: false,
                    iou: Some(1.0),
                    motion_div: None,
                },
                SampleMetrics {
                    scene: 1,
                    depth_l2: Some(0.25),
                    depth_l2_flagged: true,
                    iou: Some(0.0),
                    motion_div: None,
                },
            ],
            &Metric::ALL,
        );
        assert_eq!(rep.get(Metric::DepthL2), Some(0.375));
        assert_eq!(rep.get(Metric::Iou), Some(0.5));
        assert_eq!(rep.get(Metric::MotionDiv), None);
        let dir = tempfile::tempdir().unwrap();
        rep.write_json(&dir.path().join("r.json")).unwrap();
        rep.write_csv(&dir.path().join("r.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.starts_with("metric,value,samples\ndepth_l2,0.375,2\n"), "{text}");
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, rep);
    }
}
