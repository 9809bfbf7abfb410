//! Training: the objective on the tape, batch assembly for both stages, the
//! optimization loop, metrics logging and checkpoints.
//!
//! Stage 1 (`haop`) trains single frames through the video stream with the
//! temporal and cross-modal layers absent. Stage 2 (`joint`) denoises video
//! and depth clips together and adds the motion-field and cross-attention
//! consistency terms over the up blocks.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::denoiser::{
    ConditionBundle, CondVars, CoverageReport, Denoiser, ForwardOptions, GraphTaps, ModalityLabel, ParamVars,
    ParameterStore,
};
use crate::error::{Error, Result};
use crate::haop::{haop_sample, BinaryMask, HaopParams};
use crate::losses::{
    denoise_loss_var, motion_consistency_var, motion_temperature, total_loss_var, xattn_consistency_var, LossWeights,
    XattnShareMode,
};
use crate::schedule::{forward_diffuse, to_latent, NoiseSchedule};
use crate::synth::SceneSample;
use crate::tensor::{Real, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Haop,
    #[default]
    Joint,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Haop => "haop",
            Self::Joint => "joint",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haop" => Ok(Self::Haop),
            "joint" => Ok(Self::Joint),
            other => Err(Error::param("stage", format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// One network per modality instead of a shared one.
    pub separate_unets: bool,
    /// Keep the cross-modal layers but let each stream attend only to itself.
    pub no_cross_modal_attn: bool,
    pub xattn_share_mode: XattnShareMode,
    pub disable_mo: bool,
    pub disable_xattn: bool,
    /// Average cross-attention maps over heads before comparing them.
    pub xattn_head_average: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Defaults to 1e-3 for `haop` and 1e-4 for `joint`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub seed: u64,
    /// Train everything except the ResBlocks.
    pub freeze_resblocks: bool,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub ablations: Ablations,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Joint,
            steps: 1000,
            batch_size: 1,
            learning_rate: None,
            seed: 0,
            freeze_resblocks: false,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            ablations: Ablations::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.stage {
            Stage::Haop => 1e-3,
            Stage::Joint => 1e-4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::param("steps", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::param("learning_rate", format!("must be finite and >= 0, got {lr}")));
        }
        self.weights.validate()?;
        self.optimizer.validate()
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            capture_taps: false,
            couple_streams: !self.ablations.no_cross_modal_attn,
            xattn_share: self.ablations.xattn_share_mode,
        }
    }

    /// Whether a parameter receives updates.
    pub fn trainable(&self, name: &str) -> bool {
        !(self.freeze_resblocks && name.contains(".res."))
    }
}

/// One training example in latent range. Stage-1 examples have a single
/// frame and no depth target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    /// `[L, C, H, W]`.
    pub video: Tensor<T>,
    pub depth: Option<Tensor<T>>,
    pub cond: ConditionBundle<T>,
}

impl<T: Real> Example<T> {
    pub fn cast<U: Real>(&self) -> Example<U> {
        Example {
            video: self.video.cast(),
            depth: self.depth.as_ref().map(|d| d.cast()),
            cond: self.cond.cast(),
        }
    }
}

/// A full clip with its depth rendering; pose is attached when requested.
pub fn joint_example(scene: &SceneSample, with_pose: bool) -> Example<f32> {
    Example {
        video: to_latent(&scene.video),
        depth: Some(to_latent(&scene.depth_rgb)),
        cond: ConditionBundle {
            fg_image: to_latent(&scene.fg_image),
            bg_latent: to_latent(&scene.bg_image),
            pose_heatmaps: with_pose.then(|| scene.pose_heatmaps.clone()),
        },
    }
}

/// The outpainting task on frame `frame` of `scene`: reconstruct the frame
/// from its cropped foreground and its dilation-masked background.
pub fn haop_example<R: Rng>(scene: &SceneSample, frame: usize, rng: &mut R, params: &HaopParams) -> Result<Example<f32>> {
    let (h, w) = scene.size();
    let img = scene.video.slice_leading(frame, 1)?.reshape(&[3, h, w])?;
    let mask = BinaryMask::from_tensor(&scene.fg_mask.slice_leading(frame, 1)?.reshape(&[h, w])?)?;
    let s = haop_sample(&img, &mask, rng, params)?;
    Ok(Example {
        video: to_latent(&s.target).reshape(&[1, 3, h, w])?,
        depth: None,
        cond: ConditionBundle {
            fg_image: to_latent(&s.f_aug),
            bg_latent: to_latent(&s.b_aug),
            pose_heatmaps: None,
        },
    })
}

/// Timestep and noise for one example; both streams share `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T> {
    pub t: usize,
    pub eps_video: Tensor<T>,
    pub eps_depth: Option<Tensor<T>>,
}

impl<T: Real> NoiseDraw<T> {
    pub fn sample<R: Rng>(ex: &Example<T>, steps: usize, rng: &mut R) -> Self {
        let t = rng.gen_range(0..steps);
        let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let eps_video = normal(ex.video.shape());
        let eps_depth = ex.depth.as_ref().map(|d| normal(d.shape()));
        Self { t, eps_video, eps_depth }
    }
}

/// Tape handles of every loss component for one example.
pub struct ObjectiveVars {
    pub denoise: Var,
    /// One per up block when computed.
    pub mo: Vec<Var>,
    pub xattn: Vec<Var>,
    pub total: Var,
    /// Per stream, per up block.
    pub taps: Vec<Vec<GraphTaps>>,
}

fn head_average<T: Real>(g: &mut Graph<T>, map: Var) -> Var {
    let s = g.shape(map).to_vec();
    let (heads, n) = (s[0], s[1] * s[2]);
    let m = g.reshape(map, &[1, heads, n]);
    let w = g.constant(Tensor::full(&[1, 1, heads], T::lit(1.0 / heads as f64)));
    g.matmul(w, m, false, false)
}

/// Builds the training objective for `ex` under `draw`.
///
/// Consistency terms need both streams; the motion term also needs at least
/// two frames. Disabled terms are not built; zero-weight terms are built for
/// logging but left out of the total.
pub fn build_objective<T: Real>(
    g: &mut Graph<T>,
    denoiser: &Denoiser,
    vars: &ParamVars,
    sched: &NoiseSchedule,
    ex: &Example<T>,
    draw: &NoiseDraw<T>,
    cfg: &TrainConfig,
) -> Result<ObjectiveVars> {
    let cond = CondVars::constants(g, &ex.cond);
    let zt_v = forward_diffuse(&ex.video, draw.t, &draw.eps_video, sched)?;
    let mut streams = vec![(g.constant(zt_v), ModalityLabel::Video)];
    let joint = match (&ex.depth, &draw.eps_depth) {
        (Some(d), Some(e)) => {
            let zt_d = forward_diffuse(d, draw.t, e, sched)?;
            streams.push((g.constant(zt_d), ModalityLabel::Depth));
            true
        }
        (None, _) => false,
        (Some(_), None) => return Err(Error::Precondition("depth example without depth noise".into())),
    };
    let outs = denoiser.forward_graph(g, vars, &streams, draw.t, &cond, &cfg.forward_options());
    let ev = g.constant(draw.eps_video.clone());
    let denoise = if joint {
        let ed = g.constant(draw.eps_depth.clone().expect("checked above"));
        denoise_loss_var(g, outs[0].eps, ev, outs[1].eps, ed)
    } else {
        // The depth term with weight zero: an all-zero prediction and target.
        let zero = g.constant(Tensor::zeros(&[1]));
        denoise_loss_var(g, outs[0].eps, ev, zero, zero)
    };
    let mut mo = Vec::new();
    let mut xattn = Vec::new();
    if joint {
        let frames = ex.video.shape()[0];
        let ab = cfg.ablations;
        for (n, (tv, td)) in outs[0].taps.iter().zip(&outs[1].taps).enumerate() {
            if !ab.disable_mo && frames >= 2 {
                let (d, _, _) = denoiser.config().up_block_dims(n);
                mo.push(motion_consistency_var(g, tv.feat, td.feat, motion_temperature(d)));
            }
            if !ab.disable_xattn {
                let (mv, md) = if ab.xattn_head_average {
                    (head_average(g, tv.map), head_average(g, td.map))
                } else {
                    (tv.map, td.map)
                };
                xattn.push(xattn_consistency_var(g, mv, md));
            }
        }
    }
    let total = total_loss_var(g, denoise, &mo, &xattn, &cfg.weights);
    Ok(ObjectiveVars {
        denoise,
        mo,
        xattn,
        total,
        taps: outs.into_iter().map(|o| o.taps).collect(),
    })
}

/// Loss components of one step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub denoise: f64,
    pub mo: Vec<f64>,
    pub xattn: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate<T: Real>(&mut self, g: &Graph<T>, obj: &ObjectiveVars, scale: f64) {
        let val = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN) * scale;
        self.denoise += val(obj.denoise);
        self.total += val(obj.total);
        for (acc, terms) in [(&mut self.mo, &obj.mo), (&mut self.xattn, &obj.xattn)] {
            acc.resize(terms.len(), 0.0);
            for (a, &v) in acc.iter_mut().zip(terms) {
                *a += val(v);
            }
        }
    }
}

fn tensor_stats<T: Real>(t: &Tensor<T>) -> String {
    let v = t.to_f64_vec();
    let finite = v.iter().filter(|x| x.is_finite()).count();
    let mean = v.iter().filter(|x| x.is_finite()).sum::<f64>() / finite.max(1) as f64;
    let max_abs = v.iter().filter(|x| x.is_finite()).fold(0.0f64, |m, x| m.max(x.abs()));
    format!("mean={mean:.4e} max_abs={max_abs:.4e} non_finite={}/{}", v.len() - finite, v.len())
}

/// Per-block tap statistics, plus the first block holding a non-finite
/// value.
fn diagnose<T: Real>(g: &Graph<T>, taps: &[Vec<GraphTaps>]) -> (Option<String>, String) {
    let mut first_bad = None;
    let mut lines = Vec::new();
    for (s, stream) in taps.iter().enumerate() {
        let label = if s == 0 { "video" } else { "depth" };
        for (n, tp) in stream.iter().enumerate() {
            let (f, m) = (g.value(tp.feat), g.value(tp.map));
            if first_bad.is_none() && !(f.all_finite() && m.all_finite()) {
                first_bad = Some(format!("{label} up block {n}"));
            }
            lines.push(format!(
                "{label} up.{n}: feat {}; xattn {}",
                tensor_stats(f),
                tensor_stats(m)
            ));
        }
    }
    (first_bad, lines.join(" | "))
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer {
    run: RunConfig,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    params: ParameterStore<f32>,
    opt: Optimizer<f32>,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Fresh parameters seeded from `train.seed`.
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let denoiser = Denoiser::new(run.stage_model())?;
        let params = denoiser.init_params(run.train.seed);
        Self::with_params(run, params, 0)
    }

    pub fn with_params(run: &RunConfig, params: ParameterStore<f32>, step: usize) -> Result<Self> {
        run.validate()?;
        let denoiser = Denoiser::new(run.stage_model())?;
        params.validate(&denoiser.param_specs())?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        rng.set_stream(1 + step as u64);
        Ok(Self {
            sched: run.schedule.build()?,
            opt: Optimizer::new(run.train.optimizer)?,
            run: run.clone(),
            denoiser,
            params,
            rng,
            step,
        })
    }

    /// Continues from a checkpoint. Tensors the checkpoint lacks (the
    /// temporal and cross-modal layers of a stage-1 checkpoint) are freshly
    /// initialized; the step counter restarts when the stage changes.
    /// Optimizer state is not stored, so momentum restarts from zero.
    pub fn resume(run: &RunConfig, ckpt: &Checkpoint) -> Result<(Self, CoverageReport)> {
        run.validate()?;
        let denoiser = Denoiser::new(run.stage_model())?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        let (params, report) = ckpt.params.restore_into(&denoiser.param_specs(), &mut rng)?;
        let step = if ckpt.config.train.stage == run.train.stage {
            ckpt.step
        } else {
            0
        };
        Ok((Self::with_params(run, params, step)?, report))
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn params(&self) -> &ParameterStore<f32> {
        &self.params
    }

    pub fn into_params(self) -> ParameterStore<f32> {
        self.params
    }

    /// Steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Draws a batch for the configured stage.
    pub fn next_batch(&mut self, scenes: &[SceneSample]) -> Result<Vec<Example<f32>>> {
        if scenes.is_empty() {
            return Err(Error::Precondition("no training scenes".into()));
        }
        let with_pose = self.denoiser.config().pose_adapter;
        (0..self.run.train.batch_size)
            .map(|_| {
                let scene = &scenes[self.rng.gen_range(0..scenes.len())];
                match self.run.train.stage {
                    Stage::Joint => Ok(joint_example(scene, with_pose)),
                    Stage::Haop => {
                        let frame = self.rng.gen_range(0..scene.frames());
                        haop_example(scene, frame, &mut self.rng, &self.run.haop)
                    }
                }
            })
            .collect()
    }

    /// One optimizer step on `batch`: gradients are averaged over the batch.
    pub fn train_step(&mut self, batch: &[Example<f32>]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let step = self.step + 1;
        let scale = 1.0 / batch.len() as f64;
        let mut breakdown = LossBreakdown {
            step,
            ..LossBreakdown::default()
        };
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let tc = &self.run.train;
        for ex in batch {
            let draw = NoiseDraw::sample(ex, self.sched.steps(), &mut self.rng);
            let mut g = Graph::new();
            let vars = ParamVars::bind(&mut g, &self.params, |n| tc.trainable(n));
            let obj = build_objective(&mut g, &self.denoiser, &vars, &self.sched, ex, &draw, tc)?;
            let total = g.value(obj.total).item();
            if !total.is_finite() {
                let (block, stats) = diagnose(&g, &obj.taps);
                return Err(Error::NonFinite {
                    location: format!("step {step}, {}", block.unwrap_or_else(|| "loss".into())),
                    diagnostic: stats,
                });
            }
            breakdown.accumulate(&g, &obj, scale);
            let mut gr = g.backward(obj.total);
            for (name, var) in vars.iter() {
                let Some(gt) = gr.take(var) else { continue };
                if !gt.all_finite() {
                    let (_, stats) = diagnose(&g, &obj.taps);
                    return Err(Error::NonFinite {
                        location: format!("step {step}, gradient of `{name}`"),
                        diagnostic: stats,
                    });
                }
                let s = scale as f32;
                match grads.get_mut(name) {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(gt.data()) {
                            *a += s * v;
                        }
                    }
                    None => {
                        grads.insert(name.to_string(), gt.map(|v| s * v));
                    }
                }
            }
        }
        self.opt.step(&mut self.params, &grads, tc.lr())?;
        self.step = step;
        Ok(breakdown)
    }

    /// Runs `steps` steps, appending each breakdown to `log` when given.
    pub fn fit(&mut self, scenes: &[SceneSample], steps: usize, mut log: Option<&mut MetricsLog>) -> Result<Vec<LossBreakdown>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.next_batch(scenes)?;
            let b = self.train_step(&batch)?;
            if let Some(log) = log.as_deref_mut() {
                log.append(&b)?;
            }
            out.push(b);
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.params, &self.run, self.step, path)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Seconds since the log was opened.
    pub wall_time: f64,
}

/// Append-only JSON-lines metrics file.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
    start: Instant,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            start: Instant::now(),
        })
    }

    pub fn append(&mut self, losses: &LossBreakdown) -> Result<()> {
        let rec = MetricsRecord {
            losses: losses.clone(),
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&rec)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
