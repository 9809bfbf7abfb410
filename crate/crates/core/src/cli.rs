//! Command-line front end. Every command writes its resolved configuration
//! next to its outputs and reports failures as one JSON line on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::denoiser::{Denoiser, DenoiserConfig, ForwardOptions, ModalityLabel};
use crate::error::{Error, Result};
use crate::eval::{evaluate, probe_taps, EvalSettings, Metric};
use crate::imageio::{contact_sheet, write_rgb};
use crate::inspect::{frame_pair_field, motion_hue_map, upscale_nearest};
use crate::sampler::{sample_joint, sample_single};
use crate::synth::{load_dataset, load_scene, make_dataset, num_workers, save_dataset, Dataset, SceneSample};
use crate::train::gradcheck::{GradcheckSettings, JointProbe, ProbeLoss};
use crate::train::{joint_example, load_checkpoint, Checkpoint, MetricsLog, Stage, Trainer};

#[derive(Debug, Parser)]
#[command(name = "idol", version, about = "Joint video and depth diffusion on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset to disk.
    GenData(GenDataArgs),
    /// Train the denoiser (stage `haop` or `joint`).
    Train(TrainArgs),
    /// Generate a video and depth clip for one conditioning scene.
    Sample(SampleArgs),
    /// Score generated clips on the evaluation split.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Render per-block motion fields as hue maps.
    InspectMotion(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 80)]
    pub scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub stage: Option<Stage>,
    /// Checkpoint to continue from (a stage-1 checkpoint when starting stage 2).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config key as `--key=value`, e.g. `--train.weights.w_mo=0.02`.
    #[arg(num_args = 0.., allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation scene index or a scene directory.
    #[arg(long, default_value = "0")]
    pub cond: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "depth_l2,iou,motion_div")]
    pub metrics: Vec<Metric>,
    /// Score only the first N evaluation scenes.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LossChoice {
    Denoise,
    Mo,
    Xattn,
    Total,
    All,
}

impl LossChoice {
    fn probes(self) -> Vec<ProbeLoss> {
        match self {
            Self::Denoise => vec![ProbeLoss::Denoise],
            Self::Mo => vec![ProbeLoss::Mo],
            Self::Xattn => vec![ProbeLoss::Xattn],
            Self::Total => vec![ProbeLoss::Total],
            Self::All => ProbeLoss::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run configuration whose model and loss settings are checked; the
    /// tiny model is used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub loss: LossChoice,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Entries probed per tensor.
    #[arg(long, default_value_t = 64)]
    pub max_entries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation scene index or a scene directory.
    #[arg(long, default_value = "0")]
    pub sample: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Up block to render; all blocks when absent.
    #[arg(long)]
    pub block: Option<usize>,
    /// Diffusion timestep of the probe; defaults to T/2.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> Result<serde_json::Value>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli.command)
}

pub fn execute(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::InspectMotion(a) => inspect_motion(a),
    }
}

/// Single-line machine-readable form of an error.
pub fn error_line(e: &Error) -> String {
    json!({ "error": e.kind(), "message": e.to_string().replace('\n', " ") }).to_string()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<serde_json::Value> {
    let mut run = RunConfig::default();
    run.data.dir = Some(a.out.clone());
    run.data.scenes = a.scenes;
    run.data.frames = a.frames;
    run.data.size = a.size;
    run.data.seed = a.seed;
    let ds = make_dataset(a.scenes, a.seed, a.frames, a.size, a.size)?;
    save_dataset(&ds, &a.out)?;
    run.write_echo(&a.out)?;
    Ok(json!({ "out": a.out, "train": ds.train.len(), "eval": ds.eval.len() }))
}

/// The dataset named by `dir`, or the one described by `run.data`.
fn dataset_for(run: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir.or(run.data.dir.as_deref()) {
        Some(d) => load_dataset(d),
        None => {
            let d = &run.data;
            make_dataset(d.scenes, d.seed, d.frames, d.size, d.size)
        }
    }
}

fn train(a: TrainArgs) -> Result<serde_json::Value> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Some(s) = a.stage {
        overrides.push(format!("train.stage={s}"));
    }
    if let Some(s) = a.steps {
        overrides.push(format!("train.steps={s}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("train.seed={s}"));
    }
    if let Some(d) = &a.data {
        overrides.push(format!("data.dir={:?}", d.display().to_string()));
    }
    overrides.extend(a.overrides.iter().cloned());
    let run = base.with_overrides(&overrides)?;
    run.validate()?;
    let data = dataset_for(&run, None)?;
    let (mut trainer, coverage) = match &a.resume {
        Some(p) => {
            let (t, c) = Trainer::resume(&run, &load_checkpoint(p)?)?;
            (t, Some(c))
        }
        None => (Trainer::new(&run)?, None),
    };
    create_dir(&a.out)?;
    run.write_echo(&a.out)?;
    let mut log = MetricsLog::create(&a.out.join("metrics.jsonl"))?;
    let every = run.train.checkpoint_every;
    let mut last = None;
    for _ in 0..run.train.steps {
        let batch = trainer.next_batch(&data.train)?;
        let b = trainer.train_step(&batch)?;
        log.append(&b)?;
        if every > 0 && trainer.step() % every == 0 {
            trainer.save_checkpoint(&a.out.join(format!("step_{:06}.ckpt", trainer.step())))?;
        }
        last = Some(b);
    }
    let final_path = a.out.join("final.ckpt");
    trainer.save_checkpoint(&final_path)?;
    Ok(json!({
        "checkpoint": final_path,
        "step": trainer.step(),
        "last": last,
        "restored": coverage.as_ref().map(|c| c.restored.len()),
        "initialized": coverage.as_ref().map(|c| c.initialized.clone()),
    }))
}

fn load_model(path: &Path) -> Result<(Checkpoint, Denoiser)> {
    let ck = load_checkpoint(path)?;
    let denoiser = Denoiser::new(ck.config.stage_model())?;
    ck.params.validate(&denoiser.param_specs())?;
    Ok((ck, denoiser))
}

/// Resolves `--cond`/`--sample`: an evaluation scene index or a directory.
fn pick_scene(run: &RunConfig, data: Option<&Path>, which: &str) -> Result<SceneSample> {
    let path = Path::new(which);
    if path.is_dir() {
        return load_scene(path);
    }
    let idx: usize = which
        .parse()
        .map_err(|_| Error::param("cond", format!("`{which}` is neither a scene index nor a directory")))?;
    let mut ds = dataset_for(run, data)?;
    let len = ds.eval.len();
    if idx >= len {
        return Err(Error::Index {
            context: "evaluation scenes".into(),
            index: idx,
            len,
        });
    }
    Ok(ds.eval.swap_remove(idx))
}

fn frames_of(t: &crate::Tensor<f32>, l: usize) -> Result<crate::Tensor<f32>> {
    let s = t.shape();
    t.slice_leading(l, 1)?.reshape(&s[1..])
}

fn write_clip(dir: &Path, prefix: &str, clip: &crate::Tensor<f32>) -> Result<Vec<crate::Tensor<f32>>> {
    let frames: Vec<_> = (0..clip.shape()[0]).map(|l| frames_of(clip, l)).collect::<Result<_>>()?;
    for (l, f) in frames.iter().enumerate() {
        write_rgb(&dir.join(format!("{prefix}_{l:02}.png")), f)?;
    }
    Ok(frames)
}

fn sample(a: SampleArgs) -> Result<serde_json::Value> {
    let (ck, denoiser) = load_model(&a.ckpt)?;
    let scene = pick_scene(&ck.config, a.data.as_deref(), &a.cond)?;
    let sched = ck.config.schedule.build()?;
    let ex = joint_example(&scene, denoiser.config().pose_adapter);
    let opts = ck.config.train.forward_options();
    create_dir(&a.out)?;
    ck.config.write_echo(&a.out)?;
    let (video, depth) = sample_clips(&denoiser, &ck, &ex.cond, &sched, &opts, a.seed)?;
    let mut sheet = write_clip(&a.out, "video", &video)?;
    let n = sheet.len();
    if let Some(depth) = depth {
        sheet.extend(write_clip(&a.out, "depth", &depth)?);
    }
    write_rgb(&a.out.join("sheet.png"), &contact_sheet(&sheet, n)?)?;
    Ok(json!({ "out": a.out, "frames": n, "seed": a.seed }))
}

type Clip = crate::Tensor<f32>;

/// Joint sampling for stage-2 checkpoints, video only for stage 1.
fn sample_clips(
    denoiser: &Denoiser,
    ck: &Checkpoint,
    cond: &crate::denoiser::ConditionBundle<f32>,
    sched: &crate::schedule::NoiseSchedule,
    opts: &ForwardOptions,
    seed: u64,
) -> Result<(Clip, Option<Clip>)> {
    match ck.config.train.stage {
        Stage::Joint => {
            let (v, d) = sample_joint(denoiser, cond, sched, &ck.params, opts, seed)?;
            Ok((v, Some(d)))
        }
        Stage::Haop => Ok((
            sample_single(denoiser, cond, ModalityLabel::Video, sched, &ck.params, opts, seed)?,
            None,
        )),
    }
}

fn eval(a: EvalArgs) -> Result<serde_json::Value> {
    let (ck, denoiser) = load_model(&a.ckpt)?;
    let mut ds = dataset_for(&ck.config, a.data.as_deref())?;
    if let Some(n) = a.limit {
        ds.eval.truncate(n);
    }
    let sched = ck.config.schedule.build()?;
    let settings = EvalSettings {
        metrics: a.metrics.clone(),
        seed: a.seed,
        couple_streams: ck.config.train.forward_options().couple_streams,
        ..EvalSettings::default()
    };
    let (report, _) = evaluate(&denoiser, &ck.params, &sched, &ds.eval, &settings, num_workers())?;
    create_dir(&a.out)?;
    ck.config.write_echo(&a.out)?;
    report.write_json(&a.out.join("report.json"))?;
    report.write_csv(&a.out.join("summary.csv"))?;
    Ok(json!({ "metrics": report.metrics, "samples": report.per_sample.len() }))
}

fn gradcheck(a: GradcheckArgs) -> Result<serde_json::Value> {
    let run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            model: DenoiserConfig::tiny(),
            ..RunConfig::default()
        },
    };
    let settings = GradcheckSettings {
        tolerance: a.tolerance,
        max_entries: a.max_entries,
        seed: a.seed,
        ..GradcheckSettings::default()
    };
    let probe = JointProbe::new(&run.model, &run.train, a.seed, 0.1)?;
    let reports = probe.check(&a.loss.probes(), &settings)?;
    let summary = json!({
        "passed": reports.iter().all(|r| r.passed),
        "tolerance": a.tolerance,
        "objectives": reports.iter().map(|r| json!({
            "objective": r.objective,
            "max_rel_err": r.max_rel_err,
            "passed": r.passed,
            "worst": r.worst().map(|w| format!("{}[{}]", w.name, w.worst_index)),
        })).collect::<Vec<_>>(),
    });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        run.write_echo(dir)?;
        write_json(&dir.join("gradcheck.json"), &serde_json::to_value(&reports)?)?;
    }
    for r in reports {
        r.into_result()?;
    }
    Ok(summary)
}

fn inspect_motion(a: InspectArgs) -> Result<serde_json::Value> {
    let (ck, denoiser) = load_model(&a.ckpt)?;
    let scene = pick_scene(&ck.config, a.data.as_deref(), &a.sample)?;
    let sched = ck.config.schedule.build()?;
    let t = a.t.unwrap_or(sched.steps() / 2);
    sched.check_t(t)?;
    let ex = joint_example(&scene, denoiser.config().pose_adapter);
    let (tv, td) = probe_taps(&denoiser, &ck.params, &scene.video, &scene.depth_rgb, &ex.cond, &sched, t, a.seed)?;
    let blocks = tv.blocks.len();
    let chosen: Vec<usize> = match a.block {
        Some(b) if b < blocks => vec![b],
        Some(b) => {
            return Err(Error::Index {
                context: "up blocks".into(),
                index: b,
                len: blocks,
            })
        }
        None => (0..blocks).collect(),
    };
    create_dir(&a.out)?;
    ck.config.write_echo(&a.out)?;
    let mut written = 0;
    for &b in &chosen {
        for (stream, taps) in [("video", &tv), ("depth", &td)] {
            let feats = &taps.blocks[b].self_attn_feat;
            let size = feats.shape()[2];
            for l in 0..feats.shape()[0].saturating_sub(1) {
                let img = motion_hue_map(&frame_pair_field(feats, l)?);
                let img = upscale_nearest(&img, (64 / size.max(1)).max(1))?;
                write_rgb(&a.out.join(format!("block{b}_{stream}_{l:02}.png")), &img)?;
                written += 1;
            }
        }
    }
    Ok(json!({ "out": a.out, "t": t, "blocks": chosen, "images": written }))
}
