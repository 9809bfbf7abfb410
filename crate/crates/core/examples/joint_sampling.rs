//! Ancestral sampling of a video clip and its depth from one conditioning
//! scene, with an untrained model (the point is the plumbing and the
//! determinism, not the picture).

use std::path::PathBuf;

use idol::denoiser::{Denoiser, DenoiserConfig, ForwardOptions};
use idol::imageio::{contact_sheet, write_rgb};
use idol::sampler::sample_joint;
use idol::schedule::make_linear_schedule;
use idol::synth::make_dataset;
use idol::train::joint_example;

fn main() -> idol::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "sample_out".into()));
    let cfg = DenoiserConfig::tiny();
    let denoiser = Denoiser::new(cfg.clone())?;
    let params = denoiser.init_params::<f32>(0);
    let sched = make_linear_schedule(50, 1e-4, 0.05)?;
    let data = make_dataset(5, 0, cfg.frames, cfg.latent_size, cfg.latent_size)?;
    let ex = joint_example(&data.eval[0], cfg.pose_adapter);
    let opts = ForwardOptions::default();
    let (video, depth) = sample_joint(&denoiser, &ex.cond, &sched, &params, &opts, 7)?;
    let again = sample_joint(&denoiser, &ex.cond, &sched, &params, &opts, 7)?;
    println!("video {:?}, depth {:?}, reproducible: {}", video.shape(), depth.shape(), again == (video.clone(), depth.clone()));
    let (l, s) = (cfg.frames, cfg.latent_size);
    let mut tiles = Vec::new();
    for clip in [&video, &depth] {
        for f in 0..l {
            tiles.push(clip.slice_leading(f, 1)?.reshape(&[3, s, s])?);
        }
    }
    write_rgb(&out.join("sheet.png"), &contact_sheet(&tiles, l)?)?;
    println!("wrote {}", out.display());
    Ok(())
}
