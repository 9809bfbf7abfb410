//! Motion-field hue maps of each up block for a ground-truth clip passed
//! through a freshly initialized joint model.

use std::path::PathBuf;

use idol::denoiser::{Denoiser, DenoiserConfig};
use idol::eval::probe_taps;
use idol::imageio::write_rgb;
use idol::inspect::{frame_pair_field, motion_hue_map, upscale_nearest};
use idol::schedule::make_linear_schedule;
use idol::synth::make_dataset;
use idol::train::joint_example;

fn main() -> idol::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "motion_out".into()));
    let cfg = DenoiserConfig {
        frames: 4,
        latent_size: 16,
        ..DenoiserConfig::tiny()
    };
    let denoiser = Denoiser::new(cfg.clone())?;
    let params = denoiser.init_params::<f32>(0);
    let sched = make_linear_schedule(100, 1e-4, 0.02)?;
    let data = make_dataset(5, 0, cfg.frames, 16, 16)?;
    let scene = &data.train[0];
    let ex = joint_example(scene, cfg.pose_adapter);
    let (video, depth) = probe_taps(&denoiser, &params, &scene.video, &scene.depth_rgb, &ex.cond, &sched, 10, 0)?;
    for (b, (tv, td)) in video.blocks.iter().zip(&depth.blocks).enumerate() {
        for l in 0..cfg.frames - 1 {
            for (name, feats) in [("video", &tv.self_attn_feat), ("depth", &td.self_attn_feat)] {
                let img = motion_hue_map(&frame_pair_field(feats, l)?);
                let size = img.shape()[1];
                write_rgb(&out.join(format!("block{b}_{name}_{l}.png")), &upscale_nearest(&img, 64 / size)?)?;
            }
        }
        println!("block {b}: features {:?}", tv.self_attn_feat.shape());
    }
    println!("wrote {}", out.display());
    Ok(())
}
