//! Stage one (outpainting on single frames) followed by stage two (joint
//! video and depth), resuming from the stage-one weights.

use idol::config::RunConfig;
use idol::denoiser::DenoiserConfig;
use idol::synth::make_dataset;
use idol::train::{Stage, Trainer};

fn main() -> idol::Result<()> {
    let mut run = RunConfig {
        model: DenoiserConfig::tiny(),
        ..RunConfig::default()
    };
    run.data.size = 8;
    run.schedule.steps = 50;
    let data = make_dataset(10, 0, 2, 8, 8)?;

    run.train.stage = Stage::Haop;
    let mut stage1 = Trainer::new(&run)?;
    let log = stage1.fit(&data.train, 30, None)?;
    println!("stage 1: denoise {:.4} -> {:.4}", log[0].denoise, log[log.len() - 1].denoise);
    let dir = std::env::temp_dir().join("idol_two_stage");
    let ckpt = dir.join("stage1.ckpt");
    stage1.save_checkpoint(&ckpt)?;

    run.train.stage = Stage::Joint;
    let (mut stage2, coverage) = Trainer::resume(&run, &idol::train::load_checkpoint(&ckpt)?)?;
    println!(
        "resume: {} tensors restored, {} new (e.g. {})",
        coverage.restored.len(),
        coverage.initialized.len(),
        coverage.initialized.first().map(String::as_str).unwrap_or("-")
    );
    for b in stage2.fit(&data.train, 30, None)?.iter().step_by(10) {
        println!(
            "step {:>3}  denoise {:.4}  mo {:.2e}  xattn {:.2e}  total {:.4}",
            b.step,
            b.denoise,
            b.mo.iter().sum::<f64>(),
            b.xattn.iter().sum::<f64>(),
            b.total
        );
    }
    Ok(())
}
