//! Evaluation metrics on ground truth and on a perturbed copy, then a full
//! evaluation pass of a briefly trained tiny model.

use idol::config::RunConfig;
use idol::denoiser::DenoiserConfig;
use idol::eval::{depth_l2, evaluate, silhouette_iou, EvalSettings, SilhouetteRule};
use idol::synth::make_dataset;
use idol::train::Trainer;

fn main() -> idol::Result<()> {
    let data = make_dataset(10, 0, 4, 32, 32)?;
    let s = &data.eval[0];
    let rule = SilhouetteRule::from_spec(&s.spec);
    println!("ground truth: iou {:.3}, depth_l2 {:.4}", silhouette_iou(&s.video, &s.depth, &rule)?, depth_l2(&s.depth, &s.depth)?.rms);
    let flipped = s.depth.map(|d| 1.0 - d);
    println!("inverted depth: depth_l2 {:.4}, iou {:.3}", depth_l2(&flipped, &s.depth)?.rms, silhouette_iou(&s.video, &flipped, &rule)?);

    let mut run = RunConfig {
        model: DenoiserConfig::tiny(),
        ..RunConfig::default()
    };
    run.data.size = 8;
    run.schedule.steps = 20;
    let small = make_dataset(6, 0, 2, 8, 8)?;
    let mut trainer = Trainer::new(&run)?;
    trainer.fit(&small.train, 20, None)?;
    let (report, _) = evaluate(trainer.denoiser(), trainer.params(), trainer.schedule(), &small.eval, &EvalSettings::default(), 1)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
