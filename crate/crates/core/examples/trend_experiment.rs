//! Full objective versus the zero-weight baseline on the synthetic split.
//!
//! ```text
//! cargo run --release --example trend_experiment -- [steps] [seeds]
//! ```

use idol::losses::LossWeights;
use idol::synth::make_split_dataset;
use idol::trend::{run_trend, trend_config};

fn main() -> idol::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let base = trend_config();
    let data = make_split_dataset(64, 16, 0, 8, 32, 32)?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = run_trend(&base, &data, &seeds, LossWeights::default(), steps, |arm| {
        println!(
            "seed {} w_mo {:<5} denoise {:.4} iou {:.4} motion_div {:.3e} ({:.0} s)",
            arm.seed, arm.weights.w_mo, arm.final_denoise, arm.iou, arm.motion_div, arm.seconds
        );
    })?;
    let (full, base_iou) = report.mean_iou();
    println!("mean iou: full {full:.4} baseline {base_iou:.4}");
    println!("motion divergence lower with the full objective in {}/{} seeds", report.motion_wins(), report.pairs.len());
    Ok(())
}
