//! Finite-difference check of all four training objectives on the tiny
//! model, probing a handful of entries per tensor.
//!
//! ```text
//! cargo run --release --example gradient_check -- [entries_per_tensor]
//! ```

use idol::denoiser::DenoiserConfig;
use idol::train::gradcheck::{GradcheckSettings, JointProbe, ProbeLoss};
use idol::train::TrainConfig;

fn main() -> idol::Result<()> {
    let entries = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let probe = JointProbe::new(&DenoiserConfig::tiny(), &TrainConfig::default(), 0, 0.1)?;
    let settings = GradcheckSettings {
        max_entries: entries,
        ..GradcheckSettings::default()
    };
    for r in probe.check(&ProbeLoss::ALL, &settings)? {
        let worst = r.worst().map(|w| format!("{}[{}]", w.name, w.worst_index)).unwrap_or_default();
        println!(
            "{:<8} value {:.6}  max rel err {:.2e}  worst {worst}  {}",
            r.objective,
            r.value,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
