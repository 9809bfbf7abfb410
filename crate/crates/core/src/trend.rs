//! Paired training runs comparing the full objective against the
//! consistency-free baseline on the same data, seeds and budget.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::DenoiserConfig;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, EvalSettings, Metric};
use crate::losses::LossWeights;
use crate::synth::{num_workers, Dataset};
use crate::train::optim::{OptimizerConfig, OptimizerKind};
use crate::train::Trainer;

/// A reduced model that trains at 32x32, L=8 in a few minutes on one core.
pub fn lean_model() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 16,
        channel_mults: vec![1, 2],
        heads: 2,
        cond_dim: 32,
        patch_size: 4,
        ..DenoiserConfig::default()
    }
}

/// Joint-stage run config for the comparison: lean model, Adam at 1e-3,
/// T=200, 3000 steps.
pub fn trend_config() -> RunConfig {
    let mut run = RunConfig {
        model: lean_model(),
        ..RunConfig::default()
    };
    run.train.steps = 3000;
    run.train.learning_rate = Some(1e-3);
    run.train.optimizer = OptimizerConfig {
        kind: OptimizerKind::Adam,
        ..OptimizerConfig::default()
    };
    run
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub seed: u64,
    pub weights: LossWeights,
    pub final_denoise: f64,
    pub iou: f64,
    pub motion_div: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPair {
    pub full: ArmResult,
    pub baseline: ArmResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub pairs: Vec<SeedPair>,
}

impl TrendReport {
    pub fn mean_iou(&self) -> (f64, f64) {
        let n = self.pairs.len().max(1) as f64;
        (
            self.pairs.iter().map(|p| p.full.iou).sum::<f64>() / n,
            self.pairs.iter().map(|p| p.baseline.iou).sum::<f64>() / n,
        )
    }

    /// Seeds where the full objective has the lower motion divergence.
    pub fn motion_wins(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.full.motion_div < p.baseline.motion_div)
            .count()
    }

    /// Mean IoU no worse than the baseline and lower divergence in a
    /// majority of seeds.
    pub fn holds(&self) -> bool {
        let (full, base) = self.mean_iou();
        full >= base && 2 * self.motion_wins() > self.pairs.len()
    }
}

/// Trains one arm and scores it on the evaluation split.
pub fn run_arm(base: &RunConfig, data: &Dataset, seed: u64, weights: LossWeights, steps: usize) -> Result<ArmResult> {
    let start = std::time::Instant::now();
    let mut run = base.clone();
    run.train.seed = seed;
    run.train.weights = weights;
    run.train.steps = steps;
    let mut trainer = Trainer::new(&run)?;
    let log = trainer.fit(&data.train, steps, None)?;
    let tail = &log[log.len().saturating_sub(100)..];
    let final_denoise = tail.iter().map(|b| b.denoise).sum::<f64>() / tail.len().max(1) as f64;
    let settings = EvalSettings {
        metrics: vec![Metric::Iou, Metric::MotionDiv],
        seed: 1000 + seed,
        ..EvalSettings::default()
    };
    let (report, _) = evaluate(
        trainer.denoiser(),
        trainer.params(),
        trainer.schedule(),
        &data.eval,
        &settings,
        num_workers(),
    )?;
    let get = |r: &EvalReport, m| r.get(m).unwrap_or(f64::NAN);
    Ok(ArmResult {
        seed,
        weights,
        final_denoise,
        iou: get(&report, Metric::Iou),
        motion_div: get(&report, Metric::MotionDiv),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Full objective at `weights` versus zero weights, one pair per seed.
pub fn run_trend(
    base: &RunConfig,
    data: &Dataset,
    seeds: &[u64],
    weights: LossWeights,
    steps: usize,
    mut on_arm: impl FnMut(&ArmResult),
) -> Result<TrendReport> {
    let mut pairs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let full = run_arm(base, data, seed, weights, steps)?;
        on_arm(&full);
        let baseline = run_arm(base, data, seed, LossWeights::zero(), steps)?;
        on_arm(&baseline);
        pairs.push(SeedPair { full, baseline });
    }
    Ok(TrendReport { pairs })
}
