//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criterion 8 trains six models and takes most of the
//! runtime.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use idol::denoiser::{ConditionBundle, Denoiser, DenoiserConfig, ForwardOptions, ParamSpec, Sharing};
use idol::haop::{dilate_background, haop_sample, BinaryMask, HaopParams};
use idol::losses::{
    cost_volume, motion_consistency_loss, motion_field, normalize_features, total_loss, xattn_consistency_loss,
    CostVolume, LossWeights,
};
use idol::sampler::sample_joint;
use idol::schedule::{forward_diffuse, make_linear_schedule, predict_z0};
use idol::synth::{colormap_rgb, depth_to_rgb, make_split_dataset, rgb_to_depth, Colormap};
use idol::config::RunConfig;
use idol::train::checkpoint::{decode_checkpoint, encode_checkpoint};
use idol::train::{Stage, Trainer};
use idol::trend::{run_trend, trend_config};
use idol::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_gradient_oracle() -> Outcome {
    let start = Instant::now();
    let summary = idol::cli::run(["idol", "gradcheck", "--loss", "all", "--tolerance", "1e-4"]).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let errs: Vec<String> = summary["objectives"]
        .as_array()
        .map(|v| {
            v.iter()
                .map(|o| format!("{}={:.2e}", o["objective"].as_str().unwrap_or("?"), o["max_rel_err"].as_f64().unwrap_or(f64::NAN)))
                .collect()
        })
        .unwrap_or_default();
    check(errs.len() == 4, "expected four objectives")?;
    check(secs < 300.0, format!("took {secs:.0} s"))?;
    Ok(format!("{} in {secs:.0} s", errs.join(" ")))
}

/// Quadruple-loop cosine similarities, `[H, W, H, W]` flattened.
fn brute_cost(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let s = a.shape();
    let (h, w, d) = (s[0], s[1], s[2]);
    let vec_at = |t: &Tensor<f64>, i: usize, j: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|c| t.data()[(i * w + j) * d + c]).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let mut out = Vec::with_capacity(h * w * h * w);
    for i in 0..h {
        for j in 0..w {
            for k in 0..h {
                for l in 0..w {
                    let (p, q) = (vec_at(a, i, j), vec_at(b, k, l));
                    out.push(p.iter().zip(&q).map(|(x, y)| x * y).sum());
                }
            }
        }
    }
    out
}

fn c2_motion_field_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (h, w, d) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=4));
        let a = Tensor::<f64>::from_fn(&[h, w, d], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(&[h, w, d], |_| rng.gen_range(-1.0..1.0));
        let tau = rng.gen_range(0.1..2.0);
        let want = brute_cost(&a, &b);
        let c = cost_volume(&normalize_features(&a).unwrap(), &normalize_features(&b).unwrap()).unwrap();
        let u = motion_field(&c, tau).unwrap();
        for (row_c, row_u) in want.chunks(h * w).zip(u.values.data().chunks(h * w)) {
            let den: f64 = row_c.iter().map(|x| (x / tau).exp()).sum();
            for (x, y) in row_c.iter().zip(row_u) {
                worst = worst.max(((x / tau).exp() / den - y).abs());
            }
        }
        for (x, y) in c.values.data().iter().zip(&want) {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst <= 1e-10, format!("brute-force deviation {worst:.2e}"))?;
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let c = CostVolume {
            values: Tensor::<f32>::from_fn(&[h, w, h, w], |_| rng.gen_range(-1.0..1.0)),
        };
        let u = motion_field(&c, rng.gen_range(0.05..2.0)).unwrap();
        for row in u.values.data().chunks(h * w) {
            worst_sum = worst_sum.max((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
        }
    }
    check(worst_sum <= 1e-5, format!("row sum off by {worst_sum:.2e}"))?;
    Ok(format!("max deviation {worst:.1e}, max row-sum error {worst_sum:.1e}"))
}

fn c3_loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Tensor::<f64>::from_fn(&[3, 4, 2, 2], |_| rng.gen_range(-1.0..1.0));
    let same = motion_consistency_loss(std::slice::from_ref(&f), std::slice::from_ref(&f), &[0.5]).unwrap()[0];
    check(same == 0.0, format!("L_mo(F,F) = {same}"))?;
    let m = Tensor::<f64>::from_fn(&[2, 5, 4], |_| rng.gen_range(0.0..1.0));
    let xm = xattn_consistency_loss(&m, &m).unwrap();
    check(xm == 0.0, format!("L_xattn(M,M) = {xm}"))?;
    let zero = total_loss(0.731, &[4.0, 2.0], &[1.5, 9.0], &LossWeights::zero()).unwrap();
    check(zero == 0.731, format!("zero-weight total {zero}"))?;
    // 1x2 grid: video features identical (uniform rows), depth features
    // orthogonal with a sharp temperature (one-hot rows).
    let fv = Tensor::<f64>::full(&[2, 2, 1, 2], 1.0);
    let fd = Tensor::<f64>::from_vec(&[2, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let mo = motion_consistency_loss(&[fv], &[fd], &[1e-3]).unwrap()[0];
    check((mo - 0.25).abs() < 1e-12, format!("motion example {mo}"))?;
    let a = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::<f64>::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
    let xa = xattn_consistency_loss(&a, &b).unwrap();
    check(xa == 1.0, format!("cross-attention example {xa}"))?;
    let tot = total_loss(2.0, &[1.0, 1.0], &[3.0, 1.0], &LossWeights::default()).unwrap();
    check((tot - 2.06).abs() < 1e-12, format!("weighted sum {tot}"))?;
    Ok(format!("motion {mo}, xattn {xa}, weighted {tot}"))
}

fn c4_diffusion_algebra() -> Outcome {
    let s = make_linear_schedule(200, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z0 = Tensor::<f64>::from_fn(&[3, 4, 4], |_| StandardNormal.sample(&mut rng));
        let eps = Tensor::<f64>::from_fn(&[3, 4, 4], |_| StandardNormal.sample(&mut rng));
        for t in 0..s.steps() {
            let back = predict_z0(&forward_diffuse(&z0, t, &eps, &s).unwrap(), &eps, t, &s).unwrap();
            for (x, y) in back.data().iter().zip(z0.data()) {
                worst = worst.max((x - y).abs() / y.abs().max(1e-3));
            }
        }
    }
    check(worst <= 1e-6, format!("round trip relative error {worst:.2e}"))?;
    let n = 200_000;
    let se = (2.0 / (n as f64 - 1.0)).sqrt();
    let mut max_dev = 0.0f64;
    for t in [0, 100, 199] {
        let z0 = Tensor::<f64>::from_fn(&[n], |_| StandardNormal.sample(&mut rng));
        let eps = Tensor::<f64>::from_fn(&[n], |_| StandardNormal.sample(&mut rng));
        let z = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let m = z.mean();
        let var = z.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        max_dev = max_dev.max((var - 1.0).abs() / se);
    }
    check(max_dev < 3.0, format!("variance {max_dev:.2} standard errors from 1"))?;
    Ok(format!("round trip {worst:.1e}, variance within {max_dev:.2} SE"))
}

fn count(cfg: DenoiserConfig) -> usize {
    Denoiser::new(cfg).unwrap().param_specs().iter().map(ParamSpec::numel).sum()
}

fn c5_parameter_sharing() -> Outcome {
    let mut lines = Vec::new();
    for base in [DenoiserConfig::tiny(), DenoiserConfig::default()] {
        let single = count(DenoiserConfig {
            modality_embedding: false,
            ..base.clone()
        });
        let joint = count(base.clone());
        let separate = count(DenoiserConfig {
            sharing: Sharing::Separate,
            ..base.clone()
        });
        check(joint == single + 2 * base.cond_dim, format!("joint {joint} vs single {single}"))?;
        check(separate == 2 * single, format!("separate {separate} vs 2 x {single}"))?;
        lines.push(format!("single {single} joint {joint} separate {separate}"));
    }
    Ok(lines.join("; "))
}

fn c6_depth_codec() -> Outcome {
    let n = 1024;
    let d = Tensor::from_fn(&[1, 1, n], |k| k as f32 / (n - 1) as f32);
    let mut worst = 0.0f32;
    for cmap in [Colormap::Grayscale, Colormap::Hot] {
        let back = rgb_to_depth(&depth_to_rgb(&d, cmap).unwrap(), cmap).unwrap();
        worst = worst.max(back.max_abs_diff(&d));
    }
    check(worst <= 1e-3, format!("round trip error {worst:.2e}"))?;
    let ends = [
        (0.0, [0.0, 0.0, 0.0]),
        (1.0, [1.0, 1.0, 1.0]),
        (0.5, [1.0, 0.5, 0.0]),
    ];
    for (x, want) in ends {
        let got = colormap_rgb(x, Colormap::Hot);
        check(got == want, format!("hot({x}) = {got:?}"))?;
    }
    Ok(format!("round trip {worst:.1e}, hot endpoints exact"))
}

fn c7_haop() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (12, 12);
    for trial in 0..100 {
        let p = rng.gen_range(0.02..0.3);
        let m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p));
        let r = rng.gen_range(1..4);
        let dil = dilate_background(&m, r);
        check(dil.contains(&m), format!("mask {trial}: dilation lost foreground"))?;
        let img = Tensor::<f32>::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0));
        let params = HaopParams {
            dilation_radius: r,
            ..HaopParams::default()
        };
        let s = haop_sample(&img, &m, &mut rng, &params).unwrap();
        for k in 0..img.len() {
            if dil.data()[k % (h * w)] == 0 {
                check(s.b_aug.data()[k] == img.data()[k], format!("mask {trial}: b_aug changed outside the region"))?;
            }
        }
    }
    let img = Tensor::<f32>::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0));
    let m = BinaryMask::from_fn(h, w, |i, j| (3..8).contains(&i) && (4..9).contains(&j));
    let hap = HaopParams {
        dilation_radius: 0,
        crop_scale_range: [1.0, 1.0],
    };
    let s = haop_sample(&img, &m, &mut rng, &hap).unwrap();
    for k in 0..img.len() {
        let fg = m.data()[k % (h * w)] == 1;
        let want_b = if fg { 0.0 } else { img.data()[k] };
        let want_f = if fg { img.data()[k] } else { 0.0 };
        check(s.b_aug.data()[k] == want_b, "radius 0 background differs from the masked frame")?;
        check((s.f_aug.data()[k] - want_f).abs() < 1e-6, "scale 1 foreground differs from the masked frame")?;
    }
    Ok("100 masks; radius 0 / scale 1 matches plain outpainting".into())
}

fn c8_trend() -> Outcome {
    let data = make_split_dataset(64, 16, 0, 8, 32, 32).map_err(|e| e.to_string())?;
    let base = trend_config();
    let report = run_trend(&base, &data, &[0, 1, 2], LossWeights::default(), 3000, |arm| {
        println!(
            "  seed {} w={:<4} denoise {:.4} iou {:.4} motion_div {:.4e} ({:.0} s)",
            arm.seed, arm.weights.w_mo, arm.final_denoise, arm.iou, arm.motion_div, arm.seconds
        );
    })
    .map_err(|e| e.to_string())?;
    if let Ok(text) = serde_json::to_string_pretty(&report) {
        let _ = std::fs::write(std::env::temp_dir().join("idol_trend_report.json"), text);
    }
    let (full, baseline) = report.mean_iou();
    let detail = format!(
        "mean iou full {full:.4} vs baseline {baseline:.4}; lower motion divergence in {}/3 seeds",
        report.motion_wins()
    );
    check(report.holds(), detail.clone())?;
    Ok(detail)
}

fn small_run() -> RunConfig {
    let mut run = RunConfig {
        model: DenoiserConfig::tiny(),
        ..RunConfig::default()
    };
    run.data.size = 8;
    run.data.frames = 2;
    run.data.scenes = 6;
    run.schedule.steps = 20;
    run.train.steps = 5;
    run
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, small_run().to_toml_string().unwrap()).unwrap();
    let mut logs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        idol::cli::run([
            "idol",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ])
        .map_err(|e| e.to_string())?;
        let recs = idol::train::read_metrics(&out.join("metrics.jsonl")).map_err(|e| e.to_string())?;
        logs.push(recs.into_iter().map(|r| r.losses).collect::<Vec<_>>());
    }
    check(logs[0].len() == 5 && logs[0] == logs[1], "loss logs differ between identical runs")?;
    let run = small_run();
    let d = Denoiser::new(run.model.clone()).unwrap();
    let params = d.init_params::<f32>(5);
    let cond = ConditionBundle::empty(d.config());
    let sched = run.schedule.build().unwrap();
    let opts = ForwardOptions::default();
    let a = sample_joint(&d, &cond, &sched, &params, &opts, 9).unwrap();
    let b = sample_joint(&d, &cond, &sched, &params, &opts, 9).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    check(bits(&a.0) == bits(&b.0) && bits(&a.1) == bits(&b.1), "sample_joint not bit-identical")?;
    Ok("identical loss logs over 5 steps; bit-identical samples".into())
}

fn c10_checkpoints() -> Outcome {
    let mut stage1 = small_run();
    stage1.train.stage = Stage::Haop;
    let mut trainer = Trainer::new(&stage1).map_err(|e| e.to_string())?;
    let data = make_split_dataset(4, 1, 0, 2, 8, 8).map_err(|e| e.to_string())?;
    trainer.fit(&data.train, 3, None).map_err(|e| e.to_string())?;
    let bytes = encode_checkpoint(trainer.params(), &stage1, trainer.step()).map_err(|e| e.to_string())?;
    let back = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    check(&back.params == trainer.params(), "round trip changed parameters")?;
    let bits_equal = back
        .params
        .iter()
        .zip(trainer.params().iter())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    check(bits_equal, "round trip is not bit-exact")?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let flips = 2000;
    for _ in 0..flips {
        let mut bad = bytes.clone();
        let pos = rng.gen_range(0..bad.len());
        bad[pos] ^= 1 << rng.gen_range(0..8);
        check(decode_checkpoint(&bad).is_err(), format!("corruption at byte {pos} undetected"))?;
    }
    let stage2 = small_run();
    let (resumed, report) = Trainer::resume(&stage2, &back).map_err(|e| e.to_string())?;
    let specs = resumed.denoiser().param_specs();
    let video_layer = |n: &str| n.contains("temporal") || n.contains("cross_modal");
    let mut want_init: Vec<String> = specs.iter().map(|s| s.name.clone()).filter(|n| video_layer(n)).collect();
    want_init.sort();
    let mut got_init = report.initialized.clone();
    got_init.sort();
    check(!want_init.is_empty() && got_init == want_init, "initialized names are not exactly the video layers")?;
    check(
        report.restored.len() + report.initialized.len() == specs.len() && report.unused.is_empty(),
        "restored set does not cover the remaining names",
    )?;
    for (name, t) in back.params.iter() {
        check(resumed.params().get(name) == Some(t), format!("`{name}` not restored"))?;
    }
    Ok(format!(
        "bit-exact; {flips}/{flips} corruptions detected; resume initialized {} and restored {} tensors",
        got_init.len(),
        report.restored.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient oracle", c1_gradient_oracle),
        ("motion-field oracle", c2_motion_field_oracle),
        ("loss identities", c3_loss_identities),
        ("diffusion algebra", c4_diffusion_algebra),
        ("parameter sharing", c5_parameter_sharing),
        ("depth codec", c6_depth_codec),
        ("HAOP properties", c7_haop),
        ("end-to-end trend", c8_trend),
        ("determinism", c9_determinism),
        ("checkpoint integrity", c10_checkpoints),
    ];
    let only: Option<Vec<usize>> = std::env::var("IDOL_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
