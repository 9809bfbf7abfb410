//! Ancestral sampling of video and depth clips, jointly or one stream at a
//! time.
//!
//! Randomness comes from four ChaCha streams derived from one seed:
//! initial video latent, initial depth latent, video step noise, depth step
//! noise. A video-only run therefore draws exactly what the video half of a
//! joint run draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{ConditionBundle, Denoiser, ForwardOptions, ModalityLabel, ParameterStore};
use crate::error::{Error, Result};
use crate::schedule::{ddpm_step, from_latent, NoiseSchedule};
use crate::tensor::{Real, Tensor};

/// Noise predictions for the reverse process.
pub trait EpsPredictor<T: Real> {
    fn predict_joint(&self, z_v: &Tensor<T>, z_d: &Tensor<T>, t: usize) -> Result<(Tensor<T>, Tensor<T>)>;
    fn predict_single(&self, z: &Tensor<T>, y: ModalityLabel, t: usize) -> Result<Tensor<T>>;
}

/// A denoiser with its parameters and conditioning.
pub struct ModelPredictor<'a, T> {
    pub denoiser: &'a Denoiser,
    pub params: &'a ParameterStore<T>,
    pub cond: &'a ConditionBundle<T>,
    pub opts: ForwardOptions,
}

impl<T: Real> EpsPredictor<T> for ModelPredictor<'_, T> {
    fn predict_joint(&self, z_v: &Tensor<T>, z_d: &Tensor<T>, t: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let out = self.denoiser.joint_forward(z_v, z_d, t, self.cond, self.params, &self.opts)?;
        Ok((out.eps_video, out.eps_depth))
    }

    fn predict_single(&self, z: &Tensor<T>, y: ModalityLabel, t: usize) -> Result<Tensor<T>> {
        Ok(self.denoiser.single_forward(z, t, y, self.cond, self.params, &self.opts)?.0)
    }
}

/// The four seed-derived random streams.
pub struct SamplerRng {
    init: [ChaCha8Rng; 2],
    step: [ChaCha8Rng; 2],
}

impl SamplerRng {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: [stream(0), stream(1)],
            step: [stream(2), stream(3)],
        }
    }

    fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(StandardNormal.sample(rng)))
    }

    pub fn initial<T: Real>(&mut self, y: ModalityLabel, shape: &[usize]) -> Tensor<T> {
        Self::normal(&mut self.init[y.index()], shape)
    }

    pub fn step_noise<T: Real>(&mut self, y: ModalityLabel, shape: &[usize]) -> Tensor<T> {
        Self::normal(&mut self.step[y.index()], shape)
    }
}

/// Per-step monitoring hook: receives `t` and the latents after the step.
pub type StepHook<'a, T> = &'a mut dyn FnMut(usize, &[&Tensor<T>]);

fn check_finite<T: Real>(z: &Tensor<T>, t: usize, y: ModalityLabel) -> Result<()> {
    if z.all_finite() {
        return Ok(());
    }
    let bad = z.data().iter().filter(|v| !v.is_finite()).count();
    Err(Error::NonFinite {
        location: format!("sampling step t={t} ({y} stream)"),
        diagnostic: format!("{bad} of {} latent entries non-finite", z.len()),
    })
}

/// Latent trajectory of both streams in lockstep; returns final latents.
pub fn sample_joint_latents<T: Real>(
    predictor: &dyn EpsPredictor<T>,
    sched: &NoiseSchedule,
    shape: &[usize],
    rng: &mut SamplerRng,
    mut hook: Option<StepHook<'_, T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (v, d) = (ModalityLabel::Video, ModalityLabel::Depth);
    let mut z_v = rng.initial(v, shape);
    let mut z_d = rng.initial(d, shape);
    for t in (0..sched.steps()).rev() {
        let (e_v, e_d) = predictor.predict_joint(&z_v, &z_d, t)?;
        let n_v = rng.step_noise(v, shape);
        let n_d = rng.step_noise(d, shape);
        z_v = ddpm_step(&z_v, &e_v, t, sched, &n_v)?;
        z_d = ddpm_step(&z_d, &e_d, t, sched, &n_d)?;
        check_finite(&z_v, t, v)?;
        check_finite(&z_d, t, d)?;
        if let Some(h) = hook.as_deref_mut() {
            h(t, &[&z_v, &z_d]);
        }
    }
    Ok((z_v, z_d))
}

/// Latent trajectory of one stream.
pub fn sample_single_latents<T: Real>(
    predictor: &dyn EpsPredictor<T>,
    y: ModalityLabel,
    sched: &NoiseSchedule,
    shape: &[usize],
    rng: &mut SamplerRng,
) -> Result<Tensor<T>> {
    let mut z = rng.initial(y, shape);
    for t in (0..sched.steps()).rev() {
        let e = predictor.predict_single(&z, y, t)?;
        let n = rng.step_noise(y, shape);
        z = ddpm_step(&z, &e, t, sched, &n)?;
        check_finite(&z, t, y)?;
    }
    Ok(z)
}

fn clip_shape(denoiser: &Denoiser, frames: usize) -> [usize; 4] {
    let c = denoiser.config();
    [frames, c.latent_channels, c.latent_size, c.latent_size]
}

fn frames_of<T: Real>(cond: &ConditionBundle<T>, fallback: usize) -> usize {
    cond.pose_heatmaps.as_ref().map_or(fallback, |p| p.shape()[0])
}

/// Video and depth-as-RGB clips in `[0, 1]`, `[L, 3, H, W]` each. `L`
/// follows the pose heatmaps when present, else the configured length.
pub fn sample_joint<T: Real>(
    denoiser: &Denoiser,
    cond: &ConditionBundle<T>,
    sched: &NoiseSchedule,
    params: &ParameterStore<T>,
    opts: &ForwardOptions,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = clip_shape(denoiser, frames_of(cond, denoiser.config().frames));
    let predictor = ModelPredictor {
        denoiser,
        params,
        cond,
        opts: ForwardOptions {
            capture_taps: false,
            ..*opts
        },
    };
    let (z_v, z_d) = sample_joint_latents(&predictor, sched, &shape, &mut SamplerRng::new(seed), None)?;
    Ok((from_latent(&z_v), from_latent(&z_d)))
}

/// One modality's clip in `[0, 1]`.
pub fn sample_single<T: Real>(
    denoiser: &Denoiser,
    cond: &ConditionBundle<T>,
    y: ModalityLabel,
    sched: &NoiseSchedule,
    params: &ParameterStore<T>,
    opts: &ForwardOptions,
    seed: u64,
) -> Result<Tensor<T>> {
    let shape = clip_shape(denoiser, frames_of(cond, denoiser.config().frames));
    let predictor = ModelPredictor {
        denoiser,
        params,
        cond,
        opts: ForwardOptions {
            capture_taps: false,
            ..*opts
        },
    };
    let z = sample_single_latents(&predictor, y, sched, &shape, &mut SamplerRng::new(seed))?;
    Ok(from_latent(&z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::{forward_diffuse, make_linear_schedule, predict_z0};
    use crate::synth::{rgb_to_depth, Colormap};
    use rand::Rng;

    fn tiny() -> (Denoiser, ParameterStore<f32>, ConditionBundle<f32>, NoiseSchedule) {
        let cfg = DenoiserConfig::tiny();
        let d = Denoiser::new(cfg.clone()).unwrap();
        let mut params = d.init_params::<f32>(5);
        params.perturb(0.05, &mut ChaCha8Rng::seed_from_u64(9));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = cfg.latent_size;
        let mut img = || Tensor::from_fn(&[3, s, s], |_| rng.gen_range(-1.0f32..1.0));
        let cond = ConditionBundle {
            fg_image: img(),
            bg_latent: img(),
            pose_heatmaps: None,
        };
        (d, params, cond, make_linear_schedule(6, 1e-3, 0.2).unwrap())
    }

    #[test]
    fn joint_sampling_is_deterministic_with_declared_shapes() {
        let (d, p, cond, sched) = tiny();
        let opts = ForwardOptions::default();
        let a = sample_joint(&d, &cond, &sched, &p, &opts, 11).unwrap();
        let b = sample_joint(&d, &cond, &sched, &p, &opts, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.shape(), &[2, 3, 8, 8]);
        assert_eq!(a.1.shape(), &[2, 3, 8, 8]);
        let c = sample_joint(&d, &cond, &sched, &p, &opts, 12).unwrap();
        assert_ne!(a, c);
        assert!(a.0.data().iter().chain(a.1.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn uncoupled_joint_sampling_equals_two_single_runs() {
        let (d, p, cond, sched) = tiny();
        let opts = ForwardOptions {
            couple_streams: false,
            ..ForwardOptions::default()
        };
        let (v, dep) = sample_joint(&d, &cond, &sched, &p, &opts, 4).unwrap();
        let v1 = sample_single(&d, &cond, ModalityLabel::Video, &sched, &p, &opts, 4).unwrap();
        let d1 = sample_single(&d, &cond, ModalityLabel::Depth, &sched, &p, &opts, 4).unwrap();
        assert_eq!(v, v1);
        assert_eq!(dep, d1);
    }

    #[test]
    fn single_depth_sample_decodes_into_unit_range() {
        let (d, p, cond, sched) = tiny();
        let x = sample_single(&d, &cond, ModalityLabel::Depth, &sched, &p, &ForwardOptions::default(), 1).unwrap();
        let again = sample_single(&d, &cond, ModalityLabel::Depth, &sched, &p, &ForwardOptions::default(), 1).unwrap();
        assert_eq!(x, again);
        let depth = rgb_to_depth(&x, Colormap::Hot).unwrap();
        assert!(depth.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    /// Predicts the exact noise that maps the current latent onto `z0`.
    struct Oracle {
        z0: Tensor<f64>,
        sched: NoiseSchedule,
    }

    impl Oracle {
        fn eps(&self, z: &Tensor<f64>, t: usize) -> Tensor<f64> {
            let ab = self.sched.alpha_bar()[t];
            z.zip_map(&self.z0, |zt, x0| (zt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .unwrap()
        }
    }

    impl EpsPredictor<f64> for Oracle {
        fn predict_joint(&self, z_v: &Tensor<f64>, z_d: &Tensor<f64>, t: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
            Ok((self.eps(z_v, t), self.eps(z_d, t)))
        }

        fn predict_single(&self, z: &Tensor<f64>, _: ModalityLabel, t: usize) -> Result<Tensor<f64>> {
            Ok(self.eps(z, t))
        }
    }

    #[test]
    fn oracle_final_step_reconstructs_the_clean_latent() {
        let sched = make_linear_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let oracle = Oracle {
            z0: z0.clone(),
            sched: sched.clone(),
        };
        // Last reverse step: sigma_0 = 0, so the step is the exact inverse.
        let eps = Tensor::from_fn(z0.shape(), |_| rng.sample::<f64, _>(StandardNormal));
        let z_t = forward_diffuse(&z0, 0, &eps, &sched).unwrap();
        let noise = Tensor::zeros(z0.shape());
        let out = ddpm_step(&z_t, &oracle.eps(&z_t, 0), 0, &sched, &noise).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-4);
        assert!(predict_z0(&z_t, &eps, 0, &sched).unwrap().max_abs_diff(&z0) < 1e-9);
        // The whole trajectory with the oracle lands on z0 as well.
        let z = sample_single_latents(&oracle, ModalityLabel::Video, &sched, z0.shape(), &mut SamplerRng::new(3)).unwrap();
        assert!(z.max_abs_diff(&z0) < 1e-4);
        let (a, b) = sample_joint_latents(&oracle, &sched, z0.shape(), &mut SamplerRng::new(3), None).unwrap();
        assert!(a.max_abs_diff(&z0) < 1e-4 && b.max_abs_diff(&z0) < 1e-4);
    }

    struct Exploding;

    impl EpsPredictor<f64> for Exploding {
        fn predict_joint(&self, z_v: &Tensor<f64>, _: &Tensor<f64>, t: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
            let e = self.predict_single(z_v, ModalityLabel::Video, t)?;
            Ok((e.clone(), e))
        }

        fn predict_single(&self, z: &Tensor<f64>, _: ModalityLabel, t: usize) -> Result<Tensor<f64>> {
            Ok(z.map(|_| if t == 3 { f64::NAN } else { 0.0 }))
        }
    }

    #[test]
    fn non_finite_latent_aborts_with_the_step() {
        let sched = make_linear_schedule(6, 1e-3, 0.2).unwrap();
        let err = sample_joint_latents(&Exploding, &sched, &[1, 3, 2, 2], &mut SamplerRng::new(0), None).unwrap_err();
        match err {
            Error::NonFinite { location, .. } => assert!(location.contains("t=3"), "{location}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
