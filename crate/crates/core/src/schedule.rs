//! Forward noising, its algebraic inverse, and the ancestral reverse step.
//!
//! Timesteps are 0-based: `t` ranges over `[0, T)` and sampling starts at
//! `T - 1`. Coefficients are kept in f64 regardless of the tensor precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Parameters a [`NoiseSchedule`] is rebuilt from (checkpoint manifest form).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-timestep `beta`, `alpha = 1 - beta` and `alpha_bar = prod(alpha)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear beta schedule, endpoints inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::param("steps", format!("must be >= 1, got {steps}")));
    }
    if !(beta_start > 0.0) {
        return Err(Error::param("beta_start", format!("must be > 0, got {beta_start}")));
    }
    if !(beta_end < 1.0) {
        return Err(Error::param("beta_end", format!("must be < 1, got {beta_end}")));
    }
    if beta_start > beta_end {
        return Err(Error::param(
            "beta_start",
            format!("must be <= beta_end ({beta_end}), got {beta_start}"),
        ));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas_with(
        ScheduleParams {
            steps,
            beta_start,
            beta_end,
        },
        beta,
    )
}

impl NoiseSchedule {
    /// Schedule from an explicit beta sequence.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        let params = ScheduleParams {
            steps: beta.len(),
            beta_start: beta.first().copied().unwrap_or(0.0),
            beta_end: beta.last().copied().unwrap_or(0.0),
        };
        Self::from_betas_with(params, beta)
    }

    fn from_betas_with(params: ScheduleParams, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::param("beta", "empty schedule"));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::param("beta", format!("beta[{i}] = {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            params,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Index {
                context: "timestep".into(),
                index: t,
                len: self.steps(),
            });
        }
        Ok(())
    }

    /// Posterior standard deviation `sigma_t`; `sigma_0 = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        (self.beta[t] * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
    }
}

fn affine<T: Real>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64, ctx: &str) -> Result<Tensor<T>> {
    b.expect_shape(a.shape(), ctx)?;
    let (ca, cb) = (T::lit(ca), T::lit(cb));
    a.zip_map(b, |x, y| ca * x + cb * y)
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse<T: Real>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t];
    affine(z0, ab.sqrt(), eps, (1.0 - ab).sqrt(), "forward_diffuse")
}

/// Inverts [`forward_diffuse`] given a noise estimate.
pub fn predict_z0<T: Real>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t];
    let inv = 1.0 / ab.sqrt();
    affine(z_t, inv, eps_hat, -(1.0 - ab).sqrt() * inv, "predict_z0")
}

/// One ancestral step `t -> t-1`: posterior mean plus `sigma_t * noise`.
pub fn ddpm_step<T: Real>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    noise.expect_shape(z_t.shape(), "ddpm_step noise")?;
    let inv_sqrt_alpha = 1.0 / sched.alpha[t].sqrt();
    let eps_coef = sched.beta[t] / (1.0 - sched.alpha_bar[t]).sqrt();
    let mean = affine(z_t, inv_sqrt_alpha, eps_hat, -inv_sqrt_alpha * eps_coef, "ddpm_step")?;
    let sigma = sched.sigma(t);
    if sigma == 0.0 {
        return Ok(mean);
    }
    affine(&mean, 1.0, noise, sigma, "ddpm_step")
}

/// Maps an image in `[0, 1]` to the internal latent range `[-1, 1]`.
pub fn to_latent<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    let two = T::lit(2.0);
    img.map(|x| two * x - T::one())
}

/// Inverse of [`to_latent`], clamped to `[0, 1]`.
pub fn from_latent<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    z.map(|x| ((x + T::one()) * half).max(T::zero()).min(T::one()))
}
