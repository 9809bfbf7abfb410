//! Central-difference gradient checking in double precision.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::denoiser::{ConditionBundle, Denoiser, DenoiserConfig, ParamVars, ParameterStore};
use crate::error::{Error, Result};
use crate::schedule::{make_linear_schedule, NoiseSchedule};
use crate::tensor::Tensor;

use super::{build_objective, Example, NoiseDraw, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSettings {
    /// Finite-difference half step.
    pub step: f64,
    pub max_entries: usize,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_entries: 64,
            tolerance: 1e-4,
            floor: 1e-7,
            seed: 0,
        }
    }
}

/// Worst checked entry of one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub objective: String,
    pub value: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// `Ok` when passed, otherwise an error naming the worst tensor and
    /// index.
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            return Ok(self);
        }
        let w = self.worst().cloned();
        Err(Error::Gradcheck(match w {
            Some(w) => format!(
                "{}: `{}`[{}] analytic {:.6e} vs numeric {:.6e} (rel. error {:.3e} > {:.1e})",
                self.objective, w.name, w.worst_index, w.analytic, w.numeric, w.max_rel_err, self.tolerance
            ),
            None => format!("{}: nothing checked", self.objective),
        }))
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares tape gradients of `objective` with central differences on up to
/// `max_entries` random entries of each tensor accepted by `filter`.
pub fn gradcheck<F>(
    name: &str,
    objective: F,
    params: &ParameterStore<f64>,
    filter: impl Fn(&str) -> bool,
    settings: &GradcheckSettings,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
{
    let mut reports = gradcheck_many(&[name], |g, v| Ok(vec![objective(g, v)?]), params, filter, settings)?;
    Ok(reports.remove(0))
}

/// [`gradcheck`] for several scalar objectives built on one tape; each
/// perturbed forward pass serves all of them.
pub fn gradcheck_many<F>(
    names: &[&str],
    objectives: F,
    params: &ParameterStore<f64>,
    filter: impl Fn(&str) -> bool,
    settings: &GradcheckSettings,
) -> Result<Vec<GradcheckReport>>
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Vec<Var>>,
{
    let eval = |store: &ParameterStore<f64>| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, store, |_| false);
        let outs = objectives(&mut g, &vars)?;
        Ok(outs.iter().map(|&v| g.value(v).item()).collect())
    };
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, params, &filter);
    let roots = objectives(&mut g, &vars)?;
    if roots.len() != names.len() {
        return Err(Error::Precondition(format!(
            "{} objectives built for {} names",
            roots.len(),
            names.len()
        )));
    }
    let values: Vec<f64> = roots.iter().map(|&r| g.value(r).item()).collect();
    for (name, v) in names.iter().zip(&values) {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                location: format!("gradcheck objective `{name}`"),
                diagnostic: format!("value {v}"),
            });
        }
    }
    let grads: Vec<_> = roots.iter().map(|&r| g.backward(r)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut work = params.clone();
    let mut tensors: Vec<Vec<TensorCheck>> = vec![Vec::new(); names.len()];
    let h = settings.step;
    for (pname, t) in params.iter() {
        if !filter(pname) {
            continue;
        }
        let var = vars.get(pname).ok_or_else(|| Error::MissingParam(pname.to_string()))?;
        let analytic: Vec<Tensor<f64>> = grads
            .iter()
            .map(|gr| gr.get(var).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let n = t.len();
        let mut idx = sample(&mut rng, n, settings.max_entries.min(n)).into_vec();
        idx.sort_unstable();
        let mut checks: Vec<TensorCheck> = names
            .iter()
            .map(|_| TensorCheck {
                name: pname.to_string(),
                checked: idx.len(),
                max_rel_err: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            })
            .collect();
        for k in idx {
            let orig = t.data()[k];
            let set = |w: &mut ParameterStore<f64>, v: f64| {
                if let Some(p) = w.get_mut(pname) {
                    p.data_mut()[k] = v;
                }
            };
            set(&mut work, orig + h);
            let fp = eval(&work)?;
            set(&mut work, orig - h);
            let fm = eval(&work)?;
            set(&mut work, orig);
            for (o, check) in checks.iter_mut().enumerate() {
                let numeric = (fp[o] - fm[o]) / (2.0 * h);
                let a = analytic[o].data()[k];
                let err = relative_error(a, numeric, settings.floor);
                if !(err <= check.max_rel_err) {
                    check.max_rel_err = err;
                    check.worst_index = k;
                    check.analytic = a;
                    check.numeric = numeric;
                }
            }
        }
        for (dst, c) in tensors.iter_mut().zip(checks) {
            dst.push(c);
        }
    }
    Ok(names
        .iter()
        .zip(values)
        .zip(tensors)
        .map(|((name, value), tensors)| {
            let max_rel_err = tensors.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            let passed = !tensors.is_empty() && tensors.iter().all(|c| c.max_rel_err <= settings.tolerance);
            GradcheckReport {
                objective: name.to_string(),
                value,
                tensors,
                max_rel_err,
                tolerance: settings.tolerance,
                passed,
            }
        })
        .collect())
}

/// Objectives checked through the joint forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLoss {
    Denoise,
    Mo,
    Xattn,
    Total,
}

impl ProbeLoss {
    pub const ALL: [ProbeLoss; 4] = [Self::Denoise, Self::Mo, Self::Xattn, Self::Total];
}

impl fmt::Display for ProbeLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Denoise => "denoise",
            Self::Mo => "mo",
            Self::Xattn => "xattn",
            Self::Total => "total",
        })
    }
}

impl FromStr for ProbeLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Self::Denoise),
            "mo" => Ok(Self::Mo),
            "xattn" => Ok(Self::Xattn),
            "total" => Ok(Self::Total),
            other => Err(Error::param("loss", format!("unknown objective `{other}`"))),
        }
    }
}

/// A fixed joint training example on a small model, in double precision.
pub struct JointProbe {
    pub denoiser: Denoiser,
    pub params: ParameterStore<f64>,
    pub sched: NoiseSchedule,
    pub example: Example<f64>,
    pub draw: NoiseDraw<f64>,
    pub train: TrainConfig,
}

impl JointProbe {
    /// Random inputs at a mid-range timestep. Parameters are perturbed by
    /// `perturb` so the zero-initialized layers carry gradient.
    pub fn new(model: &DenoiserConfig, train: &TrainConfig, seed: u64, perturb: f64) -> Result<Self> {
        let denoiser = Denoiser::new(model.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = denoiser.init_params::<f64>(seed);
        params.perturb(perturb, &mut rng);
        let sched = make_linear_schedule(20, 1e-4, 0.02)?;
        let (l, c, s) = (model.frames, model.latent_channels, model.latent_size);
        let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let cond = ConditionBundle {
            fg_image: uniform(&[c, s, s]),
            bg_latent: uniform(&[c, s, s]),
            pose_heatmaps: model.pose_adapter.then(|| uniform(&[l, model.keypoints, s, s]).map(|v: f64| v.abs())),
        };
        let example = Example {
            video: uniform(&[l, c, s, s]),
            depth: Some(uniform(&[l, c, s, s])),
            cond,
        };
        let mut draw = NoiseDraw::sample(&example, sched.steps(), &mut rng);
        draw.t = sched.steps() / 2;
        Ok(Self {
            denoiser,
            params,
            sched,
            example,
            draw,
            train: train.clone(),
        })
    }

    /// The requested loss components, all built on one tape.
    pub fn objectives(&self, g: &mut Graph<f64>, vars: &ParamVars, losses: &[ProbeLoss]) -> Result<Vec<Var>> {
        let obj = build_objective(g, &self.denoiser, vars, &self.sched, &self.example, &self.draw, &self.train)?;
        let sum = |g: &mut Graph<f64>, terms: &[Var], what: &str| -> Result<Var> {
            let (&first, rest) = terms
                .split_first()
                .ok_or_else(|| Error::Precondition(format!("{what} term disabled in this configuration")))?;
            Ok(rest.iter().fold(first, |acc, &v| g.add(acc, v)))
        };
        losses
            .iter()
            .map(|loss| match loss {
                ProbeLoss::Denoise => Ok(obj.denoise),
                ProbeLoss::Mo => sum(g, &obj.mo, "motion consistency"),
                ProbeLoss::Xattn => sum(g, &obj.xattn, "cross-attention consistency"),
                ProbeLoss::Total => Ok(obj.total),
            })
            .collect()
    }

    /// Checks every requested objective with one pass over the parameters.
    pub fn check(&self, losses: &[ProbeLoss], settings: &GradcheckSettings) -> Result<Vec<GradcheckReport>> {
        let names: Vec<String> = losses.iter().map(|l| l.to_string()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        gradcheck_many(
            &names,
            |g, vars| self.objectives(g, vars, losses),
            &self.params,
            |_| true,
            settings,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_probe_matches_exactly() {
        let w = [0.5, -2.0, 3.25, 0.0];
        let mut params = ParameterStore::new();
        params.insert("x", Tensor::from_f64(&[4], &[1.0, 2.0, -1.0, 0.5]).unwrap());
        let report = gradcheck(
            "linear",
            |g, vars| {
                let wv = g.constant(Tensor::from_f64(&[4], &w).unwrap());
                let x = vars.get("x").unwrap();
                let p = g.mul(wv, x);
                Ok(g.sum(p))
            },
            &params,
            |_| true,
            &GradcheckSettings::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
        assert_eq!(report.tensors[0].checked, 4);
    }

    #[test]
    fn wrong_gradient_is_reported_with_name_and_index() {
        let mut params = ParameterStore::new();
        params.insert("x", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        // `c` copies x as a constant: the tape reports x where the true
        // derivative of x^2 is 2x.
        let report = gradcheck(
            "broken",
            |g, vars| {
                let x = vars.get("x").unwrap();
                let c = g.constant(g.value(x).clone());
                let p = g.mul(x, c);
                Ok(g.sum(p))
            },
            &params,
            |_| true,
            &GradcheckSettings::default(),
        )
        .unwrap();
        assert!(!report.passed);
        let msg = report.into_result().unwrap_err().to_string();
        assert!(msg.contains("`x`["), "{msg}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-7), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-7) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-7) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn tiny_joint_probe_passes_on_a_subsample() {
        let probe = JointProbe::new(&DenoiserConfig::tiny(), &TrainConfig::default(), 0, 0.1).unwrap();
        let settings = GradcheckSettings {
            max_entries: 2,
            ..GradcheckSettings::default()
        };
        let reports = probe.check(&ProbeLoss::ALL, &settings).unwrap();
        assert_eq!(reports.len(), 4);
        for r in reports {
            assert!(r.value > 0.0);
            r.into_result().unwrap();
        }
    }
}
