//! Training objective: joint denoising MSE, cost-volume motion fields and
//! the motion / cross-attention consistency terms over the up blocks.
//!
//! Each loss has a tape form (`*_var`), used by training and gradient
//! checking, and a tensor form that evaluates the same tape on constants.
//!
//! Normalization choices: the motion term is a true mean over the
//! `(L-1)·H·W·H·W` motion-field entries, and the cross-attention term is an
//! elementwise mean.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Guard for zero-length feature vectors.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Weights of the consistency terms in the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_mo: f64,
    pub w_xattn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_mo: 0.01,
            w_xattn: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            w_mo: 0.0,
            w_xattn: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_mo", self.w_mo), ("w_xattn", self.w_xattn)] {
            if !(w >= 0.0) {
                return Err(Error::param(name, format!("must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Motion-field softmax temperature for a block with `channels` features.
pub fn motion_temperature(channels: usize) -> f64 {
    1.0 / (channels as f64).sqrt()
}

/// How the two streams' cross-attention maps are combined in the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XattnShareMode {
    #[default]
    Independent,
    ShareAvg,
    ShareVideo,
}

impl FromStr for XattnShareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "share_avg" => Ok(Self::ShareAvg),
            "share_video" => Ok(Self::ShareVideo),
            other => Err(Error::param("xattn_share_mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for XattnShareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Independent => "independent",
            Self::ShareAvg => "share_avg",
            Self::ShareVideo => "share_video",
        })
    }
}

// ---------------------------------------------------------------------------
// tape forms

/// Motion fields for all consecutive frame pairs of token features
/// `[L, S, D]`, returned as `[L-1, S, S]` row-stochastic rows.
pub fn motion_fields_var<T: Real>(g: &mut Graph<T>, tokens: Var, tau: f64) -> Var {
    let s = g.shape(tokens).to_vec();
    assert!(s.len() == 3 && s[0] >= 2, "motion fields need [L>=2, S, D], got {s:?}");
    let l = s[0];
    let f = g.l2_normalize(tokens, T::lit(NORMALIZE_EPS));
    let src = g.slice(f, 0, 0, l - 1);
    let dst = g.slice(f, 0, 1, l - 1);
    let cost = g.matmul(src, dst, false, true);
    let logits = g.scale(cost, T::lit(1.0 / tau));
    g.softmax(logits)
}

/// MSE between video and depth motion fields of `[L, S, D]` token features.
pub fn motion_consistency_var<T: Real>(g: &mut Graph<T>, tokens_v: Var, tokens_d: Var, tau: f64) -> Var {
    assert_eq!(g.shape(tokens_v), g.shape(tokens_d), "motion consistency shape mismatch");
    let uv = motion_fields_var(g, tokens_v, tau);
    let ud = motion_fields_var(g, tokens_d, tau);
    g.mse(uv, ud)
}

pub fn xattn_consistency_var<T: Real>(g: &mut Graph<T>, map_v: Var, map_d: Var) -> Var {
    g.mse(map_v, map_d)
}

pub fn denoise_loss_var<T: Real>(g: &mut Graph<T>, eps_v_hat: Var, eps_v: Var, eps_d_hat: Var, eps_d: Var) -> Var {
    let lv = g.mse(eps_v_hat, eps_v);
    let ld = g.mse(eps_d_hat, eps_d);
    g.add(lv, ld)
}

/// `denoise + sum_n (w_mo mo_n + w_xattn xattn_n)`; zero-weight terms are
/// not added so the zero-weight total is bit-identical to `denoise`.
pub fn total_loss_var<T: Real>(g: &mut Graph<T>, denoise: Var, mo: &[Var], xattn: &[Var], w: &LossWeights) -> Var {
    let mut acc = denoise;
    for (weight, terms) in [(w.w_mo, mo), (w.w_xattn, xattn)] {
        if weight == 0.0 {
            continue;
        }
        for &term in terms {
            let scaled = g.scale(term, T::lit(weight));
            acc = g.add(acc, scaled);
        }
    }
    acc
}

pub fn share_xattn_var<T: Real>(g: &mut Graph<T>, map_v: Var, map_d: Var, mode: XattnShareMode) -> (Var, Var) {
    match mode {
        XattnShareMode::Independent => (map_v, map_d),
        XattnShareMode::ShareVideo => (map_v, map_v),
        XattnShareMode::ShareAvg => {
            let sum = g.add(map_v, map_d);
            let avg = g.scale(sum, T::lit(0.5));
            (avg, avg)
        }
    }
}

// ---------------------------------------------------------------------------
// tensor forms

/// All-pairs cosine similarities between two feature maps, `[H, W, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    pub values: Tensor<T>,
}

/// Softmax-normalized cost volume; every source row sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField<T> {
    pub values: Tensor<T>,
    pub tau: f64,
}

fn expect_hwd<T: Real>(f: &Tensor<T>, ctx: &str) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [h, w, d] => Ok((h, w, d)),
        _ => Err(Error::shape(ctx, &[0, 0, 0], f.shape())),
    }
}

/// Unit-normalizes each spatial vector of an `[H, W, D]` map.
pub fn normalize_features<T: Real>(f: &Tensor<T>) -> Result<Tensor<T>> {
    expect_hwd(f, "normalize_features")?;
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let y = g.l2_normalize(x, T::lit(NORMALIZE_EPS));
    Ok(g.value(y).clone())
}

pub fn cost_volume<T: Real>(f_l: &Tensor<T>, f_next: &Tensor<T>) -> Result<CostVolume<T>> {
    let (h, w, d) = expect_hwd(f_l, "cost_volume")?;
    f_next.expect_shape(f_l.shape(), "cost_volume")?;
    let mut g = Graph::new();
    let a = g.constant(f_l.clone().reshape(&[1, h * w, d])?);
    let b = g.constant(f_next.clone().reshape(&[1, h * w, d])?);
    let c = g.matmul(a, b, false, true);
    Ok(CostVolume {
        values: g.value(c).clone().reshape(&[h, w, h, w])?,
    })
}

pub fn motion_field<T: Real>(c: &CostVolume<T>, tau: f64) -> Result<MotionField<T>> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("must be > 0, got {tau}")));
    }
    let shape = c.values.shape().to_vec();
    let (h, w) = match *shape.as_slice() {
        [h, w, h2, w2] if h == h2 && w == w2 => (h, w),
        _ => return Err(Error::shape("motion_field", &[0, 0, 0, 0], &shape)),
    };
    let mut g = Graph::new();
    let x = g.constant(c.values.clone().reshape(&[h * w, h * w])?);
    let x = g.scale(x, T::lit(1.0 / tau));
    let u = g.softmax(x);
    Ok(MotionField {
        values: g.value(u).clone().reshape(&shape)?,
        tau,
    })
}

/// `[L, D, H, W]` -> `[L, H*W, D]` token layout.
pub fn frames_to_tokens<T: Real>(feats: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, d, h, w) = match *feats.shape() {
        [l, d, h, w] => (l, d, h, w),
        _ => return Err(Error::shape("frames_to_tokens", &[0, 0, 0, 0], feats.shape())),
    };
    let mut g = Graph::new();
    let x = g.constant(feats.clone());
    let p = g.permute(x, &[0, 2, 3, 1]);
    let r = g.reshape(p, &[l, h * w, d]);
    Ok(g.value(r).clone())
}

/// Per-block motion consistency over `[L, D_n, H_n, W_n]` feature maps.
pub fn motion_consistency_loss<T: Real>(
    feats_v: &[Tensor<T>],
    feats_d: &[Tensor<T>],
    taus: &[f64],
) -> Result<Vec<T>> {
    if feats_v.len() != feats_d.len() || feats_v.len() != taus.len() {
        return Err(Error::shape(
            "motion_consistency_loss blocks",
            &[feats_v.len(), feats_v.len()],
            &[feats_d.len(), taus.len()],
        ));
    }
    let mut out = Vec::with_capacity(feats_v.len());
    for ((fv, fd), &tau) in feats_v.iter().zip(feats_d).zip(taus) {
        fd.expect_shape(fv.shape(), "motion_consistency_loss")?;
        if fv.ndim() != 4 || fv.shape()[0] < 2 {
            return Err(Error::Precondition(format!(
                "motion consistency needs at least 2 frames, got shape {:?}",
                fv.shape()
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::param("tau", format!("must be > 0, got {tau}")));
        }
        let mut g = Graph::new();
        let tv = g.constant(frames_to_tokens(fv)?);
        let td = g.constant(frames_to_tokens(fd)?);
        let l = motion_consistency_var(&mut g, tv, td, tau);
        out.push(g.value(l).item());
    }
    Ok(out)
}

pub fn xattn_consistency_loss<T: Real>(map_v: &Tensor<T>, map_d: &Tensor<T>) -> Result<T> {
    map_d.expect_shape(map_v.shape(), "xattn_consistency_loss")?;
    let mut g = Graph::new();
    let a = g.constant(map_v.clone());
    let b = g.constant(map_d.clone());
    let l = xattn_consistency_var(&mut g, a, b);
    Ok(g.value(l).item())
}

pub fn denoise_loss<T: Real>(eps_v_hat: &Tensor<T>, eps_v: &Tensor<T>, eps_d_hat: &Tensor<T>, eps_d: &Tensor<T>) -> Result<T> {
    eps_v.expect_shape(eps_v_hat.shape(), "denoise_loss video")?;
    eps_d.expect_shape(eps_d_hat.shape(), "denoise_loss depth")?;
    let mut g = Graph::new();
    let vs = [eps_v_hat, eps_v, eps_d_hat, eps_d].map(|t| g.constant(t.clone()));
    let l = denoise_loss_var(&mut g, vs[0], vs[1], vs[2], vs[3]);
    Ok(g.value(l).item())
}

pub fn total_loss(denoise: f64, mo: &[f64], xattn: &[f64], w: &LossWeights) -> Result<f64> {
    if mo.len() != xattn.len() {
        return Err(Error::shape("total_loss blocks", &[mo.len()], &[xattn.len()]));
    }
    w.validate()?;
    let mut g = Graph::<f64>::new();
    let d = g.constant(Tensor::scalar(denoise));
    let mo: Vec<Var> = mo.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
    let xa: Vec<Var> = xattn.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
    let t = total_loss_var(&mut g, d, &mo, &xa, w);
    Ok(g.value(t).item())
}

pub fn shared_xattn_variant<T: Real>(
    map_v: &Tensor<T>,
    map_d: &Tensor<T>,
    mode: XattnShareMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    map_d.expect_shape(map_v.shape(), "shared_xattn_variant")?;
    let mut g = Graph::new();
    let a = g.constant(map_v.clone());
    let b = g.constant(map_d.clone());
    let (x, y) = share_xattn_var(&mut g, a, b, mode);
    Ok((g.value(x).clone(), g.value(y).clone()))
}
