//! Graph-level building blocks of the denoiser.
//!
//! Layouts: feature maps are `[L, C, H, W]` (frames act as the batch axis),
//! attention tokens are `[L, S, C]` with `S = H*W`.

use crate::autograd::{Graph, Var};
use crate::losses::{share_xattn_var, XattnShareMode};
use crate::tensor::{Real, Tensor};

use super::params::Scope;

/// Largest group count in {8, 4, 2, 1} that leaves at least two channels per
/// group (falls back to a single group).
pub(crate) fn norm_groups(channels: usize) -> usize {
    [8, 4, 2]
        .into_iter()
        .find(|&g| channels.is_multiple_of(g) && channels / g >= 2)
        .unwrap_or(1)
}

/// Interleaved sinusoidal encoding: `sin(x w_i)` at even, `cos(x w_i)` at odd
/// positions, `w_i = 10000^(-2i/dim)`.
pub fn sinusoidal_embedding(x: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let w = 10000f64.powf(-2.0 * i / dim as f64);
            if j % 2 == 0 {
                (x * w).sin()
            } else {
                (x * w).cos()
            }
        })
        .collect()
}

pub(crate) fn conv<T: Real>(g: &mut Graph<T>, s: &Scope, name: &str, x: Var, stride: usize) -> Var {
    let sc = s.sub(name);
    let w = sc.get("weight");
    let (kh, kw) = (g.shape(w)[2], g.shape(w)[3]);
    let b = sc.opt("bias");
    g.conv2d(x, w, b, stride, (kh / 2, kw / 2))
}

pub(crate) fn group_norm<T: Real>(g: &mut Graph<T>, s: &Scope, name: &str, x: Var) -> Var {
    let sc = s.sub(name);
    let c = g.shape(x)[1];
    g.group_norm(x, sc.get("weight"), sc.get("bias"), norm_groups(c))
}

/// Layer norm over the last axis; identity when the store has no such norm.
pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, s: &Scope, name: &str, x: Var) -> Var {
    let sc = s.sub(name);
    match (sc.opt("weight"), sc.opt("bias")) {
        (Some(w), Some(b)) => g.layer_norm(x, w, b),
        _ => x,
    }
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, s: &Scope, name: &str, x: Var) -> Var {
    let sc = s.sub(name);
    let b = sc.opt("bias");
    g.linear(x, sc.get("weight"), b)
}

/// `[L, C, H, W]` -> `[L, C*p*p, H/p, W/p]`.
pub(crate) fn patchify<T: Real>(g: &mut Graph<T>, x: Var, p: usize) -> Var {
    if p == 1 {
        return x;
    }
    let s = g.shape(x).to_vec();
    let (l, c, h, w) = (s[0], s[1], s[2], s[3]);
    let r = g.reshape(x, &[l, c, h / p, p, w / p, p]);
    let r = g.permute(r, &[0, 1, 3, 5, 2, 4]);
    g.reshape(r, &[l, c * p * p, h / p, w / p])
}

/// Inverse of [`patchify`].
pub(crate) fn unpatchify<T: Real>(g: &mut Graph<T>, x: Var, p: usize) -> Var {
    if p == 1 {
        return x;
    }
    let s = g.shape(x).to_vec();
    let (l, cpp, h, w) = (s[0], s[1], s[2], s[3]);
    let c = cpp / (p * p);
    let r = g.reshape(x, &[l, c, p, p, h, w]);
    let r = g.permute(r, &[0, 1, 4, 2, 5, 3]);
    g.reshape(r, &[l, c, h * p, w * p])
}

/// `[L, C, H, W]` -> `[L, H*W, C]`.
pub(crate) fn to_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 3, 1]);
    g.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

pub(crate) fn from_tokens<T: Real>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], h, w, s[2]]);
    g.permute(r, &[0, 3, 1, 2])
}

/// `[B, N, C]` -> `[B*heads, N, C/heads]`.
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, n, heads, c / heads]);
    let p = g.permute(r, &[0, 2, 1, 3]);
    g.reshape(p, &[b * heads, n, c / heads])
}

fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (bh, n, dh) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[bh / heads, heads, n, dh]);
    let p = g.permute(r, &[0, 2, 1, 3]);
    g.reshape(p, &[bh / heads, n, heads * dh])
}

/// Scaled dot-product attention weights, `softmax(q k^T / sqrt(d))`.
fn attn_weights<T: Real>(g: &mut Graph<T>, q: Var, k: Var) -> Var {
    let d = g.shape(q)[2];
    let s = g.matmul(q, k, false, true);
    let s = g.scale(s, T::lit(1.0 / (d as f64).sqrt()));
    g.softmax(s)
}

/// Pre-norm multi-head self-attention over `[B, N, C]` (no residual).
pub(crate) fn self_attention<T: Real>(g: &mut Graph<T>, s: &Scope, x: Var, heads: usize) -> Var {
    let out = joint_attention(g, std::slice::from_ref(s), &[x], heads);
    out[0]
}

/// Self-attention over the concatenation of several token sets along the
/// token axis; each set is normalized and projected with its own scope and
/// the result is split back (no residual).
pub(crate) fn joint_attention<T: Real>(g: &mut Graph<T>, scopes: &[Scope], xs: &[Var], heads: usize) -> Vec<Var> {
    let mut qs = Vec::with_capacity(xs.len());
    let mut ks = Vec::with_capacity(xs.len());
    let mut vs = Vec::with_capacity(xs.len());
    let mut lens = Vec::with_capacity(xs.len());
    for (s, &x) in scopes.iter().zip(xs) {
        lens.push(g.shape(x)[1]);
        let h = layer_norm(g, s, "norm", x);
        qs.push(linear(g, s, "q", h));
        ks.push(linear(g, s, "k", h));
        vs.push(linear(g, s, "v", h));
    }
    let cat = |g: &mut Graph<T>, parts: &[Var]| if parts.len() == 1 { parts[0] } else { g.concat(parts, 1) };
    let (q, k, v) = (cat(g, &qs), cat(g, &ks), cat(g, &vs));
    let q = split_heads(g, q, heads);
    let k = split_heads(g, k, heads);
    let v = split_heads(g, v, heads);
    let a = attn_weights(g, q, k);
    let o = g.matmul(a, v, false, false);
    let o = merge_heads(g, o, heads);
    let mut out = Vec::with_capacity(xs.len());
    let mut start = 0;
    for (s, &n) in scopes.iter().zip(&lens) {
        let part = if xs.len() == 1 { o } else { g.slice(o, 1, start, n) };
        start += n;
        out.push(linear(g, s, "out", part));
    }
    out
}

pub(crate) struct ResBlock<'a> {
    pub scope: Scope<'a>,
    pub out_channels: usize,
    pub temporal: bool,
}

impl ResBlock<'_> {
    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, emb_act: Var) -> Var {
        let s = &self.scope;
        let cin = g.shape(x)[1];
        let h = group_norm(g, s, "norm1", x);
        let h = g.silu(h);
        let h = conv(g, s, "conv1", h, 1);
        let e = linear(g, s, "emb_proj", emb_act);
        let e = g.reshape(e, &[self.out_channels]);
        let h = g.add_channel(h, e);
        let h = group_norm(g, s, "norm2", h);
        let h = g.silu(h);
        let mut h = conv(g, s, "conv2", h, 1);
        if self.temporal {
            let sh = g.shape(h).to_vec();
            let (l, c, hh, ww) = (sh[0], sh[1], sh[2], sh[3]);
            let p = g.permute(h, &[1, 0, 2, 3]);
            let p = g.reshape(p, &[1, c, l, hh * ww]);
            let tc = conv(g, s, "temporal_conv", p, 1);
            let tc = g.reshape(tc, &[c, l, hh, ww]);
            let tc = g.permute(tc, &[1, 0, 2, 3]);
            h = g.add(h, tc);
        }
        let skip = if cin != self.out_channels { conv(g, s, "skip", x, 1) } else { x };
        g.add(skip, h)
    }
}

/// Per-stream inputs of an attention block.
pub(crate) struct AttnStream<'a> {
    pub scope: Scope<'a>,
    /// Foreground tokens `[K, E]`.
    pub fg: Var,
}

pub(crate) struct AttnSettings {
    pub heads: usize,
    pub temporal: bool,
    pub cross_modal: bool,
    pub couple: bool,
    pub share: XattnShareMode,
}

/// Self-attention feature and cross-attention map of one stream.
#[derive(Clone, Copy, Debug)]
pub struct GraphTaps {
    /// Post-self-attention tokens, `[L, S, D]`.
    pub feat: Var,
    /// Attention of the tokens onto the foreground tokens, `[heads, L*S, K]`.
    pub map: Var,
}

/// Spatial self-attention, foreground cross-attention, temporal attention and
/// cross-modal attention, run in lockstep over all streams.
pub(crate) fn attn_block<T: Real>(
    g: &mut Graph<T>,
    streams: &[AttnStream],
    xs: &[Var],
    cfg: &AttnSettings,
) -> (Vec<Var>, Vec<GraphTaps>) {
    let shape = g.shape(xs[0]).to_vec();
    let (l, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let s_len = h * w;
    let heads = cfg.heads;

    let mut toks = Vec::with_capacity(xs.len());
    let mut feats = Vec::with_capacity(xs.len());
    for (st, &x) in streams.iter().zip(xs) {
        let t = to_tokens(g, x);
        let a = self_attention(g, &st.scope.sub("self"), t, heads);
        let t = g.add(t, a);
        feats.push(t);
        toks.push(t);
    }

    // Cross-attention onto the foreground tokens, queries from all frames.
    let mut maps = Vec::with_capacity(xs.len());
    let mut values = Vec::with_capacity(xs.len());
    for (st, &t) in streams.iter().zip(&toks) {
        let s = st.scope.sub("xattn");
        let hn = layer_norm(g, &s, "norm", t);
        let hn = g.reshape(hn, &[1, l * s_len, c]);
        let q = linear(g, &s, "q", hn);
        let q = split_heads(g, q, heads);
        let k = linear(g, &s, "k", st.fg);
        let v = linear(g, &s, "v", st.fg);
        let kk = g.shape(k)[0];
        let k = g.reshape(k, &[1, kk, c]);
        let v = g.reshape(v, &[1, kk, c]);
        let k = split_heads(g, k, heads);
        values.push(split_heads(g, v, heads));
        maps.push(attn_weights(g, q, k));
    }
    if maps.len() == 2 {
        let (a, b) = share_xattn_var(g, maps[0], maps[1], cfg.share);
        maps = vec![a, b];
    }
    for i in 0..toks.len() {
        let s = streams[i].scope.sub("xattn");
        let o = g.matmul(maps[i], values[i], false, false);
        let o = merge_heads(g, o, heads);
        let o = linear(g, &s, "out", o);
        let o = g.reshape(o, &[l, s_len, c]);
        toks[i] = g.add(toks[i], o);
    }

    if cfg.temporal {
        let enc: Vec<f64> = (0..l).flat_map(|f| sinusoidal_embedding(f as f64, c)).collect();
        let enc = g.constant(Tensor::from_f64(&[l, c], &enc).expect("frame encoding size"));
        for (st, t) in streams.iter().zip(toks.iter_mut()) {
            let p = g.permute(*t, &[1, 0, 2]);
            let pe = g.add_suffix(p, enc);
            let a = self_attention(g, &st.scope.sub("temporal"), pe, heads);
            let a = g.permute(a, &[1, 0, 2]);
            *t = g.add(*t, a);
        }
    }

    if cfg.cross_modal {
        let scopes: Vec<Scope> = streams.iter().map(|st| st.scope.sub("cross_modal")).collect();
        let outs = if cfg.couple {
            joint_attention(g, &scopes, &toks, heads)
        } else {
            scopes
                .iter()
                .zip(&toks)
                .map(|(s, &t)| self_attention(g, s, t, heads))
                .collect()
        };
        for (t, o) in toks.iter_mut().zip(outs) {
            *t = g.add(*t, o);
        }
    }

    let outs = toks.into_iter().map(|t| from_tokens(g, t, h, w)).collect();
    let taps = feats
        .into_iter()
        .zip(maps)
        .map(|(feat, map)| GraphTaps { feat, map })
        .collect();
    (outs, taps)
}
