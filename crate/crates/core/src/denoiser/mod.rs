//! The shared video/depth denoiser: a small U-Net with temporal layers,
//! timestep + modality embedding, foreground cross-attention, background
//! latent injection, a zero-initialized pose adapter and cross-modal
//! attention that couples the two streams at the end of every block.
//!
//! One [`ParameterStore`] serves both modalities; the stream is selected by
//! a [`ModalityLabel`] whose learned embedding row is added to the timestep
//! embedding. The separate-network ablation instead duplicates the whole
//! inventory under `video.` / `depth.` prefixes.

mod net;
pub mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::XattnShareMode;
use crate::tensor::{Real, Tensor};

pub use net::{sinusoidal_embedding, GraphTaps};
pub use params::{CoverageReport, Init, ParamSpec, ParamVars, ParameterStore};

use net::{AttnSettings, AttnStream, ResBlock};
use params::{Decl, Scope};

/// Whether the two modalities share one network or use one each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    #[default]
    Shared,
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Default sequence length L.
    pub frames: usize,
    /// Spatial size H = W of a latent frame.
    pub latent_size: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub heads: usize,
    /// Embedding width E shared by the timestep embedding and the
    /// foreground tokens.
    pub cond_dim: usize,
    /// Number of foreground tokens K_f; must be a square.
    pub fg_tokens: usize,
    /// Pose keypoints K_p.
    pub keypoints: usize,
    /// Non-overlapping patch size folded into channels before the U-Net.
    pub patch_size: usize,
    pub temporal: bool,
    pub cross_modal: bool,
    pub modality_embedding: bool,
    pub pose_adapter: bool,
    pub sharing: Sharing,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            latent_size: 32,
            latent_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            heads: 4,
            cond_dim: 64,
            fg_tokens: 4,
            keypoints: 3,
            patch_size: 2,
            temporal: true,
            cross_modal: true,
            modality_embedding: true,
            pose_adapter: true,
            sharing: Sharing::Shared,
        }
    }
}

impl DenoiserConfig {
    /// The small configuration used for gradient checking (8x8, L=2).
    pub fn tiny() -> Self {
        Self {
            frames: 2,
            latent_size: 8,
            latent_channels: 3,
            base_channels: 8,
            channel_mults: vec![1, 2],
            heads: 2,
            cond_dim: 8,
            fg_tokens: 4,
            keypoints: 3,
            patch_size: 1,
            ..Self::default()
        }
    }

    /// The stage-1 variant: same inventory minus temporal and cross-modal
    /// layers.
    pub fn without_video_layers(&self) -> Self {
        Self {
            temporal: false,
            cross_modal: false,
            ..self.clone()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn num_up_blocks(&self) -> usize {
        self.levels()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Spatial size inside the U-Net after patchification.
    pub fn internal_size(&self) -> usize {
        self.latent_size / self.patch_size
    }

    /// Resolution level served by up block `n` (deepest first).
    pub fn up_block_level(&self, n: usize) -> usize {
        self.levels() - 1 - n
    }

    /// `(D_n, H_n, W_n)` of up block `n`.
    pub fn up_block_dims(&self, n: usize) -> (usize, usize, usize) {
        let level = self.up_block_level(n);
        let s = self.internal_size() >> level;
        (self.level_channels(level), s, s)
    }

    fn fg_grid(&self) -> usize {
        (self.fg_tokens as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let p = |name: &str, reason: String| Err(Error::param(name, reason));
        if self.frames == 0 {
            return p("frames", "must be >= 1".into());
        }
        if self.latent_channels == 0 || self.base_channels == 0 || self.heads == 0 || self.keypoints == 0 {
            return p("channels", "latent_channels, base_channels, heads and keypoints must be >= 1".into());
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return p("channel_mults", format!("must be non-empty and positive, got {:?}", self.channel_mults));
        }
        if self.patch_size == 0 || !self.latent_size.is_multiple_of(self.patch_size) {
            return p(
                "patch_size",
                format!("{} does not divide latent_size {}", self.patch_size, self.latent_size),
            );
        }
        let down = 1usize << (self.levels() - 1);
        if self.internal_size() == 0 || !self.internal_size().is_multiple_of(down) {
            return p(
                "latent_size",
                format!(
                    "{} / patch {} must be divisible by 2^(levels-1) = {down}",
                    self.latent_size, self.patch_size
                ),
            );
        }
        for level in 0..self.levels() {
            let c = self.level_channels(level);
            if !c.is_multiple_of(self.heads) {
                return p("heads", format!("{} does not divide {c} channels at level {level}", self.heads));
            }
        }
        if self.cond_dim < 2 || !self.cond_dim.is_multiple_of(2) {
            return p("cond_dim", format!("must be even and >= 2, got {}", self.cond_dim));
        }
        let grid = self.fg_grid();
        let half = self.latent_size / 2;
        if grid * grid != self.fg_tokens || grid == 0 || !self.latent_size.is_multiple_of(2) || !half.is_multiple_of(grid) {
            return p(
                "fg_tokens",
                format!(
                    "must be a square grid dividing latent_size/2 = {half}, got {}",
                    self.fg_tokens
                ),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityLabel {
    Video,
    Depth,
}

impl ModalityLabel {
    /// Row of the modality embedding table.
    pub fn index(self) -> usize {
        match self {
            Self::Video => 0,
            Self::Depth => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Video => "video",
            Self::Depth => "depth",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Self::Video => Self::Depth,
            Self::Depth => Self::Video,
        }
    }
}

impl fmt::Display for ModalityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(Self::Video),
            "depth" => Ok(Self::Depth),
            other => Err(Error::param("modality", format!("unknown modality `{other}`"))),
        }
    }
}

/// Conditioning shared by both streams.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle<T> {
    /// Foreground image `[C, H, W]`, encoded into K_f tokens.
    pub fg_image: Tensor<T>,
    /// Background latent `[C, H, W]`, added to every input frame.
    pub bg_latent: Tensor<T>,
    /// Pose heatmaps `[L, K_p, H, W]`; `None` bypasses the pose adapter.
    pub pose_heatmaps: Option<Tensor<T>>,
}

impl<T: Real> ConditionBundle<T> {
    /// Zero foreground/background and no pose.
    pub fn empty(cfg: &DenoiserConfig) -> Self {
        let img = [cfg.latent_channels, cfg.latent_size, cfg.latent_size];
        Self {
            fg_image: Tensor::zeros(&img),
            bg_latent: Tensor::zeros(&img),
            pose_heatmaps: None,
        }
    }

    pub fn cast<U: Real>(&self) -> ConditionBundle<U> {
        ConditionBundle {
            fg_image: self.fg_image.cast(),
            bg_latent: self.bg_latent.cast(),
            pose_heatmaps: self.pose_heatmaps.as_ref().map(|p| p.cast()),
        }
    }

    pub fn validate(&self, cfg: &DenoiserConfig, frames: usize) -> Result<()> {
        let img = [cfg.latent_channels, cfg.latent_size, cfg.latent_size];
        self.fg_image.expect_shape(&img, "fg_image")?;
        self.bg_latent.expect_shape(&img, "bg_latent")?;
        if let Some(p) = &self.pose_heatmaps {
            p.expect_shape(&[frames, cfg.keypoints, cfg.latent_size, cfg.latent_size], "pose_heatmaps")?;
        }
        Ok(())
    }
}

/// Up-block taps of one stream, deepest block first.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTaps<T> {
    /// `[L, D_n, H_n, W_n]`.
    pub self_attn_feat: Tensor<T>,
    /// `[L, heads, H_n*W_n, K_f]`, rows sum to one.
    pub xattn_map: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DenoiserTaps<T> {
    pub blocks: Vec<BlockTaps<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Export up-block taps from the tensor-level forward calls.
    pub capture_taps: bool,
    /// Joint cross-modal attention over both streams; when false each
    /// stream attends only to itself.
    pub couple_streams: bool,
    pub xattn_share: XattnShareMode,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            capture_taps: false,
            couple_streams: true,
            xattn_share: XattnShareMode::Independent,
        }
    }
}

/// Graph handles for the conditioning inputs.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub fg_image: Var,
    pub bg_latent: Var,
    pub pose: Option<Var>,
}

impl CondVars {
    pub fn constants<T: Real>(g: &mut Graph<T>, cond: &ConditionBundle<T>) -> Self {
        Self {
            fg_image: g.constant(cond.fg_image.clone()),
            bg_latent: g.constant(cond.bg_latent.clone()),
            pose: cond.pose_heatmaps.as_ref().map(|p| g.constant(p.clone())),
        }
    }
}

/// Graph outputs of one stream.
#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub eps: Var,
    /// One entry per up block, deepest first.
    pub taps: Vec<GraphTaps>,
}

/// Tensor outputs of [`Denoiser::joint_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct JointOutput<T> {
    pub eps_video: Tensor<T>,
    pub eps_depth: Tensor<T>,
    pub taps_video: Option<DenoiserTaps<T>>,
    pub taps_depth: Option<DenoiserTaps<T>>,
}

/// The denoiser architecture; parameters live in a separate store.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    cfg: DenoiserConfig,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Full parameter inventory, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        match self.cfg.sharing {
            Sharing::Shared => {
                self.declare_network(&mut Decl::root(&mut specs, ""));
                if self.cfg.modality_embedding {
                    specs.push(ParamSpec {
                        name: "modality_embed".into(),
                        shape: vec![2, self.cfg.cond_dim],
                        init: Init::Uniform(1.0),
                    });
                }
            }
            Sharing::Separate => {
                for label in [ModalityLabel::Video, ModalityLabel::Depth] {
                    self.declare_network(&mut Decl::root(&mut specs, label.name()));
                }
            }
        }
        specs
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParameterStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParameterStore::from_specs(&self.param_specs(), &mut rng)
    }

    fn declare_network(&self, d: &mut Decl) {
        let c = &self.cfg;
        let e = c.cond_dim;
        let pp = c.patch_size * c.patch_size;
        {
            let mut t = d.sub("time_embed");
            t.linear("lin1", e, e, true, false);
            t.linear("lin2", e, e, true, false);
        }
        {
            let mut f = d.sub("fg_encoder");
            f.conv("conv1", c.latent_channels, e / 2, (3, 3), false);
            f.conv("conv2", e / 2, e, (3, 3), false);
            f.norm("norm", e);
            f.linear("proj", e, e, true, false);
        }
        d.conv("conv_in", c.latent_channels * pp, c.level_channels(0), (3, 3), false);
        let mut ch = c.level_channels(0);
        for level in 0..c.levels() {
            let out = c.level_channels(level);
            let mut b = d.sub(&format!("down.{level}"));
            self.declare_res(&mut b.sub("res"), ch, out);
            self.declare_attn(&mut b.sub("attn"), out);
            if level + 1 < c.levels() {
                b.conv("downsample", out, out, (3, 3), false);
            }
            ch = out;
        }
        {
            let mut m = d.sub("mid");
            self.declare_res(&mut m.sub("res"), ch, ch);
            self.declare_attn(&mut m.sub("attn"), ch);
        }
        for n in 0..c.num_up_blocks() {
            let level = c.up_block_level(n);
            let out = c.level_channels(level);
            let mut b = d.sub(&format!("up.{n}"));
            self.declare_res(&mut b.sub("res"), ch + out, out);
            self.declare_attn(&mut b.sub("attn"), out);
            if level > 0 {
                b.conv("upsample", out, out, (3, 3), false);
            }
            ch = out;
        }
        {
            let mut o = d.sub("out");
            o.norm("norm", ch);
            o.conv("conv", ch, c.latent_channels * pp, (3, 3), false);
        }
        if c.pose_adapter {
            let mut p = d.sub("pose");
            let c0 = c.level_channels(0);
            p.conv("conv_in", c.keypoints * pp, c0, (3, 3), false);
            p.linear("emb_proj", e, c0, true, false);
            p.conv("conv_mid", c0, c0, (3, 3), false);
            for level in 1..c.levels() {
                p.conv(&format!("down.{level}"), c.level_channels(level - 1), c.level_channels(level), (3, 3), false);
            }
            for n in 0..c.num_up_blocks() {
                let ch = c.level_channels(c.up_block_level(n));
                p.conv(&format!("zero.{n}"), ch, ch, (1, 1), true);
            }
        }
    }

    fn declare_res(&self, d: &mut Decl, cin: usize, cout: usize) {
        d.norm("norm1", cin);
        d.conv("conv1", cin, cout, (3, 3), false);
        d.linear("emb_proj", self.cfg.cond_dim, cout, true, false);
        d.norm("norm2", cout);
        d.conv("conv2", cout, cout, (3, 3), false);
        if cin != cout {
            d.conv("skip", cin, cout, (1, 1), false);
        }
        if self.cfg.temporal {
            d.conv("temporal_conv", cout, cout, (3, 1), true);
        }
    }

    fn declare_attn(&self, d: &mut Decl, c: usize) {
        let attn = |d: &mut Decl, name: &str, kv_in: usize, zero_out: bool| {
            let mut a = d.sub(name);
            a.norm("norm", c);
            a.linear("q", c, c, false, false);
            a.linear("k", kv_in, c, false, false);
            a.linear("v", kv_in, c, false, false);
            a.linear("out", c, c, true, zero_out);
        };
        attn(d, "self", c, false);
        attn(d, "xattn", self.cfg.cond_dim, false);
        if self.cfg.temporal {
            attn(d, "temporal", c, true);
        }
        if self.cfg.cross_modal {
            attn(d, "cross_modal", c, true);
        }
    }

    fn scope<'a>(&self, vars: &'a ParamVars, label: ModalityLabel) -> Scope<'a> {
        match self.cfg.sharing {
            Sharing::Shared => Scope::root(vars, ""),
            Sharing::Separate => Scope::root(vars, label.name()),
        }
    }

    /// Time + modality embedding `[E]` on the tape.
    pub fn embed_graph<T: Real>(&self, g: &mut Graph<T>, vars: &ParamVars, t: usize, label: ModalityLabel) -> Var {
        let e = self.cfg.cond_dim;
        let s = self.scope(vars, label).sub("time_embed");
        let base = Tensor::from_f64(&[1, e], &sinusoidal_embedding(t as f64, e)).expect("embedding size");
        let x = g.constant(base);
        let h = net::linear(g, &s, "lin1", x);
        let h = g.silu(h);
        let h = net::linear(g, &s, "lin2", h);
        let mut h = g.reshape(h, &[e]);
        if let Some(table) = vars.get("modality_embed") {
            let row = g.select_row(table, label.index());
            h = g.add(h, row);
        }
        h
    }

    fn encode_fg_graph<T: Real>(&self, g: &mut Graph<T>, s: &Scope, fg_image: Var) -> Var {
        let c = &self.cfg;
        let s = s.sub("fg_encoder");
        let x = g.reshape(fg_image, &[1, c.latent_channels, c.latent_size, c.latent_size]);
        let h = net::conv(g, &s, "conv1", x, 1);
        let h = g.silu(h);
        let h = net::conv(g, &s, "conv2", h, 2);
        let h = g.silu(h);
        let h = g.avg_pool(h, c.latent_size / 2 / c.fg_grid());
        let h = g.reshape(h, &[1, c.cond_dim, c.fg_tokens]);
        let h = g.permute(h, &[0, 2, 1]);
        let h = g.reshape(h, &[c.fg_tokens, c.cond_dim]);
        let h = net::layer_norm(g, &s, "norm", h);
        net::linear(g, &s, "proj", h)
    }

    /// Pose residuals on the tape, one per up block (deepest first).
    fn pose_graph<T: Real>(&self, g: &mut Graph<T>, s: &Scope, pose: Var, emb_act: Var) -> Vec<Var> {
        let c = &self.cfg;
        let s = s.sub("pose");
        let x = net::patchify(g, pose, c.patch_size);
        let h = net::conv(g, &s, "conv_in", x, 1);
        let e = net::linear(g, &s, "emb_proj", emb_act);
        let e = g.reshape(e, &[c.level_channels(0)]);
        // Scale modulation h * (1 + e): an all-zero pose stays zero.
        let zeros = g.constant(Tensor::zeros(g.shape(h)));
        let e = g.add_channel(zeros, e);
        let he = g.mul(h, e);
        let h = g.add(h, he);
        let h = g.silu(h);
        let h = net::conv(g, &s, "conv_mid", h, 1);
        let mut feats = vec![g.silu(h)];
        for level in 1..c.levels() {
            let h = net::conv(g, &s, &format!("down.{level}"), feats[level - 1], 2);
            feats.push(g.silu(h));
        }
        (0..c.num_up_blocks())
            .map(|n| net::conv(g, &s, &format!("zero.{n}"), feats[c.up_block_level(n)], 1))
            .collect()
    }

    /// Runs one or two streams through the network in lockstep.
    ///
    /// Streams share `t` and the conditioning; with two streams and
    /// `couple_streams`, cross-modal attention mixes their tokens.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        streams: &[(Var, ModalityLabel)],
        t: usize,
        cond: &CondVars,
        opts: &ForwardOptions,
    ) -> Vec<StreamOutput> {
        let c = &self.cfg;
        assert!(!streams.is_empty() && streams.len() <= 2, "one or two streams");
        let scopes: Vec<Scope> = streams.iter().map(|&(_, y)| self.scope(vars, y)).collect();
        let mut emb_acts = Vec::new();
        let mut attn_streams = Vec::new();
        let mut pose_res = Vec::new();
        for (s, &(_, y)) in scopes.iter().zip(streams) {
            let emb = self.embed_graph(g, vars, t, y);
            let emb = g.reshape(emb, &[1, c.cond_dim]);
            let act = g.silu(emb);
            emb_acts.push(act);
            attn_streams.push(AttnStream {
                scope: s.clone(),
                fg: self.encode_fg_graph(g, s, cond.fg_image),
            });
            pose_res.push(match (cond.pose, c.pose_adapter) {
                (Some(p), true) => Some(self.pose_graph(g, s, p, act)),
                _ => None,
            });
        }
        let settings = AttnSettings {
            heads: c.heads,
            temporal: c.temporal,
            cross_modal: c.cross_modal,
            couple: opts.couple_streams,
            share: opts.xattn_share,
        };
        let sub_streams = |name: &str| -> Vec<AttnStream> {
            attn_streams
                .iter()
                .map(|st| AttnStream {
                    scope: st.scope.sub(name),
                    fg: st.fg,
                })
                .collect()
        };
        let res = |g: &mut Graph<T>, name: &str, hs: &mut [Var], out: usize| {
            for (i, h) in hs.iter_mut().enumerate() {
                let block = ResBlock {
                    scope: scopes[i].sub(name),
                    out_channels: out,
                    temporal: c.temporal,
                };
                *h = block.forward(g, *h, emb_acts[i]);
            }
        };

        let mut hs: Vec<Var> = streams
            .iter()
            .zip(&scopes)
            .map(|(&(z, _), s)| {
                let x = g.add_suffix(z, cond.bg_latent);
                let x = net::patchify(g, x, c.patch_size);
                net::conv(g, s, "conv_in", x, 1)
            })
            .collect();

        let mut skips: Vec<Vec<Var>> = Vec::new();
        for level in 0..c.levels() {
            let name = format!("down.{level}");
            res(g, &format!("{name}.res"), &mut hs, c.level_channels(level));
            hs = net::attn_block(g, &sub_streams(&format!("{name}.attn")), &hs, &settings).0;
            skips.push(hs.clone());
            if level + 1 < c.levels() {
                for (h, s) in hs.iter_mut().zip(&scopes) {
                    *h = net::conv(g, &s.sub(&name), "downsample", *h, 2);
                }
            }
        }
        let ch = c.level_channels(c.levels() - 1);
        res(g, "mid.res", &mut hs, ch);
        hs = net::attn_block(g, &sub_streams("mid.attn"), &hs, &settings).0;

        let mut taps: Vec<Vec<GraphTaps>> = vec![Vec::new(); streams.len()];
        for n in 0..c.num_up_blocks() {
            let level = c.up_block_level(n);
            let name = format!("up.{n}");
            for (i, h) in hs.iter_mut().enumerate() {
                let mut skip = skips[level][i];
                if let Some(r) = &pose_res[i] {
                    skip = g.add(skip, r[n]);
                }
                *h = g.concat(&[*h, skip], 1);
            }
            res(g, &format!("{name}.res"), &mut hs, c.level_channels(level));
            let (out, block_taps) = net::attn_block(g, &sub_streams(&format!("{name}.attn")), &hs, &settings);
            hs = out;
            for (dst, tp) in taps.iter_mut().zip(block_taps) {
                dst.push(tp);
            }
            if level > 0 {
                for (h, s) in hs.iter_mut().zip(&scopes) {
                    let u = g.upsample2x(*h);
                    *h = net::conv(g, &s.sub(&name), "upsample", u, 1);
                }
            }
        }

        hs.into_iter()
            .zip(&scopes)
            .zip(taps)
            .map(|((h, s), taps)| {
                let o = s.sub("out");
                let h = net::group_norm(g, &o, "norm", h);
                let h = g.silu(h);
                let h = net::conv(g, &o, "conv", h, 1);
                StreamOutput {
                    eps: net::unpatchify(g, h, c.patch_size),
                    taps,
                }
            })
            .collect()
    }

    fn check_latent<T: Real>(&self, z: &Tensor<T>, what: &str) -> Result<usize> {
        let c = &self.cfg;
        match *z.shape() {
            [l, ch, h, w] if l >= 1 && ch == c.latent_channels && h == c.latent_size && w == c.latent_size => Ok(l),
            _ => Err(Error::shape(
                what,
                &[c.frames, c.latent_channels, c.latent_size, c.latent_size],
                z.shape(),
            )),
        }
    }

    fn prepare<T: Real>(&self, params: &ParameterStore<T>) -> Result<()> {
        params.validate(&self.param_specs())
    }

    /// Time + modality embedding `[E]`.
    pub fn embed_timestep_modality<T: Real>(
        &self,
        t: usize,
        y: ModalityLabel,
        params: &ParameterStore<T>,
    ) -> Result<Tensor<T>> {
        self.prepare(params)?;
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, params, |_| false);
        let e = self.embed_graph(&mut g, &vars, t, y);
        Ok(g.value(e).clone())
    }

    /// Foreground tokens `[K_f, E]`.
    pub fn encode_foreground<T: Real>(
        &self,
        fg_image: &Tensor<T>,
        y: ModalityLabel,
        params: &ParameterStore<T>,
    ) -> Result<Tensor<T>> {
        self.prepare(params)?;
        let c = &self.cfg;
        fg_image.expect_shape(&[c.latent_channels, c.latent_size, c.latent_size], "fg_image")?;
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, params, |_| false);
        let x = g.constant(fg_image.clone());
        let s = self.scope(&vars, y);
        let tok = self.encode_fg_graph(&mut g, &s, x);
        Ok(g.value(tok).clone())
    }

    /// Pose residuals `[L, D_n, H_n, W_n]`, one per up block.
    pub fn pose_adapter_forward<T: Real>(
        &self,
        pose: &Tensor<T>,
        t: usize,
        y: ModalityLabel,
        params: &ParameterStore<T>,
    ) -> Result<Vec<Tensor<T>>> {
        self.prepare(params)?;
        let c = &self.cfg;
        if !c.pose_adapter {
            return Err(Error::Precondition("pose adapter disabled in this configuration".into()));
        }
        let l = pose.shape().first().copied().unwrap_or(0);
        pose.expect_shape(&[l.max(1), c.keypoints, c.latent_size, c.latent_size], "pose_heatmaps")?;
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, params, |_| false);
        let emb = self.embed_graph(&mut g, &vars, t, y);
        let emb = g.reshape(emb, &[1, c.cond_dim]);
        let act = g.silu(emb);
        let p = g.constant(pose.clone());
        let s = self.scope(&vars, y);
        let res = self.pose_graph(&mut g, &s, p, act);
        Ok(res.into_iter().map(|v| g.value(v).clone()).collect())
    }

    fn export_taps<T: Real>(&self, g: &Graph<T>, taps: &[GraphTaps], frames: usize) -> Result<DenoiserTaps<T>> {
        let mut blocks = Vec::with_capacity(taps.len());
        for (n, tp) in taps.iter().enumerate() {
            let (d, h, w) = self.cfg.up_block_dims(n);
            let feat = g.value(tp.feat).clone();
            let feat = permute_tensor(&feat, &[frames, h * w, d], &[0, 2, 1])?.reshape(&[frames, d, h, w])?;
            let map = g.value(tp.map);
            let k = map.shape()[2];
            let heads = self.cfg.heads;
            let map = permute_tensor(map, &[heads, frames, h * w, k], &[1, 0, 2, 3])?;
            blocks.push(BlockTaps {
                self_attn_feat: feat,
                xattn_map: map,
            });
        }
        Ok(DenoiserTaps { blocks })
    }

    /// One modality stream; cross-modal attention sees only this stream.
    pub fn single_forward<T: Real>(
        &self,
        z: &Tensor<T>,
        t: usize,
        y: ModalityLabel,
        cond: &ConditionBundle<T>,
        params: &ParameterStore<T>,
        opts: &ForwardOptions,
    ) -> Result<(Tensor<T>, Option<DenoiserTaps<T>>)> {
        let l = self.check_latent(z, "single_forward z")?;
        cond.validate(&self.cfg, l)?;
        self.prepare(params)?;
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, params, |_| false);
        let cv = CondVars::constants(&mut g, cond);
        let zv = g.constant(z.clone());
        let out = self.forward_graph(&mut g, &vars, &[(zv, y)], t, &cv, opts);
        let eps = g.value(out[0].eps).clone();
        let taps = if opts.capture_taps {
            Some(self.export_taps(&g, &out[0].taps, l)?)
        } else {
            None
        };
        Ok((eps, taps))
    }

    /// Both streams with `y = Video` and `y = Depth`, coupled at every
    /// cross-modal attention layer.
    pub fn joint_forward<T: Real>(
        &self,
        z_v: &Tensor<T>,
        z_d: &Tensor<T>,
        t: usize,
        cond: &ConditionBundle<T>,
        params: &ParameterStore<T>,
        opts: &ForwardOptions,
    ) -> Result<JointOutput<T>> {
        let l = self.check_latent(z_v, "joint_forward z_v")?;
        z_d.expect_shape(z_v.shape(), "joint_forward z_d")?;
        cond.validate(&self.cfg, l)?;
        self.prepare(params)?;
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, params, |_| false);
        let cv = CondVars::constants(&mut g, cond);
        let a = g.constant(z_v.clone());
        let b = g.constant(z_d.clone());
        let out = self.forward_graph(
            &mut g,
            &vars,
            &[(a, ModalityLabel::Video), (b, ModalityLabel::Depth)],
            t,
            &cv,
            opts,
        );
        let (taps_video, taps_depth) = if opts.capture_taps {
            (
                Some(self.export_taps(&g, &out[0].taps, l)?),
                Some(self.export_taps(&g, &out[1].taps, l)?),
            )
        } else {
            (None, None)
        };
        Ok(JointOutput {
            eps_video: g.value(out[0].eps).clone(),
            eps_depth: g.value(out[1].eps).clone(),
            taps_video,
            taps_depth,
        })
    }
}

/// Broadcast-adds a `[C, H, W]` background latent to every frame.
pub fn add_background_latent<T: Real>(z: &Tensor<T>, bg: &Tensor<T>) -> Result<Tensor<T>> {
    if z.ndim() != 4 || bg.shape() != &z.shape()[1..] {
        return Err(Error::shape("add_background_latent", &z.shape()[1.min(z.ndim())..], bg.shape()));
    }
    let mut out = z.clone();
    let per = bg.len();
    for frame in out.data_mut().chunks_mut(per) {
        for (o, &b) in frame.iter_mut().zip(bg.data()) {
            *o += b;
        }
    }
    Ok(out)
}

fn permute_tensor<T: Real>(x: &Tensor<T>, shape: &[usize], perm: &[usize]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone().reshape(shape)?);
    let p = g.permute(v, perm);
    Ok(g.value(p).clone())
}

/// Joint self-attention over the concatenated token sets of one frame, with
/// residual, using the attention weights stored under `prefix`
/// (`{prefix}.q/k/v/out`, optional `{prefix}.norm`). With one token set this
/// is plain self-attention.
pub fn cross_modal_attention<T: Real>(
    tokens: &[&Tensor<T>],
    params: &ParameterStore<T>,
    prefix: &str,
    heads: usize,
) -> Result<Vec<Tensor<T>>> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::Precondition("cross_modal_attention needs at least one token set".into()))?;
    let (s, d) = match *first.shape() {
        [s, d] => (s, d),
        _ => return Err(Error::shape("cross_modal_attention tokens", &[0, 0], first.shape())),
    };
    for t in tokens {
        t.expect_shape(&[s, d], "cross_modal_attention tokens")?;
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::param("heads", format!("{heads} does not divide {d}")));
    }
    for name in ["q.weight", "k.weight", "v.weight", "out.weight"] {
        let full = params::join(prefix, name);
        params
            .get(&full)
            .ok_or_else(|| Error::MissingParam(full.clone()))?
            .expect_shape(&[d, d], &full)?;
    }
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, params, |_| false);
    let scope = Scope::root(&vars, prefix);
    let xs: Vec<Var> = tokens
        .iter()
        .map(|t| g.constant((*t).clone().reshape(&[1, s, d]).expect("token size")))
        .collect();
    let scopes = vec![scope; xs.len()];
    let outs = net::joint_attention(&mut g, &scopes, &xs, heads);
    let mut result = Vec::with_capacity(xs.len());
    for (x, o) in xs.into_iter().zip(outs) {
        let r = g.add(x, o);
        result.push(g.value(r).clone().reshape(&[s, d])?);
    }
    Ok(result)
}

#[cfg(test)]
mod tests;
