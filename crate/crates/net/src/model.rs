use lanpose_core::geometry::{rot6d_to_matrix, site_decode, BBox2D, CameraIntrinsics, Pose, SiteTranslation};
use lanpose_core::instruction::{Grammar, MAX_TOKENS};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::data::{MapBatch, TokenBatch, N_CLASSES, N_ROI_FEATURES};
use crate::graph::{Graph, Var};
use crate::params::{seeded, Init, ParamSet};
use crate::NetError;

/// How the language branch fuses text with map patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Cross-attention fusion predicting the assembly pose.
    CrossAttention,
    /// Pooled text concatenated onto every patch, then a linear mix.
    Concat,
    /// Cross-attention fusion predicting the pose relative to the base, composed afterwards.
    Relative,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] = [FusionVariant::CrossAttention, FusionVariant::Concat, FusionVariant::Relative];

    pub fn label(self) -> &'static str {
        match self {
            FusionVariant::CrossAttention => "cross_attention",
            FusionVariant::Concat => "concat",
            FusionVariant::Relative => "relative",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub map_size: usize,
    pub refine_channels: usize,
    pub head_channels: [usize; 3],
    pub fc_width: usize,
    pub d_model: usize,
    pub n_patches: usize,
    pub variant: FusionVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            map_size: 32,
            refine_channels: 8,
            head_channels: [16, 32, 64],
            fc_width: 256,
            d_model: 64,
            n_patches: 64,
            variant: FusionVariant::CrossAttention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |f: &str| Err(NetError::InvalidConfig(f.to_string()));
        if self.map_size < 8 || self.map_size % 8 != 0 {
            return bad("map_size");
        }
        if self.refine_channels == 0 || self.refine_channels % GROUPS != 0 {
            return bad("refine_channels");
        }
        if self.head_channels.iter().any(|&c| c == 0 || c % GROUPS != 0) {
            return bad("head_channels");
        }
        if self.fc_width == 0 {
            return bad("fc_width");
        }
        if self.d_model == 0 || self.d_model % GROUPS != 0 {
            return bad("d_model");
        }
        let side = (self.n_patches as f64).sqrt() as usize;
        if side * side != self.n_patches || side == 0 || self.map_size % side != 0 || side < 8 {
            return bad("n_patches");
        }
        Ok(())
    }

    pub fn patch_size(&self) -> usize {
        self.map_size / self.grid_side()
    }

    pub fn grid_side(&self) -> usize {
        (self.n_patches as f64).sqrt() as usize
    }

    /// Conv strides of the language head. Downsampling stops once the patch
    /// grid reaches the direct head's output side, so both heads flatten the
    /// same number of features.
    pub fn lang_head_strides(&self) -> [usize; 3] {
        let target = (self.map_size / 8).max(1);
        let mut side = self.grid_side();
        let mut strides = [1; 3];
        for i in (0..3).rev() {
            if side <= target {
                break;
            }
            side = side.div_ceil(2);
            strides[i] = 2;
        }
        strides.sort_unstable();
        strides
    }

    fn lang_head_side(&self) -> usize {
        self.lang_head_strides().iter().fold(self.grid_side(), |s, &k| s.div_ceil(k))
    }
}

pub const GROUPS: usize = 4;
/// Channels fed to both pose heads: masked coords (3), visibility (1), ROI grid (2).
pub const FEATURE_CHANNELS: usize = 6;
const R6D_OFFSET: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
const SITE_SCALE: [f64; 3] = [1.0, 1.0, 50.0];
const SITE_OFFSET: [f64; 3] = [0.0, 0.0, 100.0];
const REL_SCALE: [f64; 3] = [50.0, 50.0, 50.0];
/// Initial mask logit magnitude; refinement starts close to the input mask.
const MASK_PRIOR: f64 = 4.0;

/// Raw head outputs: 6D rotation and SITE (or base-frame translation in mm for the relative head).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseHeadOutput {
    pub r6d: [f64; 6],
    pub site: SiteTranslation,
}

impl PoseHeadOutput {
    pub fn is_finite(&self) -> bool {
        self.r6d.iter().chain(&self.site.to_array()).all(|v| v.is_finite())
    }

    /// Camera-frame pose from a SITE head output and the box it is relative to.
    pub fn decode(&self, k: &CameraIntrinsics, bbox: &BBox2D) -> Result<Pose, NetError> {
        let a1 = Vector3::new(self.r6d[0], self.r6d[1], self.r6d[2]);
        let a2 = Vector3::new(self.r6d[3], self.r6d[4], self.r6d[5]);
        let rot = rot6d_to_matrix(&a1, &a2)?;
        Ok(Pose::new(rot, site_decode(&self.site, bbox, k)))
    }

    /// Relative-head output as a base-frame transform.
    pub fn decode_relative(&self) -> Result<Pose, NetError> {
        let a1 = Vector3::new(self.r6d[0], self.r6d[1], self.r6d[2]);
        let a2 = Vector3::new(self.r6d[3], self.r6d[4], self.r6d[5]);
        let rot = rot6d_to_matrix(&a1, &a2)?;
        let s = self.site;
        Ok(Pose::new(rot, Vector3::new(s.dx, s.dy, s.dz)))
    }
}

/// Graph handles for a head's two outputs, `[B, 6]` and `[B, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    pub r6d: Var,
    pub site: Var,
}

impl PoseVars {
    pub fn read(&self, g: &Graph) -> Vec<PoseHeadOutput> {
        g.value(self.r6d)
            .chunks(6)
            .zip(g.value(self.site).chunks(3))
            .map(|(r, s)| PoseHeadOutput {
                r6d: r.try_into().expect("6 values"),
                site: SiteTranslation::from_array([s[0], s[1], s[2]]),
            })
            .collect()
    }
}

pub struct DirectOut {
    /// Refined normalized coordinates `[B, 3, S, S]`.
    pub coords: Var,
    /// Refined visibility logits `[B, S·S]`.
    pub mask_logits: Var,
    /// Pose-head input features `[B, 6, S, S]`.
    pub features: Var,
    pub pose: PoseVars,
}

/// Parameters bound into one graph, looked up by name.
pub struct Bound<'a> {
    params: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn new(params: &'a ParamSet, g: &mut Graph, train: bool) -> Result<Self, NetError> {
        Ok(Self { params, vars: params.bind(g, train)? })
    }

    /// Wraps vars already bound in `params` order.
    pub fn from_vars(params: &'a ParamSet, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.len());
        Self { params, vars }
    }

    pub fn p(&self, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[id]
    }

    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub vocab_size: usize,
}

fn add_conv(ps: &mut ParamSet, rng: &mut rand_chacha::ChaCha8Rng, name: &str, cin: usize, cout: usize, norm: bool) {
    ps.add(&format!("{name}.w"), &[cout, cin, 3, 3], Init::FanIn(cin * 9), rng);
    ps.add(&format!("{name}.b"), &[cout], Init::FanIn(cin * 9), rng);
    if norm {
        ps.add(&format!("{name}.gn.g"), &[cout], Init::Const(1.0), rng);
        ps.add(&format!("{name}.gn.b"), &[cout], Init::Const(0.0), rng);
    }
}

fn add_linear(ps: &mut ParamSet, rng: &mut rand_chacha::ChaCha8Rng, name: &str, din: usize, dout: usize, bias: bool) {
    ps.add(&format!("{name}.w"), &[dout, din], Init::FanIn(din), rng);
    if bias {
        ps.add(&format!("{name}.b"), &[dout], Init::FanIn(din), rng);
    }
}

fn shrink(ps: &mut ParamSet, name: &str, factor: f64) {
    let id = ps.id(name).expect("registered");
    for v in ps.data_mut(id).iter_mut() {
        *v = crate::params::quantize(*v * factor);
    }
}

impl Network {
    /// Fresh network with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let vocab_size = Grammar::builtin().vocab.len();
        let mut rng = seeded(seed);
        let mut ps = ParamSet::new();
        let rc = cfg.refine_channels;
        add_conv(&mut ps, &mut rng, "direct.refine.c1", 4 + 2, rc, true);
        add_conv(&mut ps, &mut rng, "direct.refine.c2", rc, rc, true);
        add_conv(&mut ps, &mut rng, "direct.refine.out", rc, 4, false);
        shrink(&mut ps, "direct.refine.out.w", 0.1);
        shrink(&mut ps, "direct.refine.out.b", 0.1);
        let flat = cfg.head_channels[2] * (cfg.map_size / 8).pow(2);
        Self::add_head(&mut ps, &mut rng, "direct.head", &cfg, FEATURE_CHANNELS, flat + N_CLASSES + N_ROI_FEATURES);

        let d = cfg.d_model;
        let patch_dim = FEATURE_CHANNELS * cfg.patch_size().pow(2);
        add_linear(&mut ps, &mut rng, "lang.patch", patch_dim, d, true);
        ps.add("lang.text.emb", &[vocab_size, d], Init::Normal(0.02), &mut rng);
        ps.add("lang.text.pos", &[MAX_TOKENS, d], Init::Normal(0.02), &mut rng);
        match cfg.variant {
            FusionVariant::CrossAttention | FusionVariant::Relative => {
                for m in ["q", "k", "v"] {
                    add_linear(&mut ps, &mut rng, &format!("lang.attn.{m}"), d, d, false);
                }
            }
            FusionVariant::Concat => add_linear(&mut ps, &mut rng, "lang.mix", 2 * d, d, true),
        }
        let flat = cfg.head_channels[2] * cfg.lang_head_side().pow(2);
        Self::add_head(&mut ps, &mut rng, "lang.head", &cfg, d, flat + N_ROI_FEATURES);
        Ok(Self { cfg, params: ps, vocab_size })
    }

    fn add_head(
        ps: &mut ParamSet,
        rng: &mut rand_chacha::ChaCha8Rng,
        prefix: &str,
        cfg: &ModelConfig,
        cin: usize,
        flat: usize,
    ) {
        let [c1, c2, c3] = cfg.head_channels;
        add_conv(ps, rng, &format!("{prefix}.c1"), cin, c1, true);
        add_conv(ps, rng, &format!("{prefix}.c2"), c1, c2, true);
        add_conv(ps, rng, &format!("{prefix}.c3"), c2, c3, true);
        add_linear(ps, rng, &format!("{prefix}.fc1"), flat, cfg.fc_width, true);
        add_linear(ps, rng, &format!("{prefix}.fc2"), cfg.fc_width, cfg.fc_width, true);
        add_linear(ps, rng, &format!("{prefix}.rot"), cfg.fc_width, 6, true);
        add_linear(ps, rng, &format!("{prefix}.trans"), cfg.fc_width, 3, true);
        for n in ["rot.w", "rot.b", "trans.w", "trans.b"] {
            shrink(ps, &format!("{prefix}.{n}"), 0.1);
        }
    }

    fn conv_block(g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize) -> Result<Var, NetError> {
        let y = g.conv2d(x, b.p(&format!("{name}.w")), b.p(&format!("{name}.b")), stride, 1)?;
        let y = g.group_norm(y, b.p(&format!("{name}.gn.g")), b.p(&format!("{name}.gn.b")), GROUPS)?;
        Ok(g.gelu(y))
    }

    /// Three stride-2 conv blocks, flatten, append `extras`, two FC layers, two parallel heads.
    fn pose_head(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &str,
        x: Var,
        extras: Var,
        strides: [usize; 3],
        relative: bool,
    ) -> Result<PoseVars, NetError> {
        let mut h = x;
        for (c, stride) in ["c1", "c2", "c3"].into_iter().zip(strides) {
            h = Self::conv_block(g, b, &format!("{prefix}.{c}"), h, stride)?;
        }
        let batch = g.shape(h)[0];
        let flat = g.value(h).len() / batch;
        let h = g.reshape(h, &[batch, flat])?;
        let h = g.concat(&[h, extras], 1)?;
        let h = g.linear(h, b.p(&format!("{prefix}.fc1.w")), Some(b.p(&format!("{prefix}.fc1.b"))))?;
        let h = g.gelu(h);
        let h = g.linear(h, b.p(&format!("{prefix}.fc2.w")), Some(b.p(&format!("{prefix}.fc2.b"))))?;
        let h = g.gelu(h);
        let r = g.linear(h, b.p(&format!("{prefix}.rot.w")), Some(b.p(&format!("{prefix}.rot.b"))))?;
        let r6d = g.affine(r, &[1.0; 6], &R6D_OFFSET)?;
        let t = g.linear(h, b.p(&format!("{prefix}.trans.w")), Some(b.p(&format!("{prefix}.trans.b"))))?;
        let site = if relative {
            g.affine(t, &REL_SCALE, &[0.0; 3])?
        } else {
            g.affine(t, &SITE_SCALE, &SITE_OFFSET)?
        };
        Ok(PoseVars { r6d, site })
    }

    /// Refines noisy maps and regresses the object pose.
    pub fn direct_branch(&self, g: &mut Graph, b: &Bound, batch: &MapBatch) -> Result<DirectOut, NetError> {
        let s = self.cfg.map_size;
        if batch.size != s {
            return Err(NetError::ShapeMismatch(format!("direct_branch: maps {} vs config {s}", batch.size)));
        }
        let n = batch.len();
        let plane = s * s;
        let maps = g.input(&[n, 4, s, s], batch.maps.clone())?;
        let grid = g.input(&[n, 2, s, s], batch.grid())?;
        let x = g.concat(&[maps, grid], 1)?;
        let h = Self::conv_block(g, b, "direct.refine.c1", x, 1)?;
        let h = Self::conv_block(g, b, "direct.refine.c2", h, 1)?;
        let delta = g.conv2d(h, b.p("direct.refine.out.w"), b.p("direct.refine.out.b"), 1, 1)?;
        // residual around the input coords and a confident prior on the input mask
        let mut prior = batch.maps.clone();
        for bi in 0..n {
            for v in &mut prior[(bi * 4 + 3) * plane..(bi * 4 + 4) * plane] {
                *v = MASK_PRIOR * (2.0 * *v - 1.0);
            }
        }
        let prior = g.input(&[n, 4, s, s], prior)?;
        let out = g.add(prior, delta)?;
        let coord_idx: Vec<usize> = (0..n).flat_map(|bi| (0..3 * plane).map(move |j| bi * 4 * plane + j)).collect();
        let coords = g.gather(out, coord_idx, &[n, 3, s, s])?;
        let mask_idx: Vec<usize> = (0..n).flat_map(|bi| (0..plane).map(move |j| (bi * 4 + 3) * plane + j)).collect();
        let mask_logits = g.gather(out, mask_idx, &[n, plane])?;

        let vis = g.sigmoid(mask_logits);
        let vis3_idx: Vec<usize> = (0..n).flat_map(|bi| (0..3 * plane).map(move |j| bi * plane + j % plane)).collect();
        let vis3 = g.gather(vis, vis3_idx, &[n, 3, s, s])?;
        let masked = g.mul(coords, vis3)?;
        let vis = g.reshape(vis, &[n, 1, s, s])?;
        let features = g.concat(&[masked, vis, grid], 1)?;

        let extras = g.input(&[n, N_CLASSES + N_ROI_FEATURES], batch.direct_extras())?;
        let pose = self.pose_head(g, b, "direct.head", features, extras, [2; 3], false)?;
        Ok(DirectOut { coords, mask_logits, features, pose })
    }

    /// Token embedding plus positional embedding, `[B, L, d]`.
    pub fn text_encode(&self, g: &mut Graph, b: &Bound, tokens: &TokenBatch) -> Result<Var, NetError> {
        let n = tokens.len();
        let emb = g.embedding(b.p("lang.text.emb"), &tokens.ids, &[n, MAX_TOKENS])?;
        g.add_broadcast(emb, b.p("lang.text.pos"))
    }

    /// Single-head residual cross-attention from patches to text, padding keys masked.
    /// Returns the fused patches and the attention weights `[B, N_p, L]`.
    pub fn cross_attention(
        &self,
        g: &mut Graph,
        b: &Bound,
        q_src: Var,
        kv_src: Var,
        key_mask: &[bool],
    ) -> Result<(Var, Var), NetError> {
        let d = *g.shape(q_src).last().expect("rank 3");
        let q = g.linear(q_src, b.p("lang.attn.q.w"), None)?;
        let k = g.linear(kv_src, b.p("lang.attn.k.w"), None)?;
        let v = g.linear(kv_src, b.p("lang.attn.v.w"), None)?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores, Some(key_mask))?;
        let ctx = g.bmm(attn, v, false, false)?;
        Ok((g.add(q_src, ctx)?, attn))
    }

    /// Patchifies the direct-branch features, fuses them with the text and regresses the assembly
    /// pose (or the base-relative pose for [`FusionVariant::Relative`]).
    pub fn language_branch(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: Var,
        text: Var,
        tokens: &TokenBatch,
        batch: &MapBatch,
    ) -> Result<PoseVars, NetError> {
        let n = batch.len();
        let s = self.cfg.map_size;
        let p = self.cfg.patch_size();
        let side = self.cfg.grid_side();
        let d = self.cfg.d_model;
        let c = FEATURE_CHANNELS;
        if g.shape(features) != [n, c, s, s] {
            return Err(NetError::ShapeMismatch(format!("language_branch: features {:?}", g.shape(features))));
        }
        let patch_dim = c * p * p;
        let mut idx = Vec::with_capacity(n * side * side * patch_dim);
        for bi in 0..n {
            for py in 0..side {
                for px in 0..side {
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                idx.push(((bi * c + ch) * s + py * p + dy) * s + px * p + dx);
                            }
                        }
                    }
                }
            }
        }
        let patches = g.gather(features, idx, &[n, side * side, patch_dim])?;
        let patches = g.linear(patches, b.p("lang.patch.w"), Some(b.p("lang.patch.b")))?;
        let fused = match self.cfg.variant {
            FusionVariant::CrossAttention | FusionVariant::Relative => {
                self.cross_attention(g, b, patches, text, &tokens.mask)?.0
            }
            FusionVariant::Concat => {
                let pooled = g.masked_mean(text, &tokens.mask_f64())?;
                let np = side * side;
                let bidx: Vec<usize> = (0..n).flat_map(|bi| (0..np * d).map(move |j| bi * d + j % d)).collect();
                let pooled = g.gather(pooled, bidx, &[n, np, d])?;
                let cat = g.concat(&[patches, pooled], 2)?;
                let mixed = g.linear(cat, b.p("lang.mix.w"), Some(b.p("lang.mix.b")))?;
                g.add(patches, mixed)?
            }
        };
        let np = side * side;
        let tidx: Vec<usize> = (0..n)
            .flat_map(|bi| (0..d).flat_map(move |ch| (0..np).map(move |pi| (bi * np + pi) * d + ch)))
            .collect();
        let grid = g.gather(fused, tidx, &[n, d, side, side])?;
        let extras = g.input(&[n, N_ROI_FEATURES], batch.roi_features.clone())?;
        let strides = self.cfg.lang_head_strides();
        self.pose_head(g, b, "lang.head", grid, extras, strides, self.cfg.variant == FusionVariant::Relative)
    }
}
