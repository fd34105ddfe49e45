//! Shared feature extractor with tracking, depth and pose heads.
//!
//! Patch embedding is four stride-2 3x3 convolutions. The encoder runs
//! three transformer stages over the concatenated search and template
//! tokens, pooling both grids by two between stages. The decoder upsamples
//! the search branch back to full patch-embed resolution with skips from
//! the encoder stages and the patch embedding, giving four feature scales.

use std::cell::Cell;
use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bbox::BoxXywh;
use crate::error::{invalid, shape_err, Result};
use crate::geometry::{Pose6DoF, MAX_DEPTH, MIN_DEPTH};
use crate::preprocess::Sample;
use crate::tensor::{Role, Tensor};
use crate::trainer::Strategy;

pub const DISP_OFFSET: f64 = 1.0 / MAX_DEPTH;
pub const DISP_SCALE: f64 = 1.0 / MIN_DEPTH - 1.0 / MAX_DEPTH;
pub const POSE_SCALE: f64 = 0.01;
const PIXEL_MEAN: f64 = 0.45;
const PIXEL_STD: f64 = 0.225;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub input_side: usize,
    pub template_side: usize,
    pub patch_stride_total: usize,
    /// Widths of the four patch-embedding convolutions.
    pub stage_channels: Vec<usize>,
    /// Token widths of the three encoder stages.
    pub encoder_dims: Vec<usize>,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Widths of the four decoder scales, coarse to fine.
    pub decoder_channels: Vec<usize>,
    pub depth_head_channels: usize,
    pub corner_channels: usize,
    pub pose_channels: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_side: 256,
            template_side: 128,
            patch_stride_total: 16,
            stage_channels: vec![8, 16, 24, 32],
            encoder_dims: vec![32, 40, 48],
            heads: 2,
            mlp_ratio: 2,
            decoder_channels: vec![24, 16, 12, 8],
            depth_head_channels: 8,
            corner_channels: 16,
            pose_channels: vec![16, 32, 32, 64, 64],
        }
    }
}

impl ArchConfig {
    /// Reduced input size used for the CPU training runs.
    pub fn desk() -> Self {
        ArchConfig {
            input_side: 128,
            template_side: 64,
            ..Default::default()
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ArchConfig {
            input_side: 64,
            template_side: 32,
            patch_stride_total: 16,
            stage_channels: vec![3, 4, 4, 4],
            encoder_dims: vec![4, 4, 8],
            heads: 2,
            mlp_ratio: 1,
            decoder_channels: vec![4, 3, 3, 2],
            depth_head_channels: 2,
            corner_channels: 3,
            pose_channels: vec![2, 2, 3, 3, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(crate::Error::Config(m));
        if self.patch_stride_total != 16 {
            return bad(format!(
                "patch_stride_total must be 16 (four stride-2 layers), got {}",
                self.patch_stride_total
            ));
        }
        if self.stage_channels.len() != 4 {
            return bad("stage_channels needs 4 entries".into());
        }
        if self.encoder_dims.len() != 3 {
            return bad("encoder_dims needs 3 entries".into());
        }
        if self.decoder_channels.len() != 4 {
            return bad("decoder_channels needs 4 entries".into());
        }
        if self.pose_channels.len() != 5 {
            return bad("pose_channels needs 5 entries".into());
        }
        let widths = self
            .stage_channels
            .iter()
            .chain(&self.encoder_dims)
            .chain(&self.decoder_channels)
            .chain(&self.pose_channels)
            .chain([&self.depth_head_channels, &self.corner_channels, &self.heads, &self.mlp_ratio]);
        if widths.into_iter().any(|&w| w == 0) {
            return bad("all widths must be positive".into());
        }
        for &e in &self.encoder_dims {
            if e % self.heads != 0 || e % 4 != 0 {
                return bad(format!(
                    "encoder width {e} must be divisible by 4 and by the head count"
                ));
            }
        }
        if self.input_side == 0 || self.input_side % 64 != 0 {
            return bad(format!(
                "input_side {} must be a positive multiple of 64",
                self.input_side
            ));
        }
        if self.template_side == 0 || self.template_side % 16 != 0 {
            return bad(format!(
                "template_side {} must be a positive multiple of 16",
                self.template_side
            ));
        }
        Ok(())
    }

    pub fn search_grid(&self) -> usize {
        self.input_side / 16
    }

    pub fn template_grid(&self) -> usize {
        self.template_side / 16
    }

    /// Side lengths of the four decoder scales, coarse to fine.
    pub fn feature_sides(&self) -> [usize; 4] {
        let g = self.search_grid();
        [g, 2 * g, 4 * g, 8 * g]
    }

    /// Side lengths of the four disparity maps, coarse to fine.
    pub fn depth_sides(&self) -> [usize; 4] {
        let g = self.search_grid();
        [2 * g, 4 * g, 8 * g, 16 * g]
    }
}

// --------------------------------------------------------------------
// parameters

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PatchEmbed,
    Encoder,
    Decoder,
    TrackingHead,
    DepthHead,
    PoseNet,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::PatchEmbed,
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::TrackingHead,
        ParamGroup::DepthHead,
        ParamGroup::PoseNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::PatchEmbed => "patch_embed",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::TrackingHead => "tracking_head",
            ParamGroup::DepthHead => "depth_head",
            ParamGroup::PoseNet => "pose_net",
        }
    }

    pub fn parse(s: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.name() == s)
    }

    /// Groups used by the tracking path alone.
    pub fn is_tracking(self) -> bool {
        !matches!(self, ParamGroup::DepthHead | ParamGroup::PoseNet)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

struct Spec {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(a: &ArchConfig) -> Vec<Spec> {
    let mut out = Vec::new();
    let mut push = |name: String, group, shape: Vec<usize>, init| {
        out.push(Spec {
            name,
            group,
            shape,
            init,
        })
    };
    let conv = |push: &mut dyn FnMut(String, ParamGroup, Vec<usize>, Init), name: &str, group, ci: usize, co: usize, k: usize| {
        let fan_in = (ci * k * k) as f64;
        push(format!("{name}.w"), group, vec![co, ci, k, k], Init::Uniform((3.0 / fan_in).sqrt()));
        push(format!("{name}.b"), group, vec![co], Init::Zeros);
    };
    let lin = |push: &mut dyn FnMut(String, ParamGroup, Vec<usize>, Init), name: &str, group, ci: usize, co: usize| {
        push(format!("{name}.w"), group, vec![ci, co], Init::Uniform((3.0 / ci as f64).sqrt()));
        push(format!("{name}.b"), group, vec![co], Init::Zeros);
    };

    use ParamGroup::*;
    let mut ci = 3;
    for (i, &co) in a.stage_channels.iter().enumerate() {
        conv(&mut push, &format!("pe.{i}"), PatchEmbed, ci, co, 3);
        ci = co;
    }

    let mut din = a.stage_channels[3];
    for (s, &e) in a.encoder_dims.iter().enumerate() {
        let p = format!("enc.{s}");
        lin(&mut push, &format!("{p}.proj"), Encoder, din, e);
        push(format!("{p}.type"), Encoder, vec![2, e], Init::Uniform(0.02));
        push(format!("{p}.ln1.g"), Encoder, vec![e], Init::Ones);
        push(format!("{p}.ln1.b"), Encoder, vec![e], Init::Zeros);
        lin(&mut push, &format!("{p}.qkv"), Encoder, e, 3 * e);
        lin(&mut push, &format!("{p}.out"), Encoder, e, e);
        push(format!("{p}.ln2.g"), Encoder, vec![e], Init::Ones);
        push(format!("{p}.ln2.b"), Encoder, vec![e], Init::Zeros);
        lin(&mut push, &format!("{p}.mlp1"), Encoder, e, a.mlp_ratio * e);
        lin(&mut push, &format!("{p}.mlp2"), Encoder, a.mlp_ratio * e, e);
        din = e;
    }

    let dc = &a.decoder_channels;
    let ed = &a.encoder_dims;
    conv(&mut push, "dec.lat3", Decoder, ed[2], dc[0], 1);
    conv(&mut push, "dec.lat2", Decoder, ed[1], dc[0], 1);
    conv(&mut push, "dec.lat1", Decoder, ed[0], dc[0], 1);
    conv(&mut push, "dec.fuse2", Decoder, dc[0], dc[0], 3);
    conv(&mut push, "dec.fuse1", Decoder, dc[0], dc[0], 3);
    for i in 1..4 {
        conv(&mut push, &format!("dec.up{i}"), Decoder, dc[i - 1], dc[i], 3);
        conv(&mut push, &format!("dec.skip{i}"), Decoder, a.stage_channels[3 - i], dc[i], 1);
    }

    conv(&mut push, "trk.q", TrackingHead, ed[2], dc[0], 1);
    conv(&mut push, "trk.c1", TrackingHead, dc[0] + 1, a.corner_channels, 3);
    conv(&mut push, "trk.c2", TrackingHead, a.corner_channels, 2, 3);

    for (i, &c) in dc.iter().enumerate() {
        conv(&mut push, &format!("dep.{i}.a"), DepthHead, c, a.depth_head_channels, 3);
        conv(&mut push, &format!("dep.{i}.b"), DepthHead, a.depth_head_channels, 1, 3);
    }

    let mut ci = 6;
    for (i, &co) in a.pose_channels.iter().enumerate() {
        conv(&mut push, &format!("pose.{i}"), PoseNet, ci, co, 3);
        ci = co;
    }
    push("pose.fc.w".into(), PoseNet, vec![ci, 6], Init::Zeros);
    push("pose.fc.b".into(), PoseNet, vec![6], Init::Zeros);
    out
}

/// Named parameter tensors, partitioned by group.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    pub seed: u64,
}

impl ModelParams {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(arch)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(b) => (0..n)
                        .map(|_| rng.random_range(-b..b))
                        .collect(),
                };
                Param {
                    name: s.name,
                    group: s.group,
                    value: Tensor::new(s.shape, data).unwrap().with_role(Role::Params),
                }
            })
            .collect();
        Ok(ModelParams::from_params(params, seed))
    }

    pub fn from_params(params: Vec<Param>, seed: u64) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ModelParams {
            params,
            index,
            seed,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn has_group(&self, g: ParamGroup) -> bool {
        self.params.iter().any(|p| p.group == g)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn group_count(&self, g: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == g)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn without_groups(&self, drop: &[ParamGroup]) -> ModelParams {
        let kept = self
            .params
            .iter()
            .filter(|p| !drop.contains(&p.group))
            .cloned()
            .collect();
        ModelParams::from_params(kept, self.seed)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

// --------------------------------------------------------------------
// graph binding

/// Lazily turns parameters into graph nodes: leaves for trainable groups,
/// constants otherwise. Unused parameters never enter the graph.
pub struct Binder<'m> {
    params: &'m ModelParams,
    vars: Vec<Option<Var>>,
    trainable: [bool; 6],
}

impl<'m> Binder<'m> {
    pub fn new(params: &'m ModelParams, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        Binder {
            params,
            vars: vec![None; params.params.len()],
            trainable: ParamGroup::ALL.map(trainable),
        }
    }

    pub fn frozen(params: &'m ModelParams) -> Self {
        Self::new(params, |_| false)
    }

    fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let p = &self.params.params[i];
        let v = if self.trainable[p.group as usize] {
            g.leaf(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        self.vars[i] = Some(v);
        v
    }

    /// `(parameter index, var)` for every trainable parameter that entered
    /// the graph.
    pub fn trainable_vars(&self) -> Vec<(usize, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.trainable[self.params.params[i].group as usize].then_some((i, v))
            })
            .collect()
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.params.position(name).and_then(|i| self.vars[i])
    }
}

// --------------------------------------------------------------------
// outputs

/// Tracking prediction for one search crop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackOutput {
    /// Normalized `[x, y, w, h]` in search-crop units.
    pub bbox: BoxXywh,
    /// Softmax attention over search grid positions, `[1, g, g]`.
    pub attn_map: Tensor,
    /// Top-left and bottom-right corner distributions, `[2, g, g]`.
    pub corner_maps: Tensor,
}

/// Decoder features plus the search half of encoder stage 3.
pub struct Features {
    /// Four maps, coarse to fine.
    pub scales: Vec<Var>,
    pub stage3: Var,
}

pub struct TrackVars {
    /// `[4]` normalized box.
    pub bbox: Var,
    pub attn: Var,
    pub corners: Var,
}

pub struct GraphOutputs {
    pub track: TrackVars,
    /// Disparity maps `[1, s, s]`, coarse to fine.
    pub disparities: Option<Vec<Var>>,
    /// Target-to-previous and target-to-next pose vectors `[6]`.
    pub poses: Option<[Var; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullOutput {
    pub track: TrackOutput,
    pub disparities: Option<Vec<Tensor>>,
    pub poses: Option<[Pose6DoF; 2]>,
}

// --------------------------------------------------------------------
// model

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ModelParams,
    extract_calls: Cell<usize>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl Model {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&arch, seed)?;
        Ok(Model::from_parts(arch, params))
    }

    pub fn from_parts(arch: ArchConfig, params: ModelParams) -> Self {
        Model {
            arch,
            params,
            extract_calls: Cell::new(0),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn group_param_count(&self, g: ParamGroup) -> usize {
        self.params.group_count(g)
    }

    pub fn has_depth_head(&self) -> bool {
        self.params.has_group(ParamGroup::DepthHead)
    }

    pub fn has_pose_net(&self) -> bool {
        self.params.has_group(ParamGroup::PoseNet)
    }

    /// Tracking-only copy without the depth head and pose network.
    pub fn export_inference(&self) -> Model {
        Model::from_parts(
            self.arch.clone(),
            self.params
                .without_groups(&[ParamGroup::DepthHead, ParamGroup::PoseNet]),
        )
    }

    /// Number of extractor passes run so far.
    pub fn extract_feature_calls(&self) -> usize {
        self.extract_calls.get()
    }

    fn check_image(&self, img: &Tensor, side: usize, what: &str) -> Result<()> {
        if img.shape() != [3, side, side] {
            return Err(shape_err!(
                "{what} must be [3, {side}, {side}], got {:?}",
                img.shape()
            ));
        }
        Ok(())
    }

    // ---------------- graph building blocks

    fn conv(&self, g: &mut Graph, b: &mut Binder, name: &str, x: Var, stride: usize) -> Var {
        let w = b.get(g, &format!("{name}.w"));
        let bias = b.get(g, &format!("{name}.b"));
        let k = g.value(w).shape()[2];
        g.conv2d(x, w, bias, stride, k / 2)
    }

    fn linear(&self, g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Var {
        let w = b.get(g, &format!("{name}.w"));
        let bias = b.get(g, &format!("{name}.b"));
        g.linear(x, w, bias)
    }

    fn normalize_input(g: &mut Graph, x: Var) -> Var {
        let c = g.add_scalar(x, -PIXEL_MEAN);
        g.scale(c, 1.0 / PIXEL_STD)
    }

    /// Patch embedding; returns the four layer outputs, the last being the
    /// token map at 1/16 resolution.
    pub fn patch_embed_var(&self, g: &mut Graph, b: &mut Binder, image: Var) -> Vec<Var> {
        let mut x = Self::normalize_input(g, image);
        let mut outs = Vec::with_capacity(4);
        for i in 0..4 {
            x = self.conv(g, b, &format!("pe.{i}"), x, 2);
            if i < 3 {
                x = g.silu(x);
            }
            outs.push(x);
        }
        outs
    }

    fn attention_block(&self, g: &mut Graph, b: &mut Binder, p: &str, x: Var) -> Var {
        let e = g.value(x).shape()[1];
        let heads = self.arch.heads;
        let dh = e / heads;
        let gam = b.get(g, &format!("{p}.ln1.g"));
        let bet = b.get(g, &format!("{p}.ln1.b"));
        let h = g.layer_norm(x, gam, bet);
        let qkv = self.linear(g, b, &format!("{p}.qkv"), h);
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = g.slice_cols(qkv, hd * dh, dh);
            let k = g.slice_cols(qkv, e + hd * dh, dh);
            let v = g.slice_cols(qkv, 2 * e + hd * dh, dh);
            let s = g.matmul_nt(q, k);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, v));
        }
        let o = g.concat_cols(&outs);
        let o = self.linear(g, b, &format!("{p}.out"), o);
        let x = g.add(x, o);

        let gam = b.get(g, &format!("{p}.ln2.g"));
        let bet = b.get(g, &format!("{p}.ln2.b"));
        let h = g.layer_norm(x, gam, bet);
        let h = self.linear(g, b, &format!("{p}.mlp1"), h);
        let h = g.silu(h);
        let h = self.linear(g, b, &format!("{p}.mlp2"), h);
        g.add(x, h)
    }

    /// Joint encoder over search and template token grids, then the
    /// search-branch decoder.
    pub fn extract_features_var(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        search_embed: &[Var],
        template_tokens: Var,
    ) -> Features {
        self.extract_calls.set(self.extract_calls.get() + 1);
        let mut s_map = search_embed[3];
        let mut t_map = template_tokens;
        let mut stage_maps = Vec::with_capacity(3);
        for (stage, &e) in self.arch.encoder_dims.iter().enumerate() {
            if stage > 0 {
                s_map = g.avg_pool2(s_map);
                t_map = g.avg_pool2(t_map);
            }
            let (_, sh, sw) = g.value(s_map).chw().unwrap();
            let (_, th, tw) = g.value(t_map).chw().unwrap();
            let (ns, nt) = (sh * sw, th * tw);
            let st = g.map_to_tokens(s_map);
            let tt = g.map_to_tokens(t_map);
            let tokens = g.concat0(&[st, tt]);
            let p = format!("enc.{stage}");
            let x = self.linear(g, b, &format!("{p}.proj"), tokens);

            let mut pos = sincos_positions(sh, sw, e);
            pos.extend(sincos_positions(th, tw, e));
            let pos = g.constant(Tensor::new(vec![ns + nt, e], pos).unwrap());
            let sel = g.constant(Tensor::from_fn(&[ns + nt, 2], |i| {
                let (row, col) = (i / 2, i % 2);
                f64::from(u8::from((row >= ns) == (col == 1)))
            }));
            let ty = b.get(g, &format!("{p}.type"));
            let ty = g.matmul(sel, ty);
            let x = g.add(x, pos);
            let x = g.add(x, ty);
            let x = self.attention_block(g, b, &p, x);

            let sx = g.slice0(x, 0, ns);
            let tx = g.slice0(x, ns, nt);
            s_map = g.tokens_to_map(sx, sh, sw);
            t_map = g.tokens_to_map(tx, th, tw);
            stage_maps.push(s_map);
        }

        let x = self.conv(g, b, "dec.lat3", stage_maps[2], 1);
        let x = g.upsample_nearest2(x);
        let l2 = self.conv(g, b, "dec.lat2", stage_maps[1], 1);
        let x = g.add(x, l2);
        let x = self.conv(g, b, "dec.fuse2", x, 1);
        let x = g.silu(x);
        let x = g.upsample_nearest2(x);
        let l1 = self.conv(g, b, "dec.lat1", stage_maps[0], 1);
        let x = g.add(x, l1);
        let x = self.conv(g, b, "dec.fuse1", x, 1);
        let mut phi = g.silu(x);

        let mut scales = vec![phi];
        for i in 1..4 {
            let up = g.upsample_nearest2(phi);
            let up = self.conv(g, b, &format!("dec.up{i}"), up, 1);
            let skip = self.conv(g, b, &format!("dec.skip{i}"), search_embed[3 - i], 1);
            let x = g.add(up, skip);
            phi = g.silu(x);
            scales.push(phi);
        }
        Features {
            scales,
            stage3: stage_maps[2],
        }
    }

    pub fn tracking_head_var(&self, g: &mut Graph, b: &mut Binder, f: &Features) -> TrackVars {
        let phi = f.scales[0];
        let (c, gh, gw) = g.value(phi).chw().unwrap();
        let n = gh * gw;
        let mut q = f.stage3;
        while g.value(q).shape()[1] < gh {
            q = g.upsample_nearest2(q);
        }
        let q = self.conv(g, b, "trk.q", q, 1);
        let sim = g.mul(q, phi);
        let sim = g.channel_mean(sim);
        let sim = g.scale(sim, (c as f64).sqrt());
        let sim = g.reshape(sim, &[1, n]);
        let attn = g.softmax_rows(sim);
        let attn = g.reshape(attn, &[1, gh, gw]);

        let boosted = g.scale(attn, n as f64);
        let x = g.concat0(&[phi, boosted]);
        let x = self.conv(g, b, "trk.c1", x, 1);
        let x = g.silu(x);
        let x = self.conv(g, b, "trk.c2", x, 1);
        let x = g.reshape(x, &[2, n]);
        let heat = g.softmax_rows(x);
        let corners = g.reshape(heat, &[2, gh, gw]);

        let centers = g.constant(cell_centers(gh, gw));
        let pts = g.matmul(heat, centers);
        let pts = g.reshape(pts, &[4]);
        let xa = g.slice0(pts, 0, 1);
        let ya = g.slice0(pts, 1, 1);
        let xb = g.slice0(pts, 2, 1);
        let yb = g.slice0(pts, 3, 1);
        let x1 = g.min2(xa, xb);
        let y1 = g.min2(ya, yb);
        let x2 = g.max2(xa, xb);
        let y2 = g.max2(ya, yb);
        let w = g.sub(x2, x1);
        let h = g.sub(y2, y1);
        let bbox = g.concat0(&[x1, y1, w, h]);
        TrackVars {
            bbox,
            attn,
            corners,
        }
    }

    /// Sigmoid disparity per decoder scale, each at twice the scale's side.
    pub fn depth_head_var(&self, g: &mut Graph, b: &mut Binder, f: &Features) -> Vec<Var> {
        f.scales
            .iter()
            .enumerate()
            .map(|(i, &phi)| {
                let x = self.conv(g, b, &format!("dep.{i}.a"), phi, 1);
                let x = g.silu(x);
                let x = g.upsample_nearest2(x);
                let x = self.conv(g, b, &format!("dep.{i}.b"), x, 1);
                g.sigmoid(x)
            })
            .collect()
    }

    /// Relative pose vector `[6]` from `from` to `to`.
    pub fn pose_net_var(&self, g: &mut Graph, b: &mut Binder, from: Var, to: Var) -> Var {
        let x = g.concat0(&[from, to]);
        let mut x = Self::normalize_input(g, x);
        for i in 0..5 {
            x = self.conv(g, b, &format!("pose.{i}"), x, 2);
            x = g.silu(x);
        }
        let c = g.value(x).shape()[0];
        let x = g.global_avg_pool(x);
        let x = g.reshape(x, &[1, c]);
        let x = self.linear(g, b, "pose.fc", x);
        let x = g.reshape(x, &[6]);
        g.scale(x, POSE_SCALE)
    }

    /// One extractor pass feeding every head the strategy needs. `pair`
    /// holds the previous and next search crops.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        template: Var,
        search: Var,
        pair: Option<(Var, Var)>,
        strategy: Strategy,
    ) -> Result<GraphOutputs> {
        self.check_image(g.value(template), self.arch.template_side, "template")?;
        self.check_image(g.value(search), self.arch.input_side, "search crop")?;
        if strategy.uses_depth_head() && !self.has_depth_head() {
            return Err(invalid!("model has no depth head (exported?)"));
        }
        if strategy.uses_pose_net() && !self.has_pose_net() {
            return Err(invalid!("model has no pose network (exported?)"));
        }
        let s_embed = self.patch_embed_var(g, b, search);
        let t_embed = self.patch_embed_var(g, b, template);
        let feats = self.extract_features_var(g, b, &s_embed, t_embed[3]);
        let track = self.tracking_head_var(g, b, &feats);
        let disparities = strategy
            .uses_depth_head()
            .then(|| self.depth_head_var(g, b, &feats));
        let poses = if strategy.uses_pose_net() {
            let (prev, next) =
                pair.ok_or_else(|| invalid!("self-supervised forward needs adjacent frames"))?;
            for v in [prev, next] {
                self.check_image(g.value(v), self.arch.input_side, "adjacent crop")?;
            }
            Some([
                self.pose_net_var(g, b, search, prev),
                self.pose_net_var(g, b, search, next),
            ])
        } else {
            None
        };
        Ok(GraphOutputs {
            track,
            disparities,
            poses,
        })
    }

    // ---------------- plain entry points

    fn track_output(g: &Graph, t: &TrackVars) -> TrackOutput {
        let v = g.value(t.bbox).data();
        TrackOutput {
            bbox: BoxXywh::new(v[0], v[1], v[2], v[3]),
            attn_map: g.value(t.attn).clone().with_role(Role::Mask),
            corner_maps: g.value(t.corners).clone(),
        }
    }

    pub fn forward_full(&self, sample: &Sample, strategy: Strategy) -> Result<FullOutput> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let t = g.constant(sample.template.clone());
        let s = g.constant(sample.search_t.clone());
        let pair = if strategy.uses_pose_net() {
            Some((
                g.constant(sample.search_prev.clone()),
                g.constant(sample.search_next.clone()),
            ))
        } else {
            None
        };
        let out = self.forward_graph(&mut g, &mut b, t, s, pair, strategy)?;
        let poses = match out.poses {
            Some([a, c]) => Some([
                Pose6DoF::from_slice(g.value(a).data())?,
                Pose6DoF::from_slice(g.value(c).data())?,
            ]),
            None => None,
        };
        Ok(FullOutput {
            track: Self::track_output(&g, &out.track),
            disparities: out.disparities.map(|d| {
                d.iter()
                    .map(|&v| g.value(v).clone().with_role(Role::Disparity))
                    .collect()
            }),
            poses,
        })
    }

    pub fn track(&self, template: &Tensor, search: &Tensor) -> Result<TrackOutput> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let t = g.constant(template.clone());
        let s = g.constant(search.clone());
        let out = self.forward_graph(&mut g, &mut b, t, s, None, Strategy::TrackOnlyLarge)?;
        Ok(Self::track_output(&g, &out.track))
    }

    /// Tracking output and disparity scales from one extractor pass.
    pub fn track_and_depth(&self, template: &Tensor, search: &Tensor) -> Result<(TrackOutput, Vec<Tensor>)> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let t = g.constant(template.clone());
        let s = g.constant(search.clone());
        let out = self.forward_graph(&mut g, &mut b, t, s, None, Strategy::SupervisedAux)?;
        let disp = out
            .disparities
            .unwrap()
            .iter()
            .map(|&v| g.value(v).clone().with_role(Role::Disparity))
            .collect();
        Ok((Self::track_output(&g, &out.track), disp))
    }

    /// Token map `[C, side/16, side/16]` of an image.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.chw()?;
        if c != 3 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(invalid!(
                "patch embedding needs a 3-channel image with sides divisible by 16, got {:?}",
                image.shape()
            ));
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let x = g.constant(image.clone());
        let outs = self.patch_embed_var(&mut g, &mut b, x);
        Ok(g.value(outs[3]).clone())
    }

    pub fn pose_net(&self, from: &Tensor, to: &Tensor) -> Result<Pose6DoF> {
        self.check_image(from, self.arch.input_side, "pose input")?;
        self.check_image(to, self.arch.input_side, "pose input")?;
        if !self.has_pose_net() {
            return Err(invalid!("model has no pose network"));
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let a = g.constant(from.clone());
        let c = g.constant(to.clone());
        let p = self.pose_net_var(&mut g, &mut b, a, c);
        Pose6DoF::from_slice(g.value(p).data())
    }
}

/// Normalized centers of a `h x w` grid, `[h*w, 2]` as `(x, y)`.
fn cell_centers(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h * w, 2], |i| {
        let (cell, axis) = (i / 2, i % 2);
        if axis == 0 {
            ((cell % w) as f64 + 0.5) / w as f64
        } else {
            ((cell / w) as f64 + 0.5) / h as f64
        }
    })
}

/// Soft-argmax of a normalized heatmap `[h, w]`, as `(x, y)` in `[0, 1]`.
pub fn soft_argmax(heat: &Tensor) -> Result<(f64, f64)> {
    let (c, h, w) = heat.chw()?;
    if c != 1 {
        return Err(shape_err!("soft_argmax takes one map"));
    }
    let centers = cell_centers(h, w);
    let (mut x, mut y) = (0.0, 0.0);
    for (i, p) in heat.data().iter().enumerate() {
        x += p * centers.data()[2 * i];
        y += p * centers.data()[2 * i + 1];
    }
    Ok((x, y))
}

/// 2-D sine/cosine position codes, `[h*w, dim]` row-major.
fn sincos_positions(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            for (pos, _) in [(x as f64, 0), (y as f64, 1)] {
                for k in 0..quarter {
                    let freq = 1.0 / 100f64.powf(k as f64 / quarter as f64);
                    out.push((pos * freq * PI / 2.0).sin());
                }
                for k in 0..quarter {
                    let freq = 1.0 / 100f64.powf(k as f64 / quarter as f64);
                    out.push((pos * freq * PI / 2.0).cos());
                }
            }
        }
    }
    out
}

/// `1 / (a s + b)` mapping `(0, 1)` onto `(MIN_DEPTH, MAX_DEPTH)`.
pub fn disparity_to_depth(sigma: &Tensor) -> Result<Tensor> {
    if let Some(bad) = sigma.data().iter().find(|s| !(**s >= 0.0 && **s <= 1.0)) {
        return Err(invalid!("disparity {bad} outside [0, 1]"));
    }
    Ok(sigma
        .map(|s| 1.0 / (DISP_SCALE * s + DISP_OFFSET))
        .with_role(Role::Depth))
}

pub fn depth_to_disparity(depth: &Tensor) -> Result<Tensor> {
    if let Some(bad) = depth
        .data()
        .iter()
        .find(|d| !(**d >= MIN_DEPTH && **d <= MAX_DEPTH))
    {
        return Err(invalid!("depth {bad} outside [{MIN_DEPTH}, {MAX_DEPTH}]"));
    }
    Ok(depth
        .map(|d| (1.0 / d - DISP_OFFSET) / DISP_SCALE)
        .with_role(Role::Disparity))
}

pub fn disparity_to_depth_var(g: &mut Graph, sigma: Var) -> Var {
    let x = g.scale(sigma, DISP_SCALE);
    let x = g.add_scalar(x, DISP_OFFSET);
    g.recip(x)
}

/// Depth maps from disparity scales, each resized to `side`.
pub fn depth_at(disparities: &[Tensor], side: usize) -> Result<Vec<Tensor>> {
    disparities
        .iter()
        .map(|d| {
            let mut g = Graph::new();
            let v = g.constant(d.clone());
            let up = g.resize_bilinear(v, side, side);
            disparity_to_depth(g.value(up))
        })
        .collect()
}
