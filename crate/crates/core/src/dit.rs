//! Toy diffusion transformer for first-frame propagation.
//!
//! Tokens are the latent grid itself (1×1 patches). The composite
//! conditioning latent `[z, z_src, ẑ, M]` is lifted to the model width by one
//! learned projection, a sinusoidal timestep embedding is added, and `L`
//! pre-norm blocks of multi-head self-attention plus a SiLU feed-forward
//! follow. Each head rotates its queries and keys with standard or adaptive
//! RoPE depending on the routing.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FfpError, Result};
use crate::graph::{Graph, Var};
use crate::heads::{HeadKind, HeadPartition};
use crate::latent::{ConditioningPack, LatentShape, VideoLatent};
use crate::predictor::PredictorParams;
use crate::rope::{build_position_grid, PositionGrid, RopeCoefficients, RopeFrequencyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    /// Blocks whose output is captured for distillation.
    pub tap_blocks: Vec<usize>,
    pub predictor_hidden: usize,
    pub rope: RopeFrequencyConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(4, 8, 8, 4, 64, 4, 2)
    }
}

impl ModelConfig {
    /// A config with the default rotary split, feed-forward ratio 4, the
    /// middle block tapped and a 64-wide predictor.
    pub fn toy(
        frames: usize,
        h: usize,
        w: usize,
        channels: usize,
        width: usize,
        heads: usize,
        blocks: usize,
    ) -> Self {
        let head_dim = width / heads.max(1);
        Self {
            frames,
            latent_height: h,
            latent_width: w,
            channels,
            width,
            heads,
            blocks,
            ffn_mult: 4,
            tap_blocks: vec![blocks.saturating_sub(1) / 2],
            predictor_hidden: 64,
            rope: RopeFrequencyConfig::with_default_split(head_dim, 10000.0).unwrap_or(
                RopeFrequencyConfig {
                    head_dim,
                    axis_split: (head_dim, 0, 0),
                    base: 10000.0,
                },
            ),
        }
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::new(
            self.frames,
            self.latent_height,
            self.latent_width,
            self.channels,
        )
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(FfpError::Configuration(m));
        if self.frames == 0
            || self.latent_height == 0
            || self.latent_width == 0
            || self.channels == 0
        {
            return cfg("latent dimensions must be positive".into());
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return cfg(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.blocks == 0 || self.ffn_mult == 0 || self.predictor_hidden == 0 {
            return cfg("blocks, ffn_mult and predictor_hidden must be positive".into());
        }
        if self.rope.head_dim != self.head_dim() {
            return cfg(format!(
                "rope.head_dim {} != width / heads = {}",
                self.rope.head_dim,
                self.head_dim()
            ));
        }
        self.rope
            .validate()
            .map_err(|e| FfpError::Configuration(e.to_string()))?;
        if let Some(&b) = self.tap_blocks.iter().find(|&&b| b >= self.blocks) {
            return cfg(format!(
                "tap block {b} out of range for {} blocks",
                self.blocks
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Array2<f64>> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ff_norm: T,
    pub ff_in: T,
    pub ff_in_b: T,
    pub ff_out: T,
    pub ff_out_b: T,
}

const BLOCK_FIELDS: [&str; 10] = [
    "attn_norm",
    "wq",
    "wk",
    "wv",
    "wo",
    "ff_norm",
    "ff_in",
    "ff_in_b",
    "ff_out",
    "ff_out_b",
];

impl<T> BlockParams<T> {
    fn fields(&self) -> [&T; 10] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ff_norm,
            &self.ff_in,
            &self.ff_in_b,
            &self.ff_out,
            &self.ff_out_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 10] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ff_norm,
            &mut self.ff_in,
            &mut self.ff_in_b,
            &mut self.ff_out,
            &mut self.ff_out_b,
        ]
    }

    fn map<U>(&self, prefix: &str, mut f: impl FnMut(&str, &T) -> U) -> BlockParams<U> {
        let name = |field: &str| format!("{prefix}.{field}");
        BlockParams {
            attn_norm: f(&name("attn_norm"), &self.attn_norm),
            wq: f(&name("wq"), &self.wq),
            wk: f(&name("wk"), &self.wk),
            wv: f(&name("wv"), &self.wv),
            wo: f(&name("wo"), &self.wo),
            ff_norm: f(&name("ff_norm"), &self.ff_norm),
            ff_in: f(&name("ff_in"), &self.ff_in),
            ff_in_b: f(&name("ff_in_b"), &self.ff_in_b),
            ff_out: f(&name("ff_out"), &self.ff_out),
            ff_out_b: f(&name("ff_out_b"), &self.ff_out_b),
        }
    }
}

/// Backbone parameters. `T` is `Array2<f64>` for stored weights and
/// [`Var`] once they are registered on a [`Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct DitParams<T = Array2<f64>> {
    /// `(3C + 1) × width`
    pub in_w: T,
    pub in_b: T,
    /// Timestep embedding table, `width × width`, applied to sinusoidal features.
    pub time_w: T,
    pub time_b: T,
    pub blocks: Vec<BlockParams<T>>,
    pub out_norm: T,
    /// `width × C`
    pub out_w: T,
    pub out_b: T,
}

impl<T> DitParams<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("dit.in_w".to_string(), &self.in_w),
            ("dit.in_b".to_string(), &self.in_b),
            ("dit.time_w".to_string(), &self.time_w),
            ("dit.time_b".to_string(), &self.time_b),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (field, v) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("dit.block{l}.{field}"), v));
            }
        }
        out.push(("dit.out_norm".into(), &self.out_norm));
        out.push(("dit.out_w".into(), &self.out_w));
        out.push(("dit.out_b".into(), &self.out_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("dit.in_w".to_string(), &mut self.in_w),
            ("dit.in_b".to_string(), &mut self.in_b),
            ("dit.time_w".to_string(), &mut self.time_w),
            ("dit.time_b".to_string(), &mut self.time_b),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (field, v) in BLOCK_FIELDS.iter().zip(b.fields_mut()) {
                out.push((format!("dit.block{l}.{field}"), v));
            }
        }
        out.push(("dit.out_norm".into(), &mut self.out_norm));
        out.push(("dit.out_w".into(), &mut self.out_w));
        out.push(("dit.out_b".into(), &mut self.out_b));
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> DitParams<U> {
        DitParams {
            in_w: f("dit.in_w", &self.in_w),
            in_b: f("dit.in_b", &self.in_b),
            time_w: f("dit.time_w", &self.time_w),
            time_b: f("dit.time_b", &self.time_b),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| b.map(&format!("dit.block{l}"), &mut f))
                .collect(),
            out_norm: f("dit.out_norm", &self.out_norm),
            out_w: f("dit.out_w", &self.out_w),
            out_b: f("dit.out_b", &self.out_b),
        }
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

impl DitParams {
    pub fn init(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        let c = cfg.channels;
        let hidden = cfg.ffn_mult * d;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = 1.0 / (2.0 * cfg.blocks as f64).sqrt();
        let in_w = normal_matrix(rng, 3 * c + 1, d, fan(3 * c + 1));
        let time_w = normal_matrix(rng, d, d, fan(d));
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                attn_norm: Array2::ones((1, d)),
                wq: normal_matrix(rng, d, d, fan(d)),
                wk: normal_matrix(rng, d, d, fan(d)),
                wv: normal_matrix(rng, d, d, fan(d)),
                wo: normal_matrix(rng, d, d, fan(d) * resid),
                ff_norm: Array2::ones((1, d)),
                ff_in: normal_matrix(rng, d, hidden, fan(d)),
                ff_in_b: Array2::zeros((1, hidden)),
                ff_out: normal_matrix(rng, hidden, d, fan(hidden) * resid),
                ff_out_b: Array2::zeros((1, d)),
            })
            .collect();
        Self {
            in_w,
            in_b: Array2::zeros((1, d)),
            time_w,
            time_b: Array2::zeros((1, d)),
            blocks,
            out_norm: Array2::ones((1, d)),
            out_w: normal_matrix(rng, d, c, fan(d)),
            out_b: Array2::zeros((1, c)),
        }
    }
}

/// Backbone plus coefficient predictor: everything a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Array2<f64>> {
    pub dit: DitParams<T>,
    pub predictor: PredictorParams<T>,
}

impl<T> ModelParams<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = self.dit.named();
        out.extend(
            self.predictor
                .named()
                .into_iter()
                .map(|(n, v)| (n.to_string(), v)),
        );
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = self.dit.named_mut();
        out.extend(
            self.predictor
                .named_mut()
                .into_iter()
                .map(|(n, v)| (n.to_string(), v)),
        );
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            dit: self.dit.map(&mut f),
            predictor: self.predictor.map(&mut f),
        }
    }
}

impl ModelParams {
    pub fn init(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let dit = DitParams::init(rng, cfg);
        let predictor = PredictorParams::init(rng, cfg.channels, cfg.predictor_hidden);
        Self { dit, predictor }
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, a| Array2::zeros(a.dim()))
    }
}

/// How each head chooses its rotary coordinates.
#[derive(Debug, Clone, Copy)]
pub enum RopeRouting<'a> {
    Standard,
    Adaptive {
        partition: &'a HeadPartition,
        coeffs: RopeCoefficients,
    },
}

/// Graph-level routing; the coefficients are a `1 × 2` node so they can be
/// differentiated through.
#[derive(Debug, Clone, Copy)]
pub enum GraphRouting<'a> {
    Standard,
    Adaptive {
        partition: &'a HeadPartition,
        alpha: Var,
    },
}

/// Hard-wired attention patterns used by probe fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPattern {
    /// Learned scores with every cross-frame entry masked out.
    WithinFrame,
    /// Uniform weight over every token of every other frame.
    CrossFrameUniform,
    /// All weight on the highest-scoring token of the query's own frame.
    WithinFrameTop1,
}

#[derive(Debug, Clone, Default)]
pub struct ProbeOptions {
    pub record_attention: bool,
    /// `((layer, head), pattern)`.
    pub overrides: Vec<((usize, usize), HeadPattern)>,
}

impl ProbeOptions {
    fn pattern(&self, layer: usize, head: usize) -> Option<HeadPattern> {
        self.overrides
            .iter()
            .find(|(k, _)| *k == (layer, head))
            .map(|(_, p)| *p)
    }

    /// Applies `pattern` to every head of every layer.
    pub fn all_heads(cfg: &ModelConfig, pattern: HeadPattern) -> Self {
        let overrides = (0..cfg.blocks)
            .flat_map(|l| (0..cfg.heads).map(move |h| ((l, h), pattern)))
            .collect();
        Self {
            record_attention: true,
            overrides,
        }
    }
}

#[derive(Debug)]
pub struct ForwardVars {
    /// `T × C`
    pub velocity: Var,
    /// `(block, T × width)` in ascending block order.
    pub taps: Vec<(usize, Var)>,
    /// `[layer][head]` attention maps when recording was requested.
    pub attention: Vec<Vec<Var>>,
}

/// Captured block outputs keyed by block index.
pub type BlockTapSet = BTreeMap<usize, VideoLatent>;

/// Sinusoidal features of `t` (scaled by 1000), width `dim`.
pub fn timestep_features(t: f64, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[[0, i]] = arg.sin();
        out[[0, half + i]] = arg.cos();
    }
    out
}

fn frame_mask(grid: &PositionGrid) -> Array2<f64> {
    let n = grid.len();
    Array2::from_shape_fn((n, n), |(r, c)| {
        if grid.t_index[r] == grid.t_index[c] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

fn fixed_pattern(
    grid: &PositionGrid,
    scores: ArrayView2<'_, f64>,
    pattern: HeadPattern,
) -> Array2<f64> {
    let n = grid.len();
    let same = |r: usize, c: usize| grid.t_index[r] == grid.t_index[c];
    let mut p = Array2::zeros((n, n));
    match pattern {
        HeadPattern::CrossFrameUniform => {
            for r in 0..n {
                let k = (0..n).filter(|&c| !same(r, c)).count();
                for c in 0..n {
                    if !same(r, c) && k > 0 {
                        p[[r, c]] = 1.0 / k as f64;
                    }
                }
            }
        }
        HeadPattern::WithinFrameTop1 => {
            for r in 0..n {
                let best = (0..n)
                    .filter(|&c| same(r, c))
                    .max_by(|&a, &b| scores[[r, a]].total_cmp(&scores[[r, b]]))
                    .expect("token's own frame is non-empty");
                p[[r, best]] = 1.0;
            }
        }
        HeadPattern::WithinFrame => unreachable!("masked pattern is computed from scores"),
    }
    p
}

struct HeadPositions {
    standard: Var,
    spatial: Option<Var>,
    temporal: Option<Var>,
}

struct AttnContext<'a> {
    grid: &'a PositionGrid,
    rope: &'a RopeFrequencyConfig,
    routing: GraphRouting<'a>,
    probe: &'a ProbeOptions,
    heads: usize,
    head_dim: usize,
}

fn head_positions(
    g: &mut Graph,
    ctx: &AttnContext<'_>,
    pos: &mut HeadPositions,
    layer: usize,
    head: usize,
) -> Result<Var> {
    match ctx.routing {
        GraphRouting::Standard => Ok(pos.standard),
        GraphRouting::Adaptive { partition, alpha } => {
            let kind = partition.kind(layer, head).ok_or_else(|| {
                FfpError::Configuration(format!(
                    "head partition has no entry for layer {layer} head {head}"
                ))
            })?;
            let slot = match kind {
                HeadKind::Spatial => &mut pos.spatial,
                HeadKind::Temporal => &mut pos.temporal,
            };
            Ok(*slot.get_or_insert_with(|| {
                g.positions(alpha, kind, &ctx.grid.t_index, ctx.grid.dims.0)
            }))
        }
    }
}

fn attention_graph(
    g: &mut Graph,
    x: Var,
    block: &BlockParams<Var>,
    layer: usize,
    ctx: &AttnContext<'_>,
    pos: &mut HeadPositions,
) -> Result<(Var, Vec<Var>)> {
    let q = g.matmul(x, block.wq);
    let k = g.matmul(x, block.wk);
    let v = g.matmul(x, block.wv);
    let scale = 1.0 / (ctx.head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(ctx.heads);
    let mut maps = Vec::new();
    let mut mask: Option<Var> = None;
    for h in 0..ctx.heads {
        let start = h * ctx.head_dim;
        let qh = g.slice_cols(q, start, ctx.head_dim);
        let kh = g.slice_cols(k, start, ctx.head_dim);
        let vh = g.slice_cols(v, start, ctx.head_dim);
        let t = head_positions(g, ctx, pos, layer, h)?;
        let qr = g.rope(qh, t, &ctx.grid.h_index, &ctx.grid.w_index, ctx.rope);
        let kr = g.rope(kh, t, &ctx.grid.h_index, &ctx.grid.w_index, ctx.rope);
        let scores = g.matmul_t(qr, kr);
        let scores = g.scale(scores, scale);
        let probs = match ctx.probe.pattern(layer, h) {
            None => g.softmax(scores),
            Some(HeadPattern::WithinFrame) => {
                let m = *mask.get_or_insert_with(|| g.constant(frame_mask(ctx.grid)));
                let masked = g.add(scores, m);
                g.softmax(masked)
            }
            Some(p) => {
                let fixed = fixed_pattern(ctx.grid, g.value(scores).view(), p);
                g.constant(fixed)
            }
        };
        if ctx.probe.record_attention {
            maps.push(probs);
        }
        outs.push(g.matmul(probs, vh));
    }
    let cat = g.concat_cols(&outs);
    Ok((g.matmul(cat, block.wo), maps))
}

fn check_pack(cfg: &ModelConfig, pack: &ConditioningPack) -> Result<()> {
    if pack.shape() != cfg.latent_shape() {
        return Err(FfpError::Configuration(format!(
            "conditioning latent {:?} does not match model latent {:?}",
            pack.shape(),
            cfg.latent_shape()
        )));
    }
    Ok(())
}

fn check_routing(cfg: &ModelConfig, partition: Option<&HeadPartition>) -> Result<()> {
    if let Some(p) = partition {
        p.check_covers(cfg.blocks, cfg.heads)?;
    }
    Ok(())
}

/// Records a full forward pass on `g`.
pub fn forward_graph(
    g: &mut Graph,
    params: &DitParams<Var>,
    cfg: &ModelConfig,
    pack: &ConditioningPack,
    t: f64,
    routing: GraphRouting<'_>,
    probe: &ProbeOptions,
) -> Result<ForwardVars> {
    check_pack(cfg, pack)?;
    if !t.is_finite() {
        return Err(FfpError::NumericInput(format!(
            "timestep {t} is not finite"
        )));
    }
    if let GraphRouting::Adaptive { partition, .. } = routing {
        check_routing(cfg, Some(partition))?;
    }
    let sh = cfg.latent_shape();
    let grid = build_position_grid((sh.frames, sh.height, sh.width))?;
    let composite = g.constant(pack.composite().to_tokens());
    let h = g.matmul(composite, params.in_w);
    let h = g.add_row(h, params.in_b);
    let feats = g.constant(timestep_features(t, cfg.width));
    let temb = g.matmul(feats, params.time_w);
    let temb = g.add_row(temb, params.time_b);
    let mut h = g.add_row(h, temb);

    let standard =
        g.constant(Array2::from_shape_vec((grid.len(), 1), grid.t_index.clone()).expect("column"));
    let mut pos = HeadPositions {
        standard,
        spatial: None,
        temporal: None,
    };
    let ctx = AttnContext {
        grid: &grid,
        rope: &cfg.rope,
        routing,
        probe,
        heads: cfg.heads,
        head_dim: cfg.head_dim(),
    };
    let mut taps = Vec::new();
    let mut attention = Vec::new();
    for (l, block) in params.blocks.iter().enumerate() {
        let a = g.rms_norm(h, block.attn_norm);
        let (a, maps) = attention_graph(g, a, block, l, &ctx, &mut pos)?;
        h = g.add(h, a);
        let f = g.rms_norm(h, block.ff_norm);
        let f = g.matmul(f, block.ff_in);
        let f = g.add_row(f, block.ff_in_b);
        let f = g.silu(f);
        let f = g.matmul(f, block.ff_out);
        let f = g.add_row(f, block.ff_out_b);
        h = g.add(h, f);
        if cfg.tap_blocks.contains(&l) {
            taps.push((l, h));
        }
        if probe.record_attention {
            attention.push(maps);
        }
    }
    let o = g.rms_norm(h, params.out_norm);
    let o = g.matmul(o, params.out_w);
    let velocity = g.add_row(o, params.out_b);
    Ok(ForwardVars {
        velocity,
        taps,
        attention,
    })
}

fn const_params(g: &mut Graph, params: &DitParams) -> DitParams<Var> {
    params.map(|_, a| g.constant(a.clone()))
}

fn graph_routing<'a>(g: &mut Graph, routing: &RopeRouting<'a>) -> GraphRouting<'a> {
    match *routing {
        RopeRouting::Standard => GraphRouting::Standard,
        RopeRouting::Adaptive { partition, coeffs } => {
            let alpha = g.constant(
                Array2::from_shape_vec((1, 2), vec![coeffs.alpha_s, coeffs.alpha_t]).expect("1x2"),
            );
            GraphRouting::Adaptive { partition, alpha }
        }
    }
}

pub(crate) fn tap_latent(g: &Graph, v: Var, cfg: &ModelConfig) -> VideoLatent {
    let sh = LatentShape::new(cfg.frames, cfg.latent_height, cfg.latent_width, cfg.width);
    VideoLatent::from_tokens(g.value(v).view(), sh).expect("tap has token shape")
}

/// Velocity prediction and block taps for one conditioning pack.
pub fn dit_forward(
    pack: &ConditioningPack,
    t: f64,
    params: &DitParams,
    cfg: &ModelConfig,
    routing: &RopeRouting<'_>,
) -> Result<(VideoLatent, BlockTapSet)> {
    let mut g = Graph::new();
    let p = const_params(&mut g, params);
    let r = graph_routing(&mut g, routing);
    let out = forward_graph(&mut g, &p, cfg, pack, t, r, &ProbeOptions::default())?;
    let velocity = VideoLatent::from_tokens(g.value(out.velocity).view(), cfg.latent_shape())?;
    let taps = out
        .taps
        .iter()
        .map(|&(l, v)| (l, tap_latent(&g, v, cfg)))
        .collect();
    Ok((velocity, taps))
}

/// Per-head attention maps `[layer][head]` (each `T × T`) for one pack.
pub fn probe_attention(
    pack: &ConditioningPack,
    t: f64,
    params: &DitParams,
    cfg: &ModelConfig,
    routing: &RopeRouting<'_>,
    overrides: &[((usize, usize), HeadPattern)],
) -> Result<Vec<Vec<Array2<f64>>>> {
    let mut g = Graph::new();
    let p = const_params(&mut g, params);
    let r = graph_routing(&mut g, routing);
    let probe = ProbeOptions {
        record_attention: true,
        overrides: overrides.to_vec(),
    };
    let out = forward_graph(&mut g, &p, cfg, pack, t, r, &probe)?;
    Ok(out
        .attention
        .iter()
        .map(|heads| heads.iter().map(|&v| g.value(v).clone()).collect())
        .collect())
}

/// One attention sublayer (no residual, no norm) on a `T × width` token
/// matrix, returning the projected output and the per-head maps.
pub fn attention_forward(
    tokens: ArrayView2<'_, f64>,
    layer: usize,
    params: &DitParams,
    cfg: &ModelConfig,
    routing: &RopeRouting<'_>,
    grid: &PositionGrid,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    if tokens.ncols() != cfg.width {
        return invalid(format!(
            "token width {} != model width {}",
            tokens.ncols(),
            cfg.width
        ));
    }
    if tokens.nrows() != grid.len() {
        return invalid(format!(
            "{} tokens but grid has {}",
            tokens.nrows(),
            grid.len()
        ));
    }
    let block = params
        .blocks
        .get(layer)
        .ok_or_else(|| FfpError::InvalidArgument(format!("layer {layer} out of range")))?;
    if let RopeRouting::Adaptive { partition, .. } = routing {
        check_routing(cfg, Some(partition))?;
    }
    let mut g = Graph::new();
    let bp = block.map("b", |_, a| g.constant(a.clone()));
    let r = graph_routing(&mut g, routing);
    let x = g.constant(tokens.to_owned());
    let standard =
        g.constant(Array2::from_shape_vec((grid.len(), 1), grid.t_index.clone()).expect("column"));
    let mut pos = HeadPositions {
        standard,
        spatial: None,
        temporal: None,
    };
    let probe = ProbeOptions {
        record_attention: true,
        overrides: Vec::new(),
    };
    let ctx = AttnContext {
        grid,
        rope: &cfg.rope,
        routing: r,
        probe: &probe,
        heads: cfg.heads,
        head_dim: cfg.head_dim(),
    };
    let (out, maps) = attention_graph(&mut g, x, &bp, layer, &ctx, &mut pos)?;
    Ok((
        g.value(out).clone(),
        maps.iter().map(|&m| g.value(m).clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::Array4;
    use rand_distr::StandardNormal;

    fn small_cfg() -> ModelConfig {
        ModelConfig::toy(3, 2, 2, 2, 16, 2, 2)
    }

    fn random_pack(seed: u64, sh: LatentShape) -> ConditioningPack {
        let mut rng = stream_rng(seed, Stream::Fixture, 0);
        let mut lat = || {
            VideoLatent::new(Array4::from_shape_fn(sh.dims(), |_| {
                rng.sample::<f64, _>(StandardNormal)
            }))
        };
        let noisy = lat();
        let source = lat();
        let first = source.frame(0) * 0.5;
        ConditioningPack::new(noisy, source, first).unwrap()
    }

    #[test]
    fn zero_output_projection_gives_zero_velocity() {
        let cfg = small_cfg();
        let mut p = DitParams::init(&mut stream_rng(1, Stream::Init, 0), &cfg);
        p.out_w.fill(0.0);
        let (v, _) = dit_forward(
            &random_pack(2, cfg.latent_shape()),
            0.3,
            &p,
            &cfg,
            &RopeRouting::Standard,
        )
        .unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_taps_are_captured() {
        let cfg = small_cfg();
        let p = DitParams::init(&mut stream_rng(1, Stream::Init, 0), &cfg);
        let pack = random_pack(3, cfg.latent_shape());
        let a = dit_forward(&pack, 0.7, &p, &cfg, &RopeRouting::Standard).unwrap();
        let b = dit_forward(&pack, 0.7, &p, &cfg, &RopeRouting::Standard).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.keys().copied().collect::<Vec<_>>(), cfg.tap_blocks);
        assert_eq!(a.1[&0].shape().channels, cfg.width);
    }

    #[test]
    fn neutral_coefficients_make_partition_irrelevant() {
        let cfg = small_cfg();
        let p = DitParams::init(&mut stream_rng(4, Stream::Init, 0), &cfg);
        let pack = random_pack(5, cfg.latent_shape());
        let coeffs = RopeCoefficients::neutral();
        let sp = HeadPartition::uniform(cfg.blocks, cfg.heads, HeadKind::Spatial);
        let tp = HeadPartition::uniform(cfg.blocks, cfg.heads, HeadKind::Temporal);
        let a = dit_forward(
            &pack,
            0.4,
            &p,
            &cfg,
            &RopeRouting::Adaptive {
                partition: &sp,
                coeffs,
            },
        )
        .unwrap();
        let b = dit_forward(
            &pack,
            0.4,
            &p,
            &cfg,
            &RopeRouting::Adaptive {
                partition: &tp,
                coeffs,
            },
        )
        .unwrap();
        let c = dit_forward(&pack, 0.4, &p, &cfg, &RopeRouting::Standard).unwrap();
        let diff = (&a.0.data - &b.0.data)
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff <= 1e-12);
        let diff = (&a.0.data - &c.0.data)
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff <= 1e-12);
    }

    #[test]
    fn missing_partition_entry_is_configuration_error() {
        let cfg = small_cfg();
        let p = DitParams::init(&mut stream_rng(4, Stream::Init, 0), &cfg);
        let pack = random_pack(5, cfg.latent_shape());
        let short = HeadPartition::uniform(cfg.blocks, cfg.heads - 1, HeadKind::Spatial);
        let r = RopeRouting::Adaptive {
            partition: &short,
            coeffs: RopeCoefficients::neutral(),
        };
        assert!(matches!(
            dit_forward(&pack, 0.4, &p, &cfg, &r),
            Err(FfpError::Configuration(_))
        ));
    }

    #[test]
    fn wrong_pack_shape_is_configuration_error() {
        let cfg = small_cfg();
        let p = DitParams::init(&mut stream_rng(4, Stream::Init, 0), &cfg);
        let pack = random_pack(5, LatentShape::new(2, 2, 2, 2));
        assert!(matches!(
            dit_forward(&pack, 0.4, &p, &cfg, &RopeRouting::Standard),
            Err(FfpError::Configuration(_))
        ));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = ModelConfig::toy(1, 1, 1, 2, 8, 2, 1);
        let p = DitParams::init(&mut stream_rng(6, Stream::Init, 0), &cfg);
        let grid = build_position_grid((1, 1, 1)).unwrap();
        let x = normal_matrix(&mut stream_rng(7, Stream::Fixture, 0), 1, 8, 1.0);
        let (out, maps) =
            attention_forward(x.view(), 0, &p, &cfg, &RopeRouting::Standard, &grid).unwrap();
        for m in &maps {
            assert_eq!(m[[0, 0]], 1.0);
        }
        let expect = x.dot(&p.blocks[0].wv).dot(&p.blocks[0].wo);
        assert!((&out - &expect).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn identical_tokens_split_attention_evenly() {
        let cfg = ModelConfig::toy(1, 1, 2, 2, 8, 2, 1);
        let p = DitParams::init(&mut stream_rng(6, Stream::Init, 0), &cfg);
        // Both tokens share every coordinate, so rotations agree too.
        let grid = PositionGrid {
            t_index: vec![0.0, 0.0],
            h_index: vec![0.0, 0.0],
            w_index: vec![0.0, 0.0],
            dims: (1, 1, 2),
        };
        let row = normal_matrix(&mut stream_rng(8, Stream::Fixture, 0), 1, 8, 1.0);
        let x = ndarray::concatenate(ndarray::Axis(0), &[row.view(), row.view()]).unwrap();
        let (_, maps) =
            attention_forward(x.view(), 0, &p, &cfg, &RopeRouting::Standard, &grid).unwrap();
        for m in &maps {
            assert!(m.iter().all(|&w| (w - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let cfg = ModelConfig::toy(2, 1, 2, 2, 8, 2, 1);
        let p = DitParams::init(&mut stream_rng(9, Stream::Init, 0), &cfg);
        let grid = build_position_grid((2, 1, 2)).unwrap();
        let x = normal_matrix(&mut stream_rng(10, Stream::Fixture, 0), 4, 8, 1.0);
        let (out, maps) =
            attention_forward(x.view(), 0, &p, &cfg, &RopeRouting::Standard, &grid).unwrap();

        let b = &p.blocks[0];
        let (q, k, v) = (x.dot(&b.wq), x.dot(&b.wk), x.dot(&b.wv));
        let hd = cfg.head_dim();
        let mut cat = Array2::<f64>::zeros((4, 8));
        for h in 0..cfg.heads {
            let cols = ndarray::s![.., h * hd..(h + 1) * hd];
            let qr = crate::rope::rotate(q.slice(cols), &grid, &cfg.rope).unwrap();
            let kr = crate::rope::rotate(k.slice(cols), &grid, &cfg.rope).unwrap();
            let mut s = Array2::<f64>::zeros((4, 4));
            for i in 0..4 {
                for j in 0..4 {
                    s[[i, j]] =
                        (0..hd).map(|d| qr[[i, d]] * kr[[j, d]]).sum::<f64>() / (hd as f64).sqrt();
                }
            }
            for i in 0..4 {
                let z: f64 = (0..4).map(|j| s[[i, j]].exp()).sum();
                for j in 0..4 {
                    let pij = s[[i, j]].exp() / z;
                    assert!((pij - maps[h][[i, j]]).abs() < 1e-12);
                    for d in 0..hd {
                        cat[[i, h * hd + d]] += pij * v[[j, h * hd + d]];
                    }
                }
            }
        }
        let expect = cat.dot(&b.wo);
        let diff = (&out - &expect).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-10, "max diff {diff}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_cfg();
        let p = DitParams::init(&mut stream_rng(11, Stream::Init, 0), &cfg);
        let pack = random_pack(12, cfg.latent_shape());
        let maps = probe_attention(&pack, 0.5, &p, &cfg, &RopeRouting::Standard, &[]).unwrap();
        for layer in &maps {
            for m in layer {
                for r in m.rows() {
                    assert!((r.sum() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn taps_do_not_perturb_velocity() {
        let mut cfg = small_cfg();
        let p = DitParams::init(&mut stream_rng(13, Stream::Init, 0), &cfg);
        let pack = random_pack(14, cfg.latent_shape());
        let (with, taps) = dit_forward(&pack, 0.2, &p, &cfg, &RopeRouting::Standard).unwrap();
        assert!(!taps.is_empty());
        cfg.tap_blocks.clear();
        let (without, none) = dit_forward(&pack, 0.2, &p, &cfg, &RopeRouting::Standard).unwrap();
        assert!(none.is_empty());
        assert_eq!(with, without);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.tap_blocks = vec![5];
        assert!(c.validate().is_err());
        let c = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
