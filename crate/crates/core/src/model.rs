//! The end-to-end encoder: clip → flow → spatial and temporal token
//! pathways → per-frame fusion → aggregation over time → class logits.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_causal_mask, EncoderBlock, RecordTag};
use crate::data::{read_tensor, write_tensor, VideoClip};
use crate::error::{MooseError, Result};
use crate::flow::{frames_flow, standardize, FlowParams};
use crate::fusion::{Fusion, FusionMode};
use crate::params::{Ctx, LayerNorm, Linear, ParamBuilder, ParamStore, Stage};
use crate::patching::{patchify, PatchEmbedder, Pathway, TokenSequence};
use crate::tensor::{Tensor, Var};

/// Trace purpose for the causal aggregation block.
pub const AGGREGATION_TAG: &str = "aggregation";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Causal,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Causal => "causal",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = MooseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "causal" => Ok(Aggregation::Causal),
            _ => Err(MooseError::invalid(format!(
                "unknown aggregation `{s}` (mean|causal)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MooseConfig {
    /// Fused units per clip; clips carry `frames + 1` images.
    pub frames: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub spatial_dim: usize,
    pub spatial_layers: usize,
    pub spatial_heads: usize,
    pub temporal_dim: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub fusion: FusionMode,
    pub aggregation: Aggregation,
    pub num_classes: usize,
    pub flow: FlowParams,
    /// Feed all-zero flow to the temporal pathway (ablation).
    pub zero_flow: bool,
    pub seed: u64,
}

impl Default for MooseConfig {
    fn default() -> Self {
        MooseConfig {
            frames: 8,
            channels: 1,
            width: 32,
            height: 32,
            patch: 8,
            spatial_dim: 64,
            spatial_layers: 2,
            spatial_heads: 4,
            temporal_dim: 32,
            temporal_layers: 2,
            temporal_heads: 2,
            fusion: FusionMode::Bidirectional,
            aggregation: Aggregation::Causal,
            num_classes: 4,
            flow: FlowParams::default(),
            zero_flow: false,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MooseError::invalid(format!("bad value `{value}` for `{key}`")))
}

impl MooseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MooseError::invalid(msg));
        if self.patch == 0 || self.width % self.patch != 0 || self.height % self.patch != 0 {
            return bad(format!(
                "frame {}x{} is not divisible into {}-pixel patches",
                self.width, self.height, self.patch
            ));
        }
        if self.spatial_heads == 0 || self.spatial_dim % self.spatial_heads != 0 {
            return bad(format!(
                "spatial width {} not divisible by {} heads",
                self.spatial_dim, self.spatial_heads
            ));
        }
        if self.temporal_heads == 0 || self.temporal_dim % self.temporal_heads != 0 {
            return bad(format!(
                "temporal width {} not divisible by {} heads",
                self.temporal_dim, self.temporal_heads
            ));
        }
        if self.aggregation == Aggregation::Causal && self.unit_dim() % self.spatial_heads != 0 {
            return bad(format!(
                "unit width {} not divisible by {} aggregation heads",
                self.unit_dim(),
                self.spatial_heads
            ));
        }
        if self.frames == 0 {
            return bad("need at least one unit (frames >= 1)".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.spatial_dim < 2 || self.temporal_dim < 2 {
            return bad("pathway widths must be at least 2".into());
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        self.flow.validate()
    }

    pub fn num_patches(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn unit_dim(&self) -> usize {
        self.fusion.unit_dim(self.spatial_dim, self.temporal_dim)
    }

    /// Sets one `key = value` entry. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "frames" => self.frames = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "spatial_dim" => self.spatial_dim = parse(key, value)?,
            "spatial_layers" => self.spatial_layers = parse(key, value)?,
            "spatial_heads" => self.spatial_heads = parse(key, value)?,
            "temporal_dim" => self.temporal_dim = parse(key, value)?,
            "temporal_layers" => self.temporal_layers = parse(key, value)?,
            "temporal_heads" => self.temporal_heads = parse(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "aggregation" => self.aggregation = value.parse()?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "flow_alpha" => self.flow.alpha = parse(key, value)?,
            "flow_iterations" => self.flow.iterations = parse(key, value)?,
            "zero_flow" => self.zero_flow = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines accepted back by [`MooseConfig::set`].
    pub fn to_lines(&self) -> String {
        format!(
            "frames = {}\nchannels = {}\nwidth = {}\nheight = {}\npatch = {}\n\
             spatial_dim = {}\nspatial_layers = {}\nspatial_heads = {}\n\
             temporal_dim = {}\ntemporal_layers = {}\ntemporal_heads = {}\n\
             fusion = {}\naggregation = {}\nnum_classes = {}\n\
             flow_alpha = {:?}\nflow_iterations = {}\nzero_flow = {}\nseed = {}\n",
            self.frames,
            self.channels,
            self.width,
            self.height,
            self.patch,
            self.spatial_dim,
            self.spatial_layers,
            self.spatial_heads,
            self.temporal_dim,
            self.temporal_layers,
            self.temporal_heads,
            self.fusion,
            self.aggregation,
            self.num_classes,
            self.flow.alpha,
            self.flow.iterations,
            self.zero_flow,
            self.seed,
        )
    }
}

/// Patch embedding, a stack of unmasked encoder blocks and a final norm.
#[derive(Clone, Debug)]
pub struct PathwayEncoder {
    pub pathway: Pathway,
    pub embed: PatchEmbedder,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl PathwayEncoder {
    fn new(
        b: &mut ParamBuilder<'_>,
        pathway: Pathway,
        patch_dim: usize,
        num_patches: usize,
        (dim, layers, heads): (usize, usize, usize),
    ) -> Result<Self> {
        let (name, stage): (&str, fn(usize) -> Stage) = match pathway {
            Pathway::Spatial => ("spatial", Stage::Spatial),
            Pathway::Temporal => ("temporal", Stage::Temporal),
        };
        b.scope(name, stage(0));
        let embed = PatchEmbedder::new(b, "embed", patch_dim, num_patches, dim);
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            b.set_stage(stage(l + 1));
            blocks.push(EncoderBlock::new(b, &format!("block{l}"), dim, heads)?);
        }
        b.set_stage(stage(layers + 1));
        let norm = LayerNorm::new(b, "norm", dim);
        Ok(PathwayEncoder {
            pathway,
            embed,
            blocks,
            norm,
        })
    }

    pub fn num_params(patch_dim: usize, num_patches: usize, dim: usize, layers: usize) -> usize {
        PatchEmbedder::num_params(patch_dim, num_patches, dim)
            + layers * EncoderBlock::num_params(dim)
            + 2 * dim
    }

    /// Index of the final stage (the norm).
    pub fn last_stage(&self) -> usize {
        self.blocks.len() + 1
    }

    /// Runs stages `start..=last_stage()`. Stage 0 embeds `patches`; later
    /// starts take the previous stage's output from `input`. Each stage's
    /// output value is pushed onto `outputs` when given.
    pub fn forward_from(
        &self,
        ctx: &mut Ctx<'_>,
        start: usize,
        patches: &Tensor,
        input: Option<&Tensor>,
        mut outputs: Option<&mut Vec<Tensor>>,
    ) -> Result<TokenSequence> {
        let seq_len = self.embed.num_patches + 1;
        let mut x = if start == 0 {
            self.embed.forward(ctx, patches, self.pathway)?.tokens
        } else {
            let t = input.ok_or_else(|| {
                MooseError::invalid("staged forward needs the previous stage output")
            })?;
            ctx.tape.constant(t.clone())
        };
        let mut keep = |ctx: &Ctx<'_>, v: Var| {
            if let Some(out) = outputs.as_deref_mut() {
                out.push(ctx.tape.value(v).clone());
            }
        };
        if start == 0 {
            keep(ctx, x);
        }
        for (l, block) in self.blocks.iter().enumerate() {
            if l + 1 >= start {
                x = block.forward(ctx, x, seq_len, None, None)?;
                keep(ctx, x);
            }
        }
        x = self.norm.forward(ctx, x)?;
        keep(ctx, x);
        Ok(TokenSequence {
            tokens: x,
            seq_len,
            pathway: self.pathway,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Aggregator {
    Mean,
    /// One pre-norm block under a causal mask; the clip embedding is the
    /// output at the last position.
    Causal(EncoderBlock),
}

impl Aggregator {
    pub fn num_params(mode: Aggregation, dim: usize) -> usize {
        match mode {
            Aggregation::Mean => 0,
            Aggregation::Causal => EncoderBlock::num_params(dim),
        }
    }

    /// Outputs at every position for `[B·T × D]` units; for `Mean` each
    /// position holds the mean over the whole sequence.
    pub fn positions(&self, ctx: &mut Ctx<'_>, units: Var, len: usize) -> Result<Var> {
        let (rows, _) = ctx.tape.value(units).dims2()?;
        if len == 0 || rows % len != 0 {
            return Err(MooseError::invalid(format!(
                "{rows} units do not split into sequences of {len}"
            )));
        }
        match self {
            Aggregator::Mean => {
                let mut out = Vec::with_capacity(rows);
                for b in 0..rows / len {
                    let seq = ctx
                        .tape
                        .slice(units, b * len, len, 0, ctx.tape.shape(units)[1])?;
                    let m = ctx.tape.mean_rows(seq)?;
                    out.extend(std::iter::repeat_n(m, len));
                }
                ctx.tape.concat_rows(&out)
            }
            Aggregator::Causal(block) => {
                let mask = build_causal_mask(len)?;
                block.forward(
                    ctx,
                    units,
                    len,
                    Some(&mask),
                    Some(RecordTag {
                        purpose: AGGREGATION_TAG,
                        layer: 0,
                    }),
                )
            }
        }
    }

    /// Clip embeddings `[B × D]` from `[B·T × D]` units.
    pub fn forward(&self, ctx: &mut Ctx<'_>, units: Var, len: usize) -> Result<Var> {
        let (rows, d) = ctx.tape.value(units).dims2()?;
        if len == 0 || rows % len != 0 {
            return Err(MooseError::invalid(format!(
                "{rows} units do not split into sequences of {len}"
            )));
        }
        let batch = rows / len;
        match self {
            Aggregator::Mean => {
                let mut out = Vec::with_capacity(batch);
                for b in 0..batch {
                    let seq = ctx.tape.slice(units, b * len, len, 0, d)?;
                    out.push(ctx.tape.mean_rows(seq)?);
                }
                if out.len() == 1 {
                    Ok(out[0])
                } else {
                    ctx.tape.concat_rows(&out)
                }
            }
            Aggregator::Causal(_) => {
                let all = self.positions(ctx, units, len)?;
                let last: Vec<usize> = (0..batch).map(|b| b * len + len - 1).collect();
                ctx.tape.gather_rows(all, &last)
            }
        }
    }
}

/// Model inputs derived from one clip: patch rows of the first `T` frames
/// and of the standardised flow between consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClip {
    /// `[T·N × C·P·P]`.
    pub spatial: Tensor,
    /// `[T·N × 2·P·P]`.
    pub temporal: Tensor,
    pub label: usize,
}

/// Values of every stage boundary from one forward, used to restart the
/// computation part-way (finite-difference checks).
#[derive(Clone, Debug)]
pub struct StageCache {
    pub spatial: Vec<Tensor>,
    pub temporal: Vec<Tensor>,
    pub units: Tensor,
    pub clip: Tensor,
}

/// Per-stage multiply-accumulate counts for one clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub flow: u64,
    pub spatial: u64,
    pub temporal: u64,
    pub fusion: u64,
    pub aggregation: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.flow + self.spatial + self.temporal + self.fusion + self.aggregation + self.head
    }

    /// Everything except the optical-flow solver.
    pub fn network(&self) -> u64 {
        self.total() - self.flow
    }
}

fn linear_macs(rows: usize, i: usize, o: usize) -> u64 {
    (rows * i * o) as u64
}

/// Cross-attention of `b` query sequences of `sq` tokens at width `dq` over
/// key sequences of `sk` tokens at width `dk`.
fn attention_macs(b: usize, sq: usize, dq: usize, sk: usize, dk: usize) -> u64 {
    2 * linear_macs(b * sq, dq, dq)
        + 2 * linear_macs(b * sk, dk, dq)
        + 2 * (b * sq * sk * dq) as u64
}

fn block_macs(b: usize, s: usize, d: usize) -> u64 {
    attention_macs(b, s, d, s, d) + 8 * (b * s * d * d) as u64
}

pub fn count_flops_breakdown(cfg: &MooseConfig) -> FlopBreakdown {
    let t = cfg.frames;
    let s = cfg.seq_len();
    let p2 = cfg.patch * cfg.patch;
    let (ds, df) = (cfg.spatial_dim, cfg.temporal_dim);
    let pathway = |in_dim: usize, d: usize, layers: usize| {
        linear_macs(t * s, in_dim, d) + layers as u64 * block_macs(t, s, d)
    };
    let fp = attention_macs(t, s, ds, s, df);
    let vp = attention_macs(t, s, df, s, ds);
    let fusion = match cfg.fusion {
        FusionMode::FlowPrior => fp,
        FusionMode::VisualPrior => vp + linear_macs(t, df, ds),
        FusionMode::Bidirectional => fp + vp,
    };
    let du = cfg.unit_dim();
    FlopBreakdown {
        flow: t as u64 * cfg.flow.macs(cfg.width, cfg.height),
        spatial: pathway(cfg.channels * p2, ds, cfg.spatial_layers),
        temporal: pathway(2 * p2, df, cfg.temporal_layers),
        fusion,
        aggregation: match cfg.aggregation {
            Aggregation::Mean => 0,
            Aggregation::Causal => block_macs(1, t, du),
        },
        head: linear_macs(1, du, cfg.num_classes),
    }
}

/// Multiply-accumulates for one clip forward, flow solver included.
pub fn count_flops(cfg: &MooseConfig) -> u64 {
    count_flops_breakdown(cfg).total()
}

/// Trainable scalars, from the closed-form size of every component.
pub fn count_params(cfg: &MooseConfig) -> usize {
    let n = cfg.num_patches();
    let p2 = cfg.patch * cfg.patch;
    PathwayEncoder::num_params(cfg.channels * p2, n, cfg.spatial_dim, cfg.spatial_layers)
        + PathwayEncoder::num_params(2 * p2, n, cfg.temporal_dim, cfg.temporal_layers)
        + Fusion::num_params(cfg.fusion, cfg.spatial_dim, cfg.temporal_dim)
        + Aggregator::num_params(cfg.aggregation, cfg.unit_dim())
        + Linear::num_params(cfg.unit_dim(), cfg.num_classes, true)
}

#[derive(Clone, Debug)]
pub struct Moose {
    pub config: MooseConfig,
    pub store: ParamStore,
    pub spatial: PathwayEncoder,
    pub temporal: PathwayEncoder,
    pub fusion: Fusion,
    pub aggregator: Aggregator,
    pub head: Linear,
}

impl Moose {
    /// Builds the model with parameters drawn from `config.seed`.
    pub fn new(config: MooseConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let n = config.num_patches();
        let p2 = config.patch * config.patch;
        let spatial = PathwayEncoder::new(
            &mut b,
            Pathway::Spatial,
            config.channels * p2,
            n,
            (
                config.spatial_dim,
                config.spatial_layers,
                config.spatial_heads,
            ),
        )?;
        let temporal = PathwayEncoder::new(
            &mut b,
            Pathway::Temporal,
            2 * p2,
            n,
            (
                config.temporal_dim,
                config.temporal_layers,
                config.temporal_heads,
            ),
        )?;
        b.scope("fusion", Stage::Fusion);
        let fusion = Fusion::new(
            &mut b,
            config.fusion,
            n,
            (config.spatial_dim, config.spatial_heads),
            (config.temporal_dim, config.temporal_heads),
        )?;
        b.scope("aggregation", Stage::Aggregation);
        let aggregator = match config.aggregation {
            Aggregation::Mean => Aggregator::Mean,
            Aggregation::Causal => Aggregator::Causal(EncoderBlock::new(
                &mut b,
                "block",
                config.unit_dim(),
                config.spatial_heads,
            )?),
        };
        b.scope("", Stage::Head);
        let head = Linear::new(&mut b, "head", config.unit_dim(), config.num_classes, true);
        Ok(Moose {
            config,
            store,
            spatial,
            temporal,
            fusion,
            aggregator,
            head,
        })
    }

    /// Computes flow and patch rows for a clip.
    pub fn prepare(&self, clip: &VideoClip) -> Result<PreparedClip> {
        let cfg = &self.config;
        let expected = [cfg.frames + 1, cfg.channels, cfg.height, cfg.width];
        if clip.frames.shape() != expected {
            return Err(MooseError::shape("clip", clip.frames.shape(), &expected));
        }
        if clip.label >= cfg.num_classes {
            return Err(MooseError::invalid(format!(
                "label {} out of range for {} classes",
                clip.label, cfg.num_classes
            )));
        }
        let mut spatial = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            spatial.push(patchify(&clip.frames.slab(t)?, cfg.patch)?);
        }
        let flow = if cfg.zero_flow {
            Tensor::zeros(&[cfg.frames, 2, cfg.height, cfg.width])
        } else {
            standardize(&frames_flow(&clip.frames, &cfg.flow)?)
        };
        let mut temporal = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            temporal.push(patchify(&flow.slab(t)?, cfg.patch)?);
        }
        let n = cfg.num_patches();
        let flatten = |parts: Vec<Tensor>| -> Result<Tensor> {
            let cols = parts[0].shape()[1];
            Tensor::stack(&parts)?.reshape(&[cfg.frames * n, cols])
        };
        Ok(PreparedClip {
            spatial: flatten(spatial)?,
            temporal: flatten(temporal)?,
            label: clip.label,
        })
    }

    fn stack_inputs(&self, clips: &[&PreparedClip]) -> Result<(Tensor, Tensor)> {
        if clips.is_empty() {
            return Err(MooseError::invalid("empty batch"));
        }
        let rows = self.config.frames * self.config.num_patches();
        let join = |pick: fn(&PreparedClip) -> &Tensor| -> Result<Tensor> {
            let cols = pick(clips[0]).shape()[1];
            let mut data = Vec::with_capacity(clips.len() * rows * cols);
            for c in clips {
                let t = pick(c);
                if t.shape() != [rows, cols] {
                    return Err(MooseError::shape("prepared clip", t.shape(), &[rows, cols]));
                }
                data.extend_from_slice(t.data());
            }
            Tensor::new(&[clips.len() * rows, cols], data)
        };
        Ok((join(|c| &c.spatial)?, join(|c| &c.temporal)?))
    }

    /// Logits `[B × K]` for a batch of prepared clips.
    pub fn forward(&self, ctx: &mut Ctx<'_>, clips: &[&PreparedClip]) -> Result<Var> {
        let (sp, tp) = self.stack_inputs(clips)?;
        let s = self.spatial.forward_from(ctx, 0, &sp, None, None)?;
        let f = self.temporal.forward_from(ctx, 0, &tp, None, None)?;
        let units = self.fusion.forward(ctx, &s, &f)?;
        let clip = self.aggregator.forward(ctx, units, self.config.frames)?;
        self.head.forward(ctx, clip)
    }

    /// Unit embeddings `[T × D_unit]` of one clip.
    pub fn units(&self, ctx: &mut Ctx<'_>, clip: &PreparedClip) -> Result<Var> {
        let (sp, tp) = self.stack_inputs(&[clip])?;
        let s = self.spatial.forward_from(ctx, 0, &sp, None, None)?;
        let f = self.temporal.forward_from(ctx, 0, &tp, None, None)?;
        self.fusion.forward(ctx, &s, &f)
    }

    /// Mean cross-entropy of a batch.
    pub fn loss(&self, ctx: &mut Ctx<'_>, clips: &[&PreparedClip]) -> Result<(Var, Var)> {
        let logits = self.forward(ctx, clips)?;
        let k = self.config.num_classes;
        let mut total = None;
        for (i, c) in clips.iter().enumerate() {
            let row = ctx.tape.slice(logits, i, 1, 0, k)?;
            let l = ctx.tape.cross_entropy(row, c.label)?;
            total = Some(match total {
                None => l,
                Some(acc) => ctx.tape.add(acc, l)?,
            });
        }
        let total = total.expect("non-empty batch");
        Ok((ctx.tape.scale(total, 1.0 / clips.len() as f64), logits))
    }

    /// Logits for one clip without recording a graph worth keeping.
    pub fn predict(&self, clip: &PreparedClip) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.store);
        let logits = self.forward(&mut ctx, &[clip])?;
        Ok(ctx.tape.value(logits).clone())
    }

    /// Loss of one clip plus the value at every stage boundary.
    pub fn cache_stages(&self, clip: &PreparedClip) -> Result<(f64, StageCache)> {
        let mut ctx = Ctx::new(&self.store);
        let mut spatial = Vec::new();
        let mut temporal = Vec::new();
        let s = self
            .spatial
            .forward_from(&mut ctx, 0, &clip.spatial, None, Some(&mut spatial))?;
        let f =
            self.temporal
                .forward_from(&mut ctx, 0, &clip.temporal, None, Some(&mut temporal))?;
        let units = self.fusion.forward(&mut ctx, &s, &f)?;
        let agg = self
            .aggregator
            .forward(&mut ctx, units, self.config.frames)?;
        let loss = self.head_loss(&mut ctx, agg, clip.label)?;
        let cache = StageCache {
            spatial,
            temporal,
            units: ctx.tape.value(units).clone(),
            clip: ctx.tape.value(agg).clone(),
        };
        Ok((ctx.tape.value(loss).data()[0], cache))
    }

    fn head_loss(&self, ctx: &mut Ctx<'_>, clip: Var, label: usize) -> Result<Var> {
        let logits = self.head.forward(ctx, clip)?;
        ctx.tape.cross_entropy(logits, label)
    }

    /// Single-clip loss recomputed from `start` onward using `cache` for
    /// everything upstream. Parameters are read from `store`, which must
    /// share this model's layout.
    pub fn loss_from(
        &self,
        store: &ParamStore,
        clip: &PreparedClip,
        cache: &StageCache,
        start: Stage,
    ) -> Result<f64> {
        let mut ctx = Ctx::new(store);
        let ctx = &mut ctx;
        let seq_len = self.config.seq_len();
        let restore = |ctx: &mut Ctx<'_>, t: &Tensor, pathway| TokenSequence {
            tokens: ctx.tape.constant(t.clone()),
            seq_len,
            pathway,
        };
        let last = |v: &[Tensor]| {
            v.last()
                .cloned()
                .ok_or_else(|| MooseError::invalid("empty stage cache"))
        };
        let agg_in = match start {
            Stage::Spatial(k) | Stage::Temporal(k) => {
                let (s, f) = if let Stage::Spatial(_) = start {
                    let s = self.spatial.forward_from(
                        ctx,
                        k,
                        &clip.spatial,
                        k.checked_sub(1).map(|i| &cache.spatial[i]),
                        None,
                    )?;
                    (s, restore(ctx, &last(&cache.temporal)?, Pathway::Temporal))
                } else {
                    let f = self.temporal.forward_from(
                        ctx,
                        k,
                        &clip.temporal,
                        k.checked_sub(1).map(|i| &cache.temporal[i]),
                        None,
                    )?;
                    (restore(ctx, &last(&cache.spatial)?, Pathway::Spatial), f)
                };
                Some(self.fusion.forward(ctx, &s, &f)?)
            }
            Stage::Fusion => {
                let s = restore(ctx, &last(&cache.spatial)?, Pathway::Spatial);
                let f = restore(ctx, &last(&cache.temporal)?, Pathway::Temporal);
                Some(self.fusion.forward(ctx, &s, &f)?)
            }
            Stage::Aggregation => Some(ctx.tape.constant(cache.units.clone())),
            Stage::Head => None,
        };
        let clip_embedding = match agg_in {
            Some(units) => self.aggregator.forward(ctx, units, self.config.frames)?,
            None => ctx.tape.constant(cache.clip.clone()),
        };
        let loss = self.head_loss(ctx, clip_embedding, clip.label)?;
        Ok(ctx.tape.value(loss).data()[0])
    }

    /// Writes every parameter as `<name>.mtsr` plus `config.cfg` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.cfg"), self.config.to_lines())?;
        for e in self.store.entries() {
            write_tensor(dir.join(format!("{}.mtsr", e.name)), &e.tensor)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("config.cfg"))?;
        let mut config = MooseConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| MooseError::Config { line: n + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            if !config
                .set(k.trim(), v.trim())
                .map_err(|e| err(e.to_string()))?
            {
                return Err(err(format!("unknown key `{}`", k.trim())));
            }
        }
        let mut model = Moose::new(config)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.entry(id).name.clone();
            let t = read_tensor(dir.join(format!("{name}.mtsr")))?;
            let slot = model.store.tensor_mut(id);
            if t.shape() != slot.shape() {
                return Err(MooseError::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: format!("checkpoint tensor `{name}` should be {:?}", slot.shape()),
                });
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, MotionClass, SyntheticSpec};

    fn tiny() -> MooseConfig {
        MooseConfig {
            frames: 2,
            width: 16,
            height: 16,
            patch: 8,
            spatial_dim: 8,
            spatial_layers: 1,
            spatial_heads: 2,
            temporal_dim: 4,
            temporal_layers: 1,
            temporal_heads: 2,
            flow: FlowParams {
                alpha: 1.0,
                iterations: 10,
            },
            ..MooseConfig::default()
        }
    }

    fn clip(cfg: &MooseConfig) -> VideoClip {
        let spec = SyntheticSpec {
            frames: cfg.frames,
            width: cfg.width,
            height: cfg.height,
            blob_radius: 2.0,
            ..SyntheticSpec::default()
        };
        VideoClip {
            id: "c".into(),
            label: 1,
            class: MotionClass::MoveLeft,
            frames: synthetic::render_clip(&spec, MotionClass::MoveLeft, 3).unwrap(),
            frame_interval: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(MooseConfig::default().validate().is_ok());
        let mut c = tiny();
        c.width = 10;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.temporal_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_lines_roundtrip() {
        let mut c = tiny();
        c.fusion = FusionMode::VisualPrior;
        c.aggregation = Aggregation::Mean;
        c.flow.alpha = 0.1 + 0.2;
        let mut back = MooseConfig::default();
        for line in c.to_lines().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k.trim(), v.trim()).unwrap());
        }
        assert_eq!(back, c);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let cfg = tiny();
        let m = Moose::new(cfg.clone()).unwrap();
        let p = m.prepare(&clip(&cfg)).unwrap();
        let a = m.predict(&p).unwrap();
        assert_eq!(a.shape(), &[1, 4]);
        let m2 = Moose::new(cfg).unwrap();
        assert!(a.bitwise_eq(&m2.predict(&p).unwrap()));
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let cfg = tiny();
        let mut m = Moose::new(cfg.clone()).unwrap();
        let w = m.head.weight;
        m.store.tensor_mut(w).data_mut().fill(0.0);
        let p = m.prepare(&clip(&cfg)).unwrap();
        assert!(m.predict(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn params_closed_form_matches_registry() {
        for fusion in FusionMode::ALL {
            for aggregation in [Aggregation::Mean, Aggregation::Causal] {
                let cfg = MooseConfig {
                    fusion,
                    aggregation,
                    ..tiny()
                };
                let m = Moose::new(cfg.clone()).unwrap();
                assert_eq!(count_params(&cfg), m.store.num_scalars());
            }
        }
    }

    #[test]
    fn staged_loss_matches_full_loss() {
        let cfg = tiny();
        let m = Moose::new(cfg.clone()).unwrap();
        let p = m.prepare(&clip(&cfg)).unwrap();
        let (loss, cache) = m.cache_stages(&p).unwrap();
        let mut ctx = Ctx::new(&m.store);
        let (l, _) = m.loss(&mut ctx, &[&p]).unwrap();
        assert_eq!(ctx.tape.value(l).data()[0], loss);
        let stages = [
            Stage::Spatial(0),
            Stage::Spatial(1),
            Stage::Spatial(2),
            Stage::Temporal(0),
            Stage::Temporal(2),
            Stage::Fusion,
            Stage::Aggregation,
            Stage::Head,
        ];
        for s in stages {
            let r = m.loss_from(&m.store, &p, &cache, s).unwrap();
            assert!((r - loss).abs() < 1e-12, "{s:?}: {r} vs {loss}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = tiny();
        let m = Moose::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Moose::load(dir.path()).unwrap();
        assert_eq!(back.config, cfg);
        for (a, b) in m.store.entries().iter().zip(back.store.entries()) {
            assert!(a.tensor.bitwise_eq(&b.tensor), "{}", a.name);
        }
    }
}
