//! Cross-attention fusion of the spatial and temporal pathways into one
//! unit embedding per frame.

use std::fmt;
use std::str::FromStr;

use crate::attention::{build_arrow_mask, AttentionMask, MultiHeadAttention, RecordTag};
use crate::error::{MooseError, Result};
use crate::params::{Ctx, Linear, ParamBuilder};
use crate::patching::TokenSequence;
use crate::tensor::Var;

/// Trace purpose for spatial-query attention (keys from the flow pathway).
pub const FLOW_PRIOR_TAG: &str = "flow_prior";
/// Trace purpose for flow-query attention (keys from the spatial pathway).
pub const VISUAL_PRIOR_TAG: &str = "visual_prior";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    FlowPrior,
    VisualPrior,
    Bidirectional,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [
        FusionMode::FlowPrior,
        FusionMode::VisualPrior,
        FusionMode::Bidirectional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::FlowPrior => "flow_prior",
            FusionMode::VisualPrior => "visual_prior",
            FusionMode::Bidirectional => "bidirectional",
        }
    }

    /// Width of the unit embedding for pathway widths `ds`, `df`.
    pub fn unit_dim(self, ds: usize, df: usize) -> usize {
        match self {
            FusionMode::FlowPrior | FusionMode::VisualPrior => ds,
            FusionMode::Bidirectional => ds + df,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = MooseError;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                MooseError::invalid(format!(
                    "unknown fusion `{s}` (flow_prior|visual_prior|bidirectional)"
                ))
            })
    }
}

/// `e_s + Attn(Q = e_s, K = V = e_f)` under the arrow mask.
#[derive(Clone, Debug)]
pub struct FlowPriorBranch {
    pub attn: MultiHeadAttention,
}

/// `e_f + Attn(Q = e_f, K = V = e_s)` under the transposed arrow mask.
#[derive(Clone, Debug)]
pub struct VisualPriorBranch {
    pub attn: MultiHeadAttention,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub mode: FusionMode,
    pub flow_prior: Option<FlowPriorBranch>,
    pub visual_prior: Option<VisualPriorBranch>,
    /// `D_f → D_s`, only for [`FusionMode::VisualPrior`].
    pub projection: Option<Linear>,
    mask: AttentionMask,
    mask_t: AttentionMask,
    pub spatial_dim: usize,
    pub temporal_dim: usize,
}

impl Fusion {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        mode: FusionMode,
        num_patches: usize,
        (spatial_dim, spatial_heads): (usize, usize),
        (temporal_dim, temporal_heads): (usize, usize),
    ) -> Result<Self> {
        let mask = build_arrow_mask(num_patches)?;
        let mask_t = mask.transposed();
        let flow_prior = matches!(mode, FusionMode::FlowPrior | FusionMode::Bidirectional)
            .then(|| {
                MultiHeadAttention::new(b, "flow_prior", spatial_dim, temporal_dim, spatial_heads)
                    .map(|attn| FlowPriorBranch { attn })
            })
            .transpose()?;
        let visual_prior = matches!(mode, FusionMode::VisualPrior | FusionMode::Bidirectional)
            .then(|| {
                MultiHeadAttention::new(
                    b,
                    "visual_prior",
                    temporal_dim,
                    spatial_dim,
                    temporal_heads,
                )
                .map(|attn| VisualPriorBranch { attn })
            })
            .transpose()?;
        let projection = (mode == FusionMode::VisualPrior)
            .then(|| Linear::new(b, "projection", temporal_dim, spatial_dim, true));
        Ok(Fusion {
            mode,
            flow_prior,
            visual_prior,
            projection,
            mask,
            mask_t,
            spatial_dim,
            temporal_dim,
        })
    }

    pub fn num_params(mode: FusionMode, ds: usize, df: usize) -> usize {
        let fp = MultiHeadAttention::num_params(ds, df);
        let vp = MultiHeadAttention::num_params(df, ds);
        match mode {
            FusionMode::FlowPrior => fp,
            FusionMode::VisualPrior => vp + Linear::num_params(df, ds, true),
            FusionMode::Bidirectional => fp + vp,
        }
    }

    pub fn unit_dim(&self) -> usize {
        self.mode.unit_dim(self.spatial_dim, self.temporal_dim)
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    fn check(
        &self,
        ctx: &Ctx<'_>,
        spatial: &TokenSequence,
        temporal: &TokenSequence,
    ) -> Result<()> {
        let (rs, ds) = ctx.tape.value(spatial.tokens).dims2()?;
        let (rf, df) = ctx.tape.value(temporal.tokens).dims2()?;
        if spatial.seq_len != self.mask.rows() || temporal.seq_len != self.mask.cols() || rs != rf {
            return Err(MooseError::shape(
                "fusion tokens",
                &[rs, spatial.seq_len],
                &[rf, temporal.seq_len],
            ));
        }
        if ds != self.spatial_dim || df != self.temporal_dim {
            return Err(MooseError::shape(
                "fusion widths",
                &[ds, df],
                &[self.spatial_dim, self.temporal_dim],
            ));
        }
        Ok(())
    }

    /// Fused cls rows, `[B × D_s]`, of the spatial-query direction.
    pub fn flow_prior_cls(
        &self,
        ctx: &mut Ctx<'_>,
        spatial: &TokenSequence,
        temporal: &TokenSequence,
    ) -> Result<Var> {
        let branch = self
            .flow_prior
            .as_ref()
            .ok_or_else(|| MooseError::invalid("fusion has no flow-prior branch"))?;
        let seq = spatial.seq_len;
        let a = branch.attn.forward(
            ctx,
            spatial.tokens,
            temporal.tokens,
            seq,
            seq,
            Some(&self.mask),
            Some(RecordTag {
                purpose: FLOW_PRIOR_TAG,
                layer: 0,
            }),
        )?;
        let fused = ctx.tape.add(spatial.tokens, a)?;
        let cls = spatial.cls_rows(ctx);
        ctx.tape.gather_rows(fused, &cls)
    }

    /// Fused cls rows, `[B × D_f]`, of the flow-query direction, before any
    /// projection.
    pub fn visual_prior_cls(
        &self,
        ctx: &mut Ctx<'_>,
        spatial: &TokenSequence,
        temporal: &TokenSequence,
    ) -> Result<Var> {
        let branch = self
            .visual_prior
            .as_ref()
            .ok_or_else(|| MooseError::invalid("fusion has no visual-prior branch"))?;
        let seq = temporal.seq_len;
        let a = branch.attn.forward(
            ctx,
            temporal.tokens,
            spatial.tokens,
            seq,
            seq,
            Some(&self.mask_t),
            Some(RecordTag {
                purpose: VISUAL_PRIOR_TAG,
                layer: 0,
            }),
        )?;
        let fused = ctx.tape.add(temporal.tokens, a)?;
        let cls = temporal.cls_rows(ctx);
        ctx.tape.gather_rows(fused, &cls)
    }

    /// Unit embeddings `[B × unit_dim]`, one row per frame.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        spatial: &TokenSequence,
        temporal: &TokenSequence,
    ) -> Result<Var> {
        self.check(ctx, spatial, temporal)?;
        match self.mode {
            FusionMode::FlowPrior => self.flow_prior_cls(ctx, spatial, temporal),
            FusionMode::VisualPrior => {
                let cls = self.visual_prior_cls(ctx, spatial, temporal)?;
                self.projection
                    .as_ref()
                    .expect("visual prior projection")
                    .forward(ctx, cls)
            }
            FusionMode::Bidirectional => {
                let fp = self.flow_prior_cls(ctx, spatial, temporal)?;
                let vp = self.visual_prior_cls(ctx, spatial, temporal)?;
                ctx.tape.concat_cols(&[fp, vp])
            }
        }
    }
}
