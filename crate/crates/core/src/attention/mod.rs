//! Masked multi-head attention and pre-norm transformer blocks.
//!
//! All forwards work on row-stacked batches: a `[B·S × D]` matrix holds `B`
//! sequences of `S` tokens each, and attention never mixes sequences.

mod mask;

pub use mask::{build_arrow_mask, build_causal_mask, AttentionMask};

use crate::error::{MooseError, Result};
use crate::params::{AttentionRecord, Ctx, LayerNorm, Linear, ParamBuilder};
use crate::tensor::Var;

/// Tags attention weights captured while tracing.
#[derive(Clone, Copy, Debug)]
pub struct RecordTag<'a> {
    pub purpose: &'a str,
    pub layer: usize,
}

/// Multi-head attention whose queries and keys may come from different
/// modalities. The model width is the query width.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || query_dim % heads != 0 {
            return Err(MooseError::invalid(format!(
                "{heads} heads do not divide width {query_dim}"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(b, &format!("{name}.q"), query_dim, query_dim, true),
            k: Linear::new(b, &format!("{name}.k"), key_dim, query_dim, true),
            v: Linear::new(b, &format!("{name}.v"), key_dim, query_dim, true),
            o: Linear::new(b, &format!("{name}.o"), query_dim, query_dim, true),
            heads,
            dim: query_dim,
        })
    }

    pub fn num_params(query_dim: usize, key_dim: usize) -> usize {
        2 * Linear::num_params(query_dim, query_dim, true)
            + 2 * Linear::num_params(key_dim, query_dim, true)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Attends `seq_q`-token query sequences to `seq_k`-token key sequences.
    /// Per head: `softmax(Q Kᵀ / sqrt(d_k), mask) V`; heads are concatenated
    /// and passed through the output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        queries: Var,
        keys: Var,
        seq_q: usize,
        seq_k: usize,
        mask: Option<&AttentionMask>,
        record: Option<RecordTag<'_>>,
    ) -> Result<Var> {
        let (rq, _) = ctx.tape.value(queries).dims2()?;
        let (rk, _) = ctx.tape.value(keys).dims2()?;
        if seq_q == 0
            || seq_k == 0
            || rq % seq_q != 0
            || rk % seq_k != 0
            || rq / seq_q != rk / seq_k
        {
            return Err(MooseError::shape(
                "attention batch",
                &[rq, seq_q],
                &[rk, seq_k],
            ));
        }
        if let Some(m) = mask {
            if m.rows() != seq_q || m.cols() != seq_k {
                return Err(MooseError::shape(
                    "attention mask",
                    &[seq_q, seq_k],
                    &[m.rows(), m.cols()],
                ));
            }
        }
        let batch = rq / seq_q;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        let q = self.q.forward(ctx, queries)?;
        let k = self.k.forward(ctx, keys)?;
        let v = self.v.forward(ctx, keys)?;
        let kt = ctx.tape.transpose(k)?;

        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = ctx.tape.slice(q, b * seq_q, seq_q, h * dk, dk)?;
                let kh = ctx.tape.slice(kt, h * dk, dk, b * seq_k, seq_k)?;
                let logits = ctx.tape.matmul(qh, kh)?;
                let logits = ctx.tape.scale(logits, scale);
                let weights = ctx.tape.softmax(logits, mask)?;
                if let (Some(tag), true) = (record, ctx.is_tracing()) {
                    let w = ctx.tape.value(weights).clone();
                    ctx.record(AttentionRecord {
                        purpose: tag.purpose.to_string(),
                        layer: tag.layer,
                        head: h,
                        sequence: b,
                        weights: w,
                    });
                }
                let vh = ctx.tape.slice(v, b * seq_k, seq_k, h * dk, dk)?;
                heads.push(ctx.tape.matmul(weights, vh)?);
            }
            rows.push(if heads.len() == 1 {
                heads[0]
            } else {
                ctx.tape.concat_cols(&heads)?
            });
        }
        let merged = if rows.len() == 1 {
            rows[0]
        } else {
            ctx.tape.concat_rows(&rows)?
        };
        self.o.forward(ctx, merged)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `+ MLP(LN(·))` with a
/// `4·D` GELU hidden layer.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

pub const MLP_RATIO: usize = 4;

impl EncoderBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim),
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, MLP_RATIO * dim, true),
            fc2: Linear::new(b, &format!("{name}.fc2"), MLP_RATIO * dim, dim, true),
            dim,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        4 * dim
            + MultiHeadAttention::num_params(dim, dim)
            + Linear::num_params(dim, MLP_RATIO * dim, true)
            + Linear::num_params(MLP_RATIO * dim, dim, true)
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        x: Var,
        seq_len: usize,
        mask: Option<&AttentionMask>,
        record: Option<RecordTag<'_>>,
    ) -> Result<Var> {
        let (_, d) = ctx.tape.value(x).dims2()?;
        if d != self.dim {
            return Err(MooseError::shape("encoder block", &[d], &[self.dim]));
        }
        let h = self.ln1.forward(ctx, x)?;
        let a = self
            .attn
            .forward(ctx, h, h, seq_len, seq_len, mask, record)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.tape.gelu(h);
        let m = self.fc2.forward(ctx, h)?;
        ctx.tape.add(x, m)
    }
}
