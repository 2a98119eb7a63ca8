//! Non-overlapping patch extraction and token embedding for both pathways.
//!
//! Images and flow fields are `[C × H × W]` row-major tensors. Patches are
//! numbered left-to-right, then top-to-bottom, and flattened channel-major,
//! so an appearance patch and a flow patch with the same index always cover
//! the same pixel rectangle.

use crate::error::{MooseError, Result};
use crate::params::{Ctx, ParamBuilder, ParamId, INIT_STD};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch: usize) -> Result<Self> {
        if patch == 0 || width % patch != 0 || height % patch != 0 {
            return Err(MooseError::invalid(format!(
                "frame {width}x{height} (W x H) is not divisible by patch size {patch}"
            )));
        }
        Ok(PatchGrid {
            patch,
            grid_w: width / patch,
            grid_h: height / patch,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.patch
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) of patch `i`.
    pub fn rect(&self, i: usize) -> (usize, usize, usize, usize) {
        let (px, py) = (i % self.grid_w, i / self.grid_w);
        let p = self.patch;
        (px * p, py * p, (px + 1) * p, (py + 1) * p)
    }

    /// Patch containing pixel `(x, y)`.
    pub fn patch_of(&self, x: usize, y: usize) -> usize {
        (y / self.patch) * self.grid_w + x / self.patch
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(MooseError::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a [C x H x W] image".into(),
        }),
    }
}

/// Splits `[C × H × W]` into `[N × (C·P·P)]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let grid = PatchGrid::new(w, h, patch)?;
    let n = grid.num_patches();
    let cols = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(n * cols);
    for i in 0..n {
        let (x0, y0, _, _) = grid.rect(i);
        for ch in 0..c {
            for dy in 0..patch {
                let start = ch * h * w + (y0 + dy) * w + x0;
                out.extend_from_slice(&src[start..start + patch]);
            }
        }
    }
    Tensor::new(&[n, cols], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, grid: PatchGrid, channels: usize) -> Result<Tensor> {
    let (n, cols) = patches.dims2()?;
    let p = grid.patch;
    if n != grid.num_patches() || cols != channels * p * p {
        return Err(MooseError::shape(
            "unpatchify",
            patches.shape(),
            &[grid.num_patches(), channels * p * p],
        ));
    }
    let (w, h) = (grid.width(), grid.height());
    let mut out = vec![0.0; channels * h * w];
    for i in 0..n {
        let (x0, y0, _, _) = grid.rect(i);
        let row = patches.row(i);
        for ch in 0..channels {
            for dy in 0..p {
                let dst = ch * h * w + (y0 + dy) * w + x0;
                let src = (ch * p + dy) * p;
                out[dst..dst + p].copy_from_slice(&row[src..src + p]);
            }
        }
    }
    Tensor::new(&[channels, h, w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    Spatial,
    Temporal,
}

/// Row-stacked token sequences: `batch` sequences of `seq_len = N + 1`
/// tokens, each starting with its cls token.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub seq_len: usize,
    pub pathway: Pathway,
}

impl TokenSequence {
    pub fn batch(&self, ctx: &Ctx<'_>) -> usize {
        ctx.tape.value(self.tokens).numel() / (self.seq_len * self.dim(ctx))
    }

    pub fn dim(&self, ctx: &Ctx<'_>) -> usize {
        *ctx.tape.shape(self.tokens).last().unwrap_or(&0)
    }

    /// Row indices of the cls tokens.
    pub fn cls_rows(&self, ctx: &Ctx<'_>) -> Vec<usize> {
        (0..self.batch(ctx)).map(|b| b * self.seq_len).collect()
    }
}

/// Linear patch projection, learned positional table and cls seed.
#[derive(Clone, Debug)]
pub struct PatchEmbedder {
    /// `[C·P·P × D]`, no bias.
    pub projection: ParamId,
    /// `[(N+1) × D]`.
    pub positions: ParamId,
    /// `[D]`, zero-initialised.
    pub cls: ParamId,
    pub patch_dim: usize,
    pub num_patches: usize,
    pub dim: usize,
}

impl PatchEmbedder {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        patch_dim: usize,
        num_patches: usize,
        dim: usize,
    ) -> Self {
        PatchEmbedder {
            projection: b.normal(
                &format!("{name}.projection"),
                &[patch_dim, dim],
                INIT_STD,
                true,
            ),
            positions: b.normal(
                &format!("{name}.positions"),
                &[num_patches + 1, dim],
                INIT_STD,
                false,
            ),
            cls: b.constant(&format!("{name}.cls"), &[dim], 0.0, false),
            patch_dim,
            num_patches,
            dim,
        }
    }

    pub fn num_params(patch_dim: usize, num_patches: usize, dim: usize) -> usize {
        patch_dim * dim + (num_patches + 1) * dim + dim
    }

    /// Embeds `[B·N × C·P·P]` patch rows (B images stacked) into `B` token
    /// sequences: row 0 = cls + pos[0], row i+1 = patch_i·E + pos[i+1].
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        patches: &Tensor,
        pathway: Pathway,
    ) -> Result<TokenSequence> {
        let (rows, cols) = patches.dims2()?;
        let n = self.num_patches;
        if cols != self.patch_dim || rows % n != 0 {
            return Err(MooseError::shape(
                "embed",
                patches.shape(),
                &[n, self.patch_dim],
            ));
        }
        let batch = rows / n;
        let seq = n + 1;
        // Zero rows at the cls slots keep one matmul for the whole batch.
        let mut ext = vec![0.0; batch * seq * cols];
        for b in 0..batch {
            let src = &patches.data()[b * n * cols..(b + 1) * n * cols];
            ext[(b * seq + 1) * cols..(b + 1) * seq * cols].copy_from_slice(src);
        }
        let ext = ctx.tape.constant(Tensor::new(&[batch * seq, cols], ext)?);
        let e = ctx.param(self.projection);
        let projected = ctx.tape.matmul(ext, e)?;

        let cls = ctx.param(self.cls);
        let cls = ctx.tape.reshape(cls, &[1, self.dim])?;
        let pad = ctx.tape.constant(Tensor::zeros(&[n, self.dim]));
        let cls_rows = ctx.tape.concat_rows(&[cls, pad])?;
        let pos = ctx.param(self.positions);
        let table = ctx.tape.add(pos, cls_rows)?;
        let tokens = ctx.tape.add_tiled(projected, table)?;
        Ok(TokenSequence {
            tokens,
            seq_len: seq,
            pathway,
        })
    }
}
