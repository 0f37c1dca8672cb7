//! Intra-chunk vision encoder: temporal-depth patch embedding divided by
//! `F`, resized absolute position embedding, bidirectional ViT layers and
//! 2×2 pooling.

use std::sync::Arc;

use rayon::prelude::*;

use crate::config::{ModelConfig, PoolMode};
use crate::error::{Error, Result};
use crate::media::Chunk;
use crate::numerics::{patchify, RowMix, Tape, Tensor, Var};
use crate::resolution::pos_embed_plan;
use crate::transformer::{block, Attention};
use crate::weights::{EncoderWeights, Params};

/// Replicates a `[d, P, P, 3]` kernel `F` times along a new temporal axis.
pub fn init_from_2d(kernel2d: &Tensor, frames: usize) -> Result<Tensor> {
    let &[d, p, p2, c] = kernel2d.shape() else {
        return Err(Error::Shape(format!(
            "2D kernel must be [d, P, P, C], got {:?}",
            kernel2d.shape()
        )));
    };
    if frames == 0 {
        return Err(Error::Config("temporal depth must be positive".into()));
    }
    let slice = p * p2 * c;
    let mut data = Vec::with_capacity(d * frames * slice);
    for o in 0..d {
        let src = &kernel2d.data()[o * slice..(o + 1) * slice];
        for _ in 0..frames {
            data.extend_from_slice(src);
        }
    }
    Tensor::new([d, frames, p, p2, c], data)
}

/// Per-chunk token grid, row-major over patch rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tokens: Tensor,
    pub rows: usize,
    pub cols: usize,
    pub chunk_id: usize,
}

/// 2×2 pooling of a feature grid.
pub fn pool2x2(map: &FeatureMap, mode: PoolMode) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let x = tape.leaf(map.tokens.clone());
    let pooled = pool_on(&mut tape, x, map.rows, map.cols, mode)?;
    Ok(FeatureMap {
        tokens: tape.value(pooled).clone(),
        rows: map.rows / 2,
        cols: map.cols / 2,
        chunk_id: map.chunk_id,
    })
}

fn pool_on(tape: &mut Tape, x: Var, rows: usize, cols: usize, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Average => tape.row_mix(x, Arc::new(RowMix::avg_pool2x2(rows, cols)?)),
        PoolMode::Max => tape.max_pool2x2(x, rows, cols),
    }
}

fn check_chunk(frames: &Tensor, cfg: &ModelConfig) -> Result<(usize, usize)> {
    let &[f, h, w, 3] = frames.shape() else {
        return Err(Error::Shape(format!(
            "chunk must be [F, H, W, 3], got {:?}",
            frames.shape()
        )));
    };
    if f != cfg.frames_per_chunk {
        return Err(Error::Shape(format!(
            "chunk holds {f} frames, encoder expects {}",
            cfg.frames_per_chunk
        )));
    }
    let cell = 2 * cfg.patch_size;
    if h % cell != 0 || w % cell != 0 {
        return Err(Error::Shape(format!(
            "chunk extent {h}x{w} must be divisible by {cell} so the pooled grid is whole"
        )));
    }
    Ok((h / cfg.patch_size, w / cfg.patch_size))
}

/// Pre-ViT features `conv(C)/F + b + E` on `tape`. Returns the feature
/// variable and the patch grid `(rows, cols)`.
pub fn embed_on(
    tape: &mut Tape,
    vars: &Params<Var>,
    cfg: &ModelConfig,
    frames: &Tensor,
) -> Result<(Var, usize, usize)> {
    let (rows, cols) = check_chunk(frames, cfg)?;
    let d = cfg.vision_dim;
    let patches = tape.leaf(patchify(frames, cfg.patch_size)?);
    let depth = tape.shape(patches)[1];
    let kernel = tape.reshape(vars.conv_kernel, [d, depth])?;
    let kernel = tape.transpose(kernel)?;
    let conv = tape.matmul(patches, kernel)?;
    let conv = tape.scale(conv, 1.0 / cfg.frames_per_chunk as f64)?;
    let biased = tape.add_row(conv, vars.conv_bias)?;
    let side = cfg.pos_grid();
    let table = tape.reshape(vars.ape, [side * side, d])?;
    let pos = tape.row_mix(table, Arc::new(pos_embed_plan(side, cols, rows)?))?;
    Ok((tape.add(biased, pos)?, rows, cols))
}

/// Full chunk encoding on `tape`: embedding, ViT layers, pooling.
/// Returns pooled tokens and the pooled grid `(rows, cols)`.
pub fn encode_on(
    tape: &mut Tape,
    vars: &Params<Var>,
    cfg: &ModelConfig,
    frames: &Tensor,
) -> Result<(Var, usize, usize)> {
    let (mut x, rows, cols) = embed_on(tape, vars, cfg, frames)?;
    for layer in &vars.vit {
        x = block(tape, x, layer, cfg.vit_heads, &Attention::Full)?;
    }
    let pooled = pool_on(tape, x, rows, cols, cfg.pooling)?;
    Ok((pooled, rows / 2, cols / 2))
}

/// Pre-ViT patch features of a chunk: `conv3d(C)/F + bias + E(x, y)`.
pub fn embed_patches(frames: &Tensor, weights: &EncoderWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let (x, _, _) = embed_on(&mut tape, &vars, &weights.config, frames)?;
    Ok(tape.value(x).clone())
}

pub fn encode_chunk(chunk: &Chunk, weights: &EncoderWeights) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let (x, rows, cols) = encode_on(&mut tape, &vars, &weights.config, &chunk.frames)?;
    Ok(FeatureMap {
        tokens: tape.value(x).clone(),
        rows,
        cols,
        chunk_id: chunk.chunk_id,
    })
}

/// Encodes chunks independently (in parallel) and returns them in order.
pub fn encode_chunks(chunks: &[Chunk], weights: &EncoderWeights) -> Result<Vec<FeatureMap>> {
    chunks
        .par_iter()
        .map(|c| encode_chunk(c, weights))
        .collect()
}
