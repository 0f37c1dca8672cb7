//! End-to-end video and image encoding.

use crate::compression::{merge_tokens, sweep_thresholds, MergeMode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ifa::{aggregate, aggregate_on, encode_image_set, AggregateOptions, TokenSequence};
use crate::ive::{encode_chunk, encode_chunks, encode_on};
use crate::media::{accelerate_playback, partition_chunks, Chunk, VideoTensor};
use crate::numerics::{Tape, Tensor, Var};
use crate::projector::{project, project_on, ProjectedTokens};
use crate::resolution::{
    dynamic_resize, resample_bilinear, split_tiles, subimage_grid, ResizePlan,
};
use crate::weights::{EncoderWeights, Params};

/// Resize plan used by the encoder. Targets are whole multiples of `2P`
/// so that the patch grid pools without remainder.
pub fn pipeline_plan(width: usize, height: usize, cfg: &ModelConfig) -> Result<ResizePlan> {
    dynamic_resize(width, height, cfg.base_resolution, 2 * cfg.patch_size)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Compression {
    Threshold(f64),
    TargetRatio(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoOptions {
    /// Chunk budget for accelerated playback.
    pub max_chunks: Option<usize>,
    pub compression: Option<Compression>,
    pub merge_mode: MergeMode,
    pub aggregate: AggregateOptions,
}

impl VideoOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            max_chunks: None,
            compression: None,
            merge_mode: MergeMode::default(),
            aggregate: AggregateOptions::from(cfg),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEncoding {
    pub tokens: ProjectedTokens,
    pub chunks: usize,
    /// Fraction of tokens removed by compression.
    pub compression_ratio: f64,
    pub threshold: Option<f64>,
}

/// Accelerates (if budgeted), rescales and partitions a video.
pub fn prepare_video(
    video: &VideoTensor,
    cfg: &ModelConfig,
    max_chunks: Option<usize>,
) -> Result<Vec<Chunk>> {
    let video = match max_chunks {
        Some(budget) => accelerate_playback(video, budget, cfg.frames_per_chunk)?,
        None => video.clone(),
    };
    let (h, w) = video.frame_size();
    let plan = pipeline_plan(w, h, cfg)?;
    let resized = if (plan.target_w, plan.target_h) == (w, h) {
        video
    } else {
        video.map_frames(plan.target_h, plan.target_w, |f| {
            resample_bilinear(f, w, h, plan.target_w, plan.target_h)
        })?
    };
    partition_chunks(&resized, cfg.frames_per_chunk)
}

/// Encodes chunks, optionally compresses, aggregates and projects.
pub fn encode_prepared(
    chunks: &[Chunk],
    weights: &EncoderWeights,
    opts: &VideoOptions,
) -> Result<VideoEncoding> {
    let maps = encode_chunks(chunks, weights)?;
    let seq = TokenSequence::from_feature_maps(&maps)?;
    let (seq, compression_ratio, threshold) = match opts.compression {
        None => (seq, 0.0, None),
        Some(Compression::Threshold(t)) => {
            let merged = merge_tokens(&seq, t, opts.merge_mode)?;
            (merged.sequence, merged.ratio, Some(t))
        }
        Some(Compression::TargetRatio(r)) => {
            let row = sweep_thresholds(&seq, &[r], opts.merge_mode)?.remove(0);
            let t = row.threshold.ok_or_else(|| {
                Error::Config(format!(
                    "reduction ratio {r} is unreachable (closest {:.3})",
                    row.achieved
                ))
            })?;
            let merged = merge_tokens(&seq, t, opts.merge_mode)?;
            (merged.sequence, merged.ratio, Some(t))
        }
    };
    let aggregated = aggregate(&seq, weights, &opts.aggregate)?;
    Ok(VideoEncoding {
        tokens: project(&aggregated, weights)?,
        chunks: chunks.len(),
        compression_ratio,
        threshold,
    })
}

pub fn encode_video(
    video: &VideoTensor,
    weights: &EncoderWeights,
    opts: &VideoOptions,
) -> Result<VideoEncoding> {
    let chunks = prepare_video(video, &weights.config, opts.max_chunks)?;
    encode_prepared(&chunks, weights, opts)
}

/// Whole pipeline on one tape, for gradient checks. Returns the projected
/// tokens and their chunk ids.
pub fn pipeline_on(
    tape: &mut Tape,
    vars: &Params<Var>,
    cfg: &ModelConfig,
    opts: &AggregateOptions,
    chunks: &[Chunk],
) -> Result<(Var, Vec<usize>)> {
    let mut parts = Vec::with_capacity(chunks.len());
    let mut ids = Vec::new();
    for chunk in chunks {
        let (x, rows, cols) = encode_on(tape, vars, cfg, &chunk.frames)?;
        parts.push(x);
        ids.extend(std::iter::repeat_n(chunk.chunk_id, rows * cols));
    }
    if parts.is_empty() {
        return Err(Error::EmptyInput("no chunks to encode"));
    }
    let seq = tape.concat_rows(parts)?;
    let aggregated = aggregate_on(tape, vars, cfg, opts, seq, &ids)?;
    Ok((project_on(tape, vars, aggregated)?, ids))
}

/// An RGB image, `[H, W, 3]` row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

impl Image {
    pub fn new(pixels: Vec<f64>, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            width,
            height,
        })
    }

    pub fn resized(&self, width: usize, height: usize) -> Self {
        Self {
            pixels: resample_bilinear(&self.pixels, self.width, self.height, width, height),
            width,
            height,
        }
    }

    /// The image repeated over a whole chunk.
    pub fn as_chunk(&self, frames: usize, chunk_id: usize) -> Result<Chunk> {
        let mut data = Vec::with_capacity(frames * self.pixels.len());
        for _ in 0..frames {
            data.extend_from_slice(&self.pixels);
        }
        Ok(Chunk {
            frames: Tensor::new([frames, self.height, self.width, 3], data)?,
            chunk_id,
            first_timestamp: 0.0,
        })
    }
}

/// Thumbnail followed by the row-major sub-images, each rescaled with the
/// encoder's plan. A `1×1` grid contributes only the thumbnail since the
/// single tile would repeat it.
pub fn image_views(image: &Image, cfg: &ModelConfig) -> Result<Vec<Image>> {
    let fit = |img: &Image| -> Result<Image> {
        let plan = pipeline_plan(img.width, img.height, cfg)?;
        Ok(img.resized(plan.target_w, plan.target_h))
    };
    let mut views = vec![fit(image)?];
    let grid = subimage_grid(image.width, image.height, cfg.base_resolution)?;
    if grid.tiles() > 1 {
        for (pixels, w, h) in split_tiles(&image.pixels, image.width, image.height, grid) {
            views.push(fit(&Image::new(pixels, w, h)?)?);
        }
    }
    Ok(views)
}

/// Encodes an image as independent views. `replication_id` is the chunk
/// id given to every view.
pub fn encode_image(
    image: &Image,
    weights: &EncoderWeights,
    opts: &AggregateOptions,
    replication_id: usize,
) -> Result<Vec<ProjectedTokens>> {
    let cfg = &weights.config;
    let maps = image_views(image, cfg)?
        .iter()
        .map(|v| encode_chunk(&v.as_chunk(cfg.frames_per_chunk, replication_id)?, weights))
        .collect::<Result<Vec<_>>>()?;
    let ids = vec![replication_id; maps.len()];
    encode_image_set(&maps, weights, opts, &ids)?
        .iter()
        .map(|seq| project(seq, weights))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{synth_video, Pattern};

    #[test]
    fn plan_is_pool_aligned() {
        let cfg = ModelConfig::desk();
        let p = pipeline_plan(1000, 700, &cfg).unwrap();
        assert_eq!((p.target_w % 32, p.target_h % 32), (0, 0));
        assert_eq!(pipeline_plan(384, 384, &cfg).unwrap().grid(16), (24, 24));
    }

    #[test]
    fn wide_image_yields_three_views() {
        let cfg = ModelConfig::desk();
        let img = Image::new(vec![0.5; 768 * 384 * 3], 768, 384).unwrap();
        assert_eq!(image_views(&img, &cfg).unwrap().len(), 3);
    }

    #[test]
    fn video_round_trip_shapes() {
        let cfg = ModelConfig::tiny();
        let w = EncoderWeights::init(cfg.clone(), 0).unwrap();
        let v = synth_video(&Pattern::UniqueNoise { seed: 1 }, 5, 64, 64, 2.0).unwrap();
        let enc = encode_video(&v, &w, &VideoOptions::from_config(&cfg)).unwrap();
        assert_eq!(enc.chunks, 3);
        assert_eq!(enc.tokens.tokens.shape(), &[12, cfg.llm_dim]);
        assert_eq!(
            enc.tokens.chunk_ids,
            vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]
        );
    }
}
