use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use serde::Serialize;
use serde_json::json;

use mgve_core::harness::{
    gradcheck_fixture, load_video, load_weights, niah_campaign, parse_synthetic,
    pipeline_grad_check, save_tokens, save_weights, synthetic_needles, token_budget, NiahSettings,
    VideoPool,
};
use mgve_core::numerics::GradCheckOptions;
use mgve_core::pipeline::{encode_prepared, pipeline_plan, prepare_video};
use mgve_core::resolution::ideal_subimages;
use mgve_core::{
    dynamic_resize, encode_image, subimage_grid, sweep_thresholds, AggregateOptions, Compression,
    EncoderWeights, Image, MergeMode, ModelConfig, ProjectedTokens, Tensor, TokenSequence,
    VideoOptions, VideoTensor,
};

use crate::{AggregateFlags, Cli, Command};

/// Gradient checks pass below this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn emit(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn read_config_file(cli: &Cli) -> Result<Option<String>> {
    cli.config
        .as_ref()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())))
        .transpose()
}

/// Preset, then config file.
fn model_config(cli: &Cli, default_preset: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(cli.preset.as_deref().unwrap_or(default_preset))?;
    if let Some(text) = read_config_file(cli)? {
        cfg.apply_kv(&text)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Aggregator options: weights config, then config file, then flags. The
/// config file may not change anything the stored tensors depend on.
fn runtime_options(
    cli: &Cli,
    weights: &EncoderWeights,
    flags: &AggregateFlags,
) -> Result<AggregateOptions> {
    let stored = &weights.config;
    let mut cfg = stored.clone();
    if let Some(text) = read_config_file(cli)? {
        cfg.apply_kv(&text)?;
    }
    let architecture = |c: &ModelConfig| {
        (
            c.frames_per_chunk,
            c.patch_size,
            c.base_resolution,
            c.vision_dim,
            c.vit_layers,
            c.vit_heads,
            c.inter_heads,
            c.llm_dim,
            c.mlp_ratio,
            c.pooling,
        )
    };
    ensure!(
        architecture(&cfg) == architecture(stored),
        "config file changes architecture fields fixed by the weights file"
    );
    let mut opts = AggregateOptions::from(&cfg);
    if let Some(mode) = &flags.rope {
        opts.rope_mode = mode.parse()?;
    }
    if let Some(layers) = flags.l_inter {
        opts.inter_layers = layers;
    }
    opts.attention_only |= flags.attention_only;
    Ok(opts)
}

fn read_video(spec: &str) -> Result<VideoTensor> {
    if spec.starts_with("synthetic:") {
        return Ok(parse_synthetic(spec)?);
    }
    load_video(spec).with_context(|| format!("loading video {spec}"))
}

fn read_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path)
        .with_context(|| format!("opening image {}", path.display()))?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Image::new(pixels, w as usize, h as usize)?)
}

fn concat(parts: &[ProjectedTokens]) -> Result<ProjectedTokens> {
    let refs: Vec<&Tensor> = parts.iter().map(|p| &p.tokens).collect();
    Ok(ProjectedTokens {
        tokens: Tensor::concat_rows(&refs)?,
        chunk_ids: parts
            .iter()
            .flat_map(|p| p.chunk_ids.iter().copied())
            .collect(),
    })
}

fn merge_mode(pairwise: bool) -> MergeMode {
    if pairwise {
        MergeMode::Pairwise
    } else {
        MergeMode::Transitive
    }
}

#[derive(Serialize)]
struct PartitionReport {
    width: usize,
    height: usize,
    ideal_subimages: usize,
    grid: mgve_core::GridConfig,
    resize: mgve_core::ResizePlan,
    encoder_resize: mgve_core::ResizePlan,
    views: usize,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("expected WIDTHxHEIGHT, got {s}"))?;
    Ok((w.trim().parse()?, h.trim().parse()?))
}

pub fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Encode {
            video,
            weights,
            out,
            compress_ratio,
            threshold,
            pairwise,
            max_chunks,
            agg,
        } => {
            let w = load_weights(weights)
                .with_context(|| format!("loading weights {}", weights.display()))?;
            let aggregate = runtime_options(cli, &w, agg)?;
            let compression = match (compress_ratio, threshold) {
                (Some(r), _) => Some(Compression::TargetRatio(*r)),
                (None, Some(t)) => Some(Compression::Threshold(*t)),
                (None, None) => None,
            };
            let opts = VideoOptions {
                max_chunks: *max_chunks,
                compression,
                merge_mode: merge_mode(*pairwise),
                aggregate,
            };
            let video = read_video(video)?;
            let chunks = prepare_video(&video, &w.config, opts.max_chunks)?;
            let chunk_ids: Vec<usize> = chunks.iter().map(|c| c.chunk_id).collect();
            let enc = encode_prepared(&chunks, &w, &opts)?;
            save_tokens(&enc.tokens, out)?;
            emit(&json!({
                "frames": video.len(),
                "chunks": enc.chunks,
                "chunk_ids": chunk_ids,
                "tokens": enc.tokens.len(),
                "dim": enc.tokens.tokens.cols(),
                "compression_ratio": enc.compression_ratio,
                "threshold": enc.threshold,
                "out": out,
            }))?;
        }
        Command::EncodeImage {
            image,
            weights,
            out,
            replication_id,
            agg,
        } => {
            let w = load_weights(weights)
                .with_context(|| format!("loading weights {}", weights.display()))?;
            let opts = runtime_options(cli, &w, agg)?;
            let img = read_image(image)?;
            let views = encode_image(&img, &w, &opts, *replication_id)?;
            let all = concat(&views)?;
            save_tokens(&all, out)?;
            let grid = subimage_grid(img.width, img.height, w.config.base_resolution)?;
            emit(&json!({
                "width": img.width,
                "height": img.height,
                "grid": grid,
                "views": views.len(),
                "tokens_per_view": views.iter().map(|v| v.len()).collect::<Vec<_>>(),
                "dim": all.tokens.cols(),
                "out": out,
            }))?;
        }
        Command::Partition {
            width,
            height,
            sizes,
        } => {
            let cfg = model_config(cli, "desk")?;
            let mut inputs = Vec::new();
            if let (Some(w), Some(h)) = (width, height) {
                inputs.push((*w, *h));
            }
            for s in sizes {
                inputs.push(parse_size(s)?);
            }
            ensure!(
                !inputs.is_empty(),
                "give --width/--height or WIDTHxHEIGHT arguments"
            );
            for (w, h) in inputs {
                let grid = subimage_grid(w, h, cfg.base_resolution)?;
                emit(&PartitionReport {
                    width: w,
                    height: h,
                    ideal_subimages: ideal_subimages(w, h, cfg.base_resolution),
                    grid,
                    resize: dynamic_resize(w, h, cfg.base_resolution, cfg.patch_size)?,
                    encoder_resize: pipeline_plan(w, h, &cfg)?,
                    views: if grid.tiles() > 1 {
                        1 + grid.tiles()
                    } else {
                        1
                    },
                })?;
            }
        }
        Command::Gradcheck { size, coords, step } => {
            let (weights, video) = gradcheck_fixture(size, cli.seed)?;
            let started = std::time::Instant::now();
            let report = pipeline_grad_check(
                &weights,
                &video,
                &GradCheckOptions {
                    step: *step,
                    coords_per_input: *coords,
                    seed: cli.seed,
                },
            )?;
            let pass = report.max_relative_error < GRADCHECK_TOLERANCE;
            emit(&json!({
                "size": size,
                "parameters": weights.parameter_count(),
                "coordinates": report.coordinates,
                "max_relative_error": report.max_relative_error,
                "worst": report.worst,
                "tolerance": GRADCHECK_TOLERANCE,
                "pass": pass,
                "seconds": started.elapsed().as_secs_f64(),
            }))?;
            if !pass {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Niah {
            chunks_max,
            trials_per_chunk,
            videos,
            needles,
            frame_size,
        } => {
            ensure!(*chunks_max > 0, "--chunks-max must be positive");
            let cfg = model_config(cli, "niah")?;
            let weights = EncoderWeights::init(cfg, cli.seed)?;
            let pool = VideoPool {
                videos: *videos,
                width: *frame_size,
                height: *frame_size,
                fps: weights.config.fps,
                seed: cli.seed,
            };
            let needle_side = (frame_size * 3 / 4).max(1);
            let needle_images =
                synthetic_needles(*needles, needle_side, needle_side, cli.seed ^ 0x5eed)?;
            let settings = NiahSettings {
                chunk_counts: (1..=*chunks_max).collect(),
                trials_per_chunk: *trials_per_chunk,
                seed: cli.seed,
            };
            for row in niah_campaign(&weights, &pool, &needle_images, &settings)? {
                emit(&row)?;
            }
        }
        Command::Budget {
            frames,
            width,
            height,
        } => {
            let cfg = model_config(cli, "desk")?;
            emit(&token_budget(*frames, *width, *height, &cfg)?)?;
        }
        Command::Compress {
            video,
            weights,
            targets,
            pairwise,
        } => {
            let w = load_weights(weights)
                .with_context(|| format!("loading weights {}", weights.display()))?;
            let video = read_video(video)?;
            let chunks = prepare_video(&video, &w.config, None)?;
            let maps = mgve_core::encode_chunks(&chunks, &w)?;
            let seq = TokenSequence::from_feature_maps(&maps)?;
            for row in sweep_thresholds(&seq, targets, merge_mode(*pairwise))? {
                emit(&row)?;
            }
        }
        Command::InitWeights { out } => {
            let cfg = model_config(cli, "desk")?;
            let w = EncoderWeights::init(cfg, cli.seed)?;
            save_weights(&w, out)?;
            emit(&json!({
                "out": out,
                "parameters": w.parameter_count(),
                "config": w.config,
            }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
