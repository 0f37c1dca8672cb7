//! Drivers around the encoder: NIAH campaign, token budgeting, file
//! formats, synthetic inputs and whole-pipeline gradient checks.

mod budget;
pub mod io;
mod niah;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ifa::AggregateOptions;
use crate::media::{partition_chunks, synth_video, Pattern, VideoTensor};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport};
use crate::pipeline::pipeline_on;
use crate::weights::EncoderWeights;

pub use budget::{token_budget, TokenBudget};
pub use io::{load_tokens, load_video, load_weights, save_tokens, save_video, save_weights};
pub use niah::{
    niah_campaign, niah_insert, niah_locate, synthetic_needles, NiahRow, NiahSettings, NiahTrial,
    VideoPool, LOCATE_TOLERANCE, MAX_RESAMPLES,
};

/// Parses `synthetic:<pattern>[:key=value,...]` where the pattern is
/// `noise`, `constant` or `square`. Keys: `frames`, `width`, `height`,
/// `fps`, `seed`, `value`, `size`, `speed`.
pub fn parse_synthetic(spec: &str) -> Result<VideoTensor> {
    let rest = spec
        .strip_prefix("synthetic:")
        .ok_or_else(|| Error::Config(format!("not a synthetic spec: {spec}")))?;
    let (kind, args) = rest.split_once(':').unwrap_or((rest, ""));
    let (mut frames, mut width, mut height, mut fps) = (32usize, 64usize, 64usize, 2.0f64);
    let (mut seed, mut value, mut size, mut speed) = (0u64, 0.5f64, 8usize, 1usize);
    for pair in args.split(',').filter(|s| !s.is_empty()) {
        let (key, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair}")))?;
        let bad = |_| Error::Config(format!("bad value for {key}: {v}"));
        match key.trim() {
            "frames" => frames = v.trim().parse().map_err(bad)?,
            "width" => width = v.trim().parse().map_err(bad)?,
            "height" => height = v.trim().parse().map_err(bad)?,
            "seed" => seed = v.trim().parse().map_err(bad)?,
            "size" => size = v.trim().parse().map_err(bad)?,
            "speed" => speed = v.trim().parse().map_err(bad)?,
            "fps" => {
                fps = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value for fps: {v}")))?
            }
            "value" => {
                value = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value for value: {v}")))?
            }
            other => return Err(Error::Config(format!("unknown synthetic key {other}"))),
        }
    }
    let pattern = match kind {
        "noise" => Pattern::UniqueNoise { seed },
        "constant" => Pattern::Constant { rgb: [value; 3] },
        "square" => Pattern::MovingSquare { size, speed },
        other => return Err(Error::Config(format!("unknown synthetic pattern {other}"))),
    };
    synth_video(&pattern, frames, width, height, fps)
}

/// Named configurations for whole-pipeline gradient checks.
pub fn gradcheck_config(size: &str) -> Result<ModelConfig> {
    match size {
        "tiny" => Ok(ModelConfig::tiny()),
        "small" => Ok(ModelConfig::small()),
        other => Err(Error::Config(format!(
            "unknown gradcheck size {other} (tiny|small)"
        ))),
    }
}

/// Checks gradients of `sum(project(aggregate(encode_chunk(·))))` with
/// respect to every parameter, on `video` partitioned into chunks.
pub fn pipeline_grad_check(
    weights: &EncoderWeights,
    video: &VideoTensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let cfg = &weights.config;
    let chunks = partition_chunks(video, cfg.frames_per_chunk)?;
    let agg = AggregateOptions::from(cfg);
    let inputs: Vec<_> = weights
        .params
        .named()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    grad_check(
        |tape, vars| {
            let params = weights.params.with_leaves(vars.to_vec())?;
            let (out, _) = pipeline_on(tape, &params, cfg, &agg, &chunks)?;
            tape.sum(out)
        },
        &inputs,
        opts,
    )
}

/// Two-chunk, 64×64 noise video with seeded weights for `size`.
pub fn gradcheck_fixture(size: &str, seed: u64) -> Result<(EncoderWeights, VideoTensor)> {
    let cfg = gradcheck_config(size)?;
    let frames = 2 * cfg.frames_per_chunk;
    let weights = EncoderWeights::init(cfg, seed)?;
    let video = synth_video(&Pattern::UniqueNoise { seed }, frames, 64, 64, 2.0)?;
    Ok((weights, video))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_specs() {
        let v = parse_synthetic("synthetic:noise:frames=5,width=8,height=6,seed=3").unwrap();
        assert_eq!((v.len(), v.frame_size()), (5, (6, 8)));
        let c = parse_synthetic("synthetic:constant").unwrap();
        assert!(c.frames().data().iter().all(|&x| x == 0.5));
        assert!(parse_synthetic("synthetic:plaid").is_err());
        assert!(parse_synthetic("synthetic:noise:frames=x").is_err());
        assert!(parse_synthetic("clip.mgvv").is_err());
    }
}
