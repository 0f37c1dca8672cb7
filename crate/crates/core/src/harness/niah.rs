//! Chunk-level needle-in-a-haystack campaign with a first-difference
//! locator in place of a language-model reader.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::media::{accelerate_playback, partition_chunks, synth_video, Pattern, VideoTensor};
use crate::pipeline::{encode_prepared, prepare_video, Image, VideoOptions};
use crate::projector::ProjectedTokens;
use crate::weights::EncoderWeights;

/// Largest coordinate difference still treated as equal by the locator.
pub const LOCATE_TOLERANCE: f64 = 1e-9;

/// Attempts at drawing a detectable needle before a trial is abandoned.
pub const MAX_RESAMPLES: usize = 64;

/// Replaces frame `chunk · F + pos` with the needle resampled to the frame size.
pub fn niah_insert(
    video: &VideoTensor,
    needle: &Image,
    chunk: usize,
    pos: usize,
    frames_per_chunk: usize,
) -> Result<VideoTensor> {
    if pos >= frames_per_chunk {
        return Err(Error::OutOfRange(format!(
            "position {pos} in a chunk of {frames_per_chunk} frames"
        )));
    }
    let index = chunk
        .checked_mul(frames_per_chunk)
        .and_then(|i| i.checked_add(pos))
        .filter(|&i| i < video.len())
        .ok_or_else(|| {
            Error::OutOfRange(format!(
                "chunk {chunk}, position {pos} lies beyond {} frames",
                video.len()
            ))
        })?;
    let (h, w) = video.frame_size();
    video.with_frame(index, &needle.resized(w, h).pixels)
}

/// Chunk id of the first token that differs by more than
/// [`LOCATE_TOLERANCE`] in any coordinate, or `None` when nothing differs.
pub fn niah_locate(with: &ProjectedTokens, without: &ProjectedTokens) -> Result<Option<usize>> {
    if with.tokens.shape() != without.tokens.shape() || with.chunk_ids != without.chunk_ids {
        return Err(Error::Contract(
            "located sequences must share shape and chunk ids".into(),
        ));
    }
    for (i, &id) in with.chunk_ids.iter().enumerate() {
        let differs = with
            .tokens
            .row(i)
            .iter()
            .zip(without.tokens.row(i))
            .any(|(a, b)| (a - b).abs() > LOCATE_TOLERANCE);
        if differs {
            return Ok(Some(id));
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NiahTrial {
    pub video: usize,
    pub needle: usize,
    /// Index of the target chunk within the accelerated video.
    pub target_chunk: usize,
    pub position: usize,
    /// Chunk id (original timeline) of the target chunk.
    pub target_chunk_id: usize,
    pub located: Option<usize>,
    /// Draws rejected because the needle equalled the replaced frame.
    pub resampled: usize,
}

impl NiahTrial {
    pub fn correct(&self) -> bool {
        self.located == Some(self.target_chunk_id)
    }
}

/// Synthetic haystacks with pairwise-distinct frames. For a budget of `c`
/// chunks, video `i` has `c · F · (1 + i mod 3)` frames, so accelerated
/// playback fits it into exactly `c` chunks with strides 1, 2 and 3.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPool {
    pub videos: usize,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub seed: u64,
}

impl VideoPool {
    pub fn video(
        &self,
        index: usize,
        chunks: usize,
        frames_per_chunk: usize,
    ) -> Result<VideoTensor> {
        let frames = chunks * frames_per_chunk * (1 + index % 3);
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64);
        synth_video(
            &Pattern::UniqueNoise { seed },
            frames,
            self.width,
            self.height,
            self.fps,
        )
    }
}

/// Uniform-noise needle images.
pub fn synthetic_needles(
    count: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            Image::new(
                (0..width * height * 3).map(|_| rng.random()).collect(),
                width,
                height,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiahSettings {
    pub chunk_counts: Vec<usize>,
    /// Trials per chunk of budget: `c` chunks get `trials_per_chunk · c` trials.
    pub trials_per_chunk: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NiahRow {
    pub chunks: usize,
    pub trials: usize,
    pub correct: usize,
    pub resampled: usize,
    pub accuracy: f64,
}

struct Haystack {
    video: VideoTensor,
    chunk_ids: Vec<usize>,
    tokens: ProjectedTokens,
}

/// Picks needle, chunk and position, redrawing while the needle would not
/// change the video.
fn draw(
    rng: &mut ChaCha8Rng,
    video: &VideoTensor,
    needles: &[Image],
    chunks: usize,
    frames_per_chunk: usize,
) -> Result<(usize, usize, usize, VideoTensor, usize)> {
    for attempt in 0..MAX_RESAMPLES {
        let needle = rng.random_range(0..needles.len());
        let chunk = rng.random_range(0..chunks);
        let pos = rng.random_range(0..frames_per_chunk);
        let with = niah_insert(video, &needles[needle], chunk, pos, frames_per_chunk)?;
        let index = chunk * frames_per_chunk + pos;
        if with.frame(index) != video.frame(index) {
            return Ok((needle, chunk, pos, with, attempt));
        }
    }
    Err(Error::Contract(format!(
        "no needle differs from the haystack after {MAX_RESAMPLES} draws"
    )))
}

fn run_trial(
    weights: &EncoderWeights,
    opts: &VideoOptions,
    haystacks: &[Haystack],
    needles: &[Image],
    chunks: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NiahTrial> {
    let f = weights.config.frames_per_chunk;
    let video = rng.random_range(0..haystacks.len());
    let hay = &haystacks[video];
    let (needle, target_chunk, position, with, resampled) =
        draw(rng, &hay.video, needles, chunks, f)?;
    let encoded = encode_prepared(&prepare_video(&with, &weights.config, None)?, weights, opts)?;
    Ok(NiahTrial {
        video,
        needle,
        target_chunk,
        position,
        target_chunk_id: hay.chunk_ids[target_chunk],
        located: niah_locate(&encoded.tokens, &hay.tokens)?,
        resampled,
    })
}

/// Runs `trials_per_chunk · c` trials for every `c` in the sweep. Each
/// trial has its own RNG stream, so results do not depend on scheduling.
pub fn niah_campaign(
    weights: &EncoderWeights,
    pool: &VideoPool,
    needles: &[Image],
    settings: &NiahSettings,
) -> Result<Vec<NiahRow>> {
    if pool.videos == 0 || needles.is_empty() {
        return Err(Error::EmptyInput("campaign needs videos and needles"));
    }
    let cfg = &weights.config;
    let f = cfg.frames_per_chunk;
    let opts = VideoOptions::from_config(cfg);
    let mut rows = Vec::with_capacity(settings.chunk_counts.len());
    for &c in &settings.chunk_counts {
        if c == 0 {
            return Err(Error::Config("chunk budget must be positive".into()));
        }
        let haystacks = (0..pool.videos)
            .into_par_iter()
            .map(|i| -> Result<Haystack> {
                let video = accelerate_playback(&pool.video(i, c, f)?, c, f)?;
                let chunk_ids: Vec<usize> = partition_chunks(&video, f)?
                    .iter()
                    .map(|ch| ch.chunk_id)
                    .collect();
                if chunk_ids.len() != c {
                    return Err(Error::Contract(format!(
                        "accelerated video holds {} chunks, budget is {c}",
                        chunk_ids.len()
                    )));
                }
                let tokens =
                    encode_prepared(&prepare_video(&video, cfg, None)?, weights, &opts)?.tokens;
                Ok(Haystack {
                    video,
                    chunk_ids,
                    tokens,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let trials = settings.trials_per_chunk * c;
        let results = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
                rng.set_stream(((c as u64) << 32) | t as u64);
                run_trial(weights, &opts, &haystacks, needles, c, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let correct = results.iter().filter(|r| r.correct()).count();
        rows.push(NiahRow {
            chunks: c,
            trials,
            correct,
            resampled: results.iter().map(|r| r.resampled).sum(),
            accuracy: if trials == 0 {
                1.0
            } else {
                correct as f64 / trials as f64
            },
        });
    }
    Ok(rows)
}
