//! Videos, chunking and frame dropping on the original timeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frames `[T, H, W, 3]` in `[0, 1]` with their original-timeline timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    frames: Tensor,
    timestamps: Vec<f64>,
    fps: f64,
}

impl VideoTensor {
    pub fn new(frames: Tensor, timestamps: Vec<f64>, fps: f64) -> Result<Self> {
        let &[t, h, w, c] = frames.shape() else {
            return Err(Error::Shape(format!(
                "video frames must be [T, H, W, 3], got {:?}",
                frames.shape()
            )));
        };
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "invalid frame shape {:?}",
                frames.shape()
            )));
        }
        if t == 0 {
            return Err(Error::EmptyInput("video has no frames"));
        }
        if timestamps.len() != t {
            return Err(Error::Shape(format!(
                "{t} frames but {} timestamps",
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract(
                "timestamps must be strictly increasing".into(),
            ));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            frames,
            timestamps,
            fps,
        })
    }

    /// Frames sampled at `fps` starting from time zero.
    pub fn from_frames(frames: Tensor, fps: f64) -> Result<Self> {
        let t = frames.shape().first().copied().unwrap_or(0);
        Self::new(frames, (0..t).map(|i| i as f64 / fps).collect(), fps)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// `(height, width)`.
    pub fn frame_size(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let (h, w) = self.frame_size();
        let n = h * w * 3;
        &self.frames.data()[i * n..(i + 1) * n]
    }

    /// Returns a copy with frame `i` replaced.
    pub fn with_frame(&self, i: usize, pixels: &[f64]) -> Result<Self> {
        let (h, w) = self.frame_size();
        let n = h * w * 3;
        if i >= self.len() {
            return Err(Error::OutOfRange(format!("frame {i} of {}", self.len())));
        }
        if pixels.len() != n {
            return Err(Error::Shape(format!(
                "frame needs {n} values, got {}",
                pixels.len()
            )));
        }
        let mut out = self.clone();
        out.frames.data_mut()[i * n..(i + 1) * n].copy_from_slice(pixels);
        Ok(out)
    }

    /// Same timeline with every frame transformed.
    pub fn map_frames(
        &self,
        height: usize,
        width: usize,
        mut f: impl FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(self.len() * height * width * 3);
        for i in 0..self.len() {
            let out = f(self.frame(i));
            if out.len() != height * width * 3 {
                return Err(Error::Shape(
                    "frame transform produced the wrong size".into(),
                ));
            }
            data.extend(out);
        }
        let frames = Tensor::new([self.len(), height, width, 3], data)?;
        Self::new(frames, self.timestamps.clone(), self.fps)
    }

    /// Original-timeline frame index of timestamp `t`, tolerant of the
    /// rounding in `i / fps`.
    pub fn frame_index(&self, t: f64) -> usize {
        (t * self.fps + 1e-6).floor() as usize
    }
}

/// `F` consecutive frames and the chunk position derived from the first
/// frame's timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub frames: Tensor,
    pub chunk_id: usize,
    pub first_timestamp: f64,
}

/// Splits a video into `⌈T / F⌉` chunks. The last chunk is padded by
/// repeating its final frame; `chunk_id = ⌊first_timestamp · fps / F⌋`.
pub fn partition_chunks(video: &VideoTensor, frames_per_chunk: usize) -> Result<Vec<Chunk>> {
    if frames_per_chunk == 0 {
        return Err(Error::Config("frames per chunk must be positive".into()));
    }
    if video.is_empty() {
        return Err(Error::EmptyInput("video has no frames"));
    }
    let (h, w) = video.frame_size();
    let total = video.len();
    let count = total.div_ceil(frames_per_chunk);
    let mut chunks = Vec::with_capacity(count);
    for c in 0..count {
        let start = c * frames_per_chunk;
        let mut data = Vec::with_capacity(frames_per_chunk * h * w * 3);
        for k in 0..frames_per_chunk {
            data.extend_from_slice(video.frame((start + k).min(total - 1)));
        }
        let first_timestamp = video.timestamps()[start];
        chunks.push(Chunk {
            frames: Tensor::new([frames_per_chunk, h, w, 3], data)?,
            chunk_id: video.frame_index(first_timestamp) / frames_per_chunk,
            first_timestamp,
        });
    }
    Ok(chunks)
}

/// Keeps every `s`-th frame, `s = ⌈T / (max_chunks · F)⌉`, so that at most
/// `max_chunks · F` frames remain. Retained frames keep their timestamps.
pub fn accelerate_playback(
    video: &VideoTensor,
    max_chunks: usize,
    frames_per_chunk: usize,
) -> Result<VideoTensor> {
    if max_chunks == 0 || frames_per_chunk == 0 {
        return Err(Error::Config(
            "chunk budget and frames per chunk must be positive".into(),
        ));
    }
    let budget = max_chunks * frames_per_chunk;
    if video.len() <= budget {
        return Ok(video.clone());
    }
    let stride = video.len().div_ceil(budget);
    let (h, w) = video.frame_size();
    let kept: Vec<usize> = (0..video.len()).step_by(stride).collect();
    let mut data = Vec::with_capacity(kept.len() * h * w * 3);
    for &i in &kept {
        data.extend_from_slice(video.frame(i));
    }
    VideoTensor::new(
        Tensor::new([kept.len(), h, w, 3], data)?,
        kept.iter().map(|&i| video.timestamps()[i]).collect(),
        video.fps(),
    )
}

/// Test-asset patterns.
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    Constant {
        rgb: [f64; 3],
    },
    /// A bright square on a dark background moving `speed` pixels per
    /// frame along the diagonal.
    MovingSquare {
        size: usize,
        speed: usize,
    },
    /// Independent uniform noise per frame; the first pixel encodes the
    /// frame index so no two frames are equal.
    UniqueNoise {
        seed: u64,
    },
}

pub fn synth_video(
    pattern: &Pattern,
    frames: usize,
    width: usize,
    height: usize,
    fps: f64,
) -> Result<VideoTensor> {
    if frames == 0 || width == 0 || height == 0 {
        return Err(Error::EmptyInput("synthetic video needs non-zero extents"));
    }
    let per_frame = height * width * 3;
    let mut data = Vec::with_capacity(frames * per_frame);
    match pattern {
        Pattern::Constant { rgb } => {
            for _ in 0..frames * height * width {
                data.extend_from_slice(rgb);
            }
        }
        Pattern::MovingSquare { size, speed } => {
            for t in 0..frames {
                let offset = t * speed;
                let (x0, y0) = (offset % width, offset % height);
                for y in 0..height {
                    for x in 0..width {
                        let inside =
                            (x + width - x0) % width < *size && (y + height - y0) % height < *size;
                        let v = if inside { 0.9 } else { 0.1 };
                        data.extend_from_slice(&[v, v * 0.5, 1.0 - v]);
                    }
                }
            }
        }
        Pattern::UniqueNoise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for t in 0..frames {
                let start = data.len();
                data.extend((0..per_frame).map(|_| rng.random::<f64>()));
                data[start] = (t as f64 + 0.5) / frames as f64;
            }
        }
    }
    VideoTensor::from_frames(Tensor::new([frames, height, width, 3], data)?, fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(frames: usize) -> VideoTensor {
        synth_video(&Pattern::UniqueNoise { seed: 3 }, frames, 4, 4, 2.0).unwrap()
    }

    #[test]
    fn exact_division() {
        let chunks = partition_chunks(&noise(32), 16).unwrap();
        assert_eq!(
            chunks.iter().map(|c| c.chunk_id).collect::<Vec<_>>(),
            vec![0, 1]
        );
    }

    #[test]
    fn ragged_tail_repeats_last_frame() {
        let v = noise(33);
        let chunks = partition_chunks(&v, 16).unwrap();
        assert_eq!(chunks.len(), 3);
        let last = &chunks[2];
        let n = 4 * 4 * 3;
        for k in 0..16 {
            assert_eq!(&last.frames.data()[k * n..(k + 1) * n], v.frame(32));
        }
    }

    #[test]
    fn long_video_chunk_count() {
        let v = synth_video(&Pattern::Constant { rgb: [0.2; 3] }, 960, 2, 2, 2.0).unwrap();
        assert_eq!(partition_chunks(&v, 16).unwrap().len(), 60);
    }

    #[test]
    fn empty_video_rejected() {
        assert!(matches!(
            VideoTensor::from_frames(Tensor::zeros([0, 2, 2, 3]), 2.0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn playback_within_budget_is_unchanged() {
        let v = synth_video(&Pattern::Constant { rgb: [0.5; 3] }, 960, 2, 2, 2.0).unwrap();
        assert_eq!(accelerate_playback(&v, 60, 16).unwrap(), v);
        let one = noise(1);
        assert_eq!(accelerate_playback(&one, 1, 16).unwrap(), one);
    }

    #[test]
    fn playback_keeps_original_timestamps() {
        let v = synth_video(&Pattern::Constant { rgb: [0.5; 3] }, 1920, 2, 2, 2.0).unwrap();
        let fast = accelerate_playback(&v, 60, 16).unwrap();
        assert_eq!(fast.len(), 960);
        let chunks = partition_chunks(&fast, 16).unwrap();
        assert_eq!(chunks[1].first_timestamp, 16.0);
        assert_eq!(chunks[1].chunk_id, 2);
    }

    #[test]
    fn synthetic_patterns() {
        let c = synth_video(
            &Pattern::Constant {
                rgb: [0.1, 0.2, 0.3],
            },
            5,
            6,
            4,
            2.0,
        )
        .unwrap();
        assert!((1..5).all(|i| c.frame(i) == c.frame(0)));
        let still =
            synth_video(&Pattern::MovingSquare { size: 2, speed: 0 }, 5, 6, 4, 2.0).unwrap();
        assert!((1..5).all(|i| still.frame(i) == still.frame(0)));
        let moving =
            synth_video(&Pattern::MovingSquare { size: 2, speed: 1 }, 5, 6, 4, 2.0).unwrap();
        assert_ne!(moving.frame(0), moving.frame(1));
        assert_eq!(noise(7), noise(7));
        let u = noise(20);
        for i in 0..20 {
            for j in 0..i {
                assert_ne!(u.frame(i), u.frame(j));
            }
        }
        assert!(synth_video(&Pattern::UniqueNoise { seed: 0 }, 0, 4, 4, 2.0).is_err());
    }
}
