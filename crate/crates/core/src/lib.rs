//! Multi-granularity video encoder.
//!
//! Videos are split into chunks of `F` frames. Each chunk is embedded by a
//! temporal-depth patch convolution and a bidirectional ViT, pooled 2×2,
//! then all chunks pass through a causal aggregator whose rotary encoding
//! is driven by chunk ids. A GELU MLP maps the result to the language-model
//! width. Everything runs on a small reverse-mode tape over `f64` tensors so
//! that every stage can be gradient-checked.

pub mod compression;
pub mod config;
pub mod error;
pub mod harness;
pub mod ifa;
pub mod ive;
pub mod media;
pub mod numerics;
pub mod pipeline;
pub mod projector;
pub mod resolution;
mod transformer;
pub mod weights;

pub use compression::{merge_tokens, sweep_thresholds, MergeMode, MergeResult, SweepRow};
pub use config::{ModelConfig, PoolMode, RopeMode};
pub use error::{Error, Result};
pub use ifa::{aggregate, crope_logits, encode_image_set, AggregateOptions, TokenSequence};
pub use ive::{embed_patches, encode_chunk, encode_chunks, init_from_2d, FeatureMap};
pub use media::{accelerate_playback, partition_chunks, synth_video, Chunk, Pattern, VideoTensor};
pub use numerics::{Tape, Tensor, Var};
pub use pipeline::{encode_image, encode_video, Compression, Image, VideoEncoding, VideoOptions};
pub use projector::{project, ProjectedTokens};
pub use resolution::{dynamic_resize, subimage_grid, GridConfig, ResizePlan};
pub use weights::{EncoderWeights, Params};
