//! Model hyperparameters and their `key=value` text form.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

/// Position source for the aggregator's rotary encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RopeMode {
    /// Rotation by the difference of chunk ids.
    Crope,
    /// Rotation by the difference of token indices.
    Standard,
}

impl FromStr for RopeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crope" => Ok(Self::Crope),
            "standard" => Ok(Self::Standard),
            other => Err(Error::Config(format!("unknown rope mode `{other}`"))),
        }
    }
}

impl fmt::Display for RopeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Crope => "crope",
            Self::Standard => "standard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Average,
    Max,
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown pooling mode `{other}`"))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Max => "max",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Frames per chunk (`F`).
    pub frames_per_chunk: usize,
    /// Spatial patch size (`P`).
    pub patch_size: usize,
    /// Side of the square pretraining resolution (`R_v`).
    pub base_resolution: usize,
    /// Visual feature width (`d_V`).
    pub vision_dim: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    /// Aggregator depth (`L_inter`).
    pub inter_layers: usize,
    pub inter_heads: usize,
    /// Projector output width (`d_LLM`).
    pub llm_dim: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub rope_mode: RopeMode,
    pub pooling: PoolMode,
    /// Aggregator layers reduce to `softmax(QKᵀ)·V` with no residual or MLP.
    pub attention_only: bool,
    /// Frame rate after transcoding, in frames per second.
    pub fps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: `F = 16`, `L_inter = 3`, `P = 16`, `R_v = 384`.
    pub fn desk() -> Self {
        Self {
            frames_per_chunk: 16,
            patch_size: 16,
            base_resolution: 384,
            vision_dim: 64,
            vit_layers: 4,
            vit_heads: 4,
            inter_layers: 3,
            inter_heads: 4,
            llm_dim: 128,
            mlp_ratio: 4,
            rope_base: 1e4,
            rope_mode: RopeMode::Crope,
            pooling: PoolMode::Average,
            attention_only: false,
            fps: 2.0,
        }
    }

    /// Smallest configuration that still exercises every component.
    pub fn tiny() -> Self {
        Self {
            frames_per_chunk: 2,
            patch_size: 16,
            base_resolution: 64,
            vision_dim: 16,
            vit_layers: 1,
            vit_heads: 2,
            inter_layers: 2,
            inter_heads: 2,
            llm_dim: 16,
            mlp_ratio: 2,
            ..Self::desk()
        }
    }

    pub fn small() -> Self {
        Self {
            frames_per_chunk: 4,
            patch_size: 8,
            base_resolution: 64,
            vision_dim: 32,
            vit_layers: 2,
            vit_heads: 4,
            inter_layers: 3,
            inter_heads: 4,
            llm_dim: 64,
            ..Self::desk()
        }
    }

    /// Low-resolution configuration for long retrieval campaigns.
    pub fn niah() -> Self {
        Self {
            frames_per_chunk: 16,
            patch_size: 8,
            base_resolution: 32,
            vision_dim: 16,
            vit_layers: 2,
            vit_heads: 2,
            inter_layers: 3,
            inter_heads: 2,
            llm_dim: 32,
            mlp_ratio: 2,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            "niah" => Ok(Self::niah()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Patches per side of the pretraining resolution (`P_v`).
    pub fn pos_grid(&self) -> usize {
        self.base_resolution / self.patch_size
    }

    pub fn vit_head_dim(&self) -> usize {
        self.vision_dim / self.vit_heads
    }

    pub fn inter_head_dim(&self) -> usize {
        self.vision_dim / self.inter_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames_per_chunk", self.frames_per_chunk),
            ("patch_size", self.patch_size),
            ("base_resolution", self.base_resolution),
            ("vision_dim", self.vision_dim),
            ("vit_heads", self.vit_heads),
            ("inter_heads", self.inter_heads),
            ("llm_dim", self.llm_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.base_resolution.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "base resolution {} is not a multiple of patch size {}",
                self.base_resolution, self.patch_size
            )));
        }
        if !self.vision_dim.is_multiple_of(self.vit_heads)
            || !self.vision_dim.is_multiple_of(self.inter_heads)
        {
            return Err(Error::Config(format!(
                "vision_dim {} must divide evenly across heads",
                self.vision_dim
            )));
        }
        if !self.inter_head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "aggregator head dimension {} must be even for rotary encoding",
                self.inter_head_dim()
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Config("fps and rope_base must be positive".into()));
        }
        Ok(())
    }

    /// Serializes as newline-separated `key=value` pairs.
    pub fn to_kv(&self) -> String {
        let pairs: [(&str, String); 15] = [
            ("frames_per_chunk", self.frames_per_chunk.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("base_resolution", self.base_resolution.to_string()),
            ("vision_dim", self.vision_dim.to_string()),
            ("vit_layers", self.vit_layers.to_string()),
            ("vit_heads", self.vit_heads.to_string()),
            ("inter_layers", self.inter_layers.to_string()),
            ("inter_heads", self.inter_heads.to_string()),
            ("llm_dim", self.llm_dim.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("rope_mode", self.rope_mode.to_string()),
            ("pooling", self.pooling.to_string()),
            ("attention_only", self.attention_only.to_string()),
            ("fps", self.fps.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
        }
        match key {
            "frames_per_chunk" => self.frames_per_chunk = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "base_resolution" => self.base_resolution = parse(key, value)?,
            "vision_dim" => self.vision_dim = parse(key, value)?,
            "vit_layers" => self.vit_layers = parse(key, value)?,
            "vit_heads" => self.vit_heads = parse(key, value)?,
            "inter_layers" => self.inter_layers = parse(key, value)?,
            "inter_heads" => self.inter_heads = parse(key, value)?,
            "llm_dim" => self.llm_dim = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "rope_base" => self.rope_base = parse(key, value)?,
            "rope_mode" => self.rope_mode = value.parse()?,
            "pooling" => self.pooling = value.parse()?,
            "attention_only" => self.attention_only = parse(key, value)?,
            "fps" => self.fps = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.frames_per_chunk, 16);
        assert_eq!(cfg.inter_layers, 3);
        assert_eq!(cfg.pos_grid(), 24);
    }

    #[test]
    fn kv_round_trip() {
        for cfg in [
            ModelConfig::desk(),
            ModelConfig::tiny(),
            ModelConfig::small(),
            ModelConfig::niah(),
        ] {
            cfg.validate().unwrap();
            assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = ModelConfig::desk();
        assert!(cfg.apply_kv("colour=blue").is_err());
        assert!(cfg.apply_kv("vit_layers=many").is_err());
        assert!(cfg.apply_kv("rope_mode=alibi").is_err());
        cfg.apply_kv("# comment\n\nrope_mode = standard\n").unwrap();
        assert_eq!(cfg.rope_mode, RopeMode::Standard);
    }

    #[test]
    fn odd_rotary_head_is_rejected() {
        let cfg = ModelConfig {
            vision_dim: 12,
            inter_heads: 4,
            vit_heads: 4,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }
}
