//! Inter-chunk feature aggregator: causal transformer layers over the
//! concatenated chunk tokens, with rotary encoding driven by chunk ids.

use std::sync::Arc;

use crate::config::{ModelConfig, RopeMode};
use crate::error::{Error, Result};
use crate::ive::FeatureMap;
use crate::numerics::{rotary_logits, Mask, Tape, Tensor, Var};
use crate::transformer::{attention_only, block, Attention};
use crate::weights::{EncoderWeights, Params};

/// Tokens with the chunk id of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub chunk_ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, chunk_ids: Vec<usize>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != chunk_ids.len() {
            return Err(Error::Shape(format!(
                "{} chunk ids for tokens of shape {:?}",
                chunk_ids.len(),
                tokens.shape()
            )));
        }
        Ok(Self { tokens, chunk_ids })
    }

    /// Concatenates pooled chunk features in order.
    pub fn from_feature_maps(maps: &[FeatureMap]) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::EmptyInput("no feature maps to concatenate"));
        }
        let parts: Vec<&Tensor> = maps.iter().map(|m| &m.tokens).collect();
        let chunk_ids = maps
            .iter()
            .flat_map(|m| std::iter::repeat_n(m.chunk_id, m.tokens.rows()))
            .collect();
        Self::new(Tensor::concat_rows(&parts)?, chunk_ids)
    }

    pub fn len(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Same tokens with every chunk id shifted by `offset`.
    pub fn shifted(&self, offset: usize) -> Self {
        Self {
            tokens: self.tokens.clone(),
            chunk_ids: self.chunk_ids.iter().map(|id| id + offset).collect(),
        }
    }
}

/// Rotary logits `q_ι · R(id(ι) − id(ι')) · k_ι'ᵀ` for chunk ids.
pub fn crope_logits(
    q: &Tensor,
    k: &Tensor,
    ids_q: &[usize],
    ids_k: &[usize],
    base: f64,
) -> Result<Tensor> {
    let pq: Vec<i64> = ids_q.iter().map(|&i| i as i64).collect();
    let pk: Vec<i64> = ids_k.iter().map(|&i| i as i64).collect();
    rotary_logits(q, k, &pq, &pk, base, None)
}

/// Aggregator switches; defaults come from the model config.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateOptions {
    pub inter_layers: usize,
    pub rope_mode: RopeMode,
    pub attention_only: bool,
}

impl From<&ModelConfig> for AggregateOptions {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            inter_layers: cfg.inter_layers,
            rope_mode: cfg.rope_mode,
            attention_only: cfg.attention_only,
        }
    }
}

/// Rotary positions: chunk ids, or token indices in standard mode.
pub fn rotary_positions(chunk_ids: &[usize], mode: RopeMode) -> Vec<i64> {
    match mode {
        RopeMode::Crope => chunk_ids.iter().map(|&i| i as i64).collect(),
        RopeMode::Standard => (0..chunk_ids.len() as i64).collect(),
    }
}

/// Tape-level aggregator over bound parameters; see [`aggregate`].
pub fn aggregate_on(
    tape: &mut Tape,
    vars: &Params<Var>,
    cfg: &ModelConfig,
    opts: &AggregateOptions,
    x: Var,
    chunk_ids: &[usize],
) -> Result<Var> {
    if opts.inter_layers > vars.ifa.len() {
        return Err(Error::Config(format!(
            "{} aggregator layers requested but the weights hold {}",
            opts.inter_layers,
            vars.ifa.len()
        )));
    }
    if opts.inter_layers == 0 || chunk_ids.is_empty() {
        return Ok(x);
    }
    let attn = Attention::Rotary {
        positions: Arc::new(rotary_positions(chunk_ids, opts.rope_mode)),
        base: cfg.rope_base,
        mask: Arc::new(Mask::causal(chunk_ids.len())),
    };
    let mut x = x;
    for layer in &vars.ifa[..opts.inter_layers] {
        x = if opts.attention_only {
            attention_only(tape, x, layer, cfg.inter_heads, &attn)?
        } else {
            block(tape, x, layer, cfg.inter_heads, &attn)?
        };
    }
    Ok(x)
}

/// Runs the causal aggregator; `inter_layers == 0` is the identity.
pub fn aggregate(
    x: &TokenSequence,
    weights: &EncoderWeights,
    opts: &AggregateOptions,
) -> Result<TokenSequence> {
    if x.dim() != weights.config.vision_dim {
        return Err(Error::DimensionMismatch {
            op: "aggregate",
            lhs: x.tokens.shape().to_vec(),
            rhs: vec![weights.config.vision_dim],
        });
    }
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let input = tape.leaf(x.tokens.clone());
    let out = aggregate_on(&mut tape, &vars, &weights.config, opts, input, &x.chunk_ids)?;
    TokenSequence::new(tape.value(out).clone(), x.chunk_ids.clone())
}

/// Aggregates each image view (thumbnail first, then sub-images in
/// row-major order) on its own, so no attention crosses view boundaries.
/// `replication_ids[i]` is the chunk id assigned to view `i`; a single
/// chunk only sees zero rotations, so outputs do not depend on it.
pub fn encode_image_set(
    views: &[FeatureMap],
    weights: &EncoderWeights,
    opts: &AggregateOptions,
    replication_ids: &[usize],
) -> Result<Vec<TokenSequence>> {
    if replication_ids.len() != views.len() {
        return Err(Error::Shape(format!(
            "{} replication ids for {} views",
            replication_ids.len(),
            views.len()
        )));
    }
    views
        .iter()
        .zip(replication_ids)
        .map(|(view, &id)| {
            let seq = TokenSequence::new(view.tokens.clone(), vec![id; view.tokens.rows()])?;
            aggregate(&seq, weights, opts)
        })
        .collect()
}
