//! Two-layer GELU MLP from the visual width to the language-model width.

use crate::error::{Error, Result};
use crate::ifa::TokenSequence;
use crate::numerics::{Tape, Tensor, Var};
use crate::transformer::linear;
use crate::weights::{EncoderWeights, Params};

/// Visual tokens in the language-model embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedTokens {
    pub tokens: Tensor,
    pub chunk_ids: Vec<usize>,
}

impl ProjectedTokens {
    pub fn len(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_ids.is_empty()
    }
}

/// `Linear → GELU → Linear` on the tape.
pub fn project_on(tape: &mut Tape, vars: &Params<Var>, x: Var) -> Result<Var> {
    let h = linear(tape, x, vars.proj.w1, vars.proj.b1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, vars.proj.w2, vars.proj.b2)
}

pub fn project(x: &TokenSequence, weights: &EncoderWeights) -> Result<ProjectedTokens> {
    let cfg = &weights.config;
    if x.dim() != cfg.vision_dim {
        return Err(Error::DimensionMismatch {
            op: "project",
            lhs: x.tokens.shape().to_vec(),
            rhs: vec![cfg.vision_dim, cfg.llm_dim],
        });
    }
    if x.is_empty() {
        return Ok(ProjectedTokens {
            tokens: Tensor::zeros([0, cfg.llm_dim]),
            chunk_ids: Vec::new(),
        });
    }
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let input = tape.leaf(x.tokens.clone());
    let out = project_on(&mut tape, &vars, input)?;
    Ok(ProjectedTokens {
        tokens: tape.value(out).clone(),
        chunk_ids: x.chunk_ids.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_tokens() {
        let cfg = ModelConfig::tiny();
        let mut w = EncoderWeights::init(cfg.clone(), 0).unwrap();
        w.params.proj = w.params.proj.clone();
        for t in [
            &mut w.params.proj.w1,
            &mut w.params.proj.b1,
            &mut w.params.proj.w2,
            &mut w.params.proj.b2,
        ] {
            t.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = TokenSequence::new(
            Tensor::randn([144, cfg.vision_dim], 1.0, &mut rng),
            vec![0; 144],
        )
        .unwrap();
        let y = project(&x, &w).unwrap();
        assert_eq!(y.tokens.shape(), &[144, cfg.llm_dim]);
        assert!(y.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_contract_including_empty() {
        let cfg = ModelConfig::tiny();
        let w = EncoderWeights::init(cfg.clone(), 0).unwrap();
        for n in [0, 1, 5] {
            let x =
                TokenSequence::new(Tensor::zeros([n, cfg.vision_dim]), (0..n).collect()).unwrap();
            let y = project(&x, &w).unwrap();
            assert_eq!(y.tokens.shape(), &[n, cfg.llm_dim]);
            assert_eq!(y.chunk_ids, x.chunk_ids);
        }
        let bad = TokenSequence::new(Tensor::zeros([2, cfg.vision_dim + 1]), vec![0, 0]).unwrap();
        assert!(project(&bad, &w).is_err());
    }
}
