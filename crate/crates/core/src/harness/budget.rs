use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::pipeline::pipeline_plan;
use crate::resolution::ResizePlan;

/// Token counts for one video against a per-frame baseline that encodes
/// every frame separately with the same pooled grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenBudget {
    pub frames: usize,
    pub plan: ResizePlan,
    /// Patch tokens per frame before pooling.
    pub patches_per_frame: usize,
    pub chunks: usize,
    pub tokens_mavors: usize,
    pub tokens_per_frame_baseline: usize,
    pub ratio: f64,
}

pub fn token_budget(
    frames: usize,
    width: usize,
    height: usize,
    cfg: &ModelConfig,
) -> Result<TokenBudget> {
    if frames == 0 {
        return Err(Error::EmptyInput("token budget needs at least one frame"));
    }
    let plan = pipeline_plan(width, height, cfg)?;
    let (cols, rows) = plan.grid(cfg.patch_size);
    let n = rows * cols;
    let chunks = frames.div_ceil(cfg.frames_per_chunk);
    let tokens_mavors = chunks * n / 4;
    let baseline = frames * n / 4;
    Ok(TokenBudget {
        frames,
        plan,
        patches_per_frame: n,
        chunks,
        tokens_mavors,
        tokens_per_frame_baseline: baseline,
        ratio: baseline as f64 / tokens_mavors as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let cfg = ModelConfig::desk();
        let b = token_budget(960, 384, 384, &cfg).unwrap();
        assert_eq!((b.chunks, b.patches_per_frame), (60, 576));
        assert_eq!(
            (b.tokens_mavors, b.tokens_per_frame_baseline),
            (8640, 138_240)
        );
        assert_eq!(b.ratio, 16.0);
        assert_eq!(token_budget(16, 384, 384, &cfg).unwrap().ratio, 16.0);
        assert_eq!(token_budget(1, 384, 384, &cfg).unwrap().ratio, 1.0);
    }

    #[test]
    fn ratio_is_chunk_length_for_whole_chunks() {
        let cfg = ModelConfig::desk();
        for k in 1..40 {
            assert_eq!(token_budget(16 * k, 1280, 720, &cfg).unwrap().ratio, 16.0);
        }
    }
}
