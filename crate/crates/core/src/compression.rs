//! Token merging across adjacent chunks at corresponding token indices.
//!
//! Token `p` of chunk `i` is compared with token `p` of chunk `i + 1` by
//! cosine similarity. Pairs above the threshold are merged into a running
//! average that keeps the earlier chunk's id.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ifa::TokenSequence;
use crate::numerics::{dot, Tensor};

/// Upper end of the threshold range; no cosine exceeds it.
pub const NO_MERGE_THRESHOLD: f64 = 1.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    /// Chains of merges across several chunks collapse into one survivor.
    #[default]
    Transitive,
    /// A token absorbs at most its immediate successor.
    Pairwise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeResult {
    pub sequence: TokenSequence,
    /// Fraction of input tokens removed.
    pub ratio: f64,
}

/// Chunk layout of a video-ordered sequence: `(chunks, tokens per chunk)`.
fn chunk_layout(seq: &TokenSequence) -> Result<(usize, usize)> {
    if seq.is_empty() {
        return Ok((0, 0));
    }
    let mut runs = vec![1usize];
    for w in seq.chunk_ids.windows(2) {
        if w[1] < w[0] {
            return Err(Error::Contract("chunk ids must be non-decreasing".into()));
        }
        if w[1] == w[0] {
            *runs.last_mut().expect("non-empty") += 1;
        } else {
            runs.push(1);
        }
    }
    let per_chunk = runs[0];
    if runs.iter().any(|&r| r != per_chunk) {
        return Err(Error::Contract(format!(
            "chunks must hold equal token counts, found {runs:?}"
        )));
    }
    Ok((runs.len(), per_chunk))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = dot(a, a).sqrt() * dot(b, b).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Similarity of token `p` between chunk `i` and `i + 1`, indexed `[i][p]`.
fn adjacent_similarities(seq: &TokenSequence, chunks: usize, per_chunk: usize) -> Vec<Vec<f64>> {
    (0..chunks.saturating_sub(1))
        .map(|i| {
            (0..per_chunk)
                .map(|p| {
                    cosine(
                        seq.tokens.row(i * per_chunk + p),
                        seq.tokens.row((i + 1) * per_chunk + p),
                    )
                })
                .collect()
        })
        .collect()
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(-1.0..=NO_MERGE_THRESHOLD).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside [-1, 1.01]"
        )));
    }
    Ok(())
}

pub fn merge_tokens(seq: &TokenSequence, threshold: f64, mode: MergeMode) -> Result<MergeResult> {
    check_threshold(threshold)?;
    let (chunks, per_chunk) = chunk_layout(seq)?;
    let sims = adjacent_similarities(seq, chunks, per_chunk);
    Ok(merge_with(seq, chunks, per_chunk, &sims, threshold, mode))
}

fn merge_with(
    seq: &TokenSequence,
    chunks: usize,
    per_chunk: usize,
    sims: &[Vec<f64>],
    threshold: f64,
    mode: MergeMode,
) -> MergeResult {
    if seq.is_empty() {
        return MergeResult {
            sequence: seq.clone(),
            ratio: 0.0,
        };
    }
    // members[i][p]: rows absorbed by the chain starting at (i, p); empty
    // when (i, p) itself was absorbed by an earlier chain.
    let mut members: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); per_chunk]; chunks];
    for p in 0..per_chunk {
        let mut head = 0;
        members[0][p].push(p);
        for i in 1..chunks {
            let row = i * per_chunk + p;
            let joins = sims[i - 1][p] > threshold
                && match mode {
                    MergeMode::Transitive => true,
                    MergeMode::Pairwise => members[head][p].len() < 2,
                };
            if joins {
                members[head][p].push(row);
            } else {
                head = i;
                members[i][p].push(row);
            }
        }
    }

    let d = seq.dim();
    let mut data = Vec::new();
    let mut ids = Vec::new();
    for (i, chunk) in members.iter().enumerate() {
        for rows in chunk.iter().filter(|m| !m.is_empty()) {
            if let [only] = rows.as_slice() {
                data.extend_from_slice(seq.tokens.row(*only));
            } else {
                let mut acc = vec![0.0; d];
                for &r in rows {
                    for (a, v) in acc.iter_mut().zip(seq.tokens.row(r)) {
                        *a += v;
                    }
                }
                let n = rows.len() as f64;
                data.extend(acc.into_iter().map(|v| v / n));
            }
            ids.push(seq.chunk_ids[i * per_chunk]);
        }
    }
    let kept = ids.len();
    let tokens = Tensor::new([kept, d], data).expect("merged token layout");
    MergeResult {
        sequence: TokenSequence {
            tokens,
            chunk_ids: ids,
        },
        ratio: 1.0 - kept as f64 / seq.len() as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub target: f64,
    /// `None` when no threshold reaches the target within tolerance.
    pub threshold: Option<f64>,
    /// Ratio at `threshold`, or the closest ratio seen when unreachable.
    pub achieved: f64,
}

/// Accepted distance between achieved and target reduction ratio.
pub const SWEEP_TOLERANCE: f64 = 0.02;

/// Bisects the threshold for each target reduction ratio.
pub fn sweep_thresholds(
    seq: &TokenSequence,
    targets: &[f64],
    mode: MergeMode,
) -> Result<Vec<SweepRow>> {
    if let Some(t) = targets.iter().find(|t| !(0.0..=0.9).contains(*t)) {
        return Err(Error::Config(format!("target ratio {t} outside [0, 0.9]")));
    }
    let (chunks, per_chunk) = chunk_layout(seq)?;
    let sims = adjacent_similarities(seq, chunks, per_chunk);
    let ratio_at = |thr: f64| merge_with(seq, chunks, per_chunk, &sims, thr, mode).ratio;

    Ok(targets
        .iter()
        .map(|&target| {
            let mut hi = NO_MERGE_THRESHOLD;
            let mut lo = -1.0;
            let mut best = (f64::INFINITY, ratio_at(hi));
            for candidate in [hi, lo] {
                let r = ratio_at(candidate);
                if (r - target).abs() <= SWEEP_TOLERANCE {
                    return SweepRow {
                        target,
                        threshold: Some(candidate),
                        achieved: r,
                    };
                }
                if (r - target).abs() < best.0 {
                    best = ((r - target).abs(), r);
                }
            }
            for _ in 0..64 {
                let mid = 0.5 * (lo + hi);
                let r = ratio_at(mid);
                if (r - target).abs() <= SWEEP_TOLERANCE {
                    return SweepRow {
                        target,
                        threshold: Some(mid),
                        achieved: r,
                    };
                }
                if (r - target).abs() < best.0 {
                    best = ((r - target).abs(), r);
                }
                // Ratio falls as the threshold rises.
                if r > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            SweepRow {
                target,
                threshold: None,
                achieved: best.1,
            }
        })
        .collect())
}
