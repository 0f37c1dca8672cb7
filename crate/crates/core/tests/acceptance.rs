//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mgve_core::harness::{
    gradcheck_fixture, niah_campaign, pipeline_grad_check, synthetic_needles, token_budget,
    NiahSettings, VideoPool,
};
use mgve_core::numerics::{rotary_logits, GradCheckOptions};
use mgve_core::resolution::resize_pos_embed;
use mgve_core::{
    aggregate, crope_logits, dynamic_resize, embed_patches, encode_chunk, encode_chunks,
    encode_video, init_from_2d, merge_tokens, partition_chunks, subimage_grid, sweep_thresholds,
    synth_video, AggregateOptions, Compression, EncoderWeights, MergeMode, ModelConfig, Pattern,
    RopeMode, Tensor, TokenSequence, VideoOptions, VideoTensor,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    if ok {
        Ok(detail.into())
    } else {
        Err(detail.into())
    }
}

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let elapsed = started.elapsed();
    (
        elapsed < limit,
        format!(
            "{:.2}s of {}s budget",
            elapsed.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

/// Independent 2D patch embedding: direct convolution sum, bias, and the
/// resized position table.
fn oracle_2d(
    img: &[f64],
    w: usize,
    h: usize,
    k2: &Tensor,
    bias: &Tensor,
    ape: &Tensor,
    p: usize,
) -> Vec<Vec<f64>> {
    let d = bias.len();
    let (cols, rows) = (w / p, h / p);
    let pos = resize_pos_embed(ape, cols, rows).unwrap();
    let mut out = Vec::with_capacity(rows * cols);
    for py in 0..rows {
        for px in 0..cols {
            let mut token = vec![0.0; d];
            for (o, slot) in token.iter_mut().enumerate() {
                let mut acc = 0.0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            let pixel = img[((py * p + dy) * w + px * p + dx) * 3 + c];
                            acc += k2.data()[((o * p + dy) * p + dx) * 3 + c] * pixel;
                        }
                    }
                }
                *slot = acc + bias.data()[o] + pos.data()[(px * rows + py) * d + o];
            }
            out.push(token);
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for &f in &[1usize, 4, 16] {
        let cfg = ModelConfig {
            frames_per_chunk: f,
            patch_size: 8,
            ..ModelConfig::tiny()
        };
        let mut weights = EncoderWeights::init(cfg.clone(), f as u64).unwrap();
        let k2 = Tensor::randn([cfg.vision_dim, 8, 8, 3], 0.2, &mut rng);
        weights.params.conv_kernel = init_from_2d(&k2, f).unwrap();
        for _ in 0..100 {
            let (w, h) = [(64, 64), (128, 64), (64, 96)][rng.random_range(0..3)];
            let img: Vec<f64> = (0..w * h * 3).map(|_| rng.random()).collect();
            let frames = Tensor::new([f, h, w, 3], img.repeat(f)).unwrap();
            let got = embed_patches(&frames, &weights).unwrap();
            let want = oracle_2d(
                &img,
                w,
                h,
                &k2,
                &weights.params.conv_bias,
                &weights.params.ape,
                8,
            );
            for (r, row) in want.iter().enumerate() {
                for (a, b) in got.row(r).iter().zip(row) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    let (fast, time) = within(Duration::from_secs(10), started);
    check(
        worst < 1e-10 && fast,
        format!("max |3D - 2D| = {worst:.2e} over 300 images, {time}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut intra = 0usize;
    for trial in 0..100 {
        let n = rng.random_range(2..20);
        let d = 2 * rng.random_range(1..9);
        let q = Tensor::randn([n, d], 1.0, &mut rng);
        let k = Tensor::randn([n, d], 1.0, &mut rng);
        let mut ids = Vec::with_capacity(n);
        let mut id = rng.random_range(0..4usize);
        for _ in 0..n {
            id += rng.random_range(0..2usize) * rng.random_range(1..4usize);
            ids.push(id);
        }
        let shift = rng.random_range(1..1000usize);
        let shifted: Vec<usize> = ids.iter().map(|i| i + shift).collect();
        let a = crope_logits(&q, &k, &ids, &ids, 1e4).unwrap();
        let b = crope_logits(&q, &k, &shifted, &shifted, 1e4).unwrap();
        if !a.bit_eq(&b) {
            return Err(format!(
                "trial {trial}: logits changed under id shift {shift}"
            ));
        }
        for i in 0..n {
            for j in 0..n {
                if ids[i] == ids[j] {
                    let plain = q
                        .row(i)
                        .iter()
                        .zip(k.row(j))
                        .fold(0.0, |acc, (x, y)| acc + x * y);
                    if a.data()[i * n + j].to_bits() != plain.to_bits() {
                        return Err(format!(
                            "trial {trial}: intra-chunk logit ({i},{j}) is not a plain dot"
                        ));
                    }
                    intra += 1;
                }
            }
        }
    }
    Ok(format!(
        "100 shifted trials bit-identical, {intra} intra-chunk logits equal plain dots"
    ))
}

fn perturbed(video: &VideoTensor, frame: usize, rng: &mut ChaCha8Rng) -> VideoTensor {
    let mut pixels = video.frame(frame).to_vec();
    let i = rng.random_range(0..pixels.len());
    pixels[i] = 1.0 - pixels[i];
    video.with_frame(frame, &pixels).unwrap()
}

fn criterion_3() -> Outcome {
    let cfg = ModelConfig {
        inter_layers: 3,
        ..ModelConfig::tiny()
    };
    let f = cfg.frames_per_chunk;
    let weights = EncoderWeights::init(cfg.clone(), 3).unwrap();
    let video = synth_video(&Pattern::UniqueNoise { seed: 3 }, 6 * f, 64, 64, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for layers in [1, 3] {
        let mut opts = VideoOptions::from_config(&cfg);
        opts.aggregate.inter_layers = layers;
        let base = encode_video(&video, &weights, &opts).unwrap().tokens;
        for j in 0..6 {
            let frame = j * f + rng.random_range(0..f);
            let other = encode_video(&perturbed(&video, frame, &mut rng), &weights, &opts)
                .unwrap()
                .tokens;
            let mut changed = false;
            for (r, &id) in base.chunk_ids.iter().enumerate() {
                let same = base
                    .tokens
                    .row(r)
                    .iter()
                    .zip(other.tokens.row(r))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if id < j && !same {
                    return Err(format!(
                        "L_inter={layers}: perturbing chunk {j} changed token {r} of chunk {id}"
                    ));
                }
                changed |= id == j && !same;
            }
            if !changed {
                return Err(format!(
                    "L_inter={layers}: perturbing chunk {j} had no effect on it"
                ));
            }
        }
    }
    Ok("prefix tokens bit-identical for every perturbed chunk j in 0..6 at L_inter 1 and 3".into())
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let (weights, video) = gradcheck_fixture("tiny", 4).unwrap();
    let opts = GradCheckOptions {
        step: 1e-5,
        coords_per_input: 12,
        seed: 4,
    };
    let report = pipeline_grad_check(&weights, &video, &opts).unwrap();
    let (fast, time) = within(Duration::from_secs(120), started);
    check(
        report.max_relative_error < 1e-4 && fast,
        format!(
            "max relative error {:.2e} over {} coordinates, {time}",
            report.max_relative_error, report.coordinates
        ),
    )
}

/// Brute-force enumeration of the candidate grids around the ideal count.
fn oracle_grid(w: usize, h: usize, r: usize) -> (usize, usize) {
    let ideal = ((w * h) / (r * r)).max(1);
    let target = (w as f64 / h as f64).ln();
    let mut candidates = Vec::new();
    for tiles in ideal.saturating_sub(1).max(1)..=ideal + 1 {
        for m in 1..=tiles {
            if tiles % m == 0 {
                let n = tiles / m;
                candidates.push((m, n, (target - (m as f64 / n as f64).ln()).abs()));
            }
        }
    }
    let best = candidates.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    candidates
        .into_iter()
        .filter(|c| c.2 <= best + 1e-12)
        .min_by_key(|&(m, n, _)| (m * n, m.abs_diff(n), m))
        .map(|(m, n, _)| (m, n))
        .unwrap()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(192..=4000), rng.random_range(192..=4000));
        let got = subimage_grid(w, h, 384).unwrap();
        if (got.m, got.n) != oracle_grid(w, h, 384) {
            return Err(format!(
                "({w},{h}): got {got:?}, oracle {:?}",
                oracle_grid(w, h, 384)
            ));
        }
    }
    let plan = dynamic_resize(1280, 720, 384, 16).unwrap();
    check(
        (plan.target_w, plan.target_h) == (512, 288),
        format!(
            "1000 random sizes agree with brute force; 1280x720 -> {}x{}",
            plan.target_w, plan.target_h
        ),
    )
}

fn criterion_6() -> Outcome {
    let cfg = ModelConfig::desk();
    let video = synth_video(&Pattern::Constant { rgb: [0.5; 3] }, 960, 2, 2, 2.0).unwrap();
    let chunks = partition_chunks(&video, cfg.frames_per_chunk)
        .unwrap()
        .len();
    let one_layer = ModelConfig {
        vit_layers: 1,
        ..cfg.clone()
    };
    let weights = EncoderWeights::init(one_layer, 6).unwrap();
    let frame = synth_video(&Pattern::UniqueNoise { seed: 6 }, 16, 384, 384, 2.0).unwrap();
    let tokens = encode_chunk(&partition_chunks(&frame, 16).unwrap()[0], &weights)
        .unwrap()
        .tokens
        .rows();
    let budget = token_budget(960, 384, 384, &cfg).unwrap();
    let ok = chunks == 60
        && tokens == 144
        && budget.ratio == 16.0
        && budget.chunks == 60
        && cfg.frames_per_chunk == 16
        && cfg.inter_layers == 3;
    check(
        ok,
        format!(
            "{chunks} chunks for 960 frames, {tokens} tokens per 384x384 chunk, ratio {}, F={}, L_inter={}",
            budget.ratio, cfg.frames_per_chunk, cfg.inter_layers
        ),
    )
}

fn criterion_7() -> Outcome {
    let cfg = ModelConfig::tiny();
    let weights = EncoderWeights::init(cfg.clone(), 7).unwrap();
    let video = synth_video(&Pattern::UniqueNoise { seed: 7 }, 8, 64, 64, 2.0).unwrap();
    let plain = encode_video(&video, &weights, &VideoOptions::from_config(&cfg)).unwrap();
    let mut opts = VideoOptions::from_config(&cfg);
    opts.compression = Some(Compression::Threshold(1.01));
    let guarded = encode_video(&video, &weights, &opts).unwrap();
    if !plain.tokens.tokens.bit_eq(&guarded.tokens.tokens)
        || plain.tokens.chunk_ids != guarded.tokens.chunk_ids
    {
        return Err("threshold 1.01 changed the pipeline output".into());
    }

    let f = cfg.frames_per_chunk;
    let first = synth_video(&Pattern::UniqueNoise { seed: 8 }, f, 64, 64, 2.0).unwrap();
    let twin = VideoTensor::from_frames(
        Tensor::new([2 * f, 64, 64, 3], first.frames().data().repeat(2)).unwrap(),
        2.0,
    )
    .unwrap();
    let maps = encode_chunks(&partition_chunks(&twin, f).unwrap(), &weights).unwrap();
    let seq = TokenSequence::from_feature_maps(&maps).unwrap();
    let merged = merge_tokens(&seq, 0.99, MergeMode::Transitive).unwrap();
    if merged.sequence.len() * 2 != seq.len() || merged.sequence.chunk_ids.iter().any(|&id| id != 0)
    {
        return Err(format!(
            "twin chunks: {} -> {} tokens",
            seq.len(),
            merged.sequence.len()
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let ids: Vec<usize> = (0..8).flat_map(|c| std::iter::repeat_n(c, 16)).collect();
        let base = Tensor::randn([16, 16], 1.0, &mut rng);
        let noise = Tensor::randn([128, 16], 1.0, &mut rng);
        let drift = rng.random_range(0.3..1.5);
        let tokens = Tensor::from_fn([128, 16], |i| {
            base.data()[i % 256] + drift * noise.data()[i]
        });
        let seq = TokenSequence::new(tokens, ids).unwrap();
        let row = sweep_thresholds(&seq, &[0.6], MergeMode::Transitive)
            .unwrap()
            .remove(0);
        if row.threshold.is_none() {
            return Err(format!(
                "60% reduction unreachable (closest {:.3})",
                row.achieved
            ));
        }
        worst = worst.max((row.achieved - 0.6).abs());
    }
    check(
        worst <= 0.02,
        format!("1.01 is a no-op, twin chunks halve with earlier ids, 60% sweep off by at most {worst:.3}"),
    )
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let weights = EncoderWeights::init(ModelConfig::niah(), 8).unwrap();
    let pool = VideoPool {
        videos: 6,
        width: 32,
        height: 32,
        fps: 2.0,
        seed: 8,
    };
    let needles = synthetic_needles(8, 24, 24, 8).unwrap();
    let settings = NiahSettings {
        chunk_counts: (1..=16).collect(),
        trials_per_chunk: 50,
        seed: 8,
    };
    let rows = niah_campaign(&weights, &pool, &needles, &settings).unwrap();
    let trials: usize = rows.iter().map(|r| r.trials).sum();
    let worst = rows.iter().map(|r| r.accuracy).fold(1.0, f64::min);
    let (fast, time) = within(Duration::from_secs(300), started);
    check(
        rows.len() == 16 && worst == 1.0 && fast,
        format!("minimum accuracy {worst} over c_V 1..16 ({trials} trials), {time}"),
    )
}

fn criterion_9() -> Outcome {
    let cfg = ModelConfig::tiny();
    let weights = EncoderWeights::init(cfg.clone(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, 4)).collect();
    let seq = TokenSequence::new(Tensor::randn([12, cfg.vision_dim], 1.0, &mut rng), ids).unwrap();
    let base = AggregateOptions::from(&cfg);
    let bypass = AggregateOptions {
        inter_layers: 0,
        ..base.clone()
    };
    if aggregate(&seq, &weights, &bypass).unwrap() != seq {
        return Err("L_inter=0 is not the identity".into());
    }
    let standard = AggregateOptions {
        rope_mode: RopeMode::Standard,
        ..base.clone()
    };
    let multi_diff = aggregate(&seq, &weights, &base)
        .unwrap()
        .tokens
        .max_abs_diff(&aggregate(&seq, &weights, &standard).unwrap().tokens);
    if multi_diff == 0.0 {
        return Err("standard RoPE equals C-RoPE on a multi-chunk input".into());
    }

    // Single chunk: the standard kernel with every position equal reduces to
    // the zero rotation, exactly like C-RoPE.
    for trial in 0..50 {
        let n = rng.random_range(1..10);
        let q = Tensor::randn([n, 8], 1.0, &mut rng);
        let k = Tensor::randn([n, 8], 1.0, &mut rng);
        let id = rng.random_range(0..100usize);
        let c = crope_logits(&q, &k, &vec![id; n], &vec![id; n], 1e4).unwrap();
        let s = rotary_logits(&q, &k, &vec![0i64; n], &vec![0i64; n], 1e4, None).unwrap();
        if !c.bit_eq(&s) {
            return Err(format!("trial {trial}: single-chunk logits differ"));
        }
    }
    let one_token =
        TokenSequence::new(Tensor::randn([1, cfg.vision_dim], 1.0, &mut rng), vec![4]).unwrap();
    let single_same = aggregate(&one_token, &weights, &base)
        .unwrap()
        .tokens
        .bit_eq(&aggregate(&one_token, &weights, &standard).unwrap().tokens);
    check(
        single_same,
        format!("bypass is identity; multi-chunk outputs differ by {multi_diff:.2e}; single-chunk outputs coincide"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("init equivalence", criterion_1),
        ("C-RoPE relative property", criterion_2),
        ("causality", criterion_3),
        ("gradient check", criterion_4),
        ("partition oracle", criterion_5),
        ("structural counts", criterion_6),
        ("compression contract", criterion_7),
        ("NIAH campaign", criterion_8),
        ("ablation switches", criterion_9),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
