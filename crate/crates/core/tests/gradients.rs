use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mgve_core::harness::{gradcheck_fixture, pipeline_grad_check};
use mgve_core::ifa::{aggregate_on, AggregateOptions};
use mgve_core::numerics::{grad_check, GradCheckOptions, Mask, RowMix, Tape, Var};
use mgve_core::resolution::pos_embed_plan;
use mgve_core::{synth_video, EncoderWeights, ModelConfig, Pattern, PoolMode, Result, Tensor};

const TRIALS: u64 = 100;
const PRIMITIVE_TOL: f64 = 1e-6;

type Built = (
    Vec<Tensor>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Sync>,
);

/// Runs `TRIALS` seeded checks. `build` draws the inputs and the primitive;
/// the objective is `Σ gelu(op(·))` so that
/// every output coordinate gets a different weight.
fn check_primitive<B>(name: &str, build: B)
where
    B: Fn(&mut ChaCha8Rng) -> Built,
{
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let (inputs, f) = build(&mut rng);
        let opts = GradCheckOptions {
            step: 1e-6,
            coords_per_input: 24,
            seed: trial,
        };
        let report = grad_check(
            |tape, vars| {
                let y = f(tape, vars)?;
                let y = tape.gelu(y)?;
                tape.sum(y)
            },
            &inputs,
            &opts,
        )
        .unwrap();
        worst = worst.max(report.max_relative_error);
        assert!(
            report.max_relative_error < PRIMITIVE_TOL,
            "{name} trial {trial}: relative error {:.3e} at {:?}",
            report.max_relative_error,
            report.worst
        );
    }
    eprintln!("{name}: worst relative error {worst:.2e}");
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..6),
        rng.random_range(1..6),
        rng.random_range(1..6),
    )
}

fn randn(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn matmul_family() {
    check_primitive("matmul", |rng| -> Built {
        let (m, k, n) = dims(rng);
        (
            vec![randn(rng, [m, k]), randn(rng, [k, n])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        )
    });
    check_primitive("matmul_nt", |rng| -> Built {
        let (m, k, n) = dims(rng);
        (
            vec![randn(rng, [m, k]), randn(rng, [n, k])],
            Box::new(|t, v| t.matmul_nt(v[0], v[1])),
        )
    });
    check_primitive("transpose", |rng| -> Built {
        let (m, n, _) = dims(rng);
        (vec![randn(rng, [m, n])], Box::new(|t, v| t.transpose(v[0])))
    });
}

#[test]
fn elementwise_family() {
    check_primitive("add", |rng| -> Built {
        let (m, n, _) = dims(rng);
        (
            vec![randn(rng, [m, n]), randn(rng, [m, n])],
            Box::new(|t, v| t.add(v[0], v[1])),
        )
    });
    check_primitive("add_row", |rng| -> Built {
        let (m, n, _) = dims(rng);
        (
            vec![randn(rng, [m, n]), randn(rng, [n])],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        )
    });
    check_primitive("scale", |rng| -> Built {
        let (m, n, _) = dims(rng);
        let s = rng.random_range(-2.0..2.0);
        (
            vec![randn(rng, [m, n])],
            Box::new(move |t, v| t.scale(v[0], s)),
        )
    });
    check_primitive("gelu", |rng| -> Built {
        let (m, n, _) = dims(rng);
        (vec![randn(rng, [m, n])], Box::new(|t, v| t.gelu(v[0])))
    });
}

#[test]
fn normalization_family() {
    check_primitive("layer_norm", |rng| -> Built {
        let (m, _, _) = dims(rng);
        let n = rng.random_range(2..8);
        (
            vec![randn(rng, [m, n]), randn(rng, [n]), randn(rng, [n])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        )
    });
    check_primitive("softmax", |rng| -> Built {
        let (m, n, _) = dims(rng);
        (
            vec![randn(rng, [m, n])],
            Box::new(|t, v| t.softmax_rows(v[0], None)),
        )
    });
    check_primitive("masked softmax", |rng| -> Built {
        let n = rng.random_range(1..7);
        let mask = Arc::new(Mask::causal(n));
        (
            vec![randn(rng, [n, n])],
            Box::new(move |t, v| t.softmax_rows(v[0], Some(mask.clone()))),
        )
    });
}

#[test]
fn layout_family() {
    check_primitive("slice_cols", |rng| -> Built {
        let (m, _, _) = dims(rng);
        let n = rng.random_range(2..8);
        let start = rng.random_range(0..n - 1);
        let len = rng.random_range(1..=n - start);
        (
            vec![randn(rng, [m, n])],
            Box::new(move |t, v| t.slice_cols(v[0], start, len)),
        )
    });
    check_primitive("concat_cols", |rng| -> Built {
        let (m, a, b) = dims(rng);
        (
            vec![randn(rng, [m, a]), randn(rng, [m, b])],
            Box::new(|t, v| t.concat_cols(vec![v[0], v[1]])),
        )
    });
    check_primitive("concat_rows", |rng| -> Built {
        let (a, b, n) = dims(rng);
        (
            vec![randn(rng, [a, n]), randn(rng, [b, n])],
            Box::new(|t, v| t.concat_rows(vec![v[0], v[1]])),
        )
    });
    check_primitive("reshape", |rng| -> Built {
        let (a, b, c) = dims(rng);
        (
            vec![randn(rng, [a, b, c])],
            Box::new(move |t, v| t.reshape(v[0], [a * b, c])),
        )
    });
}

#[test]
fn pooling_and_resampling_family() {
    check_primitive("avg_pool2x2", |rng| -> Built {
        let (r, c) = (2 * rng.random_range(1..4), 2 * rng.random_range(1..4));
        let d = rng.random_range(1..4);
        let plan = Arc::new(RowMix::avg_pool2x2(r, c).unwrap());
        (
            vec![randn(rng, [r * c, d])],
            Box::new(move |t, v| t.row_mix(v[0], plan.clone())),
        )
    });
    check_primitive("pos_embed_plan", |rng| -> Built {
        let side = rng.random_range(2..5);
        let (w, h) = (rng.random_range(1..7), rng.random_range(1..7));
        let d = rng.random_range(1..4);
        let plan = Arc::new(pos_embed_plan(side, w, h).unwrap());
        (
            vec![randn(rng, [side * side, d])],
            Box::new(move |t, v| t.row_mix(v[0], plan.clone())),
        )
    });
    check_primitive("max_pool2x2", |rng| -> Built {
        let (r, c) = (2 * rng.random_range(1..4), 2 * rng.random_range(1..4));
        let d = rng.random_range(1..4);
        (
            vec![randn(rng, [r * c, d])],
            Box::new(move |t, v| t.max_pool2x2(v[0], r, c)),
        )
    });
}

#[test]
fn rotary_family() {
    check_primitive("rotary_logits", |rng| -> Built {
        let (n, m, _) = dims(rng);
        let d = 2 * rng.random_range(1..4);
        let pq: Arc<Vec<i64>> = Arc::new((0..n).map(|_| rng.random_range(0..6)).collect());
        let pk: Arc<Vec<i64>> = Arc::new((0..m).map(|_| rng.random_range(0..6)).collect());
        (
            vec![randn(rng, [n, d]), randn(rng, [m, d])],
            Box::new(move |t, v| t.rotary_logits(v[0], v[1], pq.clone(), pk.clone(), 1e4, None)),
        )
    });
    check_primitive("masked rotary_logits", |rng| -> Built {
        let n = rng.random_range(1..6);
        let d = 2 * rng.random_range(1..4);
        let mut ids: Vec<i64> = (0..n).map(|_| rng.random_range(0..4)).collect();
        ids.sort_unstable();
        let ids = Arc::new(ids);
        let mask = Arc::new(Mask::causal(n));
        (
            vec![randn(rng, [n, d]), randn(rng, [n, d])],
            Box::new(move |t, v| {
                t.rotary_logits(
                    v[0],
                    v[1],
                    ids.clone(),
                    ids.clone(),
                    1e4,
                    Some(mask.clone()),
                )
            }),
        )
    });
}

fn weight_check(cfg: ModelConfig, seed: u64, chunks: usize) -> f64 {
    let weights = EncoderWeights::init(cfg.clone(), seed).unwrap();
    let video = synth_video(
        &Pattern::UniqueNoise { seed },
        chunks * cfg.frames_per_chunk,
        64,
        64,
        2.0,
    )
    .unwrap();
    pipeline_grad_check(&weights, &video, &GradCheckOptions::default())
        .unwrap()
        .max_relative_error
}

#[test]
fn encode_chunk_gradients_on_tiny_config() {
    let cfg = ModelConfig {
        inter_layers: 0,
        ..ModelConfig::tiny()
    };
    assert!(weight_check(cfg, 21, 1) < 1e-4);
}

#[test]
fn max_pool_pipeline_gradients() {
    let cfg = ModelConfig {
        pooling: PoolMode::Max,
        ..ModelConfig::tiny()
    };
    assert!(weight_check(cfg, 22, 2) < 1e-4);
}

#[test]
fn attention_only_pipeline_gradients() {
    let cfg = ModelConfig {
        attention_only: true,
        ..ModelConfig::tiny()
    };
    assert!(weight_check(cfg, 23, 2) < 1e-4);
}

#[test]
fn small_pipeline_gradients() {
    let (weights, video) = gradcheck_fixture("small", 25).unwrap();
    let opts = GradCheckOptions {
        coords_per_input: 4,
        ..GradCheckOptions::default()
    };
    assert!(
        pipeline_grad_check(&weights, &video, &opts)
            .unwrap()
            .max_relative_error
            < 1e-4
    );
}

#[test]
fn aggregate_gradients_on_two_chunks() {
    let cfg = ModelConfig::tiny();
    let weights = EncoderWeights::init(cfg.clone(), 24).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let ids = vec![0usize, 0, 0, 0, 1, 1, 1, 1];
    let opts = AggregateOptions::from(&cfg);
    let mut inputs = vec![Tensor::randn([ids.len(), cfg.vision_dim], 1.0, &mut rng)];
    inputs.extend(weights.params.named().into_iter().map(|(_, t)| t.clone()));
    let report = grad_check(
        |tape, vars| {
            let params = weights.params.with_leaves(vars[1..].to_vec())?;
            let y = aggregate_on(tape, &params, &cfg, &opts, vars[0], &ids)?;
            tape.sum(y)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}
