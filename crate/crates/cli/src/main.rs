use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "mgve", version, about = "Multi-granularity video encoder")]
pub struct Cli {
    /// Model preset (desk, small, tiny, niah) for commands that do not read
    /// a weights file. Defaults to desk, or niah for the NIAH campaign.
    #[arg(long, global = true)]
    pub preset: Option<String>,

    /// key=value configuration file applied over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Upper bound on worker threads.
    #[arg(long, global = true, env = "MGVE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AggregateFlags {
    /// Rotary mode of the aggregator: crope or standard.
    #[arg(long)]
    pub rope: Option<String>,

    /// Number of aggregator layers (0 bypasses the aggregator).
    #[arg(long = "l-inter")]
    pub l_inter: Option<usize>,

    /// Replace aggregator blocks by bare causal attention.
    #[arg(long)]
    pub attention_only: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Encode a video into projected tokens.
    Encode {
        /// MGVV file or `synthetic:<noise|constant|square>[:key=value,...]`.
        #[arg(long)]
        video: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target fraction of tokens removed by compression.
        #[arg(long, conflicts_with = "threshold")]
        compress_ratio: Option<f64>,
        /// Fixed cosine-similarity merge threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Merge only directly adjacent chunk pairs.
        #[arg(long)]
        pairwise: bool,
        /// Chunk budget for accelerated playback.
        #[arg(long)]
        max_chunks: Option<usize>,
        #[command(flatten)]
        agg: AggregateFlags,
    },
    /// Encode a PNG or JPEG image (thumbnail plus sub-images).
    EncodeImage {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Chunk id given to every view.
        #[arg(long, default_value_t = 0)]
        replication_id: usize,
        #[command(flatten)]
        agg: AggregateFlags,
    },
    /// Print the sub-image grid and resize plan for image sizes.
    Partition {
        #[arg(long, requires = "height")]
        width: Option<usize>,
        #[arg(long, requires = "width")]
        height: Option<usize>,
        /// Additional sizes as WIDTHxHEIGHT.
        sizes: Vec<String>,
    },
    /// Check whole-pipeline gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        size: String,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 16)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Run the needle-in-a-haystack campaign.
    Niah {
        #[arg(long, default_value_t = 16)]
        chunks_max: usize,
        #[arg(long, default_value_t = 50)]
        trials_per_chunk: usize,
        /// Number of haystack videos in the pool.
        #[arg(long, default_value_t = 6)]
        videos: usize,
        #[arg(long, default_value_t = 8)]
        needles: usize,
        /// Haystack frame side in pixels.
        #[arg(long, default_value_t = 32)]
        frame_size: usize,
    },
    /// Token counts against a per-frame baseline.
    Budget {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
    },
    /// Sweep merge thresholds for target reduction ratios.
    Compress {
        #[arg(long)]
        video: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6")]
        targets: Vec<f64>,
        #[arg(long)]
        pairwise: bool,
    },
    /// Write seeded random weights.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    commands::dispatch(cli).context("command failed")
}
