mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use surgeon_core::Error;

/// Tokenizer surgery, data packing and checkpoint merging for byte-level BPE models.
#[derive(Debug, Parser)]
#[command(name = "surgeon", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for commands that sample.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only log errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    /// Print a single JSON document on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct NormFlags {
    #[arg(long)]
    pub no_nfkc: bool,
    #[arg(long)]
    pub no_alif: bool,
    #[arg(long)]
    pub no_tatweel: bool,
    #[arg(long)]
    pub no_ya: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize Arabic text line by line.
    Normalize {
        #[command(flatten)]
        flags: NormFlags,
        input: PathBuf,
        output: PathBuf,
    },
    /// Print token ids, one line per input line.
    Tokenize { model: PathBuf, input: PathBuf },
    /// Tokens per whitespace word, optionally against an extended tokenizer.
    Fertility {
        model: PathBuf,
        sample: PathBuf,
        /// Extended tokenizer to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Add candidate pieces the base tokenizer splits into several tokens.
    Inject {
        base: PathBuf,
        pieces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Grow the embedding and set new rows to the mean of their old subtokens.
    EmbedInit {
        model: PathBuf,
        base_tokenizer: PathBuf,
        report: PathBuf,
        #[arg(long)]
        embed: String,
        /// Untied output head; omit for tied embeddings.
        #[arg(long)]
        head: Option<String>,
        /// Fallback row for empty decompositions (default: the tokenizer's unk).
        #[arg(long)]
        unk: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect tensor containers.
    Tensors {
        #[command(subcommand)]
        command: TensorsCommand,
    },
    /// Tokenize a JSONL corpus into a flat i32 token file.
    PackPretrain {
        tokenizer: PathBuf,
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip text normalization.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Draw one training window and its segment boundaries.
    SampleWindow {
        stream: PathBuf,
        #[arg(long, default_value_t = 0)]
        rank: u64,
        #[arg(long, default_value_t = 0)]
        step: u64,
        #[arg(long)]
        len: usize,
    },
    /// Measure window sampling throughput.
    BenchLoader {
        stream: PathBuf,
        #[arg(long, default_value_t = 4096)]
        len: usize,
        #[arg(long, default_value_t = 1000)]
        windows: usize,
    },
    /// Render, dedup and mask an instruction dataset.
    PackSft {
        tokenizer: PathBuf,
        data: PathBuf,
        #[arg(long, default_value = "")]
        system: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Interpolate checkpoints.
    Merge {
        #[command(subcommand)]
        command: MergeCommand,
    },
    /// Response-masked cross-entropy over f64 log-probs and i32 labels.
    MaskedCe { logprobs: PathBuf, labels: PathBuf },
    /// DPO loss, margin and reward accuracy over JSONL pairs.
    DpoLoss {
        pairs: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
    },
    /// Effective bits-per-weight for a quantization scheme.
    QuantEstimate {
        /// JSON list of {name, shape}, or a .safetensors file.
        manifest: PathBuf,
        /// Scheme JSON file or preset name (q4_k_m, q5_k_m).
        #[arg(long)]
        scheme: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum TensorsCommand {
    /// List name, dtype, shape and byte size per tensor.
    Ls { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum MergeCommand {
    /// Linear interpolation: (1 - t) * a + t * b.
    Lerp {
        a: PathBuf,
        b: PathBuf,
        #[arg(short)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spherical interpolation per tensor, linear when the operands are colinear.
    Slerp {
        a: PathBuf,
        b: PathBuf,
        #[arg(short)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weighted average of two or more stores.
    Soup {
        #[arg(required = true, num_args = 2..)]
        stores: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a list of recipes and write a manifest.
    Run {
        recipes: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let level = if cli.global.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_VALIDATION })
        }
    }
}

/// Shorthand for command results.
pub type CmdResult = Result<(), Error>;
