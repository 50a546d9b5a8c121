mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dialbt::decode::Strategy;

#[derive(Parser, Debug)]
#[command(name = "dialbt", version, about = "Back-translation dialogue models: data, training, decoding, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Training {
    /// Prepared data directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Maximum optimizer steps (per phase for `bt`).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum StrategyArg {
    Beam,
    Diverse,
    Nucleus,
    Fused,
    Mmi,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Beam => Strategy::Beam,
            StrategyArg::Diverse => Strategy::Diverse,
            StrategyArg::Nucleus => Strategy::Nucleus,
            StrategyArg::Fused => Strategy::Fused,
            StrategyArg::Mmi => Strategy::Mmi,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic paired corpus and monologue corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num_pairs: Option<usize>,
        #[arg(long)]
        num_mono: Option<usize>,
        #[arg(long)]
        generic_rate: Option<f64>,
    },
    /// Tokenize, filter, split and build the vocabulary.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Paired TSV: context<TAB>response.
        #[arg(long, value_name = "PATH")]
        pairs: Option<PathBuf>,
        /// Monologue file, one utterance per line.
        #[arg(long, value_name = "PATH")]
        mono: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        blocklist: Option<PathBuf>,
        #[arg(long)]
        min_count: Option<u64>,
    },
    /// Jointly train the forward and backward models on paired data.
    TrainInit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
    },
    /// Iterative back translation from an initialized checkpoint.
    Bt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Beam size for pseudo-pair decoding.
        #[arg(long)]
        pseudo_beam: Option<usize>,
    },
    /// Forward model trained jointly with monologue autoencoding.
    TrainMultitask {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        mixing_ratio: Option<f64>,
    },
    /// Language model on the monologue corpus, for fusion.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
    },
    /// Context/response discriminator for the adversarial metric.
    TrainDisc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
    },
    /// Generate one response per context.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Contexts, one per line (first column of a TSV); defaults to the
        /// prepared test split.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        diversity: Option<f64>,
        #[arg(long)]
        nucleus_p: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        mmi_lambda: Option<f64>,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Language model checkpoint for fused decoding.
        #[arg(long, value_name = "PATH")]
        lm: Option<PathBuf>,
        /// Backward model checkpoint for MMI; defaults to --checkpoint.
        #[arg(long, value_name = "PATH")]
        backward: Option<PathBuf>,
    },
    /// Retrieval baseline over the monologue corpus.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// Prefilter size.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score generations against references.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        hyp: Option<PathBuf>,
        #[arg(long = "ref", value_name = "PATH")]
        reference: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Forward model for perplexity on the references.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        disc: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of primitives and model losses.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"status": "error", "category": e.category(), "message": e.to_string()})
            );
            ExitCode::from(e.exit_code())
        }
    }
}
