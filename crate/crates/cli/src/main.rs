use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vscg_core::config::{AblationName, LossVariant, Mode, ModelConfig};
use vscg_core::Error;

mod commands;
mod dump;

#[derive(Parser)]
#[command(name = "vscg", version, about = "Audio-visual event localization with video-level semantic consistency guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature pack and its split manifest.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus history.csv.
    Train(TrainArgs),
    /// Segment accuracy and confusion matrix of a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of the whole model in both loss modes.
    Gradcheck(GradcheckArgs),
    /// Write per-segment attention maps and the decoding trace of one video.
    DumpAttention(DumpArgs),
    /// Module and objective ablations over several seeds.
    Ablation(AblationArgs),
    /// List the named parameters of a configuration.
    Params(ParamsArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
    Tiny,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

/// Where a model configuration comes from: preset, then file, then flags.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, env = "VSCG_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Pack file to write; the manifest goes next to it as `<stem>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 640)]
    pub n: usize,
    #[arg(long, env = "VSCG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Noise standard deviation around the class prototypes.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Split manifest with `train` and `val` entries.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub ablation: Option<AblationName>,
    #[arg(long)]
    pub variant: Option<LossVariant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from an earlier checkpoint of the same structure.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Confusion matrix CSV; defaults to `<ckpt stem>.<split>.confusion.csv`.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "VSCG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Synthetic videos in the checked batch.
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    /// Keep dropout active (refused: the check needs a deterministic loss).
    #[arg(long)]
    pub with_dropout: bool,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id, searched in every split of the manifest.
    #[arg(long)]
    pub sample: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Directory for runs.csv, table2.txt and table3.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Only the module ablations, not the objective variants.
    #[arg(long)]
    pub skip_losses: bool,
}

#[derive(Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub ablation: Option<AblationName>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => return commands::gradcheck(&a),
        Command::DumpAttention(a) => dump::dump_attention(&a),
        Command::Ablation(a) => commands::ablation(&a),
        Command::Params(a) => commands::params(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
