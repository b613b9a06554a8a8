mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mmprompt", version, about = "Prompt-tuned frozen masked LM for video question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Caption MLM over the `pretrain` split, training every new parameter.
    Pretrain(RunArgs),
    /// QA fine-tuning from a checkpoint.
    Finetune(RunArgs),
    /// Top-1 accuracy of a checkpoint on one split.
    Evaluate(RunArgs),
    /// Finite-difference gradient checks for every block type.
    Gradcheck {
        /// Plants a backward bug to confirm the checker catches it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Writes a synthetic planted-signal corpus.
    SynthData(SynthArgs),
    /// Prints a checkpoint's sections and metadata as JSON.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args, Clone, Default)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; receives the echoed config, logs and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub template: Option<u8>,
    #[arg(long, value_enum)]
    pub vocab: Option<VocabArg>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long, value_enum)]
    pub reparam: Option<Switch>,
    #[arg(long, value_enum)]
    pub mapper: Option<MapperArg>,
    #[arg(long, value_enum)]
    pub adapters: Option<Switch>,
    /// Evaluation split name.
    #[arg(long)]
    pub split: Option<String>,
    /// Further `key=value` overrides.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 128)]
    pub pretrain: usize,
    #[arg(long, default_value_t = 64)]
    pub train: usize,
    #[arg(long, default_value_t = 32)]
    pub val: usize,
    #[arg(long, default_value_t = 64)]
    pub test: usize,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 768)]
    pub feature_dim: usize,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    All,
    Prompts,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum VocabArg {
    Topk,
    Mincount,
    Auto,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MapperArg {
    Vpn,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Adapter,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gradcheck { inject_fault } => {
            commands::gradcheck(inject_fault.map(|FaultArg::Adapter| mmprompt::gradsuite::Fault::AdapterSignFlip))
        }
        Command::SynthData(a) => commands::synth_data(&a),
        Command::InspectCheckpoint { path } => commands::inspect(&path),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
