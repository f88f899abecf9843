use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use symtrans_core::loss::RegistrationMode;
use symtrans_core::model::Placement;
use symtrans_core::verify::Suite;

use crate::commands;
use crate::error::exit;

#[derive(Debug, Parser)]
#[command(name = "symtrans", version, about = "SymTrans deformable registration toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded synthetic registration pairs as SVOL files.
    GenData(GenDataArgs),
    /// Train a model on the synthetic pair stream.
    Train(TrainArgs),
    /// Register a moving volume to a fixed volume with a checkpoint.
    Register(RegisterArgs),
    /// Report folding and optional Dice for a displacement field.
    Eval(EvalArgs),
    /// Run gradient, oracle and integration self-checks.
    Verify(VerifyArgs),
    /// Parameter and multiply-accumulate counts of a model config.
    Count(CountArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Synthetic data spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub pairs: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Disp,
    Diff,
}

impl From<ModeArg> for RegistrationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Disp => RegistrationMode::Displacement,
            ModeArg::Diff => RegistrationMode::Diffeomorphic,
        }
    }
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the mode stored in the checkpoint config.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub out_field: PathBuf,
    #[arg(long)]
    pub out_warped: PathBuf,
    /// Moving labels to warp and score against `--fixed-labels`.
    #[arg(long, requires = "fixed_labels")]
    pub moving_labels: Option<PathBuf>,
    #[arg(long, requires = "moving_labels")]
    pub fixed_labels: Option<PathBuf>,
    /// Manifest path; defaults to the field path with extension `manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Displacement field (SVOL kind 2).
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, requires = "fixed_labels")]
    pub moving_labels: Option<PathBuf>,
    #[arg(long, requires = "moving_labels")]
    pub fixed_labels: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Gradcheck,
    Oracles,
    Diffeo,
    All,
}

impl SuiteArg {
    pub fn suites(self) -> Vec<Suite> {
        match self {
            SuiteArg::Gradcheck => vec![Suite::Gradcheck],
            SuiteArg::Oracles => vec![Suite::Oracles],
            SuiteArg::Diffeo => vec![Suite::Diffeo],
            SuiteArg::All => Suite::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    pub suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `report.json` and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlacementArg {
    Symmetric,
    EncoderOnly,
    DecoderOnly,
    BottomOnly,
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::Symmetric => Placement::Symmetric,
            PlacementArg::EncoderOnly => Placement::EncoderOnly,
            PlacementArg::DecoderOnly => Placement::DecoderOnly,
            PlacementArg::BottomOnly => Placement::BottomOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Model config (JSON).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in model config instead of `--config`.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Ablation placement derived from the config.
    #[arg(long, value_enum)]
    pub placement: Option<PlacementArg>,
    /// Compare each stage's CEMSA block against a standard MSA block.
    #[arg(long)]
    pub compare_msa: bool,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data::run(&a),
        Command::Train(a) => commands::train::run(&a),
        Command::Register(a) => commands::register::run(&a),
        Command::Eval(a) => commands::eval::run(&a),
        Command::Verify(a) => commands::verify::run(&a),
        Command::Count(a) => commands::count::run(&a),
    };
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}
