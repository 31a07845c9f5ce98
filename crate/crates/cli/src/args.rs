use clap::{Parser, Subcommand, ValueEnum};
use crowdflux::particles::ForceMode;
use crowdflux::validation::{Fault, Suite};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "crowdflux",
    version,
    about = "Vision-based pedestrian dynamics from agents to fluids"
)]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate the local interaction kernels.
    Kernels(KernelsArgs),
    /// Run a scenario at one model level.
    Run(RunArgs),
    /// Run the validation suites.
    Validate(ValidateArgs),
}

#[derive(Debug, clap::Args)]
pub struct KernelsArgs {
    /// Scenario whose avoidance parameters are used (defaults otherwise).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Output directory; the table is written to `kernels.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Table nodes on [0, 2].
    #[arg(long, default_value_t = 64)]
    pub nodes: usize,
    /// Compare the table against a Monte-Carlo estimate afterwards.
    #[arg(long)]
    pub check: bool,
    /// Write the identically zero kernel instead.
    #[arg(long, conflicts_with = "check")]
    pub zero: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Ibm,
    FluidMono,
    FluidVmf,
    Hydro,
}

impl Level {
    pub fn tag(self) -> &'static str {
        match self {
            Level::Ibm => "ibm",
            Level::FluidMono => "fluid-mono",
            Level::FluidVmf => "fluid-vmf",
            Level::Hydro => "hydro",
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub level: Level,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the particle force mode.
    #[arg(long)]
    pub force_mode: Option<ForceMode>,
    /// Overrides the scenario kernel table.
    #[arg(long)]
    pub kernel_table: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ValidateArgs {
    /// Suite tag, a comma-separated list of tags, or `all`.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Directory for `validation.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Kernel table for the default parameters, instead of tabulating it.
    #[arg(long)]
    pub kernel_table: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub fault: Option<Fault>,
}

impl ValidateArgs {
    pub fn suites(&self) -> Result<Vec<Suite>, String> {
        Suite::parse_selection(&self.suite)
    }
}
