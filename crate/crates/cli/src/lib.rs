//! Command-line driver: demonstrator training and generation, imitation,
//! evaluation, oracle verification, the D:G sweep and density export.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use codail::ail::{Algorithm, Ratio};

pub mod commands;
pub mod config;
pub mod plot;
pub mod rundir;

use config::{Overrides, Settings, Target};
use rundir::RunDir;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Invalid invocation or settings.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// A verification check did not pass.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailure(pub String);

#[derive(Debug, Parser)]
#[command(name = "codail", version, about = "Multi-agent imitation learning with correlated policies")]
pub struct Cli {
    /// TOML settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Exact run directory (must be absent or empty).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Parent of generated run directories [env: CODAIL_RUNS_DIR, default: runs].
    #[arg(long, global = true)]
    pub runs_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// Particle scenario, fixture:<name>, or a .game file.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Discriminator:policy update ratio, e.g. 1:2.
    #[arg(long)]
    pub ratio: Option<Ratio>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            scenario: self.scenario.clone(),
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lambda: self.lambda,
            ratio: self.ratio,
            checkpoint_every: self.checkpoint_every,
            ..Default::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train demonstrators against the scenario's true rewards.
    DemoTrain {
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Record demonstrations from a demo-train run.
    DemoGenerate {
        /// Run directory of a demo-train run.
        #[arg(long)]
        demonstrators: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train imitation learners on recorded demonstrations.
    Imitate {
        #[arg(long)]
        algo: Option<Algorithm>,
        #[arg(long)]
        demos: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Reward gaps, position KL and density grids of a trained run.
    Evaluate {
        /// Run directory of an imitate or demo-train run.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        demos: PathBuf,
    },
    /// Exactness, gradient and discriminator checks.
    OracleVerify {
        #[arg(long, value_enum, default_value = "all")]
        suite: commands::Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// CoDAIL once per D:G ratio with a comparison table.
    Sweep {
        /// Comma-separated D:G ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<Ratio>>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Density grids (CSV and SVG) of the positions in a batch file.
    PlotExport {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::DemoTrain { .. } => "demo-train",
            Command::DemoGenerate { .. } => "demo-generate",
            Command::Imitate { .. } => "imitate",
            Command::Evaluate { .. } => "evaluate",
            Command::OracleVerify { .. } => "oracle-verify",
            Command::Sweep { .. } => "sweep",
            Command::PlotExport { .. } => "plot-export",
        }
    }

    /// Flag layer and the trainer it targets.
    pub fn overrides(&self) -> (Overrides, Target) {
        match self {
            Command::DemoTrain { train } => (train.overrides(), Target::Demonstrator),
            Command::DemoGenerate { episodes, horizon, .. } => (
                Overrides {
                    episodes: *episodes,
                    horizon: *horizon,
                    ..Default::default()
                },
                Target::Demonstrator,
            ),
            Command::Imitate { algo, train, .. } => {
                let mut o = train.overrides();
                o.algorithm = *algo;
                (o, Target::Imitation)
            }
            Command::Sweep { ratios, train } => {
                let mut o = train.overrides();
                o.ratios = ratios.clone();
                (o, Target::Imitation)
            }
            Command::PlotExport { scenario, .. } => (
                Overrides {
                    scenario: scenario.clone(),
                    ..Default::default()
                },
                Target::Imitation,
            ),
            Command::Evaluate { .. } | Command::OracleVerify { .. } => (Overrides::default(), Target::Imitation),
        }
    }
}

/// Resolves settings, creates the run directory and runs the subcommand.
pub fn execute(cli: &Cli) -> Result<RunDir> {
    let (flags, target) = cli.command.overrides();
    let mut settings = Settings::resolve(cli.config.as_deref(), &flags, target)?;
    if let Command::DemoGenerate { seed: Some(seed), .. } = &cli.command {
        settings.demonstrator.seed = *seed;
    }
    let violations = settings.violations();
    if !violations.is_empty() {
        return Err(UsageError(format!("invalid settings:\n  {}", violations.join("\n  "))).into());
    }
    let seed = match (&cli.command, target) {
        (Command::OracleVerify { seed, .. }, _) => *seed,
        (Command::DemoGenerate { .. }, _) => settings.demonstrator.seed,
        (_, Target::Demonstrator) => settings.demonstrator.trainer.seed,
        (_, Target::Imitation) => settings.trainer.seed,
    };
    let run = RunDir::create(cli.run_dir.as_deref(), cli.runs_root.as_deref(), seed)?;
    run.record(&settings, cli.command.name(), seed)?;
    match &cli.command {
        Command::DemoTrain { .. } => commands::demo_train(&settings, &run)?,
        Command::DemoGenerate { demonstrators, .. } => commands::demo_generate(&settings, &run, demonstrators)?,
        Command::Imitate { demos, .. } => commands::imitate(&settings, &run, demos)?,
        Command::Evaluate { models, demos } => commands::evaluate(&settings, &run, models, demos)?,
        Command::OracleVerify { suite, seed } => commands::oracle_verify(&run, *suite, *seed)?,
        Command::Sweep { .. } => commands::sweep(&settings, &run)?,
        Command::PlotExport { samples, .. } => commands::plot_export(&settings, &run, samples)?,
    }
    Ok(run)
}

/// Exit status for an error: 2 configuration, 3 numerical, 4 I/O.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<codail::Error>() {
            return match e {
                codail::Error::Io { .. } => EXIT_IO,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_CONFIG,
            };
        }
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<CheckFailure>() {
            return EXIT_NUMERICAL;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    1
}

/// Parses `args`, runs, prints errors, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(run) => {
            println!("run directory: {}", run.path.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
