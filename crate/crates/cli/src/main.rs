use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmhctl::experiment::{self, ExperimentConfig, Method};
use mmhctl::{Error, ErrorCategory};

/// Posterior-scenario glucose control study: synthetic data, MMH inference,
/// scenario planning, nominal EKF baseline and Monte Carlo comparison.
#[derive(Debug, Parser)]
#[command(name = "mmhctl", version)]
struct Cli {
    /// Experiment configuration (TOML). Built-in desk-scale defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the configuration (at most 2^63 − 1).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// 100 runs with 100 posterior scenarios.
    #[arg(long, global = true)]
    full_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Mmh,
    Nominal,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mmh => Method::Mmh,
            MethodArg::Nominal => Method::Nominal,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a ground truth and write its training-day dataset.
    Simulate,
    /// Sample the posterior for a dataset.
    Infer {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Plan the horizon from posterior samples, or with the nominal EKF
    /// baseline from a dataset.
    Plan {
        #[arg(long, required_unless_present = "dataset", conflicts_with = "dataset")]
        samples: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Apply a control file to a ground truth.
    Evaluate {
        #[arg(long)]
        control: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value = "mmh")]
        method: MethodArg,
    },
    /// Run the full comparison.
    MonteCarlo {
        /// Number of runs, overrides the configuration.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Autocorrelation of one long unthinned chain.
    Acf,
    /// Print the effective configuration.
    Config,
}

fn exit_code(c: ErrorCategory) -> u8 {
    match c {
        ErrorCategory::Config => 3,
        ErrorCategory::Io => 4,
        ErrorCategory::Data => 5,
        ErrorCategory::Numerical => 6,
        ErrorCategory::Experiment => 7,
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if cli.full_scale {
        cfg = cfg.full_scale();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Command::MonteCarlo { runs: Some(r) } = cli.command {
        cfg.runs = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Simulate => println!("{}", experiment::cmd_simulate(&cfg)?.display()),
        Command::Infer { dataset } => println!("{}", experiment::cmd_infer(&cfg, dataset)?.display()),
        Command::Plan { samples, dataset } => {
            let (path, report) = match (samples, dataset) {
                (Some(s), _) => experiment::cmd_plan(&cfg, s)?,
                (None, Some(d)) => experiment::cmd_plan_nominal(&cfg, d)?,
                (None, None) => unreachable!("clap requires one of the inputs"),
            };
            if !report.success {
                log::warn!("plan violates the node bounds by up to {:.3e}", report.max_violation);
            }
            println!("{}", path.display());
        }
        Command::Evaluate { control, truth, method } => {
            let r = experiment::cmd_evaluate(&cfg, control, truth, (*method).into())?;
            println!("cost = {}\nviolation = {}\ng_min = {}\ng_max = {}", r.cost, r.violation, r.g_min, r.g_max);
        }
        Command::MonteCarlo { .. } => {
            let mc = experiment::cmd_monte_carlo(&cfg)?;
            for f in &mc.failures {
                log::error!("run {} ({}): {}", f.run, f.stage, f.message);
            }
            print!("{}", mc.summary.table());
        }
        Command::Acf => {
            let cols = experiment::cmd_acf(&cfg)?;
            for (name, c) in ["p2", "p3", "n", "G0", "X0", "I0"].iter().zip(&cols) {
                let lag = 25.min(c.len() - 1);
                println!("{name}: acf({lag}) = {:.3}", c[lag]);
            }
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let c = e.category();
            eprintln!("error [{}]: {e}", c.name());
            ExitCode::from(exit_code(c))
        }
    }
}
