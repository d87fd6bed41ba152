use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unbiased_filter::coupled_pf::ResamplingScheme;
use unbiased_filter::experiment::{compare_files, run_experiment, ExperimentConfig, Mode};
use unbiased_filter::observation::ModelName;
use unbiased_filter::{FilterError, Result};

#[derive(Parser)]
#[command(name = "upf", version, about = "Unbiased particle filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate observations into <out>/data.csv
    Generate(Common),
    /// Doubly randomized estimator
    RunUnbiased(Common),
    /// Single randomization over the level
    RunSingleRand(Common),
    /// Multilevel particle filter for L = 1..=lmax
    RunMlpf(Common),
    /// Variance of the level increments for l = 0..=lmax
    SweepVariance(Common),
    /// Kalman filter (OU) or fine-level particle filter reference
    Reference(Common),
    /// Cost ratio of the unbiased estimator to the MLPF at matched MSE
    Compare(CompareArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelName>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lmax: Option<u32>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data file (defaults to <out>/data.csv)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cheaper particle-filter reference
    #[arg(long)]
    desk: bool,
    #[arg(long, conflicts_with = "permissive")]
    strict: bool,
    /// Retry failed replicates with fresh streams
    #[arg(long)]
    permissive: bool,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    resampling: Option<ResamplingScheme>,
    /// Unbounded plan instead of the truncated one
    #[arg(long)]
    unbounded: bool,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    cost_budget: Option<u64>,
    /// Exact latent path (OU and GBM)
    #[arg(long)]
    exact_data: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Directory holding mse_vs_cost.csv and mlpf_mse.csv; cost_ratio.csv is written here
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    unbiased: Option<PathBuf>,
    #[arg(long)]
    mlpf: Option<PathBuf>,
}

impl Common {
    fn into_config(self, mode: Mode) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.mode = mode;
        macro_rules! set {
            ($($field:ident <- $opt:expr),*) => {$( if let Some(v) = $opt { cfg.$field = v; } )*};
        }
        set!(model <- self.model, n <- self.n, l_max <- self.lmax, m <- self.m, seed <- self.seed,
             threads <- self.threads, out <- self.out, repeats <- self.repeats, c1 <- self.c1,
             resampling <- self.resampling, rho <- self.rho);
        if self.data.is_some() {
            cfg.data = self.data;
        }
        if self.n0.is_some() {
            cfg.n0 = self.n0;
        }
        if self.cost_budget.is_some() {
            cfg.cost_budget = self.cost_budget;
        }
        cfg.desk |= self.desk;
        cfg.unbounded |= self.unbounded;
        cfg.exact_data |= self.exact_data;
        if self.permissive {
            cfg.strict = false;
        } else if self.strict {
            cfg.strict = true;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (mode, common) = match cli.command {
        Command::Generate(c) => (Mode::Generate, c),
        Command::RunUnbiased(c) => (Mode::Unbiased, c),
        Command::RunSingleRand(c) => (Mode::SingleRand, c),
        Command::RunMlpf(c) => (Mode::Mlpf, c),
        Command::SweepVariance(c) => (Mode::Sweep, c),
        Command::Reference(c) => (Mode::Reference, c),
        Command::Compare(a) => {
            let unbiased = a.unbiased.unwrap_or_else(|| a.out.join("mse_vs_cost.csv"));
            let mlpf = a.mlpf.unwrap_or_else(|| a.out.join("mlpf_mse.csv"));
            let table = compare_files(&unbiased, &mlpf, &a.out)?;
            println!(
                "average cost ratio (last {} levels): {}",
                table.rows.len().min(4),
                table.average
            );
            return Ok(());
        }
    };
    let cfg = common.into_config(mode)?;
    for f in run_experiment(&cfg)?.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(FilterError::exit_code(&e) as u8)
        }
    }
}
