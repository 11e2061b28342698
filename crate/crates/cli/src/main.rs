use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod run_config;

#[derive(Parser, Debug)]
#[command(name = "gite", version, about = "Treatment effect estimation on directed graphs with networked interference")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Simulate(SimulateArgs),
    /// Fit a model and write a checkpoint, predictions and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Train every selected variant over several seeds and tabulate the errors.
    Ablate(AblateArgs),
    /// Check aggregator degeneracy and separation on star graphs.
    Propcheck(PropcheckArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunOpts {
    /// Flat `key = value` file; simulator keys take a `sim.` prefix.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelOpts {
    /// FULL, NR, NB, NS, NM, NATT, NA, NP, BS or V.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_p: Option<f64>,
    /// Entropic regularization of the transport solver.
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// `fixed:<value>` or `learnable`.
    #[arg(long)]
    pi_eta: Option<String>,
    /// `gat` or `qk`.
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

impl ModelOpts {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("variant", self.variant.clone());
        push("beta", self.beta.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("lambda_d", self.lambda_d.map(|v| v.to_string()));
        push("lambda_p", self.lambda_p.map(|v| v.to_string()));
        push("xi", self.xi.map(|v| v.to_string()));
        push("layers", self.layers.map(|v| v.to_string()));
        push("hidden", self.hidden.map(|v| v.to_string()));
        push("pi_eta", self.pi_eta.clone());
        push("attention", self.attention.clone());
        push("learning_rate", self.learning_rate.map(|v| v.to_string()));
        push("max_iterations", self.iterations.map(|v| v.to_string()));
        out
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    run: RunOpts,
    /// Number of units.
    #[arg(long)]
    n: Option<usize>,
    /// `pa:<mean degree>` or `er:<edge probability>`.
    #[arg(long)]
    graph: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    run: RunOpts,
    #[command(flatten)]
    model: ModelOpts,
    /// Dataset directory; without it a dataset is simulated from the `sim.` keys.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Z-score outcomes of an ingested dataset.
    #[arg(long)]
    zscore: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    run: RunOpts,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    zscore: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    run: RunOpts,
    #[command(flatten)]
    model: ModelOpts,
    /// Start from the dense benchmark preset instead of the defaults.
    #[arg(long)]
    benchmark: bool,
    /// Number of seeds, counting up from `--seed` (default 0).
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Comma-separated variant names; all variants when omitted.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Fail unless FULL beats NATT and NA and the NA gap exceeds the NM gap in this many seeds.
    #[arg(long)]
    check_ordering: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PropcheckArgs {
    #[command(flatten)]
    run: RunOpts,
    /// Random star pairs added to the fixed (2, 7) pair.
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 12)]
    max_size: usize,
    /// `gat` or `qk`; both when omitted.
    #[arg(long)]
    attention: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    run: RunOpts,
    #[arg(long, default_value_t = 1e-4)]
    primitive_tol: f64,
    #[arg(long, default_value_t = 1e-3)]
    loss_tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Propcheck(a) => commands::propcheck(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
