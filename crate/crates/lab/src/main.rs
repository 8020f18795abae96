use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tpo_lab::config::Method;
use tpo_lab::experiments::{resolve, run_plan, ExperimentId, Overrides, RunOptions, Scale};
use tpo_lab::summarize::{render_table, summarize_dirs};
use tpo_lab::LabError;

#[derive(Parser)]
#[command(name = "tpo-lab", version, about = "Target policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named experiment preset.
    Run(RunArgs),
    /// Aggregate run directories of one experiment into a table.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the merged summary as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// tabular_single, tabular_multi, mnist, token_reversal, variations,
    /// terminal, ablations, k_sweep, epoch_sweep, eta_sweep, dg_multiepoch
    /// or diagnostics
    experiment: String,
    /// JSON overrides; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed_count: Option<usize>,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "ci")]
    scale: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with the four MNIST IDX files; falls back to TPO_MNIST_DIR.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long = "horizon", alias = "H")]
    horizon: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    stop_below: Option<f64>,
    /// Permit DG with more than one epoch per batch.
    #[arg(long)]
    allow_dg_multiepoch: bool,
    /// Save final parameters of every run under <out>/checkpoints.
    #[arg(long)]
    checkpoints: bool,
}

fn flag_overrides(a: &RunArgs) -> Result<Overrides, LabError> {
    let methods = match &a.methods {
        Some(ms) => Some(
            ms.iter()
                .map(|m| Method::parse(m).ok_or_else(|| LabError::config("methods", format!("unknown method {m:?}"))))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    Ok(Overrides {
        seed_count: a.seed_count,
        methods,
        horizon: a.horizon,
        vocab: a.vocab,
        k: a.k,
        batch: a.batch,
        epochs: a.epochs,
        eta: a.eta,
        lr: a.lr,
        episodes: a.episodes,
        steps: a.steps,
        d_model: a.d_model,
        stop_below: a.stop_below,
        allow_dg_multiepoch: a.allow_dg_multiepoch.then_some(true),
        mnist_dir: a.mnist_dir.clone(),
        ..Overrides::default()
    })
}

fn run(a: RunArgs) -> Result<(), LabError> {
    let experiment: ExperimentId = a.experiment.parse()?;
    let scale: Scale = a.scale.parse()?;
    if a.jobs == 0 {
        return Err(LabError::config("jobs", "must be at least 1"));
    }
    let file = match &a.config {
        Some(p) => Overrides::from_json_file(p)?,
        None => Overrides::default(),
    };
    let plan = resolve(experiment, scale, file.layered(flag_overrides(&a)?))?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(experiment.name()));
    log::info!("{}: {} arms × {} seeds -> {}", experiment.name(), plan.arms.len(), plan.seeds.len(), out.display());
    let report = run_plan(&plan, &out, &RunOptions { jobs: a.jobs, checkpoints: a.checkpoints })?;
    print!("{}", render_table(&report.summary));
    Ok(())
}

fn is_config_error(e: &LabError) -> bool {
    matches!(
        e,
        LabError::Config { .. }
            | LabError::Core(tpo_core::CoreError::InvalidConfig(_))
            | LabError::Nn(tpo_nn::NnError::InvalidConfig(_))
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => run(a),
        Command::Summarize { dirs, json } => {
            let refs: Vec<&std::path::Path> = dirs.iter().map(PathBuf::as_path).collect();
            summarize_dirs(&refs).and_then(|s| {
                print!("{}", render_table(&s));
                if let Some(p) = json {
                    std::fs::write(p, serde_json::to_string_pretty(&s)? + "\n")?;
                }
                Ok(())
            })
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
