use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedgnn::datagen::CohortConfig;
use fedgnn::explain::DEFAULT_SAMPLES;
use fedgnn::graph::Band;
use fedgnn_cli::commands;
use fedgnn_cli::config::{Arm, ExperimentConfig, TlsConfig, TransportKind};
use fedgnn_cli::error::{exit, exit_code, CliError};
use tracing_subscriber::EnvFilter;

/// Federated graph-attention regression on multilayer connectivity graphs.
///
/// Exit codes: 0 success, 1 other failure, 2 broker unreachable,
/// 3 invalid configuration, 4 dataset missing, 5 join rejected,
/// 64 malformed command line. Set FGFL_LOG (e.g. `debug`) for more output.
#[derive(Parser)]
#[command(name = "fedgnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Generate(GenerateArgs),
    /// Train one or more arms over all configured seeds.
    Run(RunArgs),
    /// Parameter server process.
    Serve(ServeArgs),
    /// Client process.
    Client(ClientArgs),
    /// Edge Shapley values for one patient's prediction.
    Explain(ExplainArgs),
    /// Similarity matrix of trained models.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Cohort settings as JSON; flags below override it.
    #[arg(long, conflicts_with = "from_manifest")]
    config: Option<PathBuf>,
    /// Rebuild exactly the cohort recorded in a `cohort.json`.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    heterogeneity: Option<f64>,
    /// Comma-separated hospital sizes, e.g. 25,22,14,11.
    #[arg(long, value_delimiter = ',')]
    shard_sizes: Option<Vec<usize>>,
    /// Comma-separated relative hospital sizes.
    #[arg(long, value_delimiter = ',')]
    proportions: Option<Vec<f64>>,
    /// Comma-separated bands out of delta, theta, alpha1, alpha2, beta1.
    #[arg(long, value_delimiter = ',')]
    bands: Option<Vec<String>>,
    #[arg(long)]
    label_noise: Option<f64>,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    transport: Option<TransportKind>,
    /// host:port
    #[arg(long)]
    broker: Option<String>,
    #[arg(long)]
    tls_ca: Option<PathBuf>,
    #[arg(long, requires = "tls_ca")]
    tls_cert: Option<PathBuf>,
    #[arg(long, requires = "tls_ca")]
    tls_key: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Run seeds 0..N instead of the configured list.
    #[arg(long)]
    seeds: Option<u64>,
    /// Comma-separated arms to run side by side, overriding `algorithm`.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<Arm>>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ClientArgs {
    #[command(flatten)]
    common: Common,
    /// Client (hospital) id.
    #[arg(long)]
    id: String,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Patient id.
    #[arg(long)]
    sample: String,
    /// Monte Carlo samples per edge.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Model files, each optionally followed by `=group`.
    #[arg(long = "model", required = true, num_args = 1..)]
    models: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(t) = c.transport {
        cfg.transport.kind = t;
    }
    if let Some(b) = &c.broker {
        cfg.transport.broker = b.clone();
    }
    if let Some(ca) = &c.tls_ca {
        cfg.transport.tls = Some(TlsConfig {
            ca: ca.clone(),
            cert: c.tls_cert.clone(),
            key: c.tls_key.clone(),
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_band(s: &str) -> Result<Band> {
    s.parse().map_err(|_| CliError::Schema(format!("unknown band `{s}`")).into())
}

fn generate(a: GenerateArgs) -> Result<()> {
    if let Some(m) = &a.from_manifest {
        commands::regenerate(m, &a.out)?;
        println!("regenerated {} from {}", a.out.display(), m.display());
        return Ok(());
    }
    let mut cohort = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| p.display().to_string())?;
            serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?
        }
        None => CohortConfig::default(),
    };
    if let Some(v) = a.seed {
        cohort.seed = v;
    }
    if let Some(v) = a.patients {
        cohort.n_patients = v;
    }
    if let Some(v) = a.heterogeneity {
        cohort.heterogeneity = v;
    }
    if let Some(v) = a.shard_sizes {
        cohort.shard_sizes = Some(v);
    }
    if let Some(v) = a.proportions {
        cohort.shard_proportions = v;
    }
    if let Some(v) = a.bands {
        cohort.bands = v.iter().map(|b| parse_band(b)).collect::<Result<_>>()?;
    }
    if let Some(v) = a.label_noise {
        cohort.label_noise = v;
    }
    let manifest = commands::generate(&cohort, &a.out)?;
    println!(
        "wrote {} patients to {} (hospitals {:?}, sizes {:?})",
        cohort.n_patients,
        a.out.display(),
        manifest.hospitals,
        manifest.shard_sizes
    );
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.seeds {
        cfg.seeds = (0..n).collect();
        cfg.validate()?;
    }
    let dataset = commands::dataset_dir(&cfg, a.common.dataset.as_deref())?;
    match &a.arms {
        None => {
            let r = commands::run(&cfg, &dataset, &a.out)?;
            println!(
                "{}: test MAE {:.3} ± {:.3} over {} seeds (median baseline {:.3}); report in {}",
                r.algorithm.name(),
                r.mae.mean,
                r.mae.std,
                r.seeds.len(),
                r.baseline_mae,
                a.out.display()
            );
        }
        Some(arms) => {
            let (_, cmp) = commands::run_arms(&cfg, arms, &dataset, &a.out)?;
            println!("median baseline MAE {:.3}", cmp.baseline_mae);
            for s in &cmp.arms {
                println!(
                    "{:<12} MAE {:.3} ± {:.3}  converged by round {:.1}",
                    s.arm.name(),
                    s.mae.mean,
                    s.mae.std,
                    s.rounds_to_converge
                );
            }
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let dataset = commands::dataset_dir(&cfg, a.common.dataset.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let r = commands::serve(&cfg, &dataset, seed, &a.out)?;
    let m = &r.seeds[0].models[0];
    println!(
        "experiment {} finished after {} rounds; best round {} test MAE {:.3}; parameters {}",
        r.experiment, m.rounds_run, m.best_round, m.test_mae, m.params_sha256
    );
    Ok(())
}

fn client(a: ClientArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let dataset = commands::dataset_dir(&cfg, a.common.dataset.as_deref())?;
    let s = commands::client(&cfg, &dataset, &a.id)?;
    println!("client {} trained in {} rounds", s.client, s.rounds_trained);
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let r = commands::explain(&a.model, &a.dataset, &a.sample, a.samples, a.seed, &a.out)?;
    println!(
        "{} edges, {:?} estimator; f(full) {:.4}, f(empty) {:.4}, efficiency residual {:.3e}",
        r.edges.len(),
        r.estimator,
        r.f_full,
        r.f_empty,
        r.efficiency_residual
    );
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let models: Vec<(PathBuf, String)> = a
        .models
        .iter()
        .map(|m| match m.rsplit_once('=') {
            Some((p, g)) => (PathBuf::from(p), g.to_string()),
            None => (PathBuf::from(m), "all".to_string()),
        })
        .collect();
    let m = commands::compare(&models, &a.out)?;
    println!("mean similarity {:.4}", m.mean);
    for (g, v) in &m.group_means {
        println!("  {g}: {v:.4}");
    }
    Ok(())
}

fn init_logging() {
    let filter = EnvFilter::try_from_env("FGFL_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    init_logging();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Serve(a) => serve(a),
        Command::Client(a) => client(a),
        Command::Explain(a) => explain(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
