use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use btlinfer_cli::commands::{self, InferMethod};
use btlinfer_cli::config::Config;
use btlinfer_cli::{ingest, CliError, CliResult};

#[derive(Parser)]
#[command(name = "btlinfer", version, about = "Low-rank pairwise-comparison fitting and inference for arena logs")]
struct Cli {
    /// TOML configuration file. Command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Do not print the resolved configuration to stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    tie_policy: Option<String>,
    #[arg(long)]
    category_map: Option<PathBuf>,
    /// Output model JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// entry:MODEL:CATEGORY, winprob:A:B:CATEGORY or contrast:A:B:CATEGORY
    #[arg(long)]
    target: Option<String>,
    /// efficient, whitened, ipw or naive
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    level: Option<f64>,
    /// Output report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LeaderboardArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output leaderboard CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// uniform or dirichlet:CONCENTRATION
    #[arg(long)]
    sampling: Option<String>,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    replications: Option<usize>,
    /// Comma-separated estimator list.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct SubsampleArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Comma-separated estimator list.
    #[arg(long, value_delimiter = ',', default_value = "efficient,naive")]
    methods: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the low-rank score matrix and save it as JSON.
    Fit(FitArgs),
    /// Cross-fitted one-step inference for a single target.
    Infer(InferArgs),
    /// Per-category ranked scores with confidence intervals.
    Leaderboard(LeaderboardArgs),
    /// Write a synthetic battle log.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo coverage study.
    Mc(McArgs),
    /// Spread of estimates across repeated subsamples of a real log.
    Subsample(SubsampleArgs),
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn apply_sim(cfg: &mut Config, a: SimArgs) {
    let s = &mut cfg.simulation;
    set(&mut s.d1, a.d1);
    set(&mut s.d2, a.d2);
    set(&mut s.rank, a.rank);
    set(&mut s.alpha, a.alpha);
    set(&mut s.n, a.n);
    set(&mut s.seed, a.seed);
    set(&mut s.sampling, a.sampling);
}

fn data_arg(cfg: &Config) -> CliResult<PathBuf> {
    cfg.data.path.clone().ok_or_else(|| CliError::Config("no data path; pass --data or set data.path".into()))
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let echo = |cfg: &Config| -> CliResult<()> {
        if !cli.quiet {
            eprintln!("# resolved configuration\n{}", cfg.echo()?);
        }
        Ok(())
    };
    match cli.command {
        Command::Fit(a) => {
            set_opt(&mut cfg.data.path, a.data);
            set_opt(&mut cfg.data.top_k, a.top_k);
            set(&mut cfg.data.tie_policy, a.tie_policy);
            set_opt(&mut cfg.data.category_map, a.category_map);
            set(&mut cfg.fit.rank, a.rank);
            set(&mut cfg.fit.alpha0, a.alpha0);
            set_opt(&mut cfg.output.model, a.out);
            echo(&cfg)?;
            let model = commands::fit_command(&cfg)?;
            if cfg.output.model.is_none() {
                print!("{}", model.to_json()?);
            } else {
                println!(
                    "fitted {} models x {} categories, rank {}, n = {}",
                    model.model_names.len(),
                    model.category_names.len(),
                    model.rank,
                    model.metadata.n
                );
            }
        }
        Command::Infer(a) => {
            set_opt(&mut cfg.data.path, a.data);
            set_opt(&mut cfg.inference.target, a.target);
            set(&mut cfg.inference.method, a.method);
            set(&mut cfg.inference.folds, a.folds);
            set(&mut cfg.inference.seed, a.seed);
            set(&mut cfg.inference.level, a.level);
            set_opt(&mut cfg.output.report, a.out);
            echo(&cfg)?;
            let target = cfg.inference.target.clone().ok_or_else(|| CliError::Config("no target; pass --target".into()))?;
            let data = data_arg(&cfg)?;
            let report = commands::infer_command(&a.model, &data, &target, &cfg.inference.method.clone(), &cfg)?;
            print!("{}", report.text(cfg.inference.level));
        }
        Command::Leaderboard(a) => {
            set_opt(&mut cfg.data.path, a.data);
            set(&mut cfg.inference.level, a.level);
            set(&mut cfg.inference.folds, a.folds);
            set(&mut cfg.inference.seed, a.seed);
            set_opt(&mut cfg.output.leaderboard, a.out);
            echo(&cfg)?;
            let data = data_arg(&cfg)?;
            let rows = commands::leaderboard_command(&a.model, &data, cfg.inference.level, &cfg)?;
            print!("{}", commands::leaderboard_text(&rows));
        }
        Command::Simulate { sim, out } => {
            apply_sim(&mut cfg, sim);
            set_opt(&mut cfg.output.battles, out);
            echo(&cfg)?;
            let records = commands::simulate_command(&cfg)?;
            match &cfg.output.battles {
                Some(p) => println!("wrote {} battles to {}", records.len(), p.display()),
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    w.write_record(ingest::BATTLE_HEADER)?;
                    for r in &records {
                        w.write_record([r.model_a.as_str(), r.model_b.as_str(), r.category.as_str(), r.winner.token()])?;
                    }
                    w.flush()?;
                }
            }
        }
        Command::Mc(a) => {
            apply_sim(&mut cfg, a.sim);
            set(&mut cfg.simulation.replications, a.replications);
            set(&mut cfg.simulation.methods, a.methods);
            set(&mut cfg.simulation.target, a.target);
            set_opt(&mut cfg.output.diagnostics, a.diagnostics);
            set_opt(&mut cfg.output.summary, a.summary);
            echo(&cfg)?;
            let (_, summary) = commands::mc_command(&cfg)?;
            print!("{}", commands::summary_text(&summary));
        }
        Command::Subsample(a) => {
            set_opt(&mut cfg.data.path, a.data);
            set_opt(&mut cfg.inference.target, a.target);
            echo(&cfg)?;
            let target = cfg.inference.target.clone().ok_or_else(|| CliError::Config("no target; pass --target".into()))?;
            let methods = a.methods.iter().map(|m| InferMethod::parse(m)).collect::<CliResult<Vec<_>>>()?;
            let opts = commands::ingest_options(&cfg)?;
            let records = ingest::read_records_path(&data_arg(&cfg)?)?;
            let full = ingest::build_dataset(&records, &opts)?;
            let spec = commands::parse_named_target(&target, &full.model_names, &full.category_names)?;
            let cf = btlinfer::inference::CrossFitConfig {
                folds: cfg.inference.folds,
                seed: cfg.inference.seed,
                fit: cfg.fit.fit_config()?,
                level: cfg.inference.level,
            };
            let est = commands::subsample_study(&records, &full, &opts, &spec, &methods, a.fraction, a.reps, &cf)?;
            println!("{:<10} {:>12} {:>12}", "method", "mean", "sd");
            for (m, xs) in a.methods.iter().zip(&est) {
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                println!("{:<10} {:>12.6} {:>12.6}", m, mean, commands::sample_sd(xs));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
