use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use detpol::env::{simulate, Dataset};
use detpol::estimators::{EstimateReport, Estimator};
use detpol::harness::{kernel_selfcheck, run_mse_experiment, run_regret_experiment, ExperimentConfig, ExperimentResult};
use detpol::learner::{gradient_ascent, AscentConfig, EstimatedGradient};

#[derive(Parser)]
#[command(name = "detpol", version, about = "Kernelized doubly robust evaluation and policy gradients for deterministic policies")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Horizon 20, 100 replications, n in {200, 400, 600, 800}.
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate behavior-policy trajectories and write them as CSV.
    Simulate {
        /// Number of trajectories; defaults to the first configured n.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Off-policy value estimate from a dataset.
    Evaluate(EstimateArgs),
    /// Policy gradient estimate from a dataset.
    Gradient(EstimateArgs),
    /// Projected gradient ascent on a fixed dataset.
    Learn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "MPGK")]
        estimator: String,
        /// Initial parameters; defaults to the configured evaluation policy.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        theta_init: Option<Vec<f64>>,
    },
    /// MSE or regret study.
    Experiment {
        #[arg(value_enum)]
        kind: Study,
        /// Directory for the cached ground truth; defaults to the output
        /// directory.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Checks kernel constants and polynomial integrals against quadrature.
    Selfcheck,
}

#[derive(Args)]
struct EstimateArgs {
    /// Dataset CSV with header `traj_id,t,state,action,reward`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    estimator: String,
    /// Policy parameters; defaults to the configured evaluation policy.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    /// Fixed bandwidth; otherwise the configured choice (bootstrap by
    /// default).
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Also write per-trajectory contributions.
    #[arg(long)]
    per_trajectory: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Mse,
    Regret,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn load_config(g: &Global) -> AnyResult<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if g.paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_dataset(path: &Path) -> AnyResult<Dataset> {
    let id = path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset::read_csv(BufReader::new(File::open(path)?), id)?)
}

fn create(dir: &Path, name: &str) -> AnyResult<(PathBuf, BufWriter<File>)> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(name);
    let f = BufWriter::new(File::create(&p)?);
    Ok((p, f))
}

fn estimate(cfg: &ExperimentConfig, g: &Global, args: &EstimateArgs, gradient: bool) -> AnyResult<()> {
    let est: Estimator = args.estimator.parse()?;
    if est.is_gradient() != gradient {
        let want = if gradient { "gradient" } else { "value" };
        return Err(format!("{est} is not a {want} estimator").into());
    }
    let data = read_dataset(&args.data)?;
    let mut policy = cfg.eval_policy()?;
    if let Some(theta) = &args.theta {
        policy = policy.with_theta(theta.clone())?;
    }
    let recipe = cfg.recipe(est);
    let h = match args.bandwidth.or(cfg.fixed_bandwidth) {
        Some(h) => h,
        None => {
            let sel = recipe.select_bandwidth(&data, &policy, &cfg.grid, cfg.frozen_bootstrap, cfg.seed)?;
            if !sel.table.is_empty() {
                let (p, f) = create(&g.out_dir, &format!("bandwidth_{est}.csv"))?;
                sel.write_csv(f)?;
                eprintln!("bandwidth table: {}", p.display());
            }
            sel.h_star
        }
    };
    let report = recipe.run(&data, &policy, h, cfg.seed)?;
    write_report(&report, g, args.per_trajectory)
}

fn write_report(report: &EstimateReport, g: &Global, per_trajectory: bool) -> AnyResult<()> {
    report.write_csv(io::stdout().lock(), true)?;
    let (p, f) = create(&g.out_dir, &format!("estimate_{}.csv", report.variant))?;
    report.write_csv(f, true)?;
    eprintln!("estimate: {}", p.display());
    if per_trajectory {
        let (p, f) = create(&g.out_dir, &format!("contributions_{}.csv", report.variant))?;
        report.write_per_trajectory_csv(f)?;
        eprintln!("per-trajectory contributions: {}", p.display());
    }
    if report.clip_count > 0 {
        eprintln!("{} denominator densities were clipped", report.clip_count);
    }
    Ok(())
}

fn print_study(result: &ExperimentResult, files: &[PathBuf]) -> AnyResult<()> {
    let mut out = io::stdout().lock();
    out.write_all(result.summary_csv()?.as_bytes())?;
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    if result.failures() > 0 {
        eprintln!("{} replications failed", result.failures());
    }
    Ok(())
}

fn run(cli: Cli) -> AnyResult<bool> {
    let g = &cli.global;
    match &cli.command {
        Command::Selfcheck => {
            let report = kernel_selfcheck();
            for c in &report.checks {
                println!(
                    "{} {}: error {:.3e} (tolerance {:.0e})",
                    if c.pass { "ok  " } else { "FAIL" },
                    c.name,
                    c.abs_error,
                    c.tolerance
                );
            }
            Ok(report.passed())
        }
        Command::Simulate { n } => {
            let cfg = load_config(g)?;
            let n = n.unwrap_or(cfg.n[0]);
            let data = simulate(&cfg.env, &cfg.behavior, n, cfg.seed)?;
            let (p, f) = create(&g.out_dir, &format!("dataset_n{n}_seed{}.csv", cfg.seed))?;
            data.write_csv(f)?;
            println!("{}", p.display());
            Ok(true)
        }
        Command::Evaluate(args) => {
            estimate(&load_config(g)?, g, args, false)?;
            Ok(true)
        }
        Command::Gradient(args) => {
            estimate(&load_config(g)?, g, args, true)?;
            Ok(true)
        }
        Command::Learn {
            data,
            estimator,
            theta_init,
        } => {
            let cfg = load_config(g)?;
            let data = read_dataset(data)?;
            let est: Estimator = estimator.parse()?;
            let lc = &cfg.learner;
            let ascent = AscentConfig {
                theta_init: theta_init.clone().unwrap_or_else(|| cfg.theta_eval.clone()),
                lower: lc.lower.clone(),
                upper: lc.upper.clone(),
                step: lc.step,
                iterations: lc.iterations,
            };
            let mut source = EstimatedGradient::new(&data, cfg.recipe(est), cfg.bandwidth_choice(), cfg.seed)?;
            let path = gradient_ascent(cfg.policy_form, &ascent, &mut source)?;
            let (p, f) = create(&g.out_dir, &format!("path_{est}.csv"))?;
            path.write_csv(f)?;
            let theta: Vec<String> = path.last().iter().map(f64::to_string).collect();
            println!("final theta: {}", theta.join(","));
            if let Some(h) = source.bandwidth().filter(|_| est.uses_bandwidth()) {
                println!("bandwidth: {h}");
            }
            eprintln!("path: {}", p.display());
            Ok(true)
        }
        Command::Experiment { kind, cache_dir } => {
            let cfg = load_config(g)?;
            let cache = cache_dir.as_deref().unwrap_or(&g.out_dir);
            let result = match kind {
                Study::Mse => run_mse_experiment(&cfg, Some(cache))?,
                Study::Regret => run_regret_experiment(&cfg, Some(cache))?,
            };
            let files = result.write(&g.out_dir)?;
            print_study(&result, &files)?;
            Ok(result.failures() == 0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
