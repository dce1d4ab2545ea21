use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use igabem::estimators::IndicatorKind;
use igabem::experiments::{fit_rate, read_csv, run, verify_suite, RunConfig, RunRecord};
use igabem::operators::Method;

#[derive(Parser)]
#[command(name = "igabem", version, about = "Adaptive isogeometric BEM for the 2D single-layer equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Galerkin,
    Collocation,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Faermann,
    Residual,
}

#[derive(Subcommand)]
enum Command {
    /// Run the adaptive (or uniform) loop on a built-in problem.
    Run {
        /// Optional TOML run configuration; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in problem: pacman, square or slit.
        #[arg(long)]
        problem: Option<String>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum)]
        estimator: Option<EstimatorArg>,
        #[arg(long)]
        theta: Option<f64>,
        /// Mark every node (uniform bisection).
        #[arg(long)]
        uniform: bool,
        #[arg(long)]
        max_dofs: Option<usize>,
        #[arg(long)]
        quad_order: Option<usize>,
        /// Output stem: writes STEM.csv, STEM_knots.csv and STEM.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for cached reference energies.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Run the built-in oracle and property checks.
    Verify,
    /// Fit convergence rates from a record (`.json`) or iteration table (`.csv`).
    Rates {
        file: PathBuf,
        /// Columns to fit against N.
        #[arg(long, value_delimiter = ',', default_value = "err,eta,mu")]
        columns: Vec<String>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            problem,
            method,
            estimator,
            theta,
            uniform,
            max_dofs,
            quad_order,
            out,
            cache_dir,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    RunConfig::from_toml_str(&text)?
                }
                None => RunConfig::default(),
            };
            if let Some(p) = problem {
                cfg.problem = p;
            }
            if let Some(m) = method {
                cfg.method = match m {
                    MethodArg::Galerkin => Method::Galerkin,
                    MethodArg::Collocation => Method::Collocation,
                };
            }
            if let Some(e) = estimator {
                cfg.estimator = match e {
                    EstimatorArg::Faermann => IndicatorKind::Faermann,
                    EstimatorArg::Residual => IndicatorKind::WeightedResidual,
                };
            }
            if let Some(t) = theta {
                cfg.theta = t;
            }
            cfg.uniform |= uniform;
            if let Some(n) = max_dofs {
                cfg.max_dofs = n;
            }
            if let Some(q) = quad_order {
                cfg.quad_order = q;
            }
            if out.is_some() {
                cfg.out = out;
            }
            if cache_dir.is_some() {
                cfg.cache_dir = cache_dir;
            }
            let record = run(&cfg)?;
            record.write_csv(std::io::stdout().lock())?;
            if let Some(msg) = &record.terminated {
                eprintln!("run terminated early: {msg}");
            }
        }
        Command::Verify => {
            let checks = verify_suite()?;
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
        Command::Rates { file, columns } => {
            let is_json = file.extension().is_some_and(|e| e == "json");
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            for col in &columns {
                let (n, y) = if is_json {
                    let rec = RunRecord::from_json(&text)?;
                    (rec.column("N")?, rec.column(col)?)
                } else {
                    let rows = read_csv(text.as_bytes())?;
                    let get = |name: &str| -> Result<Vec<f64>> {
                        rows.iter()
                            .map(|r| {
                                if name == "err" {
                                    r.get("err_sq").map(|v| v.sqrt())
                                } else {
                                    r.get(name).copied()
                                }
                                .with_context(|| format!("column {name} missing"))
                            })
                            .collect()
                    };
                    (get("N")?, get(col)?)
                };
                let fit = fit_rate(&n, &y)?;
                println!("{col}: slope {:.4} (rms residual {:.2e}, {} points)", fit.slope, fit.residual, fit.points);
            }
        }
    }
    Ok(())
}
