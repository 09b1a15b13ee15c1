use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use srotlab::lab::{self, Experiment, ExperimentKind, LabError, MeasureSpec, OtSolver, Probe, RunOptions, Scenario, SolverConfig};

#[derive(Parser)]
#[command(name = "srotlab", version, about = "Sub-Riemannian distances, singular paths and optimal transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario file for `run`; solver options (distance, map, sinkhorn) otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel distance solves.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a normal extremal and write its trajectory.
    Geodesic {
        #[arg(long)]
        frame: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x0: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        p0: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
    },
    /// Distance between two points.
    Distance {
        #[arg(long)]
        frame: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        y: Vec<f64>,
    },
    /// Pairwise distances of a point cloud (CSV with header), cached.
    Distmatrix {
        #[arg(long)]
        frame: String,
        #[arg(long)]
        points: PathBuf,
    },
    /// Endpoint rank, abnormal lift and Goh test of a path CSV (t, u1..um).
    Singular {
        #[arg(long)]
        frame: String,
        #[arg(long)]
        path: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        start: Vec<f64>,
    },
    /// Semiconcavity and Lipschitz probes of the squared distance.
    Regularity {
        #[arg(long)]
        frame: String,
        #[arg(long, value_enum, default_value_t = Probe::Both)]
        probe: Probe,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Optimal plan and potentials between two measure CSVs.
    Ot {
        #[arg(long)]
        frame: String,
        #[arg(long)]
        mu: PathBuf,
        #[arg(long)]
        nu: PathBuf,
        /// Entropic solver instead of the exact one.
        #[arg(long)]
        sinkhorn: bool,
    },
    /// Transport map and displacement interpolation between two measure CSVs.
    Transport {
        #[arg(long)]
        frame: String,
        #[arg(long)]
        mu: PathBuf,
        #[arg(long)]
        nu: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        t: Vec<f64>,
        /// Also solve W2(mu, mu_t) and W2(mu_t, nu) afresh.
        #[arg(long)]
        geodesic_check: bool,
    },
    /// Run a scenario file given by --config.
    Run,
}

fn single(cli: &Cli) -> Result<(String, BTreeMap<String, MeasureSpec>, ExperimentKind), LabError> {
    let file = |p: &PathBuf| MeasureSpec::File { path: p.clone() };
    let mut measures = BTreeMap::new();
    let (frame, kind) = match &cli.command {
        Command::Geodesic { frame, x0, p0, steps } => {
            (frame, ExperimentKind::Geodesic { x0: x0.clone(), p0: p0.clone(), steps: *steps })
        }
        Command::Distance { frame, x, y } => {
            (frame, ExperimentKind::Distance { x: x.clone(), y: y.clone(), expect: None, tol: 1e-3 })
        }
        Command::Distmatrix { frame, points } => {
            measures.insert("points".into(), file(points));
            (frame, ExperimentKind::DistanceTable { source: "points".into(), target: None })
        }
        Command::Singular { frame, path, start } => {
            (frame, ExperimentKind::Singular { path: path.clone(), start: start.clone() })
        }
        Command::Regularity { frame, probe, samples } => (
            frame,
            ExperimentKind::Regularity {
                probe: *probe,
                samples: *samples,
                base_x: None,
                base_y: None,
                radius: 0.5,
                d_min: 0.5,
                d_max: 2.0,
                mu_grid: vec![0.25, 0.5, 0.75],
                lo: None,
                hi: None,
                scale: srotlab::regularity::LIPSCHITZ_SCALE,
            },
        ),
        Command::Ot { frame, mu, nu, sinkhorn } => {
            measures.insert("mu".into(), file(mu));
            measures.insert("nu".into(), file(nu));
            let solver = if *sinkhorn { OtSolver::Sinkhorn } else { OtSolver::Exact };
            (frame, ExperimentKind::Ot { source: "mu".into(), target: "nu".into(), solver })
        }
        Command::Transport { frame, mu, nu, t, geodesic_check } => {
            measures.insert("mu".into(), file(mu));
            measures.insert("nu".into(), file(nu));
            (
                frame,
                ExperimentKind::Transport {
                    source: "mu".into(),
                    target: "nu".into(),
                    t: t.clone(),
                    geodesic_check: *geodesic_check,
                    r_cluster: 1e-3,
                },
            )
        }
        Command::Run => unreachable!("handled by the caller"),
    };
    Ok((frame.clone(), measures, kind))
}

fn execute(cli: &Cli) -> Result<lab::RunSummary, LabError> {
    let opts = RunOptions { out: cli.out.clone(), seed: cli.seed, cache_dir: None };
    if let Command::Run = cli.command {
        let Some(path) = &cli.config else {
            return Err(LabError::Config("`run` needs --config <scenario.json>".into()));
        };
        return lab::run(path, &opts);
    }
    let solvers = SolverConfig::load(cli.config.as_deref())?;
    let (frame, measures, kind) = single(cli)?;
    let name = match kind {
        ExperimentKind::DistanceTable { .. } => "distmatrix",
        ExperimentKind::Geodesic { .. } => "geodesic",
        ExperimentKind::Distance { .. } => "distance",
        ExperimentKind::Singular { .. } => "singular",
        ExperimentKind::Regularity { .. } => "regularity",
        ExperimentKind::Ot { .. } => "ot",
        _ => "transport",
    };
    let scenario = Scenario::single(&frame, solvers, measures, Experiment { name: name.into(), acceptance: true, kind });
    let bytes = serde_json::to_vec(&scenario).expect("scenario serializes");
    lab::execute(&scenario, std::path::Path::new(""), &bytes, &opts)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(summary) => {
            for report in &summary.reports {
                for check in &report.checks {
                    let verdict = if check.passed { "ok" } else { "FAILED" };
                    match check.value {
                        Some(v) => println!("{}/{}: {verdict} ({v:e})", report.name, check.name),
                        None => println!("{}/{}: {verdict}", report.name, check.name),
                    }
                }
            }
            println!("artifacts in {}", summary.out.display());
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
