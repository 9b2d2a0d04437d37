//! `nlschwarz` command-line driver: runs solver sweeps from JSON configs and exports
//! meshes and coarse basis functions.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use nlschwarz::outer::{decompose, initial_coarse_space};
use nlschwarz::{coarse::export_column, Method, Model, ProblemSpec, SolveReport, SolverConfig, StopReason};
use serde::Serialize;

use config::{RunConfig, RunPoint};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Solver(#[from] nlschwarz::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Threads(#[from] rayon::ThreadPoolBuildError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "nlschwarz", version, about = "Nonlinear Schwarz domain decomposition solvers")]
struct Cli {
    /// Worker threads for subdomain loops (default: all cores).
    #[arg(long, global = true, env = "NLSCHWARZ_THREADS")]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every point of a config's sweep and write histories and a summary.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the run points of a config without solving.
    Plan { config: PathBuf },
    /// Write the nodal values of one coarse basis function.
    ExportCoarse {
        config: PathBuf,
        #[arg(long)]
        column: usize,
        /// Index into the expanded sweep.
        #[arg(long, default_value_t = 0)]
        point: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the triangulation of a run point in text form.
    ExportMesh {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        point: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct PointSummary<'a> {
    label: &'a str,
    problem: ProblemSpec,
    nx: usize,
    ny: usize,
    px: usize,
    py: usize,
    method: Method,
    solver: SolverConfig,
    seed: u64,
    converged: bool,
    reason: Option<StopReason>,
    error: Option<String>,
    outer_iterations: usize,
    total_gmres_iterations: usize,
    total_coarse_iterations: usize,
    total_avg_inner_iterations: f64,
    initial_residual: f64,
    final_residual: f64,
    final_rel_residual: f64,
    wall_time: f64,
    history_csv: Option<String>,
}

fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    RunConfig::from_json(&text)
}

fn pick(cfg: &RunConfig, point: usize) -> Result<RunPoint, CliError> {
    let mut pts = cfg.points()?;
    if point >= pts.len() {
        return Err(CliError::Config(format!("point {point} out of range ({} points)", pts.len())));
    }
    Ok(pts.swap_remove(point))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(io_err(Path::new("<stdout>"))),
    }
}

fn write_history(path: &Path, report: &SolveReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in &report.history {
        w.serialize(rec)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Returns the number of points that ended in an error.
fn run(cfg: &RunConfig, out_dir: &Path) -> Result<usize, CliError> {
    let points = cfg.points()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut summaries = Vec::with_capacity(points.len());
    let mut errors = 0;
    for pt in &points {
        log::info!("{}: {}x{} cells, {}x{} subdomains", pt.label, pt.nx, pt.ny, pt.px, pt.py);
        let result = Model::structured(pt.problem, pt.nx, pt.ny)
            .and_then(|model| nlschwarz::solve(&model, pt.px, pt.py, &pt.solver, pt.method));
        let mut s = PointSummary {
            label: &pt.label,
            problem: pt.problem,
            nx: pt.nx,
            ny: pt.ny,
            px: pt.px,
            py: pt.py,
            method: pt.method,
            solver: pt.solver,
            seed: cfg.seed,
            converged: false,
            reason: None,
            error: None,
            outer_iterations: 0,
            total_gmres_iterations: 0,
            total_coarse_iterations: 0,
            total_avg_inner_iterations: 0.0,
            initial_residual: f64::NAN,
            final_residual: f64::NAN,
            final_rel_residual: f64::NAN,
            wall_time: 0.0,
            history_csv: None,
        };
        match result {
            Ok((_, report)) => {
                let name = format!("{}.csv", pt.label);
                write_history(&out_dir.join(&name), &report)?;
                println!(
                    "{:<48} {:<22} it={:<3} gmres={:<5} inner={:<6.2} coarse={:<3} rel={:.3e} t={:.2}s",
                    pt.label,
                    format!("{:?}", report.reason),
                    report.outer_iterations(),
                    report.total_gmres_iterations(),
                    report.total_avg_inner_iterations(),
                    report.total_coarse_iterations(),
                    report.final_rel_residual(),
                    report.wall_time,
                );
                s.converged = report.converged;
                s.reason = Some(report.reason);
                s.outer_iterations = report.outer_iterations();
                s.total_gmres_iterations = report.total_gmres_iterations();
                s.total_coarse_iterations = report.total_coarse_iterations();
                s.total_avg_inner_iterations = report.total_avg_inner_iterations();
                s.initial_residual = report.initial_residual;
                s.final_residual = report.final_residual;
                s.final_rel_residual = report.final_rel_residual();
                s.wall_time = report.wall_time;
                s.history_csv = Some(name);
            }
            Err(e) => {
                errors += 1;
                println!("{:<48} error: {e}", pt.label);
                s.error = Some(e.to_string());
            }
        }
        summaries.push(s);
    }
    let path = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summaries)?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(errors)
}

fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let errors = run(&cfg, &dir)?;
            Ok(if errors == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Plan { config } => {
            for pt in load(&config)?.points()? {
                println!("{} {}x{} cells {}x{} subdomains", pt.label, pt.nx, pt.ny, pt.px, pt.py);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportCoarse { config, column, point, out } => {
            let pt = pick(&load(&config)?, point)?;
            if pt.solver.coarse_space.is_none() {
                return Err(CliError::Config(format!("{} has no coarse space", pt.label)));
            }
            let model = Model::structured(pt.problem, pt.nx, pt.ny)?;
            let decomp = decompose(&model, pt.px, pt.py, &pt.solver, Method::Schwarz)?;
            let space = initial_coarse_space(&model, &decomp, &pt.solver)?
                .ok_or_else(|| CliError::Config("no coarse space built".into()))?;
            write_output(out.as_deref(), &export_column(&space, &model, column)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportMesh { config, point, out } => {
            let pt = pick(&load(&config)?, point)?;
            let model = Model::structured(pt.problem, pt.nx, pt.ny)?;
            write_output(out.as_deref(), &model.mesh.to_text())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
