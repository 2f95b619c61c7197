use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use levy_drift::estimator::fit;
use levy_drift::experiment::{
    histogram_modes, run_experiment, EstimateConfig, ExperimentConfig, SimulateConfig,
};
use levy_drift::{Error, PointSet, Result, Trajectory};

#[derive(Parser)]
#[command(
    name = "levy-drift",
    version,
    about = "Drift estimation for SDEs with stable Lévy noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the drift of a stored trajectory.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Trajectory CSV.
        #[arg(long)]
        input: PathBuf,
        /// Output prefix; writes `<out>_curve.csv` and `<out>_estimator.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the α × n × seed grid and write reports into a directory.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg: SimulateConfig = parse(&read(config)?)?;
    let traj = cfg.run()?;
    traj.save_csv(out)?;
    let xs = traj.states.as_slice();
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} states, min {min:.4}, max {max:.4}, modes {}",
        traj.len(),
        histogram_modes(xs)
    );
    Ok(())
}

fn estimate(config: &Path, input: &Path, out: &Path) -> Result<()> {
    let cfg = EstimateConfig::from_json(&read(config)?)?;
    let traj = Trajectory::load_csv(input)?;
    let data = traj.discard_burn_in(cfg.burn_in)?.states;
    let fitted = fit(&data, &cfg.estimator)?;
    let d = fitted.diagnostics();
    info!(
        "C = {}, lengthscale = {:.6}, {} points (stride {}), residual {:.2e}",
        fitted.config().c,
        d.lengthscale,
        d.points_used,
        d.stride,
        d.relative_residual
    );
    if fitted.dim() != 1 {
        return Err(Error::Unsupported(
            "drift curves are written for d = 1 only".into(),
        ));
    }
    let xs = cfg.eval_grid.points();
    let drift = fitted.drift_on(&PointSet::from_scalars(&xs))?;
    let mut csv = String::from("x,drift_est\n");
    for (x, g) in xs.iter().zip(&drift) {
        csv.push_str(&format!("{x},{}\n", g[0]));
    }
    let curve = with_suffix(out, "_curve.csv");
    fs::write(&curve, csv).map_err(|e| Error::Io {
        path: curve.clone(),
        source: e,
    })?;
    fitted.save(with_suffix(out, "_estimator.json"))?;
    Ok(())
}

fn experiment(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_json(&read(config)?)?;
    let report = run_experiment(&cfg)?;
    report.write(out)?;
    let failed = report.cells.iter().filter(|c| c.outcome.is_err()).count();
    for t in report.trends() {
        println!(
            "alpha {:<5} n {:<6} ok {}/{}  mean rmse {:.4}",
            t.alpha, t.n, t.cells_ok, t.cells_total, t.mean_rmse
        );
    }
    if failed > 0 {
        println!("{failed} cell(s) failed; see report.csv");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, out } => simulate(config, out),
        Command::Estimate { config, input, out } => estimate(config, input, out),
        Command::Experiment { config, out } => experiment(config, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
