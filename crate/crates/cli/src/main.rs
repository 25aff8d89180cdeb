//! `legfuse`: runs the estimators on simulated or recorded data.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 unreadable or
//! bad input data (including I/O failures), 4 numerical failure.
//! Log verbosity follows `LEGFUSE_LOG` (e.g. `LEGFUSE_LOG=debug`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use invariant_legged::config::{scenario_document, ExperimentConfig, Overrides};
use invariant_legged::eval::{Metrics, Timing};
use invariant_legged::runner::{self, LidarMode, RunConfig, RunLabel, Variant};
use invariant_legged::sim::{self, generate, LidarOutput, SimData};
use invariant_legged::{Error, ErrorClass, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "legfuse", version, about = "Invariant filter and smoother runs on legged-robot data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one estimator and write its trajectory, metrics and timing.
    Run(RunArgs),
    /// Run the six ablation variants on one dataset.
    Ablation(AblationArgs),
    /// Run E-IS over several window sizes and seeds.
    Sweep(SweepArgs),
    /// Generate a scenario and write its sensor streams as CSV.
    Simulate(DataArgs),
    /// Print the resolved configuration.
    Config(ConfigArgs),
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Configuration file (key = value lines under [section] headers).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Scenario preset: outdoor, indoor or clean.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Read recorded streams from this directory instead of simulating.
    #[arg(long)]
    streams: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct EstimatorArgs {
    #[arg(long, value_parser = ["pinekf", "einekf", "pis", "eis"])]
    estimator: Option<String>,
    /// LiDAR source: off, direct (simulated odometry fixes) or icp (scan registration worker).
    #[arg(long, value_parser = ["off", "direct", "icp"])]
    lidar: Option<String>,
    #[arg(long, value_parser = ["off", "on"])]
    gps: Option<String>,
    /// Smoother window size in keyframes.
    #[arg(long)]
    ws: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Report step-time statistics only; no trajectory or metrics files.
    #[arg(long)]
    bench: bool,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Window size of the smoother variants.
    #[arg(long)]
    ws: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated window sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,15")]
    windows: Vec<usize>,
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LEGFUSE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Ablation(a) => cmd_ablation(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Config(a) => cmd_config(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("legfuse: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn load(data: &DataArgs, est: &EstimatorArgs) -> Result<ExperimentConfig> {
    let text = match &data.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?),
        None => None,
    };
    let ov = Overrides {
        preset: data.scenario.clone(),
        estimator: est.estimator.clone(),
        lidar: est.lidar.clone(),
        gps: est.gps.clone(),
        window: est.ws,
        seed: data.seed,
        out: data.out.clone(),
        streams: data.streams.clone(),
    };
    ExperimentConfig::load(text.as_deref(), &ov)
}

/// Loads the configuration for a multi-variant command. The single-run
/// estimator keys are replaced by a proprioceptive placeholder so they do not
/// trip the stream checks; the caller checks its own variants.
fn load_multi(data: &DataArgs, ws: Option<usize>) -> Result<ExperimentConfig> {
    let est = EstimatorArgs { estimator: Some("pinekf".into()), lidar: Some("off".into()), gps: Some("off".into()), ws };
    load(data, &est)
}

fn dataset(cfg: &ExperimentConfig, lidar: LidarMode) -> Result<SimData> {
    let data = match &cfg.streams {
        Some(dir) => sim::read_streams(dir, cfg.robot.legs.len())?,
        None => {
            let output = if lidar == LidarMode::Icp { LidarOutput::Scans } else { LidarOutput::Fixes };
            generate(&cfg.scenario, &cfg.robot, output)?
        }
    };
    if data.imu.is_empty() || data.truth.is_empty() {
        return Err(Error::Data("input has no IMU samples or no ground truth".into()));
    }
    Ok(data)
}

fn check_streams(data: &SimData, v: &Variant) -> Result<()> {
    let missing = match v.lidar {
        LidarMode::Direct if data.lidar.is_empty() => Some("LiDAR fixes"),
        LidarMode::Icp if data.scans.is_empty() => Some("LiDAR scans"),
        _ if v.gps && data.gps.is_empty() => Some("GPS fixes"),
        _ => None,
    };
    match missing {
        Some(what) => Err(Error::Data(format!("{} needs {what} but the input has none", v.label()))),
        None => Ok(()),
    }
}

fn label(cfg: &ExperimentConfig) -> RunLabel {
    let scenario = match &cfg.streams {
        Some(dir) => dir.display().to_string(),
        None => cfg.scenario.name.clone(),
    };
    RunLabel { scenario, seed: cfg.run.seed }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

struct Finished {
    metrics: Metrics,
    timing: Timing,
    output: runner::RunOutput,
}

fn execute(data: &SimData, cfg: &ExperimentConfig, run: &RunConfig) -> Result<Finished> {
    check_streams(data, &run.variant)?;
    let output = runner::run(data, &cfg.robot, run)?;
    let metrics = runner::evaluate(&output, data, run, &label(cfg))?;
    let timing = runner::timing(&output, run);
    Ok(Finished { metrics, timing, output })
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let cfg = load(&a.data, &a.estimator)?;
    let data = dataset(&cfg, cfg.run.variant.lidar)?;
    let done = execute(&data, &cfg, &cfg.run)?;
    if a.bench {
        let t = &done.timing.step;
        println!(
            "{}: {} steps, mean {:.4} ms, p50 {:.4} ms, p99 {:.4} ms, max {:.4} ms ({})",
            done.timing.estimator, t.steps, t.mean, t.p50, t.p99, t.max, done.timing.clock
        );
        return Ok(());
    }
    let dir = out_dir(&cfg)?;
    done.output.log.save(&dir.join("trajectory.csv"))?;
    write(&dir.join("metrics.json"), &format!("{}\n", done.metrics.to_json()))?;
    write(&dir.join("timing.json"), &json(&done.timing))?;
    write(&dir.join("config.conf"), &cfg.to_document().to_string())?;
    println!("{}", runner::summary(&done.metrics, &done.timing));
    Ok(())
}

fn cmd_ablation(a: &AblationArgs) -> Result<()> {
    let cfg = load_multi(&a.data, a.ws)?;
    let data = dataset(&cfg, LidarMode::Direct)?;
    let dir = out_dir(&cfg)?;
    let mut rows = Vec::new();
    for v in Variant::ABLATION {
        let mut run = cfg.run.clone();
        run.variant = v;
        let done = execute(&data, &cfg, &run)?;
        let slug = v.slug();
        write(&dir.join(format!("metrics_{slug}.json")), &format!("{}\n", done.metrics.to_json()))?;
        write(&dir.join(format!("timing_{slug}.json")), &json(&done.timing))?;
        println!("{}", runner::summary(&done.metrics, &done.timing));
        rows.push(done.metrics);
    }
    let mut table = String::from("estimator,ate,ate_aligned,rpe_1m,final_z\n");
    for m in &rows {
        let rpe = m.rpe_1m.map(|r| format!("{r:.6}")).unwrap_or_default();
        let _ = writeln!(table, "{},{:.6},{:.6},{rpe},{:.6}", m.estimator, m.ate, m.ate_aligned, m.final_error[2]);
    }
    write(&dir.join("ablation.csv"), &table)
}

#[derive(Serialize)]
struct SweepRow {
    window: usize,
    mean_ate: f64,
    mean_step_ms: f64,
    ate: Vec<f64>,
}

#[derive(Serialize)]
struct SweepReport {
    estimator: String,
    scenario: String,
    seeds: Vec<u64>,
    rows: Vec<SweepRow>,
    /// Rank correlation of mean ATE against window size.
    spearman: Option<f64>,
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    if a.windows.is_empty() || a.seeds == 0 {
        return Err(Error::Config("sweep needs at least one window and one seed".into()));
    }
    let base = load_multi(&a.data, None)?;
    let first = base.run.seed;
    let seeds: Vec<u64> = (first..first + a.seeds).collect();
    let mut ate = vec![Vec::new(); a.windows.len()];
    let mut step = vec![0.0; a.windows.len()];
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.run.seed = seed;
        cfg.scenario.seed = seed;
        let data = dataset(&cfg, LidarMode::Direct)?;
        for (j, &ws) in a.windows.iter().enumerate() {
            let run = RunConfig { variant: Variant::E_IS, ..cfg.run.clone() }.with_window(ws);
            run.smoother.validate()?;
            let done = execute(&data, &cfg, &run)?;
            ate[j].push(done.metrics.ate);
            step[j] += done.timing.step.mean / seeds.len() as f64;
        }
    }
    let rows: Vec<SweepRow> = a
        .windows
        .iter()
        .zip(ate)
        .zip(step)
        .map(|((&window, ate), mean_step_ms)| SweepRow { window, mean_ate: ate.iter().sum::<f64>() / ate.len() as f64, mean_step_ms, ate })
        .collect();
    let ws: Vec<f64> = rows.iter().map(|r| r.window as f64).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_ate).collect();
    let report = SweepReport {
        estimator: Variant::E_IS.label(),
        scenario: label(&base).scenario,
        seeds,
        spearman: spearman(&ws, &means),
        rows,
    };
    for r in &report.rows {
        println!("WS={:<3} mean ATE {:.4} m, mean step {:.4} ms", r.window, r.mean_ate, r.mean_step_ms);
    }
    match report.spearman {
        Some(rho) => println!("Spearman(WS, ATE) = {rho:.3}"),
        None => println!("Spearman(WS, ATE) undefined (constant input)"),
    }
    let dir = out_dir(&base)?;
    write(&dir.join("sweep.json"), &json(&report))
}

fn cmd_simulate(a: &DataArgs) -> Result<()> {
    if a.streams.is_some() {
        return Err(Error::Config("simulate writes streams; --streams is an input option".into()));
    }
    let cfg = load_multi(a, None)?;
    let data = generate(&cfg.scenario, &cfg.robot, LidarOutput::Fixes)?;
    let dir = out_dir(&cfg)?;
    sim::write_streams(&data, &dir)?;
    write(&dir.join("scenario.conf"), &scenario_document(&cfg.scenario).to_string())?;
    println!(
        "{}: {:.1} s, {} IMU samples, {} LiDAR fixes, {} GPS fixes -> {}",
        cfg.scenario.name,
        cfg.scenario.duration,
        data.imu.len(),
        data.lidar.len(),
        data.gps.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_config(a: &ConfigArgs) -> Result<()> {
    print!("{}", load(&a.data, &a.estimator)?.to_document());
    Ok(())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_handles_ties_and_direction() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), None);
        let rho = spearman(&[1.0, 5.0, 10.0, 15.0], &[0.5, 0.4, 0.4, 0.3]).unwrap();
        assert!(rho < -0.9);
    }

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::SingularSystem), 4);
    }
}
