//! Command-line driver. Every run is a pure function of the config file
//! and the seed: rerunning a command writes byte-identical outputs, and
//! `--threads` changes wall time only.
//!
//! Exit codes: 0 success, 1 a study threshold failed, 2 configuration
//! error, 3 numerical failure.

use clap::{Parser, Subcommand};
use herd_core::fp::FpGrid;
use herd_core::mckean::solve_mckean;
use herd_core::opt::{optimize, Objective, OptProblem};
use herd_core::sim::{simulate_batch, write_trajectories_csv, ControlSchedule};
use herd_core::studies::{
    run_chaos_study, run_fp_crosscheck, run_gamma_study, run_stability_study,
    write_report_files, StudyReport,
};
use herd_core::{Error, ProblemSpec};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "herd",
    about = "Simulate, solve, and optimize leader-follower particle systems",
    version
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "herd_runs")]
    out: PathBuf,
    /// Worker threads; affects wall time only, never results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the finite particle system and write trajectories.
    Simulate,
    /// Solve the mean-field fixed point and write the law flow.
    Mckean,
    /// Optimize leader controls and write the result.
    Optimize,
    /// Convergence studies with machine-checked thresholds.
    Study {
        #[command(subcommand)]
        which: StudyCmd,
    },
}

#[derive(Subcommand, Clone, Copy)]
enum StudyCmd {
    /// Particle-vs-law coupling error over population sizes.
    Chaos,
    /// Minima over growing leader populations.
    Gamma,
    /// Law response to leader-flow perturbations.
    Stability,
    /// Density grid vs particle law cross-check.
    Fpcheck,
}

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    schema_version: u32,
    problem: ProblemSpec,
    #[serde(default)]
    simulate: SimulateSection,
    #[serde(default)]
    mckean: MckeanSection,
    optimize: Option<OptimizeSection>,
    #[serde(default)]
    study: StudySections,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimulateSection {
    samples: u32,
    stride: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { samples: 1, stride: 1 }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct MckeanSection {
    tol: f64,
    max_iter: usize,
}

impl Default for MckeanSection {
    fn default() -> Self {
        Self { tol: 1e-3, max_iter: 50 }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeSection {
    objective: Objective,
    #[serde(default = "one")]
    n_u: usize,
    #[serde(default = "sixteen")]
    samples: u32,
    #[serde(default = "eighty")]
    max_iters: usize,
    #[serde(default = "four")]
    n_starts: usize,
}

fn one() -> usize {
    1
}
fn sixteen() -> u32 {
    16
}
fn eighty() -> usize {
    80
}
fn four() -> usize {
    4
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct StudySections {
    chaos: Option<ChaosSection>,
    gamma: Option<GammaSection>,
    stability: Option<StabilitySection>,
    fpcheck: Option<FpcheckSection>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChaosSection {
    sizes: Vec<usize>,
    replicates: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GammaSection {
    leader_counts: Vec<usize>,
    replicates: u32,
    #[serde(default = "one")]
    n_u: usize,
    #[serde(default = "eighty")]
    max_iters: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StabilitySection {
    scales: Vec<f64>,
    replicates: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FpcheckSection {
    x_min: f64,
    x_max: f64,
    n_cells: usize,
    #[serde(default = "one")]
    levels: usize,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(cli));
}

fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        // A second initialization in the same process is harmless: the
        // pool only affects scheduling, never results.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config <path> is required");
            return 2;
        }
    };
    let text = match std::fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config_path.display());
            return 2;
        }
    };
    let mut config: RunConfig = match herd_core::config::strict_from_toml(&text, "config") {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid config: {e}");
            return 2;
        }
    };
    if config.schema_version != SCHEMA_VERSION {
        eprintln!(
            "error: schema_version {} not supported (expected {SCHEMA_VERSION})",
            config.schema_version
        );
        return 2;
    }
    if let Some(seed) = cli.seed {
        config.problem.seed = seed;
    }
    if let Err(e) = config.problem.validate() {
        eprintln!("error: {e}");
        return 2;
    }
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return 2;
    }

    let outcome = match cli.cmd {
        Cmd::Simulate => cmd_simulate(&config, &cli.out),
        Cmd::Mckean => cmd_mckean(&config, &cli.out),
        Cmd::Optimize => cmd_optimize(&config, &cli.out),
        Cmd::Study { which } => cmd_study(&config, which, &cli.out),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parameter(_)
        | Error::Io(_)
        | Error::Unsupported(_)
        | Error::SubsampleRequired { .. } => 2,
        Error::BlowUp { .. }
        | Error::Convergence { .. }
        | Error::Numeric(_)
        | Error::StepSize { .. } => 3,
    }
}

fn echo_config(problem: &ProblemSpec, out: &Path, base: &str) -> Result<PathBuf, Error> {
    let path = out.join(format!("{base}_config.toml"));
    let text = toml::to_string(problem)
        .map_err(|e| Error::Config(format!("config echo failed: {e}")))?;
    std::fs::write(&path, text)?;
    Ok(path)
}

fn zero_controls(problem: &ProblemSpec) -> ControlSchedule {
    ControlSchedule::zero(problem.leaders, 1, problem.dim, problem.kappa, problem.gain)
}

fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<i32, Error> {
    let problem = &config.problem;
    let section = &config.simulate;
    if section.samples == 0 || section.stride == 0 {
        return Err(Error::Config("samples and stride must be at least 1".into()));
    }
    let controls = zero_controls(problem);
    let plan = problem.noise_plan();
    let batch = simulate_batch(problem, &controls, &plan, section.samples, section.stride)?;
    let base = format!("simulate_{}", problem.seed);
    let path = out.join(format!("{base}_trajectories.csv"));
    let mut buf = Vec::new();
    write_trajectories_csv(&batch, &mut buf)?;
    std::fs::write(&path, buf)?;
    echo_config(problem, out, &base)?;
    println!(
        "simulate: {} samples, {} followers, {} leaders, {} steps -> {}",
        section.samples,
        problem.followers,
        problem.leaders,
        problem.n_steps(),
        path.display()
    );
    Ok(0)
}

fn cmd_mckean(config: &RunConfig, out: &Path) -> Result<i32, Error> {
    let problem = &config.problem;
    let section = &config.mckean;
    let controls = zero_controls(problem);
    let plan = problem.noise_plan();
    let sol = solve_mckean(
        problem,
        &controls,
        problem.law_samples,
        section.tol,
        section.max_iter,
        &plan,
    )?;
    let base = format!("mckean_{}", problem.seed);
    let flow_path = out.join(format!("{base}_law.csv"));
    let mut buf = String::from("t,atom,x,weight\n");
    for (k, t) in sol.law_flow.times().iter().enumerate() {
        let mu = sol.law_flow.at_index(k);
        for i in 0..mu.len() {
            let coords: Vec<String> = mu.atom(i).iter().map(|v| v.to_string()).collect();
            buf.push_str(&format!("{t},{i},{},{}\n", coords.join(";"), mu.weight(i)));
        }
    }
    std::fs::write(&flow_path, buf)?;
    let summary_path = out.join(format!("{base}_summary.json"));
    let summary = serde_json::json!({
        "iterations": sol.iterations,
        "residual": sol.residual,
        "residual_history": sol.residual_history,
        "leaders": sol.leader_path.last(),
    });
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(&summary_path, text)?;
    echo_config(problem, out, &base)?;
    println!(
        "mckean: converged in {} iterations, residual {} -> {}",
        sol.iterations,
        sol.residual,
        flow_path.display()
    );
    Ok(0)
}

fn cmd_optimize(config: &RunConfig, out: &Path) -> Result<i32, Error> {
    let problem = &config.problem;
    let section = config
        .optimize
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [optimize] table".into()))?;
    let mut opt = OptProblem::new(problem.clone(), section.objective, section.n_u, section.samples);
    opt.max_iters = section.max_iters;
    opt.n_starts = section.n_starts;
    opt.mckean_tol = config.mckean.tol;
    opt.mckean_max_iter = config.mckean.max_iter;
    let result = optimize(&opt)?;
    let base = format!("optimize_{}", problem.seed);
    let path = out.join(format!("{base}_result.json"));
    let mut text = serde_json::to_string_pretty(&result).expect("result serializes");
    text.push('\n');
    std::fs::write(&path, text)?;
    echo_config(problem, out, &base)?;
    println!(
        "optimize: cost {} (stderr {}), baseline {} -> {}",
        result.cost_value,
        result.cost_stderr,
        result.baseline_cost,
        path.display()
    );
    Ok(0)
}

fn cmd_study(config: &RunConfig, which: StudyCmd, out: &Path) -> Result<i32, Error> {
    let problem = &config.problem;
    let report: StudyReport = match which {
        StudyCmd::Chaos => {
            let s = config
                .study
                .chaos
                .as_ref()
                .ok_or_else(|| Error::Config("config has no [study.chaos] table".into()))?;
            run_chaos_study(problem, &s.sizes, s.replicates)?
        }
        StudyCmd::Gamma => {
            let s = config
                .study
                .gamma
                .as_ref()
                .ok_or_else(|| Error::Config("config has no [study.gamma] table".into()))?;
            run_gamma_study(problem, &s.leader_counts, s.replicates, s.n_u, s.max_iters)?
        }
        StudyCmd::Stability => {
            let s = config
                .study
                .stability
                .as_ref()
                .ok_or_else(|| Error::Config("config has no [study.stability] table".into()))?;
            run_stability_study(problem, &s.scales, s.replicates)?
        }
        StudyCmd::Fpcheck => {
            let s = config
                .study
                .fpcheck
                .as_ref()
                .ok_or_else(|| Error::Config("config has no [study.fpcheck] table".into()))?;
            let grid = FpGrid { x_min: s.x_min, x_max: s.x_max, n_cells: s.n_cells };
            run_fp_crosscheck(problem, &grid, s.levels)?
        }
    };
    let files = write_report_files(&report, out)?;
    let mut stdout = std::io::stdout().lock();
    for check in &report.checks {
        let _ = writeln!(
            stdout,
            "check {}: {} (observed {}, threshold {})",
            check.name,
            if check.passed { "PASS" } else { "FAIL" },
            check.observed,
            check.threshold
        );
    }
    let _ = writeln!(
        stdout,
        "study {}: {} -> {}",
        report.kind,
        if report.passed() { "PASS" } else { "FAIL" },
        files[0].display()
    );
    eprintln!("runtime: {:.3}s", report.runtime_seconds);
    Ok(if report.passed() { 0 } else { 1 })
}
