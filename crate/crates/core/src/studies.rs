//! Convergence programs packaged as reproducible studies: particle-vs-law
//! coupling error, minima over growing leader populations, stability of
//! the law under leader-flow perturbations, and the grid-vs-particle
//! cross-check. Every study is a pure function of (problem, parameters):
//! rerunning one reproduces every reported number bit for bit, and the
//! serialized reports are byte-identical. Wall-clock runtime is kept on
//! the report struct but deliberately left out of the serialized payload.

use crate::config::{LeaderInit, ProblemSpec};
use crate::cost::{cost_chaos, cost_finite_samples, mean_stderr};
use crate::error::{Error, Result};
use crate::fp::{fp_solve, FpGrid};
use crate::measures::{wasserstein1, EmpiricalMeasure, MeasureFlow};
use crate::mckean::{simulate_frozen_flow, solve_fixed_nu, solve_mckean};
use crate::opt::{optimize, Objective, OptProblem};
use crate::rng::NoisePlan;
use crate::sim::{simulate_finite_sampled, ControlSchedule};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

const SOLVER_TOL: f64 = 1e-4;
const SOLVER_MAX_ITER: usize = 60;

/// One machine-checkable threshold from a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCheck {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub threshold: f64,
}

/// Statistics at one axis value. `values` holds the per-replicate
/// numbers the mean and stderr were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPoint {
    pub axis: f64,
    pub mean: f64,
    pub stderr: f64,
    pub replicates: usize,
    pub values: Vec<f64>,
    pub extra: BTreeMap<String, f64>,
}

fn point(axis: f64, values: Vec<f64>, extra: BTreeMap<String, f64>) -> StudyPoint {
    let (mean, stderr) = if values.is_empty() { (0.0, 0.0) } else { mean_stderr(&values) };
    StudyPoint { axis, mean, stderr, replicates: values.len(), values, extra }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub kind: String,
    pub seed: u64,
    pub points: Vec<StudyPoint>,
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    pub checks: Vec<StudyCheck>,
    /// Scalar side results (reference costs, solver diagnostics).
    pub notes: BTreeMap<String, f64>,
    /// Full configuration echo; no parameter is defaulted silently.
    pub config: ProblemSpec,
    /// Wall-clock seconds; excluded from serialization so outputs stay
    /// byte-identical across reruns.
    #[serde(skip, default)]
    pub runtime_seconds: f64,
}

impl StudyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn axis(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.axis).collect()
    }
}

/// Least squares on (ln x, ln y); None when a log is undefined.
fn fit_loglog(pairs: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pairs.len() < 2 || pairs.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let syy: f64 = ys.iter().map(|y| (y - ym) * (y - ym)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some((slope, r2))
}

fn problem_times(problem: &ProblemSpec) -> Vec<f64> {
    (0..=problem.n_steps()).map(|k| problem.time_at(k)).collect()
}

/// Replaces a sampled leader start with the concrete draw it produces,
/// so every solver and simulation in a study sees the same realization.
fn freeze_leader_init(problem: &ProblemSpec, plan: &NoisePlan, sample: u32) -> ProblemSpec {
    match &problem.initial_leaders {
        LeaderInit::Points { .. } => problem.clone(),
        LeaderInit::Sample { .. } => {
            let flat =
                problem
                    .initial_leaders
                    .positions(problem.dim, problem.leaders, plan, sample);
            let points = flat.chunks(problem.dim).map(|c| c.to_vec()).collect();
            let mut fixed = problem.clone();
            fixed.initial_leaders = LeaderInit::Points { points };
            fixed
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Coupled sample pairs averaged per replicate: the tracked quantity is
/// an expectation, and a single realization is too noisy to decide the
/// per-replicate monotonicity checks.
const CHAOS_SAMPLES_PER_REPLICATE: u32 = 8;

/// Couples the interacting particle system with independent copies
/// driven by the solved law, replicate by replicate on shared noise
/// streams, and reports the coupling error and the finite-vs-limit cost
/// gap for each population size. Each replicate value is the mean over
/// a fixed batch of coupled sample pairs.
pub fn run_chaos_study(
    problem: &ProblemSpec,
    sizes: &[usize],
    replicates: u32,
) -> Result<StudyReport> {
    let t0 = Instant::now();
    problem.validate()?;
    if sizes.is_empty() || replicates == 0 {
        return Err(Error::Parameter("need population sizes and replicates".into()));
    }
    for w in sizes.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Parameter(
                "population sizes must be strictly increasing".into(),
            ));
        }
    }
    let plan = problem.noise_plan();
    let fixed = freeze_leader_init(problem, &plan, 0);
    let controls =
        ControlSchedule::zero(fixed.leaders, 1, fixed.dim, fixed.kappa, fixed.gain);
    let sol = solve_mckean(&fixed, &controls, fixed.law_samples, SOLVER_TOL, SOLVER_MAX_ITER, &plan)?;
    let nu = if fixed.leaders > 0 { Some(sol.leader_flow()?) } else { None };
    let limit_cost = cost_chaos(&sol, &controls, &fixed.cost)?;

    let pairs: Vec<(usize, u32)> = sizes
        .iter()
        .flat_map(|&m_big| (0..replicates).map(move |r| (m_big, r)))
        .collect();
    let runs: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|&(m_big, r)| {
            let mut pm = fixed.clone();
            pm.followers = m_big;
            let plan_r = plan.with_run(plan.run_id().wrapping_add(1 + r as u64));
            let dim = pm.dim;
            let mut err_sum = 0.0_f64;
            let mut cost_sum = 0.0_f64;
            for s in 0..CHAOS_SAMPLES_PER_REPLICATE {
                let traj = simulate_finite_sampled(&pm, &controls, &plan_r, s, 1)?;
                let copies =
                    simulate_frozen_flow(&pm, &sol.law_flow, nu.as_ref(), &plan_r, s, m_big)?;
                let mut worst_follower = 0.0_f64;
                let mut worst_leader = 0.0_f64;
                for (k, state) in traj.states.iter().enumerate() {
                    let row = &copies[k];
                    for i in 0..m_big {
                        worst_follower = worst_follower
                            .max(euclid(state.follower(i), &row[i * dim..(i + 1) * dim]));
                    }
                    let limit_leaders = &sol.leader_path[k];
                    for j in 0..pm.leaders {
                        worst_leader = worst_leader
                            .max(euclid(state.leader(j), &limit_leaders[j * dim..(j + 1) * dim]));
                    }
                }
                err_sum += worst_follower + worst_leader;
                cost_sum +=
                    cost_finite_samples(std::slice::from_ref(&traj), &controls, &fixed.cost)?[0];
            }
            let batch = CHAOS_SAMPLES_PER_REPLICATE as f64;
            Ok((err_sum / batch, cost_sum / batch))
        })
        .collect();
    let mut flat = Vec::with_capacity(runs.len());
    for r in runs {
        flat.push(r?);
    }

    let r_count = replicates as usize;
    let mut points = Vec::with_capacity(sizes.len());
    for (mi, &m_big) in sizes.iter().enumerate() {
        let errs: Vec<f64> = (0..r_count).map(|r| flat[mi * r_count + r].0).collect();
        let costs: Vec<f64> = (0..r_count).map(|r| flat[mi * r_count + r].1).collect();
        let (cost_mean, cost_se) = mean_stderr(&costs);
        let mut extra = BTreeMap::new();
        extra.insert("cost_mean".into(), cost_mean);
        extra.insert("cost_stderr".into(), cost_se);
        extra.insert("cost_gap".into(), (cost_mean - limit_cost).abs());
        points.push(point(m_big as f64, errs, extra));
    }

    let fit = fit_loglog(&points.iter().map(|p| (p.axis, p.mean)).collect::<Vec<_>>());
    let all_zero = points.iter().all(|p| p.values.iter().all(|&v| v == 0.0));
    let mut checks = Vec::new();
    checks.push(StudyCheck {
        name: "slope_at_most".into(),
        passed: all_zero || fit.map(|(s, _)| s <= -0.35).unwrap_or(false),
        observed: fit.map(|(s, _)| s).unwrap_or(0.0),
        threshold: -0.35,
    });
    let mut worst_step = f64::NEG_INFINITY;
    let mut worst_endpoint = f64::NEG_INFINITY;
    for r in 0..r_count {
        for mi in 1..sizes.len() {
            worst_step = worst_step.max(points[mi].values[r] - points[mi - 1].values[r]);
        }
        worst_endpoint =
            worst_endpoint.max(points[sizes.len() - 1].values[r] - points[0].values[r]);
    }
    checks.push(StudyCheck {
        name: "strict_decrease_per_replicate".into(),
        passed: all_zero || worst_step < 0.0,
        observed: worst_step,
        threshold: 0.0,
    });
    checks.push(StudyCheck {
        name: "endpoint_decrease_per_replicate".into(),
        passed: all_zero || worst_endpoint < 0.0,
        observed: worst_endpoint,
        threshold: 0.0,
    });
    let mut gap_violation = f64::NEG_INFINITY;
    for mi in 1..points.len() {
        let prev = &points[mi - 1].extra;
        let cur = &points[mi].extra;
        let tol = 2.0
            * (prev["cost_stderr"] * prev["cost_stderr"]
                + cur["cost_stderr"] * cur["cost_stderr"])
                .sqrt();
        gap_violation = gap_violation.max(cur["cost_gap"] - prev["cost_gap"] - tol);
    }
    checks.push(StudyCheck {
        name: "cost_gap_non_increasing".into(),
        passed: gap_violation <= 0.0,
        observed: gap_violation,
        threshold: 0.0,
    });

    let mut notes = BTreeMap::new();
    notes.insert("limit_cost".into(), limit_cost);
    notes.insert("solver_iterations".into(), sol.iterations as f64);
    notes.insert("solver_residual".into(), sol.residual);
    Ok(StudyReport {
        kind: "chaos".into(),
        seed: problem.seed,
        points,
        slope: fit.map(|f| f.0),
        r_squared: fit.map(|f| f.1),
        checks,
        notes,
        config: fixed,
        runtime_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Optimizes the mean-field cost for each leader count, with leader
/// starting points drawn once per replicate from the configured law so
/// that larger populations extend smaller ones. Reports the minima and
/// the Cauchy comparison of successive differences.
pub fn run_gamma_study(
    problem: &ProblemSpec,
    leader_counts: &[usize],
    replicates: u32,
    n_u: usize,
    max_iters: usize,
) -> Result<StudyReport> {
    let t0 = Instant::now();
    problem.validate()?;
    if leader_counts.is_empty() || replicates == 0 {
        return Err(Error::Parameter("need leader counts and replicates".into()));
    }
    if leader_counts.iter().any(|&m| m == 0) {
        return Err(Error::Parameter("leader counts must be positive".into()));
    }
    if !matches!(problem.initial_leaders, LeaderInit::Sample { .. }) {
        return Err(Error::Parameter(
            "leader starts must be sampled from a law so every population size draws from the same source".into(),
        ));
    }
    let plan = problem.noise_plan();
    let m_max = *leader_counts.iter().max().expect("nonempty");

    let pairs: Vec<(usize, u32)> = leader_counts
        .iter()
        .flat_map(|&m| (0..replicates).map(move |r| (m, r)))
        .collect();
    let runs: Vec<Result<Option<f64>>> = pairs
        .par_iter()
        .map(|&(m, r)| {
            // One nested draw of all leader starts per replicate; leader
            // count m keeps the first m points.
            let flat = problem.initial_leaders.positions(problem.dim, m_max, &plan, r);
            let points: Vec<Vec<f64>> = flat
                .chunks(problem.dim)
                .take(m)
                .map(|c| c.to_vec())
                .collect();
            let mut pm = problem.clone();
            pm.leaders = m;
            pm.initial_leaders = LeaderInit::Points { points };
            let mut opt = OptProblem::new(pm, Objective::Mckean, n_u, 1);
            opt.max_iters = max_iters;
            opt.crn_seed =
                plan.with_run(plan.run_id().wrapping_add(10_000 * (1 + r as u64)));
            match optimize(&opt) {
                Ok(result) => Ok(Some(result.cost_value)),
                Err(
                    e @ (Error::Convergence { .. }
                    | Error::BlowUp { .. }
                    | Error::Numeric(_)
                    | Error::StepSize { .. }),
                ) => {
                    let _ = e;
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut flat = Vec::with_capacity(runs.len());
    for r in runs {
        flat.push(r?);
    }

    let r_count = replicates as usize;
    let mut points = Vec::with_capacity(leader_counts.len());
    let mut total_failures = 0usize;
    for (mi, &m) in leader_counts.iter().enumerate() {
        let slot = &flat[mi * r_count..(mi + 1) * r_count];
        let values: Vec<f64> = slot.iter().flatten().copied().collect();
        let failures = r_count - values.len();
        total_failures += failures;
        let mut extra = BTreeMap::new();
        extra.insert("failures".into(), failures as f64);
        points.push(point(m as f64, values, extra));
    }

    let mut checks = Vec::new();
    if points.len() >= 4 {
        let n = points.len();
        let first_gap = (points[1].mean - points[0].mean).abs();
        let last_gap = (points[n - 1].mean - points[n - 2].mean).abs();
        let spread = 2.0
            * (points[0].stderr.powi(2)
                + points[1].stderr.powi(2)
                + points[n - 2].stderr.powi(2)
                + points[n - 1].stderr.powi(2))
            .sqrt();
        checks.push(StudyCheck {
            name: "cauchy_differences".into(),
            passed: last_gap <= first_gap + spread,
            observed: last_gap,
            threshold: first_gap + spread,
        });
    }
    checks.push(StudyCheck {
        name: "optimizer_failures".into(),
        passed: total_failures == 0,
        observed: total_failures as f64,
        threshold: 0.0,
    });

    Ok(StudyReport {
        kind: "gamma".into(),
        seed: problem.seed,
        points,
        slope: None,
        r_squared: None,
        checks,
        notes: BTreeMap::new(),
        config: problem.clone(),
        runtime_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Solves the follower law twice under a frozen leader flow and its
/// translate, on shared noise, and reports the response ratio
/// sup_t E|dX| / integral of the flow distance, per perturbation scale.
pub fn run_stability_study(
    problem: &ProblemSpec,
    scales: &[f64],
    replicates: u32,
) -> Result<StudyReport> {
    let t0 = Instant::now();
    problem.validate()?;
    if scales.is_empty() || replicates == 0 {
        return Err(Error::Parameter("need perturbation scales and replicates".into()));
    }
    if scales.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::Parameter("perturbation scales must be finite and >= 0".into()));
    }
    if problem.leaders == 0 {
        return Err(Error::Parameter("stability study needs a leader population".into()));
    }
    let plan = problem.noise_plan();
    let fixed = freeze_leader_init(problem, &plan, 0);
    let nu0 = EmpiricalMeasure::uniform_from_flat(
        fixed.dim,
        fixed
            .initial_leaders
            .positions(fixed.dim, fixed.leaders, &plan, 0),
    )?;
    let times = problem_times(&fixed);
    let base_flow = MeasureFlow::constant(times.clone(), nu0.clone())?;

    let pairs: Vec<(usize, u32)> = (0..scales.len())
        .flat_map(|si| (0..replicates).map(move |r| (si, r)))
        .collect();
    let runs: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|&(si, r)| {
            let lambda = scales[si];
            let mut shift = vec![0.0; fixed.dim];
            shift[0] = lambda;
            let moved_flow = MeasureFlow::constant(times.clone(), nu0.translate(&shift)?)?;
            let plan_r = plan.with_run(plan.run_id().wrapping_add(1 + r as u64));
            let a = solve_fixed_nu(&fixed, &base_flow, fixed.law_samples, SOLVER_TOL, SOLVER_MAX_ITER, &plan_r)?;
            let b = solve_fixed_nu(&fixed, &moved_flow, fixed.law_samples, SOLVER_TOL, SOLVER_MAX_ITER, &plan_r)?;
            // The two law clouds hold pathwise-coupled particles in the
            // same order, so the mean pairwise distance is the coupled
            // expectation.
            let mut sup = 0.0_f64;
            for k in 0..a.law_flow.times().len() {
                let ma = a.law_flow.at_index(k);
                let mb = b.law_flow.at_index(k);
                let mut acc = 0.0;
                for i in 0..ma.len() {
                    acc += euclid(ma.atom(i), mb.atom(i));
                }
                sup = sup.max(acc / ma.len() as f64);
            }
            let denom = lambda * fixed.horizon;
            let ratio = if denom > 0.0 { sup / denom } else { 0.0 };
            Ok((sup, ratio))
        })
        .collect();
    let mut flat = Vec::with_capacity(runs.len());
    for r in runs {
        flat.push(r?);
    }

    let r_count = replicates as usize;
    let mut points = Vec::with_capacity(scales.len());
    for (si, &lambda) in scales.iter().enumerate() {
        let slot = &flat[si * r_count..(si + 1) * r_count];
        let ratios: Vec<f64> = slot.iter().map(|v| v.1).collect();
        let (sup_mean, _) = mean_stderr(&slot.iter().map(|v| v.0).collect::<Vec<_>>());
        let mut extra = BTreeMap::new();
        extra.insert("sup_mean_difference".into(), sup_mean);
        points.push(point(lambda, ratios, extra));
    }

    let mut checks = Vec::new();
    let positive: Vec<f64> = points
        .iter()
        .filter(|p| p.axis > 0.0)
        .map(|p| p.mean)
        .collect();
    if !positive.is_empty() {
        let hi = positive.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = positive.iter().cloned().fold(f64::INFINITY, f64::min);
        // Formulated without division so a ratio of exact zeros passes.
        checks.push(StudyCheck {
            name: "ratio_spread_at_most_1p5".into(),
            passed: hi <= 1.5 * lo,
            observed: hi - 1.5 * lo,
            threshold: 0.0,
        });
    }
    if points.iter().any(|p| p.axis == 0.0) {
        let worst = points
            .iter()
            .filter(|p| p.axis == 0.0)
            .map(|p| p.extra["sup_mean_difference"])
            .fold(0.0_f64, f64::max);
        checks.push(StudyCheck {
            name: "zero_scale_zero_difference".into(),
            passed: worst <= 1e-12,
            observed: worst,
            threshold: 1e-12,
        });
    }

    Ok(StudyReport {
        kind: "stability".into(),
        seed: problem.seed,
        points,
        slope: None,
        r_squared: None,
        checks,
        notes: BTreeMap::new(),
        config: fixed,
        runtime_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Solves the same 1D problem on a density grid and as a particle law at
/// a ladder of refinement levels (cells and particle count double per
/// level) and reports the transport distance between the two solutions
/// at mid-horizon and at the final time.
pub fn run_fp_crosscheck(
    problem: &ProblemSpec,
    grid: &FpGrid,
    levels: usize,
) -> Result<StudyReport> {
    let t0 = Instant::now();
    problem.validate()?;
    grid.validate()?;
    if levels == 0 {
        return Err(Error::Parameter("need at least one refinement level".into()));
    }
    if problem.dim != 1 {
        return Err(Error::Unsupported("grid cross-check is 1D only".into()));
    }
    let plan = problem.noise_plan();
    let fixed = freeze_leader_init(problem, &plan, 0);
    let nu = if fixed.leaders > 0 {
        let nu0 = EmpiricalMeasure::uniform_from_flat(
            1,
            fixed
                .initial_leaders
                .positions(1, fixed.leaders, &plan, 0),
        )?;
        Some(MeasureFlow::constant(problem_times(&fixed), nu0)?)
    } else {
        None
    };
    let controls = ControlSchedule::zero(0, 1, 1, fixed.kappa, fixed.gain);

    let results: Vec<Result<(f64, f64, usize, usize)>> = (0..levels)
        .into_par_iter()
        .map(|level| {
            let cells = grid.n_cells << level;
            let samples = fixed.law_samples << level;
            let level_grid = FpGrid { x_min: grid.x_min, x_max: grid.x_max, n_cells: cells };
            let flow = fp_solve(&fixed, nu.as_ref(), &level_grid)?;
            let sol = match &nu {
                Some(nu_flow) => {
                    solve_fixed_nu(&fixed, nu_flow, samples, SOLVER_TOL, SOLVER_MAX_ITER, &plan)?
                }
                None => solve_mckean(&fixed, &controls, samples, SOLVER_TOL, SOLVER_MAX_ITER, &plan)?,
            };
            let k_mid = fixed.n_steps() / 2;
            let k_end = fixed.n_steps();
            let w1_mid = wasserstein1(
                &flow.at_index(k_mid).quantize(),
                sol.law_flow.at_index(k_mid),
            )?;
            let w1_end = wasserstein1(
                &flow.at_index(k_end).quantize(),
                sol.law_flow.at_index(k_end),
            )?;
            Ok((w1_mid, w1_end, cells, samples))
        })
        .collect();
    let mut flat = Vec::with_capacity(results.len());
    for r in results {
        flat.push(r?);
    }

    let mut points = Vec::with_capacity(levels);
    for (level, &(w1_mid, w1_end, cells, samples)) in flat.iter().enumerate() {
        let mut extra = BTreeMap::new();
        extra.insert("w1_mid".into(), w1_mid);
        extra.insert("n_cells".into(), cells as f64);
        extra.insert("law_samples".into(), samples as f64);
        points.push(point(level as f64, vec![w1_end], extra));
    }

    let first = points.first().expect("at least one level").mean;
    let last = points.last().expect("at least one level").mean;
    let checks = vec![
        StudyCheck {
            name: "refinement_no_worse".into(),
            passed: last <= first,
            observed: last - first,
            threshold: 0.0,
        },
        StudyCheck {
            name: "finest_error_small".into(),
            passed: last <= 0.05,
            observed: last,
            threshold: 0.05,
        },
    ];

    Ok(StudyReport {
        kind: "fpcheck".into(),
        seed: problem.seed,
        points,
        slope: None,
        r_squared: None,
        checks,
        notes: BTreeMap::new(),
        config: fixed,
        runtime_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Canonical JSON payload, newline-terminated.
pub fn report_json(report: &StudyReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Aggregate table: axis, mean, stderr, replicates, then the extra
/// columns in sorted order. Replicate-level values live in the JSON.
pub fn report_csv(report: &StudyReport) -> String {
    let keys: Vec<&String> = report
        .points
        .first()
        .map(|p| p.extra.keys().collect())
        .unwrap_or_default();
    let mut out = String::from("axis,mean,stderr,replicates");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for p in &report.points {
        out.push_str(&format!("{},{},{},{}", p.axis, p.mean, p.stderr, p.replicates));
        for k in &keys {
            out.push_str(&format!(",{}", p.extra[*k]));
        }
        out.push('\n');
    }
    out
}

/// Writes the run directory: JSON summary, CSV table, and a TOML config
/// echo, file names carrying the study kind and seed.
pub fn write_report_files(report: &StudyReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let base = format!("{}_{}", report.kind, report.seed);
    let json_path = dir.join(format!("{base}.json"));
    let csv_path = dir.join(format!("{base}.csv"));
    let config_path = dir.join(format!("{base}_config.toml"));
    std::fs::write(&json_path, report_json(report))?;
    std::fs::write(&csv_path, report_csv(report))?;
    let config_text = toml::to_string(&report.config)
        .map_err(|e| Error::Config(format!("config echo failed: {e}")))?;
    std::fs::write(&config_path, config_text)?;
    Ok(vec![json_path, csv_path, config_path])
}

/// 1D benchmark with genuine mean-field coupling in both populations:
/// followers attract to their own mean and to the leader; the leader
/// feels the follower mass through a bounded kernel.
pub fn coupled_benchmark(seed: u64) -> ProblemSpec {
    use crate::cost::{CostSpec, LagrangianKind, PhiKind};
    use crate::fields::{FieldSpec, GainSpec, Kernel};
    use crate::config::InitialLaw;
    ProblemSpec {
        dim: 1,
        horizon: 1.0,
        dt: 0.01,
        sigma: 0.3,
        followers: 256,
        leaders: 1,
        law_samples: 16_384,
        kappa: 1.0,
        seed,
        common_noise: false,
        initial_followers: InitialLaw::Gaussian { mean: vec![0.0], std: vec![1.0] },
        initial_leaders: LeaderInit::Points { points: vec![vec![1.5]] },
        vfield: FieldSpec {
            follower_kernel: vec![Kernel::Linear { matrix: vec![vec![-0.6]] }],
            leader_kernel: vec![Kernel::Linear { matrix: vec![vec![-0.4]] }],
            ..FieldSpec::default()
        },
        wfield: FieldSpec {
            follower_kernel: vec![Kernel::Rational { amplitude: 0.5 }],
            ..FieldSpec::default()
        },
        gain: GainSpec::constant(1.0, 1.0).expect("valid gain"),
        cost: CostSpec {
            lagrangian: LagrangianKind::W1ToTarget {
                target: EmpiricalMeasure::dirac(vec![1.0]).expect("valid atom"),
            },
            phi: PhiKind::Quadratic,
        },
    }
}

/// 1D steering benchmark where leader control genuinely pays: followers
/// chase the leaders, the running cost wants the cloud at a far target.
/// Leader starts are sampled so growing populations draw from one law.
pub fn steering_benchmark(seed: u64, leaders: usize) -> ProblemSpec {
    use crate::cost::{CostSpec, LagrangianKind, PhiKind};
    use crate::fields::{FieldSpec, GainSpec, Kernel};
    use crate::config::InitialLaw;
    ProblemSpec {
        dim: 1,
        horizon: 3.0,
        dt: 0.05,
        sigma: 0.1,
        followers: 64,
        leaders,
        law_samples: 256,
        kappa: 1.0,
        seed,
        common_noise: false,
        initial_followers: InitialLaw::Gaussian { mean: vec![0.0], std: vec![0.3] },
        initial_leaders: LeaderInit::Sample {
            law: InitialLaw::Gaussian { mean: vec![0.0], std: vec![0.25] },
        },
        vfield: FieldSpec {
            leader_kernel: vec![Kernel::Linear { matrix: vec![vec![-1.0]] }],
            ..FieldSpec::default()
        },
        wfield: FieldSpec::zero(),
        gain: GainSpec::constant(1.0, 1.0).expect("valid gain"),
        cost: CostSpec {
            lagrangian: LagrangianKind::SquaredW1ToTarget {
                target: EmpiricalMeasure::dirac(vec![3.0]).expect("valid atom"),
            },
            phi: PhiKind::Quadratic,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::InitialLaw;
    use crate::cost::{CostSpec, LagrangianKind, PhiKind};
    use crate::fields::{External, FieldSpec, GainSpec};

    fn decoupled_problem() -> ProblemSpec {
        let mut p = coupled_benchmark(7);
        p.dt = 0.05;
        p.horizon = 0.5;
        p.law_samples = 128;
        p.vfield = FieldSpec {
            external: External::Linear { matrix: vec![vec![-0.5]] },
            ..FieldSpec::zero()
        };
        p.wfield = FieldSpec {
            external: External::Constant { vector: vec![0.1] },
            ..FieldSpec::zero()
        };
        p
    }

    #[test]
    fn no_mean_field_coupling_means_exactly_zero_error() {
        let p = decoupled_problem();
        let report = run_chaos_study(&p, &[4, 8], 2).unwrap();
        for pt in &report.points {
            assert_eq!(pt.mean, 0.0);
            assert!(pt.values.iter().all(|&v| v == 0.0));
        }
        assert!(report.passed(), "checks: {:?}", report.checks);
    }

    #[test]
    fn chaos_error_shrinks_on_a_coupled_instance() {
        let mut p = coupled_benchmark(11);
        p.dt = 0.02;
        p.horizon = 0.5;
        p.law_samples = 2048;
        let report = run_chaos_study(&p, &[8, 64], 3).unwrap();
        assert!(report.points[0].mean > 0.0);
        assert!(
            report.points[1].mean < report.points[0].mean,
            "error did not shrink: {} -> {}",
            report.points[0].mean,
            report.points[1].mean
        );
        for pt in &report.points {
            assert!(pt.extra.contains_key("cost_gap"));
        }
    }

    #[test]
    fn chaos_report_bytes_are_reproducible() {
        let p = decoupled_problem();
        let a = run_chaos_study(&p, &[4, 8], 2).unwrap();
        let b = run_chaos_study(&p, &[4, 8], 2).unwrap();
        assert_eq!(report_json(&a), report_json(&b));
        assert_eq!(report_csv(&a), report_csv(&b));
    }

    #[test]
    fn zero_running_cost_gives_zero_minima_for_every_leader_count() {
        let mut p = steering_benchmark(3, 1);
        p.horizon = 0.8;
        p.dt = 0.05;
        p.law_samples = 48;
        p.followers = 8;
        p.cost = CostSpec { lagrangian: LagrangianKind::Zero, phi: PhiKind::Quadratic };
        let report = run_gamma_study(&p, &[1, 2], 1, 1, 6).unwrap();
        for pt in &report.points {
            assert_eq!(pt.mean, 0.0, "leader count {} has nonzero minimum", pt.axis);
            assert_eq!(pt.extra["failures"], 0.0);
        }
        let rerun = run_gamma_study(&p, &[1, 2], 1, 1, 6).unwrap();
        assert_eq!(report_json(&report), report_json(&rerun));
    }

    #[test]
    fn gamma_study_rejects_fixed_leader_points() {
        let mut p = steering_benchmark(3, 1);
        p.initial_leaders = LeaderInit::Points { points: vec![vec![0.0]] };
        assert!(run_gamma_study(&p, &[1, 2], 1, 1, 4).is_err());
    }

    #[test]
    fn leader_blind_field_gives_zero_stability_difference() {
        let mut p = coupled_benchmark(5);
        p.dt = 0.05;
        p.horizon = 0.5;
        p.law_samples = 128;
        p.vfield = FieldSpec {
            follower_kernel: p.vfield.follower_kernel.clone(),
            ..FieldSpec::zero()
        };
        let report = run_stability_study(&p, &[0.0, 0.1, 0.4], 1).unwrap();
        for pt in &report.points {
            assert_eq!(pt.mean, 0.0);
            assert_eq!(pt.extra["sup_mean_difference"], 0.0);
        }
        assert!(report.passed(), "checks: {:?}", report.checks);
    }

    #[test]
    fn stability_responds_when_the_field_reads_the_leaders() {
        let mut p = coupled_benchmark(9);
        p.dt = 0.05;
        p.horizon = 0.5;
        p.law_samples = 512;
        let report = run_stability_study(&p, &[0.1, 0.4], 2).unwrap();
        for pt in &report.points {
            assert!(pt.mean > 0.0, "no response at scale {}", pt.axis);
            assert!(pt.mean.is_finite());
        }
        let rerun = run_stability_study(&p, &[0.1, 0.4], 2).unwrap();
        assert_eq!(report_json(&report), report_json(&rerun));
    }

    fn ou_problem() -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            horizon: 1.0,
            dt: 0.05,
            sigma: 0.25,
            followers: 64,
            leaders: 0,
            law_samples: 1000,
            kappa: 1.0,
            seed: 40,
            common_noise: false,
            initial_followers: InitialLaw::Gaussian { mean: vec![0.0], std: vec![0.5] },
            initial_leaders: LeaderInit::Points { points: vec![] },
            vfield: FieldSpec {
                external: External::Linear { matrix: vec![vec![-1.0]] },
                ..FieldSpec::zero()
            },
            wfield: FieldSpec::zero(),
            gain: GainSpec::constant(1.0, 1.0).unwrap(),
            cost: CostSpec { lagrangian: LagrangianKind::Zero, phi: PhiKind::Quadratic },
        }
    }

    #[test]
    fn crosscheck_report_structure_and_determinism() {
        let p = ou_problem();
        let grid = FpGrid { x_min: -4.0, x_max: 4.0, n_cells: 64 };
        let report = run_fp_crosscheck(&p, &grid, 2).unwrap();
        assert_eq!(report.points.len(), 2);
        assert_eq!(report.points[1].extra["n_cells"], 128.0);
        assert_eq!(report.points[1].extra["law_samples"], 2000.0);
        for pt in &report.points {
            assert!(pt.mean > 0.0 && pt.mean.is_finite());
        }
        let rerun = run_fp_crosscheck(&p, &grid, 2).unwrap();
        assert_eq!(report_json(&report), report_json(&rerun));
    }

    #[test]
    fn csv_has_one_row_per_point_and_stable_columns() {
        let p = decoupled_problem();
        let report = run_chaos_study(&p, &[4, 8], 2).unwrap();
        let csv = report_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("axis,mean,stderr,replicates,cost_gap"));
    }

    #[test]
    fn report_files_are_byte_identical_across_reruns() {
        let p = decoupled_problem();
        let report = run_chaos_study(&p, &[4, 8], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = write_report_files(&report, dir.path()).unwrap();
        let bytes: Vec<Vec<u8>> = first.iter().map(|f| std::fs::read(f).unwrap()).collect();
        let report2 = run_chaos_study(&p, &[4, 8], 1).unwrap();
        let second = write_report_files(&report2, dir.path()).unwrap();
        for (path, old) in second.iter().zip(&bytes) {
            assert_eq!(&std::fs::read(path).unwrap(), old);
        }
    }

    #[test]
    fn loglog_fit_recovers_a_known_slope() {
        let pts: Vec<(f64, f64)> = [16.0_f64, 64.0, 256.0]
            .iter()
            .map(|&x| (x, 3.0 * x.powf(-0.5)))
            .collect();
        let (slope, r2) = fit_loglog(&pts).unwrap();
        assert!((slope + 0.5).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
