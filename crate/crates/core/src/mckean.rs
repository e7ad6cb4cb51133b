//! Mean-field limit solver. The representative follower SDE coupled to
//! its own law, plus the m leader ODEs, is solved by Picard iteration:
//! each sweep simulates N follower copies and the leader system against
//! the FROZEN flows of the previous iterate (Jacobi update), with the
//! per-copy Brownian increments frozen across sweeps so the whole
//! iteration is a deterministic map. Sweeps repeat until the sup-in-time
//! W1 distance between consecutive law iterates (joined with the largest
//! leader displacement) drops below the tolerance.
//!
//! With N equal to the finite-system size and the same noise plan, the
//! fixed point of the sweep map IS the finite particle system; the
//! consistency tests below pin the two modules together bitwise.

use crate::config::ProblemSpec;
use crate::error::{Error, Result};
use crate::fields::eval_gain;
use crate::measures::{wasserstein1, EmpiricalMeasure, MeasureFlow};
use crate::rng::{NoisePlan, StreamKind};
use crate::sim::ControlSchedule;
use rayon::prelude::*;

const PAR_MIN_COORDS: usize = 8192;

/// Converged mean-field approximation: the follower law on the time grid
/// (N atoms per instant, uniform weights) and the leader paths.
#[derive(Debug, Clone)]
pub struct MckeanSolution {
    pub dt: f64,
    pub law_flow: MeasureFlow,
    /// leader_path[k]: flat m x dim leader positions at grid time k.
    pub leader_path: Vec<Vec<f64>>,
    dim: usize,
    n_leaders: usize,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
}

impl MckeanSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_leaders(&self) -> usize {
        self.n_leaders
    }

    pub fn n_steps(&self) -> usize {
        self.law_flow.times().len() - 1
    }

    pub fn leader_measure(&self, step: usize) -> Result<EmpiricalMeasure> {
        if self.n_leaders == 0 {
            return Err(Error::Parameter("solution has no leaders".into()));
        }
        EmpiricalMeasure::uniform_from_flat(self.dim, self.leader_path[step].clone())
    }

    /// Leader flow on the same grid as the law.
    pub fn leader_flow(&self) -> Result<MeasureFlow> {
        leader_flow_from_path(self.dim, self.n_leaders, self.law_flow.times(), &self.leader_path)
    }
}

/// Empirical leader flow from per-step flat positions.
pub fn leader_flow_from_path(
    dim: usize,
    m: usize,
    times: &[f64],
    path: &[Vec<f64>],
) -> Result<MeasureFlow> {
    if m == 0 {
        return Err(Error::Parameter("leader flow needs at least one leader".into()));
    }
    if path.len() != times.len() {
        return Err(Error::Parameter("leader path and time grid differ in length".into()));
    }
    let measures: Result<Vec<EmpiricalMeasure>> = path
        .iter()
        .map(|row| EmpiricalMeasure::uniform_from_flat(dim, row.clone()))
        .collect();
    MeasureFlow::new(times.to_vec(), measures?)
}

fn grid_times(problem: &ProblemSpec) -> Vec<f64> {
    (0..=problem.n_steps()).map(|k| problem.time_at(k)).collect()
}

fn cloud_to_flow(problem: &ProblemSpec, rows: &[Vec<f64>]) -> Result<MeasureFlow> {
    let measures: Result<Vec<EmpiricalMeasure>> = rows
        .iter()
        .map(|row| EmpiricalMeasure::uniform_from_flat(problem.dim, row.clone()))
        .collect();
    MeasureFlow::new(grid_times(problem), measures?)
}

/// Drives `count` independent follower copies through FROZEN flows:
/// `law` must live on the problem's step grid; `nu` (if any) is looked
/// up by time, so coarser leader grids are fine. Copy i draws the same
/// noise stream as follower i of finite realization `sample_id`.
/// Returns positions at every grid time, flat count x dim per row.
pub fn simulate_frozen_flow(
    problem: &ProblemSpec,
    law: &MeasureFlow,
    nu: Option<&MeasureFlow>,
    plan: &NoisePlan,
    sample_id: u32,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    let dim = problem.dim;
    let n_steps = problem.n_steps();
    if law.times().len() != n_steps + 1 {
        return Err(Error::Parameter(
            "law flow must live on the problem's step grid".into(),
        ));
    }
    if count == 0 {
        return Err(Error::Parameter("need at least one follower copy".into()));
    }
    if let Some(flow) = nu {
        if flow.at_index(0).dim() != dim {
            return Err(Error::Parameter("leader flow dimension mismatch".into()));
        }
    }

    let mut row = vec![0.0; count * dim];
    let fill_initial = |(i, out): (usize, &mut [f64])| {
        problem.initial_followers.sample_into(
            plan,
            StreamKind::FollowerInit,
            sample_id,
            i as u32,
            out,
        );
    };
    if row.len() >= PAR_MIN_COORDS {
        row.par_chunks_mut(dim).enumerate().for_each(fill_initial);
    } else {
        row.chunks_mut(dim).enumerate().for_each(fill_initial);
    }

    let mut rows = Vec::with_capacity(n_steps + 1);
    rows.push(row.clone());
    let diff_base = 2.0 * problem.sigma * problem.dt;
    let mut next = vec![0.0; count * dim];

    for k in 0..n_steps {
        let t = problem.time_at(k);
        let mu = law.at_index(k);
        let nu_k = nu.map(|flow| flow.at_time(t));
        let prepared = problem.vfield.prepare(t, mu, nu_k);
        let diff = diff_base.sqrt();
        let sigma_on = problem.sigma > 0.0;
        let advance = |(i, out): (usize, &mut [f64])| {
            let x = &row[i * dim..(i + 1) * dim];
            let mut drift = vec![0.0; dim];
            prepared.eval_into(x, &mut drift);
            let mut noise = vec![0.0; dim];
            if sigma_on {
                let particle = if problem.common_noise { 0 } else { i as u32 };
                plan.fill_normals(StreamKind::FollowerStep, sample_id, particle, k as u32, &mut noise);
            }
            for c in 0..dim {
                out[c] = x[c] + drift[c] * problem.dt + diff * noise[c];
            }
        };
        if next.len() >= PAR_MIN_COORDS {
            next.par_chunks_mut(dim).enumerate().for_each(advance);
        } else {
            next.chunks_mut(dim).enumerate().for_each(advance);
        }
        if let Some(p) = next.iter().position(|x| !x.is_finite()) {
            return Err(Error::BlowUp {
                kind: "follower",
                index: p / dim,
                t: problem.time_at(k + 1),
            });
        }
        std::mem::swap(&mut row, &mut next);
        rows.push(row.clone());
    }
    Ok(rows)
}

/// Explicit Euler for the leader ODE system against a frozen follower
/// law; the leader empirical measure is self-consistent within each
/// step (taken at the step start).
fn integrate_leaders(
    problem: &ProblemSpec,
    controls: &ControlSchedule,
    law: &MeasureFlow,
    plan: &NoisePlan,
) -> Result<Vec<Vec<f64>>> {
    let dim = problem.dim;
    let m = problem.leaders;
    let n_steps = problem.n_steps();
    let mut row = problem.initial_leaders.positions(dim, m, plan, 0);
    let mut rows = Vec::with_capacity(n_steps + 1);
    rows.push(row.clone());
    let mut drift = vec![0.0; dim];
    for k in 0..n_steps {
        let t = problem.time_at(k);
        let mu = law.at_index(k);
        let nu = EmpiricalMeasure::uniform_from_flat(dim, row.clone())
            .expect("leader positions form a valid measure");
        let g = eval_gain(&controls.gain, mu)?;
        let prepared = problem.wfield.prepare(t, mu, Some(&nu));
        let interval = controls.interval_at(k, n_steps);
        let mut next = row.clone();
        for j in 0..m {
            let y = &row[j * dim..(j + 1) * dim];
            prepared.eval_into(y, &mut drift);
            let u = controls.control(j, interval);
            for c in 0..dim {
                next[j * dim + c] = y[c] + (drift[c] + u[c] * g) * problem.dt;
            }
        }
        if let Some(p) = next.iter().position(|x| !x.is_finite()) {
            return Err(Error::BlowUp {
                kind: "leader",
                index: p / dim,
                t: problem.time_at(k + 1),
            });
        }
        row = next;
        rows.push(row.clone());
    }
    Ok(rows)
}

/// One Jacobi sweep of the fixed-point map: followers and leaders both
/// integrate against the INPUT flows.
pub fn picard_sweep(
    problem: &ProblemSpec,
    controls: &ControlSchedule,
    n_samples: usize,
    plan: &NoisePlan,
    law: &MeasureFlow,
    leader_path: &[Vec<f64>],
) -> Result<(MeasureFlow, Vec<Vec<f64>>)> {
    let nu_flow = if problem.leaders > 0 {
        Some(leader_flow_from_path(
            problem.dim,
            problem.leaders,
            law.times(),
            leader_path,
        )?)
    } else {
        None
    };
    let rows = simulate_frozen_flow(problem, law, nu_flow.as_ref(), plan, 0, n_samples)?;
    let new_law = cloud_to_flow(problem, &rows)?;
    let new_leaders = if problem.leaders > 0 {
        integrate_leaders(problem, controls, law, plan)?
    } else {
        vec![Vec::new(); problem.n_steps() + 1]
    };
    Ok((new_law, new_leaders))
}

/// Sup over grid times of W1 between two flows on the same grid.
pub fn picard_residual(a: &MeasureFlow, b: &MeasureFlow) -> Result<f64> {
    if a.times() != b.times() {
        return Err(Error::Parameter("flows live on different time grids".into()));
    }
    let per_time: Vec<Result<f64>> = (0..a.times().len())
        .into_par_iter()
        .map(|k| wasserstein1(a.at_index(k), b.at_index(k)))
        .collect();
    let mut sup = 0.0_f64;
    for r in per_time {
        sup = sup.max(r?);
    }
    Ok(sup)
}

fn leader_deviation(a: &[Vec<f64>], b: &[Vec<f64>], dim: usize) -> f64 {
    let mut sup = 0.0_f64;
    for (ra, rb) in a.iter().zip(b) {
        for (ya, yb) in ra.chunks(dim).zip(rb.chunks(dim)) {
            let d2: f64 = ya.iter().zip(yb).map(|(p, q)| (p - q) * (p - q)).sum();
            sup = sup.max(d2.sqrt());
        }
    }
    sup
}

fn check_solver_inputs(
    problem: &ProblemSpec,
    n_samples: usize,
    tol: f64,
    max_iter: usize,
) -> Result<()> {
    problem.validate()?;
    if n_samples < 2 {
        return Err(Error::Parameter("law cloud needs at least 2 samples".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Parameter("tolerance must be positive".into()));
    }
    if max_iter < 2 {
        return Err(Error::Parameter(
            "need at least 2 iterations to measure a residual".into(),
        ));
    }
    Ok(())
}

fn iterate(
    problem: &ProblemSpec,
    controls: &ControlSchedule,
    n_samples: usize,
    tol: f64,
    max_iter: usize,
    plan: &NoisePlan,
    guess_law: MeasureFlow,
    guess_leaders: Vec<Vec<f64>>,
) -> Result<MckeanSolution> {
    let (mut law, mut leaders) =
        picard_sweep(problem, controls, n_samples, plan, &guess_law, &guess_leaders)?;
    let mut history = Vec::new();
    for iteration in 2..=max_iter {
        let (new_law, new_leaders) =
            picard_sweep(problem, controls, n_samples, plan, &law, &leaders)?;
        let r = picard_residual(&new_law, &law)?
            .max(leader_deviation(&new_leaders, &leaders, problem.dim));
        history.push(r);
        law = new_law;
        leaders = new_leaders;
        if r <= tol {
            return Ok(MckeanSolution {
                dt: problem.dt,
                law_flow: law,
                leader_path: leaders,
                dim: problem.dim,
                n_leaders: problem.leaders,
                iterations: iteration,
                residual: r,
                residual_history: history,
            });
        }
    }
    Err(Error::Convergence { residuals: history })
}

/// Solves the coupled mean-field system from the cold guess (flows
/// frozen at their initial data).
pub fn solve_mckean(
    problem: &ProblemSpec,
    controls: &ControlSchedule,
    n_samples: usize,
    tol: f64,
    max_iter: usize,
    plan: &NoisePlan,
) -> Result<MckeanSolution> {
    check_solver_inputs(problem, n_samples, tol, max_iter)?;
    controls.validate(problem.leaders, problem.dim, problem.n_steps())?;
    let dim = problem.dim;
    let mut initial = vec![0.0; n_samples * dim];
    initial.chunks_mut(dim).enumerate().for_each(|(i, out)| {
        problem
            .initial_followers
            .sample_into(plan, StreamKind::FollowerInit, 0, i as u32, out);
    });
    let mu0 = EmpiricalMeasure::uniform_from_flat(dim, initial)?;
    let guess_law = MeasureFlow::constant(grid_times(problem), mu0)?;
    let leaders0 = problem.initial_leaders.positions(dim, problem.leaders, plan, 0);
    let guess_leaders = vec![leaders0; problem.n_steps() + 1];
    iterate(problem, controls, n_samples, tol, max_iter, plan, guess_law, guess_leaders)
}

/// Same iteration started from a caller-provided guess, e.g. a particle
/// run's empirical flow.
pub fn solve_mckean_warm(
    problem: &ProblemSpec,
    controls: &ControlSchedule,
    n_samples: usize,
    tol: f64,
    max_iter: usize,
    plan: &NoisePlan,
    guess_law: MeasureFlow,
    guess_leaders: Vec<Vec<f64>>,
) -> Result<MckeanSolution> {
    check_solver_inputs(problem, n_samples, tol, max_iter)?;
    controls.validate(problem.leaders, problem.dim, problem.n_steps())?;
    if guess_law.times().len() != problem.n_steps() + 1
        || guess_leaders.len() != problem.n_steps() + 1
    {
        return Err(Error::Parameter("warm-start guess grid mismatch".into()));
    }
    iterate(problem, controls, n_samples, tol, max_iter, plan, guess_law, guess_leaders)
}

/// Follower law under an EXTERNALLY prescribed leader flow. Leaders are
/// not integrated; the solution carries no leader paths.
pub fn solve_fixed_nu(
    problem: &ProblemSpec,
    nu_flow: &MeasureFlow,
    n_samples: usize,
    tol: f64,
    max_iter: usize,
    plan: &NoisePlan,
) -> Result<MckeanSolution> {
    check_solver_inputs(problem, n_samples, tol, max_iter)?;
    if nu_flow.at_index(0).dim() != problem.dim {
        return Err(Error::Parameter("leader flow dimension mismatch".into()));
    }
    let dim = problem.dim;
    let mut initial = vec![0.0; n_samples * dim];
    initial.chunks_mut(dim).enumerate().for_each(|(i, out)| {
        problem
            .initial_followers
            .sample_into(plan, StreamKind::FollowerInit, 0, i as u32, out);
    });
    let mu0 = EmpiricalMeasure::uniform_from_flat(dim, initial)?;
    let mut law = MeasureFlow::constant(grid_times(problem), mu0)?;

    let sweep = |law: &MeasureFlow| -> Result<MeasureFlow> {
        let rows = simulate_frozen_flow(problem, law, Some(nu_flow), plan, 0, n_samples)?;
        cloud_to_flow(problem, &rows)
    };
    law = sweep(&law)?;
    let mut history = Vec::new();
    for iteration in 2..=max_iter {
        let new_law = sweep(&law)?;
        let r = picard_residual(&new_law, &law)?;
        history.push(r);
        law = new_law;
        if r <= tol {
            return Ok(MckeanSolution {
                dt: problem.dt,
                law_flow: law,
                leader_path: vec![Vec::new(); problem.n_steps() + 1],
                dim: problem.dim,
                n_leaders: 0,
                iterations: iteration,
                residual: r,
                residual_history: history,
            });
        }
    }
    Err(Error::Convergence { residuals: history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitialLaw, LeaderInit, ProblemSpec};
    use crate::cost::{CostSpec, LagrangianKind, PhiKind};
    use crate::fields::{External, FieldSpec, GainSpec, Kernel};
    use crate::sim::{empirical_of, simulate_finite, Population};
    use approx::assert_abs_diff_eq;

    fn problem(sigma: f64, leaders: usize) -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            horizon: 1.0,
            dt: 0.02,
            sigma,
            followers: 8,
            leaders,
            law_samples: 64,
            kappa: 1.0,
            seed: 31,
            common_noise: false,
            initial_followers: InitialLaw::Gaussian { mean: vec![0.5], std: vec![0.6] },
            initial_leaders: LeaderInit::Points {
                points: (0..leaders).map(|j| vec![1.0 + j as f64]).collect(),
            },
            vfield: FieldSpec::zero(),
            wfield: FieldSpec::zero(),
            gain: GainSpec::constant(1.0, 2.0).unwrap(),
            cost: CostSpec {
                lagrangian: LagrangianKind::LeaderFollowerW1,
                phi: PhiKind::Quadratic,
            },
        }
    }

    fn zero_controls(p: &ProblemSpec) -> ControlSchedule {
        ControlSchedule::zero(p.leaders, 1, p.dim, p.kappa, p.gain)
    }

    #[test]
    fn decoupled_fields_converge_in_two_iterations() {
        let mut p = problem(0.3, 1);
        p.vfield = FieldSpec {
            external: External::Linear { matrix: vec![vec![-1.0]] },
            ..FieldSpec::default()
        };
        p.wfield = FieldSpec {
            external: External::Constant { vector: vec![0.5] },
            ..FieldSpec::default()
        };
        let controls = zero_controls(&p);
        let sol = solve_mckean(&p, &controls, 64, 1e-12, 10, &p.noise_plan()).unwrap();
        assert_eq!(sol.iterations, 2);
        assert_eq!(sol.residual, 0.0);
    }

    #[test]
    fn attraction_to_the_mean_conserves_it() {
        let mut p = problem(0.4, 0);
        p.vfield = FieldSpec {
            follower_kernel: vec![Kernel::Linear { matrix: vec![vec![-1.0]] }],
            ..FieldSpec::default()
        };
        let controls = zero_controls(&p);
        let n = 2000;
        let sol = solve_mckean(&p, &controls, n, 1e-3, 50, &p.noise_plan()).unwrap();
        let mean0 = sol.law_flow.at_index(0).mean()[0];
        let mean_t = sol.law_flow.at_index(sol.n_steps()).mean()[0];
        // The drift conserves the cloud mean; only the noise average moves
        // it, with variance 2 sigma T / n.
        let tol = 3.0 * (2.0 * p.sigma * p.horizon / n as f64).sqrt();
        assert!((mean_t - mean0).abs() <= tol, "mean drifted {mean0} -> {mean_t}");
    }

    #[test]
    fn deterministic_decay_matches_closed_form() {
        let mut p = problem(0.0, 0);
        p.vfield = FieldSpec {
            external: External::Linear { matrix: vec![vec![-1.0]] },
            ..FieldSpec::default()
        };
        let controls = zero_controls(&p);
        let sol = solve_mckean(&p, &controls, 50, 1e-12, 10, &p.noise_plan()).unwrap();
        assert_eq!(sol.iterations, 2);
        let n_steps = sol.n_steps();
        let factor = (1.0 - p.dt).powi(n_steps as i32);
        let first = sol.law_flow.at_index(0);
        let last = sol.law_flow.at_index(n_steps);
        for i in 0..first.len() {
            assert_abs_diff_eq!(last.atom(i)[0], first.atom(i)[0] * factor, epsilon = 1e-12);
        }
    }

    #[test]
    fn residual_of_equal_flows_is_zero() {
        let times = vec![0.0, 0.5, 1.0];
        let mu = EmpiricalMeasure::uniform(vec![vec![0.0], vec![1.0]]).unwrap();
        let a = MeasureFlow::constant(times.clone(), mu.clone()).unwrap();
        let b = MeasureFlow::constant(times, mu).unwrap();
        assert_eq!(picard_residual(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn residual_sees_a_single_time_difference() {
        let times = vec![0.0, 0.5, 1.0];
        let d0 = EmpiricalMeasure::dirac(vec![0.0]).unwrap();
        let d1 = EmpiricalMeasure::dirac(vec![1.0]).unwrap();
        let a = MeasureFlow::constant(times.clone(), d0.clone()).unwrap();
        let b = MeasureFlow::new(times, vec![d0.clone(), d1, d0]).unwrap();
        assert_abs_diff_eq!(picard_residual(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn residual_matches_per_time_bruteforce() {
        fn perm_w1(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
            // n=3 uniform atoms: minimum over all 6 pairings.
            let idx = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            idx.iter()
                .map(|p| {
                    (0..3)
                        .map(|i| {
                            let (x, y) = (a.atom(i), b.atom(p[i]));
                            x.iter()
                                .zip(y)
                                .map(|(u, v)| (u - v) * (u - v))
                                .sum::<f64>()
                                .sqrt()
                                / 3.0
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        }
        let mut seed = 0.17_f64;
        let mut next = || {
            seed = (seed * 883.0 + 0.31).fract();
            2.0 * seed - 1.0
        };
        let times = vec![0.0, 0.25, 0.5, 0.75];
        let make_flow = |next: &mut dyn FnMut() -> f64| {
            let measures: Vec<EmpiricalMeasure> = (0..4)
                .map(|_| {
                    EmpiricalMeasure::uniform(
                        (0..3).map(|_| vec![next(), next()]).collect::<Vec<_>>(),
                    )
                    .unwrap()
                })
                .collect();
            MeasureFlow::new(times.clone(), measures).unwrap()
        };
        let a = make_flow(&mut next);
        let b = make_flow(&mut next);
        let expected = (0..4)
            .map(|k| perm_w1(a.at_index(k), b.at_index(k)))
            .fold(0.0_f64, f64::max);
        assert_abs_diff_eq!(picard_residual(&a, &b).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn residual_rejects_grid_mismatch() {
        let mu = EmpiricalMeasure::dirac(vec![0.0]).unwrap();
        let a = MeasureFlow::constant(vec![0.0, 1.0], mu.clone()).unwrap();
        let b = MeasureFlow::constant(vec![0.0, 0.5, 1.0], mu).unwrap();
        assert!(matches!(picard_residual(&a, &b), Err(Error::Parameter(_))));
    }

    #[test]
    fn fixed_nu_with_ignored_leaders_equals_leaderless_solve() {
        let mut p = problem(0.25, 0);
        p.vfield = FieldSpec {
            follower_kernel: vec![Kernel::Linear { matrix: vec![vec![-0.5]] }],
            ..FieldSpec::default()
        };
        let controls = zero_controls(&p);
        let plan = p.noise_plan();
        let direct = solve_mckean(&p, &controls, 64, 1e-4, 50, &plan).unwrap();
        let nu = MeasureFlow::constant(grid_times(&p), EmpiricalMeasure::dirac(vec![0.0]).unwrap()).unwrap();
        let fixed = solve_fixed_nu(&p, &nu, 64, 1e-4, 50, &plan).unwrap();
        assert_eq!(picard_residual(&direct.law_flow, &fixed.law_flow).unwrap(), 0.0);
    }

    #[test]
    fn loose_tolerance_stops_after_two_iterations() {
        let mut p = problem(0.25, 0);
        p.vfield = FieldSpec {
            follower_kernel: vec![Kernel::Linear { matrix: vec![vec![-0.5]] }],
            ..FieldSpec::default()
        };
        let nu = MeasureFlow::constant(grid_times(&p), EmpiricalMeasure::dirac(vec![0.0]).unwrap()).unwrap();
        let sol = solve_fixed_nu(&p, &nu, 32, 1e9, 50, &p.noise_plan()).unwrap();
        assert_eq!(sol.iterations, 2);
    }

    fn coupled_problem() -> ProblemSpec {
        let mut p = problem(0.3, 1);
        p.vfield = FieldSpec {
            follower_kernel: vec![Kernel::Linear { matrix: vec![vec![-0.5]] }],
            leader_kernel: vec![Kernel::Rational { amplitude: 0.7 }],
            ..FieldSpec::default()
        };
        p.wfield = FieldSpec {
            follower_kernel: vec![Kernel::Rational { amplitude: 0.4 }],
            ..FieldSpec::default()
        };
        p
    }

    #[test]
    fn residuals_contract_on_a_lipschitz_instance() {
        let p = coupled_problem();
        let controls = zero_controls(&p);
        let sol = solve_mckean(&p, &controls, 400, 1e-9, 40, &p.noise_plan()).unwrap();
        let h = &sol.residual_history;
        assert!(h.len() >= 3, "want a nontrivial history, got {h:?}");
        let mut contracting = 0;
        for w in h.windows(2) {
            if w[1] < w[0] {
                contracting += 1;
            }
        }
        assert!(
            contracting * 10 >= (h.len() - 1) * 8,
            "residuals not contracting: {h:?}"
        );
    }

    #[test]
    fn second_moment_stays_bounded() {
        let p = coupled_problem();
        let controls = zero_controls(&p);
        let sol = solve_mckean(&p, &controls, 300, 1e-6, 50, &p.noise_plan()).unwrap();
        let m2_initial = sol.law_flow.at_index(0).moment(2.0).unwrap();
        for k in 0..=sol.n_steps() {
            let m2 = sol.law_flow.at_index(k).moment(2.0).unwrap();
            assert!(m2.is_finite() && m2 <= m2_initial + 10.0, "m2 blew up: {m2}");
        }
    }

    #[test]
    fn sweep_fixes_the_matching_particle_run_exactly() {
        // With N = M and the same plan, the finite system is a fixed point
        // of the sweep map, bit for bit; the converged solution sits within
        // tolerance of it.
        let mut p = coupled_problem();
        p.followers = 64;
        let controls = zero_controls(&p);
        let plan = p.noise_plan();
        let traj = simulate_finite(&p, &controls, &plan).unwrap();
        let measures: Vec<EmpiricalMeasure> = traj
            .states
            .iter()
            .map(|s| empirical_of(s, Population::Followers).unwrap())
            .collect();
        let particle_law = MeasureFlow::new(traj.times.clone(), measures).unwrap();
        let particle_leaders: Vec<Vec<f64>> =
            traj.states.iter().map(|s| s.leaders_flat().to_vec()).collect();

        let (swept_law, swept_leaders) =
            picard_sweep(&p, &controls, 64, &plan, &particle_law, &particle_leaders).unwrap();
        assert_eq!(picard_residual(&swept_law, &particle_law).unwrap(), 0.0);
        assert_eq!(leader_deviation(&swept_leaders, &particle_leaders, 1), 0.0);

        let tol = 1e-3;
        let sol = solve_mckean(&p, &controls, 64, tol, 50, &plan).unwrap();
        let gap = picard_residual(&sol.law_flow, &particle_law).unwrap();
        assert!(gap <= 5.0 * tol, "converged law strays from the particle run: {gap}");
    }

    #[test]
    fn different_starts_agree_within_tolerance() {
        let p = coupled_problem();
        let controls = zero_controls(&p);
        let plan = p.noise_plan();
        let tol = 1e-4;
        let cold = solve_mckean(&p, &controls, 200, tol, 50, &plan).unwrap();

        let shifted = cold.law_flow.at_index(0).translate(&[1.0]).unwrap();
        let warm_law = MeasureFlow::constant(grid_times(&p), shifted).unwrap();
        let leaders0 = p.initial_leaders.positions(1, 1, &plan, 0);
        let warm_leaders = vec![leaders0; p.n_steps() + 1];
        let warm =
            solve_mckean_warm(&p, &controls, 200, tol, 50, &plan, warm_law, warm_leaders)
                .unwrap();
        let gap = picard_residual(&cold.law_flow, &warm.law_flow).unwrap();
        assert!(gap <= 3.0 * tol, "two starts disagree: {gap}");
    }

    #[test]
    fn nonconvergence_reports_history() {
        let p = coupled_problem();
        let controls = zero_controls(&p);
        match solve_mckean(&p, &controls, 64, 1e-14, 3, &p.noise_plan()) {
            Err(Error::Convergence { residuals }) => assert_eq!(residuals.len(), 2),
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }
}
