//! Cost functionals. A running Lagrangian on the pair of empirical
//! measures plus a per-leader control cost, integrated by the
//! left-endpoint rule on the Euler grid and averaged over realizations.
//! The control term has two evaluation routes: the direct per-leader
//! average and the atomic measure representation; they must agree to
//! near machine precision whenever leader positions are distinct.

use crate::error::{Error, Result};
use crate::fields::eval_gain;
use crate::measures::{wasserstein1, EmpiricalMeasure};
use crate::mckean::MckeanSolution;
use crate::sim::{empirical_of, ControlSchedule, EnsembleTrajectory, Population};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Running cost on (mu, nu). The squared variant is intended for
/// bounded-moment regimes where it stays uniformly continuous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LagrangianKind {
    /// No running cost; total cost is the control term alone.
    Zero,
    W1ToTarget { target: EmpiricalMeasure },
    SquaredW1ToTarget { target: EmpiricalMeasure },
    LeaderFollowerW1,
}

/// Control cost phi(u, xi). Zero at u = 0, convex and superlinear in u
/// for every xi.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiKind {
    Quadratic,
    QuadraticWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub lagrangian: LagrangianKind,
    pub phi: PhiKind,
}

impl CostSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match &self.lagrangian {
            LagrangianKind::W1ToTarget { target }
            | LagrangianKind::SquaredW1ToTarget { target } => {
                // Deserialized measures bypass the constructor; rebuild to
                // enforce its invariants.
                let rebuilt = EmpiricalMeasure::from_flat(
                    target.dim(),
                    target.atoms_flat().to_vec(),
                    target.weights().to_vec(),
                )?;
                if rebuilt.dim() != dim {
                    return Err(Error::Parameter(format!(
                        "cost target has dimension {}, problem has {dim}",
                        rebuilt.dim()
                    )));
                }
            }
            LagrangianKind::LeaderFollowerW1 | LagrangianKind::Zero => {}
        }
        Ok(())
    }

    /// True when the running cost reads the leader measure.
    pub fn needs_leaders(&self) -> bool {
        matches!(self.lagrangian, LagrangianKind::LeaderFollowerW1)
    }
}

/// Running cost at one instant.
pub fn lagrangian(spec: &CostSpec, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    lagrangian_opt(spec, mu, Some(nu))
}

fn lagrangian_opt(
    spec: &CostSpec,
    mu: &EmpiricalMeasure,
    nu: Option<&EmpiricalMeasure>,
) -> Result<f64> {
    match &spec.lagrangian {
        LagrangianKind::Zero => Ok(0.0),
        LagrangianKind::W1ToTarget { target } => wasserstein1(mu, target),
        LagrangianKind::SquaredW1ToTarget { target } => {
            let r = wasserstein1(mu, target)?;
            Ok(r * r)
        }
        LagrangianKind::LeaderFollowerW1 => {
            let nu = nu.ok_or_else(|| {
                Error::Parameter("leader-follower running cost needs a leader population".into())
            })?;
            wasserstein1(mu, nu)
        }
    }
}

/// Control cost phi(u, xi).
pub fn phi(spec: &CostSpec, u: &[f64], xi: f64) -> f64 {
    let sq: f64 = u.iter().map(|c| c * c).sum();
    match spec.phi {
        PhiKind::Quadratic => sq,
        PhiKind::QuadraticWeighted => sq * (1.0 + xi * xi),
    }
}

/// Lagrangian part, control part, and their sum for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub lagrangian_part: f64,
    pub control_part: f64,
    pub total: f64,
}

impl CostBreakdown {
    fn new(lagrangian_part: f64, control_part: f64) -> Self {
        Self { lagrangian_part, control_part, total: lagrangian_part + control_part }
    }
}

fn trajectory_cost(
    traj: &EnsembleTrajectory,
    controls: &ControlSchedule,
    spec: &CostSpec,
) -> Result<CostBreakdown> {
    if !traj.full_resolution() {
        return Err(Error::Parameter(
            "cost integration needs every Euler step recorded (stride 1)".into(),
        ));
    }
    let n_steps = traj.states.len() - 1;
    let m = traj.states[0].n_leaders();
    let mut lag = 0.0;
    let mut ctrl = 0.0;
    for k in 0..n_steps {
        let state = &traj.states[k];
        let mu = empirical_of(state, Population::Followers)?;
        let nu = if m > 0 {
            Some(empirical_of(state, Population::Leaders)?)
        } else {
            None
        };
        lag += lagrangian_opt(spec, &mu, nu.as_ref())? * traj.dt;
        if m > 0 {
            let g = eval_gain(&controls.gain, &mu)?;
            let interval = controls.interval_at(k, n_steps);
            let mut sum = 0.0;
            for j in 0..m {
                sum += phi(spec, controls.control(j, interval), g);
            }
            ctrl += sum / m as f64 * traj.dt;
        }
    }
    Ok(CostBreakdown::new(lag, ctrl))
}

fn check_batch(
    batch: &[EnsembleTrajectory],
    controls: &ControlSchedule,
    spec: &CostSpec,
) -> Result<()> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Parameter("cost of an empty trajectory batch".into()))?;
    let dim = first.dim();
    let n_steps = first.states.len() - 1;
    let m = first.states[0].n_leaders();
    for traj in batch {
        if traj.dim() != dim
            || traj.states.len() - 1 != n_steps
            || traj.states[0].n_leaders() != m
            || traj.dt != first.dt
        {
            return Err(Error::Parameter("trajectory batch is not homogeneous".into()));
        }
    }
    spec.validate(dim)?;
    if spec.needs_leaders() && m == 0 {
        return Err(Error::Parameter(
            "leader-follower running cost needs a leader population".into(),
        ));
    }
    controls.validate(m, dim, n_steps)
}

/// Per-realization total costs, in batch order.
pub fn cost_finite_samples(
    batch: &[EnsembleTrajectory],
    controls: &ControlSchedule,
    spec: &CostSpec,
) -> Result<Vec<f64>> {
    check_batch(batch, controls, spec)?;
    let runs: Vec<Result<CostBreakdown>> = batch
        .par_iter()
        .map(|traj| trajectory_cost(traj, controls, spec))
        .collect();
    let mut out = Vec::with_capacity(runs.len());
    for r in runs {
        out.push(r?.total);
    }
    Ok(out)
}

/// Sample-mean cost over the batch, split into parts.
pub fn cost_finite_breakdown(
    batch: &[EnsembleTrajectory],
    controls: &ControlSchedule,
    spec: &CostSpec,
) -> Result<CostBreakdown> {
    check_batch(batch, controls, spec)?;
    let runs: Vec<Result<CostBreakdown>> = batch
        .par_iter()
        .map(|traj| trajectory_cost(traj, controls, spec))
        .collect();
    let mut lag = 0.0;
    let mut ctrl = 0.0;
    for r in runs {
        let b = r?;
        lag += b.lagrangian_part;
        ctrl += b.control_part;
    }
    let n = batch.len() as f64;
    Ok(CostBreakdown::new(lag / n, ctrl / n))
}

/// Finite-system cost: sample mean of the integrated running plus
/// control cost.
pub fn cost_finite(
    batch: &[EnsembleTrajectory],
    controls: &ControlSchedule,
    spec: &CostSpec,
) -> Result<f64> {
    Ok(cost_finite_breakdown(batch, controls, spec)?.total)
}

/// Mean-field cost: same integrals with the follower law flow in place
/// of sampled follower clouds. Deterministic, no expectation.
pub fn cost_chaos_breakdown(
    sol: &MckeanSolution,
    controls: &ControlSchedule,
    spec: &CostSpec,
) -> Result<CostBreakdown> {
    let n_steps = sol.n_steps();
    spec.validate(sol.dim())?;
    if spec.needs_leaders() && sol.n_leaders() == 0 {
        return Err(Error::Parameter(
            "leader-follower running cost needs a leader population".into(),
        ));
    }
    controls.validate(sol.n_leaders(), sol.dim(), n_steps)?;
    let m = sol.n_leaders();
    let mut lag = 0.0;
    let mut ctrl = 0.0;
    for k in 0..n_steps {
        let mu = sol.law_flow.at_index(k);
        let nu = if m > 0 { Some(sol.leader_measure(k)?) } else { None };
        lag += lagrangian_opt(spec, mu, nu.as_ref())? * sol.dt;
        if m > 0 {
            let g = eval_gain(&controls.gain, mu)?;
            let interval = controls.interval_at(k, n_steps);
            let mut sum = 0.0;
            for j in 0..m {
                sum += phi(spec, controls.control(j, interval), g);
            }
            ctrl += sum / m as f64 * sol.dt;
        }
    }
    Ok(CostBreakdown::new(lag, ctrl))
}

pub fn cost_chaos(
    sol: &MckeanSolution,
    controls: &ControlSchedule,
    spec: &CostSpec,
) -> Result<f64> {
    Ok(cost_chaos_breakdown(sol, controls, spec)?.total)
}

/// Both evaluation routes of the integrated control cost, plus a flag
/// raised when two leaders share a position while carrying different
/// controls (the measure route aggregates them and the identity may
/// fail).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomicControlCost {
    /// Integral of phi against the leader measure after pushing the
    /// controls through the atomic vector-measure representation.
    pub measure_form: f64,
    /// Direct per-leader average of phi.
    pub direct_form: f64,
    pub coincidence: bool,
}

/// Evaluates the control cost through the atomic measure representation
/// and directly. Controls are zeroed wherever the gain vanishes, which
/// the representation route requires to stay invertible.
///
/// `leader_path[k]` holds the m leader positions (flat, m x dim) at step
/// k; `gain_values[k]` the gain on [t_k, t_{k+1}).
pub fn phi_atomic_identity(
    controls: &ControlSchedule,
    leader_path: &[Vec<f64>],
    dim: usize,
    gain_values: &[f64],
    dt: f64,
    spec: &CostSpec,
) -> Result<AtomicControlCost> {
    let m = controls.n_leaders();
    if m == 0 {
        return Err(Error::Parameter("atomic control identity needs leaders".into()));
    }
    let n_steps = gain_values.len();
    if n_steps == 0 || leader_path.len() != n_steps + 1 {
        return Err(Error::Parameter(
            "leader path must cover the closed step grid of the gain series".into(),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::Parameter("dt must be positive".into()));
    }
    controls.validate(m, dim, n_steps)?;
    if gain_values.iter().any(|g| !g.is_finite()) {
        return Err(Error::Parameter("gain series must be finite".into()));
    }
    if leader_path.iter().any(|row| row.len() != m * dim) {
        return Err(Error::Parameter("leader path rows must be m x dim flat".into()));
    }

    let mut direct = 0.0;
    let mut measure = 0.0;
    let mut coincidence = false;
    let mut effective = vec![0.0; m * dim];
    for k in 0..n_steps {
        let g = gain_values[k];
        let row = &leader_path[k];
        let interval = controls.interval_at(k, n_steps);
        for j in 0..m {
            let u = controls.control(j, interval);
            for c in 0..dim {
                effective[j * dim + c] = if g == 0.0 { 0.0 } else { u[c] };
            }
        }

        let mut step_direct = 0.0;
        for j in 0..m {
            step_direct += phi(spec, &effective[j * dim..(j + 1) * dim], g);
        }
        direct += step_direct / m as f64 * dt;

        // Group leaders by exact position; the measure sees one atom per
        // distinct point, weighted by multiplicity.
        let mut groups: Vec<Vec<usize>> = Vec::new();
        'members: for j in 0..m {
            let y = &row[j * dim..(j + 1) * dim];
            for group in &mut groups {
                let rep = group[0];
                if &row[rep * dim..(rep + 1) * dim] == y {
                    group.push(j);
                    continue 'members;
                }
            }
            groups.push(vec![j]);
        }

        let mut step_measure = 0.0;
        let mut theta = vec![0.0; dim];
        for group in &groups {
            theta.iter_mut().for_each(|t| *t = 0.0);
            for &j in group {
                for c in 0..dim {
                    theta[c] += effective[j * dim + c] * g / m as f64;
                }
            }
            let weight = group.len() as f64 / m as f64;
            let recovered: Vec<f64> = if g == 0.0 {
                vec![0.0; dim]
            } else {
                theta.iter().map(|t| t / (weight * g)).collect()
            };
            step_measure += weight * phi(spec, &recovered, g);
            if group.len() > 1 {
                let rep = group[0];
                let same = group.iter().all(|&j| {
                    effective[j * dim..(j + 1) * dim] == effective[rep * dim..(rep + 1) * dim]
                });
                if !same {
                    coincidence = true;
                }
            }
        }
        measure += step_measure * dt;
    }

    Ok(AtomicControlCost { measure_form: measure, direct_form: direct, coincidence })
}

/// Sample mean and its standard error (zero for fewer than two samples).
pub fn mean_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
