//! 1D finite-volume solver for the follower density equation
//! ∂_t ρ − σ∂_xx ρ = −∂_x(ṽ ρ) with no-flux boundaries, used to
//! cross-validate the sampled SDE law. First-order upwind advection plus
//! centered diffusion keeps cell averages nonnegative under the step
//! bound; mass is conserved by flux telescoping. The domain truncation
//! to [x_min, x_max] is an approximation of the whole line; benchmarks
//! place the boundary where the lost mass stays below 1e-8.

use crate::config::{InitialLaw, ProblemSpec};
use crate::error::{Error, Result};
use crate::fields::eval_gain;
use crate::measures::{EmpiricalMeasure, MeasureFlow};
use crate::sim::ControlSchedule;
use serde::{Deserialize, Serialize};
use std::io::Write;

const MIN_CELLS: usize = 16;
/// Mass tolerance of a stored density.
const MASS_TOL: f64 = 1e-10;
/// Safety factor of the explicit step-size gate.
const CFL_SAFETY: f64 = 0.9;
/// The solver's own sub-steps use half the gate so that the combined
/// advection + diffusion update keeps a nonnegative stencil.
const SOLVE_SAFETY: f64 = 0.45;

/// Piecewise-constant density on a uniform 1D grid of cell averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    x_min: f64,
    x_max: f64,
    values: Vec<f64>,
}

/// Grid geometry for the density solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
}

impl FpGrid {
    pub fn validate(&self) -> Result<()> {
        if !self.x_min.is_finite() || !self.x_max.is_finite() || self.x_min >= self.x_max {
            return Err(Error::Parameter("grid needs finite x_min < x_max".into()));
        }
        if self.n_cells < MIN_CELLS {
            return Err(Error::Parameter(format!("grid needs at least {MIN_CELLS} cells")));
        }
        Ok(())
    }
}

impl GridDensity {
    pub fn new(x_min: f64, x_max: f64, values: Vec<f64>) -> Result<Self> {
        if !x_min.is_finite() || !x_max.is_finite() || x_min >= x_max {
            return Err(Error::Parameter("density needs finite x_min < x_max".into()));
        }
        if values.len() < MIN_CELLS {
            return Err(Error::Parameter(format!(
                "density needs at least {MIN_CELLS} cells, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("cell averages must be finite and >= 0".into()));
        }
        let rho = Self { x_min, x_max, values };
        let mass = rho.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Parameter(format!("density mass {mass} is not 1")));
        }
        Ok(rho)
    }

    /// Evaluates `pdf` at cell centers and renormalizes to unit mass on
    /// the grid, folding any off-domain tail in proportionally.
    pub fn from_pdf(grid: &FpGrid, pdf: impl Fn(f64) -> f64) -> Result<Self> {
        grid.validate()?;
        let dx = (grid.x_max - grid.x_min) / grid.n_cells as f64;
        let mut values: Vec<f64> = (0..grid.n_cells)
            .map(|i| pdf(grid.x_min + (i as f64 + 0.5) * dx))
            .collect();
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("pdf produced negative or non-finite values".into()));
        }
        let mass: f64 = values.iter().sum::<f64>() * dx;
        if mass <= 0.0 {
            return Err(Error::Parameter("pdf carries no mass on the grid".into()));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { x_min: grid.x_min, x_max: grid.x_max, values })
    }

    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.values.len() as f64
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx()
    }

    /// Mass in the outermost `cells` cells on each side; a proxy for how
    /// much the domain truncation costs.
    pub fn boundary_mass(&self, cells: usize) -> f64 {
        let n = self.values.len();
        let k = cells.min(n / 2);
        let edge: f64 = self.values[..k].iter().chain(&self.values[n - k..]).sum();
        edge * self.dx()
    }

    /// One atom per cell at its center, weight = average * dx,
    /// renormalized to total weight one.
    pub fn quantize(&self) -> EmpiricalMeasure {
        let dx = self.dx();
        let atoms: Vec<f64> = (0..self.values.len()).map(|i| self.cell_center(i)).collect();
        let raw: Vec<f64> = self.values.iter().map(|v| v * dx).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        EmpiricalMeasure::from_flat(1, atoms, weights).expect("cell atoms form a measure")
    }
}

/// Largest step the explicit scheme accepts for these inputs.
fn step_bound(dx: f64, max_drift: f64, sigma: f64) -> f64 {
    let mut bound = f64::INFINITY;
    if max_drift > 0.0 {
        bound = bound.min(dx / max_drift);
    }
    if sigma > 0.0 {
        bound = bound.min(dx * dx / (2.0 * sigma));
    }
    bound
}

/// One explicit step: upwind advection with interface velocities averaged
/// from the adjacent cells, centered diffusion, zero boundary flux.
/// Refuses dt above 0.9 x min(dx/max|drift|, dx^2/(2 sigma)); there is no
/// silent sub-stepping.
pub fn fp_step(rho: &GridDensity, drift: &[f64], sigma: f64, dt: f64) -> Result<GridDensity> {
    let n = rho.values.len();
    if drift.len() != n {
        return Err(Error::Parameter("one drift value per cell required".into()));
    }
    if drift.iter().any(|u| !u.is_finite()) {
        return Err(Error::Numeric("drift is not finite".into()));
    }
    if !(sigma >= 0.0) || !(dt > 0.0) {
        return Err(Error::Parameter("need sigma >= 0 and dt > 0".into()));
    }
    let dx = rho.dx();
    let max_drift = drift.iter().fold(0.0_f64, |a, u| a.max(u.abs()));
    let dt_max = CFL_SAFETY * step_bound(dx, max_drift, sigma);
    if dt > dt_max {
        return Err(Error::StepSize { dt, dt_max });
    }

    let mut flux = vec![0.0; n + 1];
    for i in 0..n - 1 {
        let u = 0.5 * (drift[i] + drift[i + 1]);
        let upwind = if u >= 0.0 { rho.values[i] } else { rho.values[i + 1] };
        flux[i + 1] = u * upwind - sigma * (rho.values[i + 1] - rho.values[i]) / dx;
    }

    let scale = dt / dx;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = rho.values[i] - scale * (flux[i + 1] - flux[i]);
        if v < 0.0 {
            if v < -1e-12 {
                return Err(Error::Numeric(format!(
                    "cell {i} went negative ({v}); step too aggressive for the combined stencil"
                )));
            }
            v = 0.0;
        }
        values.push(v);
    }
    Ok(GridDensity { x_min: rho.x_min, x_max: rho.x_max, values })
}

/// Density snapshots on the problem's time grid.
#[derive(Debug, Clone)]
pub struct DensityFlow {
    pub times: Vec<f64>,
    pub densities: Vec<GridDensity>,
}

impl DensityFlow {
    pub fn at_index(&self, i: usize) -> &GridDensity {
        &self.densities[i]
    }

    pub fn last(&self) -> &GridDensity {
        self.densities.last().expect("flow has snapshots")
    }
}

/// CSV export: t,cell_center,density.
pub fn write_density_csv<W: Write>(flow: &DensityFlow, mut w: W) -> Result<()> {
    writeln!(w, "t,cell_center,density")?;
    for (t, rho) in flow.times.iter().zip(&flow.densities) {
        for i in 0..rho.n_cells() {
            writeln!(w, "{t},{},{}", rho.cell_center(i), rho.values[i])?;
        }
    }
    Ok(())
}

fn initial_density(problem: &ProblemSpec, grid: &FpGrid) -> Result<GridDensity> {
    let law = problem.initial_followers.clone();
    GridDensity::from_pdf(grid, |x| law_pdf_1d(&law, x))
}

fn law_pdf_1d(law: &InitialLaw, x: f64) -> f64 {
    fn gaussian(x: f64, mean: f64, std: f64) -> f64 {
        let z = (x - mean) / std;
        (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
    }
    match law {
        InitialLaw::Gaussian { mean, std } => gaussian(x, mean[0], std[0]),
        InitialLaw::Mixture { components } => components
            .iter()
            .map(|c| c.weight * gaussian(x, c.mean[0], c.std[0]))
            .sum(),
    }
}

fn cell_drifts(
    problem: &ProblemSpec,
    t: f64,
    rho: &GridDensity,
    nu: Option<&EmpiricalMeasure>,
) -> Vec<f64> {
    let mu = rho.quantize();
    let prepared = problem.vfield.prepare(t, &mu, nu);
    let mut out = vec![0.0; rho.n_cells()];
    let mut d = [0.0];
    for (i, slot) in out.iter_mut().enumerate() {
        prepared.eval_into(&[rho.cell_center(i)], &mut d);
        *slot = d[0];
    }
    out
}

/// Advances rho from `t` to `t_target` with adaptive sub-steps, the
/// drift closure recomputed from the current density before every one.
fn advance_to(
    problem: &ProblemSpec,
    mut rho: GridDensity,
    t: f64,
    t_target: f64,
    nu_flow: Option<&MeasureFlow>,
) -> Result<GridDensity> {
    let eps = 1e-12 * problem.horizon.max(1.0);
    let mut now = t;
    while t_target - now > eps {
        let nu = nu_flow.map(|f| f.at_time(now));
        let drift = cell_drifts(problem, now, &rho, nu);
        let max_drift = drift.iter().fold(0.0_f64, |a, u| a.max(u.abs()));
        let bound = SOLVE_SAFETY * step_bound(rho.dx(), max_drift, problem.sigma);
        let dt = bound.min(t_target - now);
        rho = fp_step(&rho, &drift, problem.sigma, dt)?;
        now += dt;
    }
    Ok(rho)
}

/// Solves the density equation with a FROZEN leader flow (or none),
/// recording on the problem's time grid. The drift is
/// v(x, quantize(rho_t), nu_t), refreshed every internal sub-step; the
/// sub-step size is chosen so the explicit update keeps cell averages
/// nonnegative.
pub fn fp_solve(
    problem: &ProblemSpec,
    nu_flow: Option<&MeasureFlow>,
    grid: &FpGrid,
) -> Result<DensityFlow> {
    problem.validate()?;
    grid.validate()?;
    if problem.dim != 1 {
        return Err(Error::Unsupported(format!(
            "density solver is 1D only, problem has dimension {}",
            problem.dim
        )));
    }
    if let Some(flow) = nu_flow {
        if flow.at_index(0).dim() != 1 {
            return Err(Error::Parameter("leader flow must be 1D".into()));
        }
    }
    let mut rho = initial_density(problem, grid)?;
    let n_steps = problem.n_steps();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut densities = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    densities.push(rho.clone());
    for k in 0..n_steps {
        let t = problem.time_at(k);
        let t_next = problem.time_at(k + 1);
        rho = advance_to(problem, rho, t, t_next, nu_flow)?;
        times.push(t_next);
        densities.push(rho.clone());
    }
    Ok(DensityFlow { times, densities })
}

/// EXPERIMENTAL coupled mode: leader ODEs ride on the problem grid, the
/// density between grid times sees the step-start leader positions. The
/// supported configuration is the frozen-nu `fp_solve`.
pub fn fp_solve_coupled(
    problem: &ProblemSpec,
    controls: &ControlSchedule,
    grid: &FpGrid,
) -> Result<(DensityFlow, Vec<Vec<f64>>)> {
    problem.validate()?;
    grid.validate()?;
    if problem.dim != 1 {
        return Err(Error::Unsupported(
            "density solver is 1D only".into(),
        ));
    }
    let n_steps = problem.n_steps();
    controls.validate(problem.leaders, 1, n_steps)?;
    if problem.leaders == 0 {
        return Err(Error::Parameter("coupled mode needs leaders".into()));
    }
    let m = problem.leaders;
    let plan = problem.noise_plan();
    let mut leaders = problem.initial_leaders.positions(1, m, &plan, 0);
    let mut leader_path = vec![leaders.clone()];
    let mut rho = initial_density(problem, grid)?;
    let mut times = vec![0.0];
    let mut densities = vec![rho.clone()];
    let mut drift = [0.0];
    for k in 0..n_steps {
        let t = problem.time_at(k);
        let t_next = problem.time_at(k + 1);
        let nu = EmpiricalMeasure::uniform_from_flat(1, leaders.clone())?;
        let mu = rho.quantize();
        let g = eval_gain(&controls.gain, &mu)?;
        let prepared = problem.wfield.prepare(t, &mu, Some(&nu));
        let interval = controls.interval_at(k, n_steps);
        let mut next_leaders = leaders.clone();
        for j in 0..m {
            prepared.eval_into(&leaders[j..j + 1], &mut drift);
            let u = controls.control(j, interval);
            next_leaders[j] = leaders[j] + (drift[0] + u[0] * g) * problem.dt;
        }
        if next_leaders.iter().any(|y| !y.is_finite()) {
            return Err(Error::BlowUp { kind: "leader", index: 0, t: t_next });
        }
        let nu_const = MeasureFlow::constant(vec![0.0], nu)?;
        rho = advance_to(problem, rho, t, t_next, Some(&nu_const))?;
        leaders = next_leaders;
        leader_path.push(leaders.clone());
        times.push(t_next);
        densities.push(rho.clone());
    }
    Ok((DensityFlow { times, densities }, leader_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitialLaw, LeaderInit};
    use crate::cost::{CostSpec, LagrangianKind, PhiKind};
    use crate::fields::{External, FieldSpec, GainSpec};
    use crate::measures::wasserstein1;
    use crate::rng::{NoisePlan, StreamKind};
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn grid(n: usize) -> FpGrid {
        FpGrid { x_min: -8.0, x_max: 8.0, n_cells: n }
    }

    fn uniform_band(n: usize) -> GridDensity {
        // Unit mass spread over all n cells of [-8, 8].
        GridDensity::new(-8.0, 8.0, vec![1.0 / 16.0; n]).unwrap()
    }

    fn point_mass(n: usize, cell: usize) -> GridDensity {
        let dx = 16.0 / n as f64;
        let mut v = vec![0.0; n];
        v[cell] = 1.0 / dx;
        GridDensity::new(-8.0, 8.0, v).unwrap()
    }

    fn fp_problem(sigma: f64, vfield: FieldSpec) -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            horizon: 1.0,
            dt: 0.05,
            sigma,
            followers: 4,
            leaders: 0,
            law_samples: 8,
            kappa: 1.0,
            seed: 7,
            common_noise: false,
            initial_followers: InitialLaw::Gaussian { mean: vec![0.0], std: vec![0.5] },
            initial_leaders: LeaderInit::Points { points: vec![] },
            vfield,
            wfield: FieldSpec::zero(),
            gain: GainSpec::constant(1.0, 2.0).unwrap(),
            cost: CostSpec {
                lagrangian: LagrangianKind::LeaderFollowerW1,
                phi: PhiKind::Quadratic,
            },
        }
    }

    #[test]
    fn frozen_step_is_identity() {
        let rho = uniform_band(32);
        let next = fp_step(&rho, &vec![0.0; 32], 0.0, 0.1).unwrap();
        assert_eq!(next.values(), rho.values());
    }

    #[test]
    fn constant_drift_shifts_one_upwind_fraction() {
        let n = 32;
        let rho = point_mass(n, 10);
        let c = 0.8;
        let dt = 0.2;
        let dx = rho.dx();
        let theta = c * dt / dx;
        assert!(theta < 0.9);
        let next = fp_step(&rho, &vec![c; n], 0.0, dt).unwrap();
        assert_abs_diff_eq!(next.values()[10], rho.values()[10] * (1.0 - theta), epsilon = 1e-14);
        assert_abs_diff_eq!(next.values()[11], rho.values()[10] * theta, epsilon = 1e-14);
        let moved: f64 = next.values().iter().sum::<f64>() * dx;
        assert_abs_diff_eq!(moved, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn diffusion_grows_variance_linearly() {
        let g = FpGrid { x_min: -8.0, x_max: 8.0, n_cells: 200 };
        let mut rho = GridDensity::from_pdf(&g, |x| (-0.5 * (x / 0.5_f64).powi(2)).exp()).unwrap();
        let sigma = 0.3;
        let dx = rho.dx();
        let dt = 0.45 * dx * dx / (2.0 * sigma);
        let var = |rho: &GridDensity| {
            let q = rho.quantize();
            let mean = q.mean()[0];
            (0..q.len())
                .map(|i| q.weight(i) * (q.atom(i)[0] - mean).powi(2))
                .sum::<f64>()
        };
        let v0 = var(&rho);
        let steps = 100;
        for _ in 0..steps {
            rho = fp_step(&rho, &vec![0.0; 200], sigma, dt).unwrap();
        }
        let expected = v0 + 2.0 * sigma * dt * steps as f64;
        let got = var(&rho);
        assert!(
            (got - expected).abs() <= 0.02 * expected,
            "variance {got} vs expected {expected}"
        );
        assert_abs_diff_eq!(rho.mass(), 1.0, epsilon = 1e-10);
        assert!(rho.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn step_bound_is_enforced() {
        let rho = uniform_band(32);
        let dx = rho.dx();
        let c = 1.0;
        let too_big = 0.95 * dx / c;
        match fp_step(&rho, &vec![c; 32], 0.0, too_big) {
            Err(Error::StepSize { dt, dt_max }) => {
                assert!(dt > dt_max);
            }
            other => panic!("expected step-size error, got {other:?}"),
        }
    }

    #[test]
    fn ou_relaxes_to_its_stationary_gaussian() {
        let mut p = fp_problem(
            0.25,
            FieldSpec {
                external: External::Linear { matrix: vec![vec![-1.0]] },
                ..FieldSpec::default()
            },
        );
        p.horizon = 5.0;
        p.dt = 0.1;
        p.initial_followers = InitialLaw::Gaussian { mean: vec![1.0], std: vec![0.5] };
        let g = FpGrid { x_min: -6.0, x_max: 6.0, n_cells: 300 };
        let flow = fp_solve(&p, None, &g).unwrap();
        let final_q = flow.last().quantize();

        // Stationary law has variance sigma; quantile atoms of N(0, 0.5^2).
        let reference = Normal::new(0.0, 0.25_f64.sqrt()).unwrap();
        let n_ref = 2048;
        let atoms: Vec<f64> = (0..n_ref)
            .map(|k| reference.inverse_cdf((k as f64 + 0.5) / n_ref as f64))
            .collect();
        let ref_measure = EmpiricalMeasure::uniform_from_flat(1, atoms).unwrap();
        let err = wasserstein1(&final_q, &ref_measure).unwrap();
        assert!(err <= 0.05, "OU stationary mismatch: W1 = {err}");
        assert!(flow.last().boundary_mass(3) < 1e-8);
    }

    #[test]
    fn pure_transport_translates_the_profile() {
        let c = 0.5;
        let p = fp_problem(
            0.0,
            FieldSpec {
                external: External::Constant { vector: vec![c] },
                ..FieldSpec::default()
            },
        );
        let g = FpGrid { x_min: -4.0, x_max: 6.0, n_cells: 400 };
        let flow = fp_solve(&p, None, &g).unwrap();
        let shifted = flow.at_index(0).quantize().translate(&[c * p.horizon]).unwrap();
        let err = wasserstein1(&flow.last().quantize(), &shifted).unwrap();
        assert!(err <= 0.05, "translation error {err}");
    }

    #[test]
    fn refinement_shrinks_the_transport_error() {
        let c = 0.5;
        let p = fp_problem(
            0.0,
            FieldSpec {
                external: External::Constant { vector: vec![c] },
                ..FieldSpec::default()
            },
        );
        let err_at = |n: usize| {
            let g = FpGrid { x_min: -4.0, x_max: 6.0, n_cells: n };
            let flow = fp_solve(&p, None, &g).unwrap();
            let shifted = flow.at_index(0).quantize().translate(&[c * p.horizon]).unwrap();
            wasserstein1(&flow.last().quantize(), &shifted).unwrap()
        };
        let coarse = err_at(100);
        let fine = err_at(200);
        assert!(
            coarse / fine >= 1.5,
            "halving dx should cut the error by >= 1.5x: {coarse} vs {fine}"
        );
    }

    #[test]
    fn frozen_problem_keeps_the_density_constant() {
        let p = fp_problem(0.0, FieldSpec::zero());
        let g = grid(64);
        let flow = fp_solve(&p, None, &g).unwrap();
        for rho in &flow.densities {
            assert_eq!(rho.values(), flow.at_index(0).values());
        }
    }

    #[test]
    fn quantize_places_cell_center_atoms() {
        let n = 16;
        let rho = GridDensity::new(0.0, 1.0, vec![1.0; n]).unwrap();
        let q = rho.quantize();
        assert_eq!(q.len(), n);
        for i in 0..n {
            assert_abs_diff_eq!(q.atom(i)[0], (2 * i + 1) as f64 / 32.0, epsilon = 1e-15);
            assert_abs_diff_eq!(q.weight(i), 1.0 / 16.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_cell_spike_quantizes_to_one_atom() {
        let rho = point_mass(32, 20);
        let q = rho.quantize();
        let heavy: Vec<usize> = (0..q.len()).filter(|&i| q.weight(i) > 0.0).collect();
        assert_eq!(heavy, vec![20]);
        assert_abs_diff_eq!(q.weight(20), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn quantization_tracks_a_sampled_cloud() {
        let g = FpGrid { x_min: -5.0, x_max: 5.0, n_cells: 300 };
        let rho = GridDensity::from_pdf(&g, |x| (-0.5 * (x / 0.8_f64).powi(2)).exp()).unwrap();
        let plan = NoisePlan::new(99, 0);
        let n = 100_000;
        let mut atoms = vec![0.0; n];
        for (i, slot) in atoms.iter_mut().enumerate() {
            let mut z = [0.0];
            plan.fill_normals(StreamKind::Study, 0, i as u32, 0, &mut z);
            *slot = 0.8 * z[0];
        }
        let cloud = EmpiricalMeasure::uniform_from_flat(1, atoms).unwrap();
        let err = wasserstein1(&rho.quantize(), &cloud).unwrap();
        let dx = rho.dx();
        assert!(err <= dx + 0.01, "quantization strays from the sampled law: {err}");
    }

    #[test]
    fn rejects_non_1d_problems() {
        let mut p = fp_problem(0.1, FieldSpec::zero());
        p.dim = 2;
        p.initial_followers = InitialLaw::Gaussian { mean: vec![0.0, 0.0], std: vec![1.0, 1.0] };
        p.initial_leaders = LeaderInit::Points { points: vec![] };
        let err = fp_solve(&p, None, &grid(32)).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn small_grids_are_rejected() {
        assert!(GridDensity::new(0.0, 1.0, vec![1.0; 8]).is_err());
        assert!(FpGrid { x_min: 0.0, x_max: 1.0, n_cells: 8 }.validate().is_err());
    }

    #[test]
    fn coupled_mode_moves_leaders_and_mass_together() {
        let mut p = fp_problem(
            0.05,
            FieldSpec {
                leader_kernel: vec![crate::fields::Kernel::Linear { matrix: vec![vec![-0.8]] }],
                ..FieldSpec::default()
            },
        );
        p.leaders = 1;
        p.initial_leaders = LeaderInit::Points { points: vec![vec![2.0]] };
        let controls = ControlSchedule::zero(1, 1, 1, p.kappa, p.gain);
        let (flow, leaders) = fp_solve_coupled(&p, &controls, &grid(200)).unwrap();
        assert_eq!(leaders.len(), flow.times.len());
        // Followers are pulled toward the leader sitting at 2.
        let mean0 = flow.at_index(0).quantize().mean()[0];
        let mean_t = flow.last().quantize().mean()[0];
        assert!(mean_t > mean0 + 0.3, "mass did not move toward the leader");
        assert_abs_diff_eq!(flow.last().mass(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn density_csv_shape() {
        let p = fp_problem(0.0, FieldSpec::zero());
        let flow = fp_solve(&p, None, &grid(16)).unwrap();
        let mut buf = Vec::new();
        write_density_csv(&flow, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,cell_center,density\n"));
        assert_eq!(text.lines().count(), 1 + flow.times.len() * 16);
    }
}
