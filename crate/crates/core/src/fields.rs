//! Interaction velocity fields and the feedback-gain family.
//!
//! A field evaluates as
//!
//! ```text
//! field(t, x, mu, nu) = sum_k (K_k * mu)(x) + sum_k (H_k * nu)(x) + f_ext(t, x)
//! ```
//!
//! where the kernels come from a closed family (linear, bounded rational
//! radial, constant) chosen so that joint Lipschitz and growth constants
//! are analytic expressions of the descriptors rather than numerical
//! estimates. `mu` is always the follower law and `nu` the leader measure,
//! for the follower field and the leader field alike.

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use serde::{Deserialize, Serialize};

/// Interaction kernel K(x,y); the convolution (K*mu)(x) integrates over y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    /// K(x,y) = A(x-y). Against a probability measure this collapses to
    /// A(x - mean), so evaluation is O(1) once the mean is known.
    Linear { matrix: Vec<Vec<f64>> },
    /// K(x,y) = a (x-y) / (1 + |x-y|^2): bounded, globally Lipschitz with
    /// constant |a|, magnitude at most |a|/2.
    Rational { amplitude: f64 },
    /// K(x,y) = c for every pair.
    Constant { vector: Vec<f64> },
}

/// External term f_ext(t,x); the only place time may enter a field.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum External {
    #[default]
    Zero,
    Constant { vector: Vec<f64> },
    /// x -> B x.
    Linear { matrix: Vec<Vec<f64>> },
    /// Constant vector active on [from, until), zero outside.
    Pulse { vector: Vec<f64>, from: f64, until: f64 },
}

/// Velocity field descriptor. `follower_kernel` terms integrate against
/// the follower law, `leader_kernel` terms against the leader measure.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    #[serde(default)]
    pub follower_kernel: Vec<Kernel>,
    #[serde(default)]
    pub leader_kernel: Vec<Kernel>,
    #[serde(default)]
    pub external: External,
}

fn frobenius(matrix: &[Vec<f64>]) -> f64 {
    matrix
        .iter()
        .flat_map(|row| row.iter())
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
}

fn check_matrix(matrix: &[Vec<f64>], dim: usize, what: &str) -> Result<()> {
    if matrix.len() != dim || matrix.iter().any(|row| row.len() != dim) {
        return Err(Error::Parameter(format!(
            "{what} matrix must be {dim}x{dim}"
        )));
    }
    if matrix.iter().flatten().any(|a| !a.is_finite()) {
        return Err(Error::Parameter(format!("{what} matrix must be finite")));
    }
    Ok(())
}

fn check_vector(v: &[f64], dim: usize, what: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Parameter(format!(
            "{what} vector has length {}, expected {dim}",
            v.len()
        )));
    }
    if v.iter().any(|a| !a.is_finite()) {
        return Err(Error::Parameter(format!("{what} vector must be finite")));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl Kernel {
    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Kernel::Linear { matrix } => check_matrix(matrix, dim, "kernel"),
            Kernel::Rational { amplitude } => {
                if amplitude.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Parameter("kernel amplitude must be finite".into()))
                }
            }
            Kernel::Constant { vector } => check_vector(vector, dim, "kernel"),
        }
    }

    /// Lipschitz constant of x -> (K*mu)(x); also bounds the W1-Lipschitz
    /// dependence on the measure argument. Matrix norms use the Frobenius
    /// upper bound so the constant stays analytic.
    fn lipschitz(&self) -> f64 {
        match self {
            Kernel::Linear { matrix } => frobenius(matrix),
            Kernel::Rational { amplitude } => amplitude.abs(),
            Kernel::Constant { .. } => 0.0,
        }
    }

    /// Coefficient of (1 + |x| + m_1(mu) + m_1(nu)) in the growth bound.
    fn growth(&self) -> f64 {
        match self {
            Kernel::Linear { matrix } => frobenius(matrix),
            Kernel::Rational { amplitude } => amplitude.abs() / 2.0,
            Kernel::Constant { vector } => norm(vector),
        }
    }

    /// Adds (K*measure)(x) to `out`. `mean` is the measure's precomputed
    /// mean, used by the linear branch.
    fn accumulate(
        &self,
        x: &[f64],
        measure: &EmpiricalMeasure,
        mean: &[f64],
        out: &mut [f64],
    ) {
        match self {
            Kernel::Linear { matrix } => {
                for (i, row) in matrix.iter().enumerate() {
                    out[i] += row
                        .iter()
                        .zip(x.iter().zip(mean))
                        .map(|(a, (xj, mj))| a * (xj - mj))
                        .sum::<f64>();
                }
            }
            Kernel::Rational { amplitude } => {
                for (y, w) in measure.iter() {
                    let mut sq = 0.0;
                    for (xj, yj) in x.iter().zip(y) {
                        let d = xj - yj;
                        sq += d * d;
                    }
                    let scale = w * amplitude / (1.0 + sq);
                    for (o, (xj, yj)) in out.iter_mut().zip(x.iter().zip(y)) {
                        *o += scale * (xj - yj);
                    }
                }
            }
            Kernel::Constant { vector } => {
                for (o, c) in out.iter_mut().zip(vector) {
                    *o += c;
                }
            }
        }
    }
}

impl External {
    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            External::Zero => Ok(()),
            External::Constant { vector } => check_vector(vector, dim, "external"),
            External::Linear { matrix } => check_matrix(matrix, dim, "external"),
            External::Pulse { vector, from, until } => {
                check_vector(vector, dim, "external")?;
                if from.is_finite() && until.is_finite() && until >= from {
                    Ok(())
                } else {
                    Err(Error::Parameter("pulse window must be a finite interval".into()))
                }
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        match self {
            External::Linear { matrix } => frobenius(matrix),
            _ => 0.0,
        }
    }

    fn growth(&self) -> f64 {
        match self {
            External::Zero => 0.0,
            External::Constant { vector } => norm(vector),
            External::Linear { matrix } => frobenius(matrix),
            External::Pulse { vector, .. } => norm(vector),
        }
    }

    fn accumulate(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            External::Zero => {}
            External::Constant { vector } => {
                for (o, c) in out.iter_mut().zip(vector) {
                    *o += c;
                }
            }
            External::Linear { matrix } => {
                for (i, row) in matrix.iter().enumerate() {
                    out[i] += row.iter().zip(x).map(|(a, xj)| a * xj).sum::<f64>();
                }
            }
            External::Pulse { vector, from, until } => {
                if t >= *from && t < *until {
                    for (o, c) in out.iter_mut().zip(vector) {
                        *o += c;
                    }
                }
            }
        }
    }
}

impl FieldSpec {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for k in self.follower_kernel.iter().chain(&self.leader_kernel) {
            k.validate(dim)?;
        }
        self.external.validate(dim)
    }

    /// Joint Lipschitz constant L with
    /// |field(x1,mu1,nu1) - field(x2,mu2,nu2)|
    ///   <= L (|x1-x2| + W1(mu1,mu2) + W1(nu1,nu2)).
    /// Each kernel contributes its constant twice (point slot and measure
    /// slot); the bound is exact for the one-dimensional linear family and
    /// an analytic upper bound otherwise.
    pub fn lipschitz_constant(&self) -> f64 {
        let kernels: f64 = self
            .follower_kernel
            .iter()
            .chain(&self.leader_kernel)
            .map(|k| 2.0 * k.lipschitz())
            .sum();
        kernels + self.external.lipschitz()
    }

    /// Constant M with |field| <= M (1 + |x| + m_1(mu) + m_1(nu)).
    pub fn growth_constant(&self) -> f64 {
        self.follower_kernel
            .iter()
            .chain(&self.leader_kernel)
            .map(Kernel::growth)
            .sum::<f64>()
            + self.external.growth()
    }

    /// Freezes the field against a (mu, nu) pair for repeated evaluation;
    /// measure means are computed once here. `nu = None` encodes an empty
    /// leader population, whose interaction terms all vanish.
    pub fn prepare<'a>(
        &'a self,
        t: f64,
        mu: &'a EmpiricalMeasure,
        nu: Option<&'a EmpiricalMeasure>,
    ) -> PreparedField<'a> {
        PreparedField {
            spec: self,
            t,
            mu,
            nu,
            mu_mean: mu.mean(),
            nu_mean: nu.map(|n| n.mean()).unwrap_or_default(),
        }
    }
}

pub struct PreparedField<'a> {
    spec: &'a FieldSpec,
    t: f64,
    mu: &'a EmpiricalMeasure,
    nu: Option<&'a EmpiricalMeasure>,
    mu_mean: Vec<f64>,
    nu_mean: Vec<f64>,
}

impl PreparedField<'_> {
    /// Writes field(t, x, mu, nu) into `out` (accumulating from zero).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for k in &self.spec.follower_kernel {
            k.accumulate(x, self.mu, &self.mu_mean, out);
        }
        if let Some(nu) = self.nu {
            for k in &self.spec.leader_kernel {
                k.accumulate(x, nu, &self.nu_mean, out);
            }
        }
        self.spec.external.accumulate(self.t, x, out);
    }
}

/// One-shot field evaluation with dimension and finiteness checks.
pub fn eval_field(
    spec: &FieldSpec,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    nu: Option<&EmpiricalMeasure>,
) -> Result<Vec<f64>> {
    let dim = mu.dim();
    if x.len() != dim {
        return Err(Error::Parameter(format!(
            "point dimension {} does not match measure dimension {dim}",
            x.len()
        )));
    }
    if let Some(nu) = nu {
        if nu.dim() != dim {
            return Err(Error::Parameter("leader measure dimension mismatch".into()));
        }
    }
    spec.validate(dim)?;
    let mut out = vec![0.0; dim];
    spec.prepare(t, mu, nu).eval_into(x, &mut out);
    if out.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("field evaluation produced a non-finite component".into()));
    }
    Ok(out)
}

/// Feedback gain g(mu) = clip(theta0 + theta1 tanh(m_1(mu)), -bound, bound).
///
/// m_1 is 1-Lipschitz under W1 and tanh is 1-Lipschitz, so the exact
/// W1-Lipschitz constant of the family member is |theta1|; clipping at
/// +-bound preserves both the Lipschitz constant and the hard bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    pub theta0: f64,
    pub theta1: f64,
    /// Hard output bound (the family's Delta).
    pub bound: f64,
    /// Admissible Lipschitz budget (the family's Lambda); |theta1| may not
    /// exceed it.
    pub lipschitz_max: f64,
}

impl GainSpec {
    pub fn constant(value: f64, bound: f64) -> Result<Self> {
        Self::new(value, 0.0, bound, 0.0)
    }

    pub fn new(theta0: f64, theta1: f64, bound: f64, lipschitz_max: f64) -> Result<Self> {
        let g = Self { theta0, theta1, bound, lipschitz_max };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::Parameter("gain bound must be positive and finite".into()));
        }
        if !(self.lipschitz_max >= 0.0) || !self.lipschitz_max.is_finite() {
            return Err(Error::Parameter("gain lipschitz budget must be >= 0".into()));
        }
        if !self.theta0.is_finite() || !self.theta1.is_finite() {
            return Err(Error::Parameter("gain parameters must be finite".into()));
        }
        if self.theta1.abs() > self.lipschitz_max + 1e-12 {
            return Err(Error::Parameter(format!(
                "|theta1| = {} exceeds the lipschitz budget {}",
                self.theta1.abs(),
                self.lipschitz_max
            )));
        }
        Ok(())
    }

    /// Exact W1-Lipschitz constant of this member.
    pub fn lipschitz(&self) -> f64 {
        self.theta1.abs()
    }
}

pub fn eval_gain(gain: &GainSpec, mu: &EmpiricalMeasure) -> Result<f64> {
    let m1 = mu.moment(1.0)?;
    Ok((gain.theta0 + gain.theta1 * m1.tanh()).clamp(-gain.bound, gain.bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::wasserstein1;
    use approx::assert_abs_diff_eq;

    fn measure_1d(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform_from_flat(1, xs.to_vec()).unwrap()
    }

    fn attraction() -> FieldSpec {
        FieldSpec {
            follower_kernel: vec![Kernel::Linear { matrix: vec![vec![-1.0]] }],
            ..FieldSpec::default()
        }
    }

    #[test]
    fn attraction_to_dirac_at_origin() {
        let mu = measure_1d(&[0.0]);
        let v = eval_field(&attraction(), 0.0, &[2.0], &mu, None).unwrap();
        assert_abs_diff_eq!(v[0], -2.0, epsilon = 1e-15);
    }

    #[test]
    fn constant_kernel_ignores_the_measure() {
        let spec = FieldSpec {
            follower_kernel: vec![Kernel::Constant { vector: vec![3.5, -1.0] }],
            ..FieldSpec::default()
        };
        let mu = EmpiricalMeasure::uniform(vec![vec![9.0, 9.0], vec![-4.0, 2.0]]).unwrap();
        let v = eval_field(&spec, 0.0, &[0.0, 0.0], &mu, None).unwrap();
        assert_eq!(v, vec![3.5, -1.0]);
    }

    #[test]
    fn linear_kernel_sees_the_mean() {
        let mu = measure_1d(&[-1.0, 3.0]);
        let v = eval_field(&attraction(), 0.0, &[0.0], &mu, None).unwrap();
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn lipschitz_constants() {
        assert_eq!(FieldSpec::zero().lipschitz_constant(), 0.0);
        assert_abs_diff_eq!(attraction().lipschitz_constant(), 2.0, epsilon = 1e-15);
        let sum = FieldSpec {
            follower_kernel: vec![
                Kernel::Linear { matrix: vec![vec![-1.0]] },
                Kernel::Rational { amplitude: 0.5 },
            ],
            ..FieldSpec::default()
        };
        let parts = attraction().lipschitz_constant()
            + FieldSpec {
                follower_kernel: vec![Kernel::Rational { amplitude: 0.5 }],
                ..FieldSpec::default()
            }
            .lipschitz_constant();
        assert!(sum.lipschitz_constant() <= parts + 1e-15);
    }

    #[test]
    fn sampled_difference_quotients_respect_the_constant() {
        let spec = FieldSpec {
            follower_kernel: vec![
                Kernel::Linear { matrix: vec![vec![-0.8]] },
                Kernel::Rational { amplitude: 1.3 },
            ],
            leader_kernel: vec![Kernel::Linear { matrix: vec![vec![0.6]] }],
            external: External::Linear { matrix: vec![vec![-0.25]] },
        };
        let lip = spec.lipschitz_constant();
        let growth = spec.growth_constant();
        let mut state = 0x12345678u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..2000 {
            let mu1 = measure_1d(&[next(), next(), next()]);
            let mu2 = measure_1d(&[next(), next(), next()]);
            let nu1 = measure_1d(&[next(), next()]);
            let nu2 = measure_1d(&[next(), next()]);
            let x1 = [next()];
            let x2 = [next()];
            let f1 = eval_field(&spec, 0.0, &x1, &mu1, Some(&nu1)).unwrap();
            let f2 = eval_field(&spec, 0.0, &x2, &mu2, Some(&nu2)).unwrap();
            let lhs = (f1[0] - f2[0]).abs();
            let rhs = lip
                * ((x1[0] - x2[0]).abs()
                    + wasserstein1(&mu1, &mu2).unwrap()
                    + wasserstein1(&nu1, &nu2).unwrap());
            assert!(lhs <= rhs + 1e-9, "lhs {lhs} rhs {rhs}");
            let grow = growth
                * (1.0
                    + x1[0].abs()
                    + mu1.moment(1.0).unwrap()
                    + nu1.moment(1.0).unwrap());
            assert!(f1[0].abs() <= grow + 1e-9, "growth violated: {} > {grow}", f1[0].abs());
        }
    }

    #[test]
    fn gain_examples() {
        let constant = GainSpec::constant(1.0, 2.0).unwrap();
        let mu = measure_1d(&[5.0, -7.0]);
        assert_abs_diff_eq!(eval_gain(&constant, &mu).unwrap(), 1.0, epsilon = 1e-15);

        let g = GainSpec::new(0.0, 1.0, 2.0, 1.0).unwrap();
        let dirac = measure_1d(&[0.0]);
        assert_abs_diff_eq!(eval_gain(&g, &dirac).unwrap(), 0.0, epsilon = 1e-15);
        let two = measure_1d(&[0.0, 2.0]);
        assert_abs_diff_eq!(
            eval_gain(&g, &two).unwrap(),
            1.0f64.tanh(),
            epsilon = 1e-12
        );
        assert!((eval_gain(&g, &two).unwrap() - 0.7616).abs() < 1e-4);
    }

    #[test]
    fn gain_is_clipped_and_w1_lipschitz() {
        let g = GainSpec::new(1.5, 1.0, 1.75, 1.0).unwrap();
        let far = measure_1d(&[100.0]);
        assert_abs_diff_eq!(eval_gain(&g, &far).unwrap(), 1.75, epsilon = 1e-15);

        let mut state = 0xabcdefu64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 3.0 - 1.5
        };
        for _ in 0..500 {
            let a = measure_1d(&[next(), next(), next()]);
            let b = measure_1d(&[next(), next(), next()]);
            let dg = (eval_gain(&g, &a).unwrap() - eval_gain(&g, &b).unwrap()).abs();
            let w = wasserstein1(&a, &b).unwrap();
            assert!(dg <= g.lipschitz() * w + 1e-12);
        }
    }

    #[test]
    fn gain_budget_enforced() {
        assert!(GainSpec::new(0.0, 1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn pulse_external_is_time_windowed() {
        let spec = FieldSpec {
            external: External::Pulse { vector: vec![2.0], from: 1.0, until: 2.0 },
            ..FieldSpec::default()
        };
        let mu = measure_1d(&[0.0]);
        assert_eq!(eval_field(&spec, 0.5, &[0.0], &mu, None).unwrap()[0], 0.0);
        assert_eq!(eval_field(&spec, 1.5, &[0.0], &mu, None).unwrap()[0], 2.0);
        assert_eq!(eval_field(&spec, 2.0, &[0.0], &mu, None).unwrap()[0], 0.0);
    }
}
