//! Weighted empirical measures on R^d and exact Wasserstein-1 distances
//! between them. All populations, laws, and quantized densities in this
//! crate are carried around as [`EmpiricalMeasure`] values, and every
//! distance is the exact transport distance; nothing here approximates.

mod transport;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Atom count above which the d >= 2 exact transport solvers refuse to run.
/// Dimension-1 distances use the CDF coupling and have no cap.
pub const DEFAULT_TRANSPORT_CAP: usize = 512;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Neumaier-compensated sum: the mass check must not drown in naive
/// accumulation error when measures carry 10^5+ atoms.
fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Finitely supported probability measure: atoms with nonnegative weights
/// summing to one. Atom storage is flat row-major (`n * dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Builds a measure from flat atom storage, validating weights and
    /// finiteness.
    pub fn from_flat(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("measure dimension must be >= 1".into()));
        }
        if atoms.len() != weights.len() * dim {
            return Err(Error::Parameter(format!(
                "atom storage length {} does not match {} weights in dimension {}",
                atoms.len(),
                weights.len(),
                dim
            )));
        }
        if weights.is_empty() {
            return Err(Error::Parameter("measure needs at least one atom".into()));
        }
        if atoms.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parameter("atom coordinates must be finite".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Parameter(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total = compensated_sum(&weights);
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Parameter(format!(
                "weights sum to {total}, expected 1 within {WEIGHT_SUM_TOL:e}"
            )));
        }
        Ok(Self { dim, atoms, weights })
    }

    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let dim = atoms.first().map_or(0, |a| a.len());
        if atoms.iter().any(|a| a.len() != dim) {
            return Err(Error::Parameter("atoms must share one dimension".into()));
        }
        let flat: Vec<f64> = atoms.into_iter().flatten().collect();
        Self::from_flat(dim, flat, weights)
    }

    /// Uniform weights 1/n over the given flat atom storage.
    pub fn uniform_from_flat(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 || atoms.len() % dim != 0 {
            return Err(Error::Parameter(
                "flat atom storage must be a multiple of the dimension".into(),
            ));
        }
        let n = atoms.len() / dim;
        Self::from_flat(dim, atoms, vec![1.0 / n as f64; n])
    }

    pub fn uniform(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let n = atoms.len();
        Self::new(atoms, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        let dim = point.len();
        Self::from_flat(dim, point, vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of atoms (counting multiplicity).
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms_flat(&self) -> &[f64] {
        &self.atoms
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.atoms.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    /// Weighted mean of the atoms.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += w * xi;
            }
        }
        out
    }

    /// p-th absolute moment with respect to the origin: integral of |x|^p.
    /// Requires p >= 1.
    pub fn moment(&self, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::Parameter(format!("moment order {p} must be >= 1")));
        }
        Ok(self
            .iter()
            .map(|(x, w)| w * norm(x).powf(p))
            .sum())
    }

    /// Image measure under a point map: weights carried over unchanged.
    /// The map must return finite coordinates of one fixed dimension.
    pub fn push_forward<F>(&self, map: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut out_dim = None;
        let mut flat = Vec::with_capacity(self.atoms.len());
        for (x, _) in self.iter() {
            let y = map(x);
            match out_dim {
                None => out_dim = Some(y.len()),
                Some(d) if d == y.len() => {}
                Some(d) => {
                    return Err(Error::Parameter(format!(
                        "map output dimension changed from {d} to {}",
                        y.len()
                    )))
                }
            }
            if y.iter().any(|c| !c.is_finite()) {
                return Err(Error::Numeric(
                    "push-forward map produced a non-finite coordinate".into(),
                ));
            }
            flat.extend_from_slice(&y);
        }
        Self::from_flat(out_dim.unwrap_or(self.dim).max(1), flat, self.weights.clone())
    }

    /// Translate every atom by `shift`.
    pub fn translate(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::Parameter("shift dimension mismatch".into()));
        }
        self.push_forward(|x| x.iter().zip(shift).map(|(a, b)| a + b).collect())
    }

    /// Deterministic stratified reduction to `target` atoms with uniform
    /// weights: atoms are ordered (by position in d=1, lexicographically
    /// above), the cumulative mass is cut into `target` equal strata, and
    /// each stratum is represented by the atom carrying its mass midpoint.
    pub fn subsample_stratified(&self, target: usize) -> Result<Self> {
        if target == 0 {
            return Err(Error::Parameter("subsample target must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.atom(a)
                .partial_cmp(self.atom(b))
                .expect("atom coordinates are finite")
        });
        let mut cum = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for &i in &order {
            acc += self.weights[i];
            cum.push(acc);
        }
        let mut flat = Vec::with_capacity(target * self.dim);
        for k in 0..target {
            let q = (k as f64 + 0.5) / target as f64;
            let pos = cum.partition_point(|&c| c < q).min(order.len() - 1);
            flat.extend_from_slice(self.atom(order[pos]));
        }
        Self::uniform_from_flat(self.dim, flat)
    }

    /// CSV with header `x_1,...,x_d,weight`, one atom per row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.dim)
            .map(|k| format!("x_{k}"))
            .chain(std::iter::once("weight".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (x, wt) in self.iter() {
            let mut row: Vec<String> = x.iter().map(|c| format!("{c}")).collect();
            row.push(format!("{wt}"));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parameter("empty measure CSV".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 2 || cols[cols.len() - 1] != "weight" {
            return Err(Error::Parameter(
                "measure CSV header must be x_1,...,x_d,weight".into(),
            ));
        }
        let dim = cols.len() - 1;
        let mut flat = Vec::new();
        let mut weights = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Parameter(format!(
                    "measure CSV row has {} fields, expected {}",
                    fields.len(),
                    dim + 1
                )));
            }
            for f in &fields[..dim] {
                flat.push(parse_float(f)?);
            }
            weights.push(parse_float(fields[dim])?);
        }
        Self::from_flat(dim, flat, weights)
    }
}

fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parameter(format!("bad float {s:?}: {e}")))
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub(crate) fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Exact Wasserstein-1 distance with the default d >= 2 support cap.
pub fn wasserstein1(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    wasserstein1_capped(mu, nu, DEFAULT_TRANSPORT_CAP)
}

/// Exact Wasserstein-1 distance.
///
/// Dimension 1 uses the CDF coupling and accepts any support size. In
/// d >= 2, equal-size uniformly weighted supports are matched by optimal
/// assignment and everything else by an exact transportation solve; both
/// routes refuse supports larger than `cap` with
/// [`Error::SubsampleRequired`] rather than approximating.
pub fn wasserstein1_capped(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    cap: usize,
) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::Parameter(format!(
            "dimension mismatch: {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    if mu.dim() == 1 {
        let mut a: Vec<(f64, f64)> = mu.iter().map(|(x, w)| (x[0], w)).collect();
        let mut b: Vec<(f64, f64)> = nu.iter().map(|(x, w)| (x[0], w)).collect();
        a.sort_by(|p, q| p.0.partial_cmp(&q.0).expect("finite atoms"));
        b.sort_by(|p, q| p.0.partial_cmp(&q.0).expect("finite atoms"));
        return Ok(transport::w1_sorted_1d(&a, &b));
    }
    let (n, m) = (mu.len(), nu.len());
    let size = n.max(m);
    if size > cap {
        return Err(Error::SubsampleRequired { size, cap });
    }
    let uniform = |meas: &EmpiricalMeasure| {
        let w = 1.0 / meas.len() as f64;
        meas.weights().iter().all(|&wi| (wi - w).abs() <= WEIGHT_SUM_TOL)
    };
    let mut cost = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            cost.push(dist(mu.atom(i), nu.atom(j)));
        }
    }
    if n == m && uniform(mu) && uniform(nu) {
        Ok(transport::assignment_min_cost(n, &cost) / n as f64)
    } else {
        Ok(transport::transport_min_cost(
            mu.weights(),
            nu.weights(),
            &cost,
        ))
    }
}

/// Time-indexed family of measures on a shared grid. Lookups are
/// piecewise-constant from the left, which is how the solvers freeze a
/// flow along explicit time steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureFlow {
    times: Vec<f64>,
    measures: Vec<EmpiricalMeasure>,
}

impl MeasureFlow {
    pub fn new(times: Vec<f64>, measures: Vec<EmpiricalMeasure>) -> Result<Self> {
        if times.is_empty() || times.len() != measures.len() {
            return Err(Error::Parameter(
                "flow needs equally many times and measures, at least one".into(),
            ));
        }
        if times[0] != 0.0 {
            return Err(Error::Parameter("flow must start at t = 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Parameter("flow times must strictly increase".into()));
        }
        let dim = measures[0].dim();
        if measures.iter().any(|mu| mu.dim() != dim) {
            return Err(Error::Parameter("flow measures must share a dimension".into()));
        }
        Ok(Self { times, measures })
    }

    /// Flow frozen at a single measure over the given grid.
    pub fn constant(times: Vec<f64>, mu: EmpiricalMeasure) -> Result<Self> {
        let n = times.len();
        Self::new(times, vec![mu; n])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn measures(&self) -> &[EmpiricalMeasure] {
        &self.measures
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Measure in force at time `t`: the last grid point not after `t`.
    pub fn at_time(&self, t: f64) -> &EmpiricalMeasure {
        let idx = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).expect("finite times"))
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        &self.measures[idx]
    }

    pub fn at_index(&self, i: usize) -> &EmpiricalMeasure {
        &self.measures[i]
    }
}
