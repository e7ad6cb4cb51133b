//! Problem description: physical parameters, initial laws, fields, cost,
//! and seed. This is the struct the TOML config files deserialize into;
//! unknown keys are hard errors so experiment configs cannot drift
//! silently.

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::fields::{FieldSpec, GainSpec};
use crate::rng::{NoisePlan, StreamKind};
use serde::{Deserialize, Serialize};

/// Initial follower law. Restricted to (mixtures of) nondegenerate
/// diagonal Gaussians: such densities have finite entropy and all moments,
/// which the solvers rely on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    Gaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn check_gaussian(mean: &[f64], std: &[f64], dim: usize) -> Result<()> {
    if mean.len() != dim || std.len() != dim {
        return Err(Error::Config(format!(
            "gaussian mean/std must have dimension {dim}"
        )));
    }
    if mean.iter().chain(std).any(|a| !a.is_finite()) {
        return Err(Error::Config("gaussian parameters must be finite".into()));
    }
    if std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config(
            "gaussian std must be positive in every coordinate (degenerate laws have no density)"
                .into(),
        ));
    }
    Ok(())
}

impl InitialLaw {
    pub fn point(mean: Vec<f64>, std: f64) -> Self {
        let d = mean.len();
        InitialLaw::Gaussian { mean, std: vec![std; d] }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            InitialLaw::Gaussian { mean, std } => check_gaussian(mean, std, dim),
            InitialLaw::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::Config("mixture needs at least one component".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(
                        "mixture weights must be nonnegative and sum to 1".into(),
                    ));
                }
                for c in components {
                    check_gaussian(&c.mean, &c.std, dim)?;
                }
                Ok(())
            }
        }
    }

    /// Draws one point for the given noise address. A mixture consumes one
    /// uniform for the component choice plus `dim` normals; a plain
    /// Gaussian consumes the normals only.
    pub fn sample_into(
        &self,
        plan: &NoisePlan,
        kind: StreamKind,
        sample: u32,
        particle: u32,
        out: &mut [f64],
    ) {
        match self {
            InitialLaw::Gaussian { mean, std } => {
                plan.fill_normals(kind, sample, particle, 0, out);
                for ((o, m), s) in out.iter_mut().zip(mean).zip(std) {
                    *o = m + s * *o;
                }
            }
            InitialLaw::Mixture { components } => {
                let u = plan.uniforms(kind, sample, particle, 1, 1)[0];
                let mut acc = 0.0;
                let mut chosen = &components[components.len() - 1];
                for c in components {
                    acc += c.weight;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                plan.fill_normals(kind, sample, particle, 0, out);
                for ((o, m), s) in out.iter_mut().zip(&chosen.mean).zip(&chosen.std) {
                    *o = m + s * *o;
                }
            }
        }
    }

    /// Mean of the law (exact for this family).
    pub fn mean(&self, dim: usize) -> Vec<f64> {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.clone(),
            InitialLaw::Mixture { components } => {
                let mut out = vec![0.0; dim];
                for c in components {
                    for (o, m) in out.iter_mut().zip(&c.mean) {
                        *o += c.weight * m;
                    }
                }
                out
            }
        }
    }
}

/// Initial leader configuration: an explicit list or i.i.d. draws from a
/// reference law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeaderInit {
    Points { points: Vec<Vec<f64>> },
    Sample { law: InitialLaw },
}

impl LeaderInit {
    pub fn validate(&self, dim: usize, m: usize) -> Result<()> {
        match self {
            LeaderInit::Points { points } => {
                if points.len() != m {
                    return Err(Error::Config(format!(
                        "{} leader points listed, problem declares {m} leaders",
                        points.len()
                    )));
                }
                if points.iter().any(|p| p.len() != dim) {
                    return Err(Error::Config("leader points must have the problem dimension".into()));
                }
                if points.iter().flatten().any(|a| !a.is_finite()) {
                    return Err(Error::Config("leader points must be finite".into()));
                }
                Ok(())
            }
            LeaderInit::Sample { law } => law.validate(dim),
        }
    }

    /// Flat m x dim initial leader positions. Sampled leaders use the
    /// leader-init stream family, one particle id per leader, so the first
    /// m draws of a larger ensemble coincide with a smaller one.
    pub fn positions(&self, dim: usize, m: usize, plan: &NoisePlan, sample: u32) -> Vec<f64> {
        match self {
            LeaderInit::Points { points } => points.iter().flatten().copied().collect(),
            LeaderInit::Sample { law } => {
                let mut flat = vec![0.0; m * dim];
                for j in 0..m {
                    law.sample_into(
                        plan,
                        StreamKind::LeaderInit,
                        sample,
                        j as u32,
                        &mut flat[j * dim..(j + 1) * dim],
                    );
                }
                flat
            }
        }
    }
}

/// Full problem description: dynamics, populations, control bounds, cost,
/// and the seed all runs derive their streams from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    /// State dimension d.
    pub dim: usize,
    /// Horizon T.
    pub horizon: f64,
    /// Euler step; must divide the horizon.
    pub dt: f64,
    /// Diffusion strength: followers carry sqrt(2 sigma) dW.
    pub sigma: f64,
    /// Follower count M.
    pub followers: usize,
    /// Leader count m (0 allowed: uncontrolled population).
    pub leaders: usize,
    /// Sample-cloud size N for law approximation.
    pub law_samples: usize,
    /// Control box half-width: each control component lies in [-kappa, kappa].
    pub kappa: f64,
    pub seed: u64,
    /// Ablation switch: all followers share one Brownian stream instead of
    /// independent ones. Initial positions stay i.i.d.
    #[serde(default)]
    pub common_noise: bool,
    pub initial_followers: InitialLaw,
    pub initial_leaders: LeaderInit,
    /// Follower drift.
    pub vfield: FieldSpec,
    /// Leader drift (the controlled term u_j g(mu) is added on top).
    pub wfield: FieldSpec,
    pub gain: GainSpec,
    pub cost: CostSpec,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dimension must be >= 1".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config("dt must be positive".into()));
        }
        let steps = self.horizon / self.dt;
        let n = steps.round();
        if n < 1.0 || (n * self.dt - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(Error::Config(format!(
                "dt {} does not divide horizon {}",
                self.dt, self.horizon
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        if self.followers < 1 {
            return Err(Error::Config("at least one follower required".into()));
        }
        if self.law_samples < 2 {
            return Err(Error::Config("law cloud needs at least 2 samples".into()));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::Config("kappa must be positive".into()));
        }
        self.initial_followers
            .validate(self.dim)
            .map_err(|e| Error::Config(format!("initial_followers: {e}")))?;
        self.initial_leaders
            .validate(self.dim, self.leaders)
            .map_err(|e| Error::Config(format!("initial_leaders: {e}")))?;
        self.vfield
            .validate(self.dim)
            .map_err(|e| Error::Config(format!("vfield: {e}")))?;
        self.wfield
            .validate(self.dim)
            .map_err(|e| Error::Config(format!("wfield: {e}")))?;
        self.gain
            .validate()
            .map_err(|e| Error::Config(format!("gain: {e}")))?;
        self.cost
            .validate(self.dim)
            .map_err(|e| Error::Config(format!("cost: {e}")))?;
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn time_at(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn noise_plan(&self) -> NoisePlan {
        NoisePlan::new(self.seed, 0)
    }
}

/// Strict TOML deserialization: any input key absent from the parsed
/// value's own serialization is a hard error. serde's `deny_unknown_fields`
/// does not reach into internally tagged enums, so struct attributes alone
/// cannot enforce this.
pub fn strict_from_toml<T>(text: &str, what: &str) -> Result<T>
where
    T: serde::de::DeserializeOwned + Serialize,
{
    let value: T =
        toml::from_str(text).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    let raw: toml::Value =
        toml::from_str(text).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    let echo = toml::Value::try_from(&value)
        .map_err(|e| Error::Config(format!("{what}: {e}")))?;
    let mut unknown = Vec::new();
    collect_unknown_keys(&raw, &echo, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "{what}: unknown keys: {}",
            unknown.join(", ")
        )));
    }
    Ok(value)
}

fn collect_unknown_keys(
    input: &toml::Value,
    echo: &toml::Value,
    path: &str,
    out: &mut Vec<String>,
) {
    match (input, echo) {
        (toml::Value::Table(ti), toml::Value::Table(te)) => {
            for (key, vi) in ti {
                let sub = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match te.get(key) {
                    Some(ve) => collect_unknown_keys(vi, ve, &sub, out),
                    None => out.push(sub),
                }
            }
        }
        (toml::Value::Array(ai), toml::Value::Array(ae)) => {
            for (idx, (vi, ve)) in ai.iter().zip(ae).enumerate() {
                collect_unknown_keys(vi, ve, &format!("{path}[{idx}]"), out);
            }
        }
        _ => {}
    }
}

/// Parses a TOML problem configuration. Unknown or missing keys are
/// configuration errors, as is any semantic validation failure.
pub fn problem_from_toml(text: &str) -> Result<ProblemSpec> {
    let spec: ProblemSpec = strict_from_toml(text, "problem table")?;
    spec.validate()?;
    Ok(spec)
}
