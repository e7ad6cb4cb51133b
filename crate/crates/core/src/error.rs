use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The CLI maps these onto process exit codes: configuration problems
/// exit 2, numerical failures (blow-up, CFL violations, non-convergence)
/// exit 3. Threshold failures in studies are not errors; they are reported
/// in the study summary and exit 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument combination detected before any numerics ran.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A transport computation was asked to run on more atoms than the
    /// configured exact-solver cap. Callers must subsample explicitly;
    /// nothing is approximated silently.
    #[error("support size {size} exceeds exact-transport cap {cap}; subsample required")]
    SubsampleRequired { size: usize, cap: usize },

    /// Requested feature lies outside the implemented closed families.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A numeric result left the representable range (NaN/inf) outside of
    /// time stepping.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// A particle or leader coordinate became non-finite during stepping.
    #[error("{kind} {index} blew up at t={t}: non-finite coordinate")]
    BlowUp {
        kind: &'static str,
        index: usize,
        t: f64,
    },

    /// Explicit step-size (CFL) violation in the density solver.
    #[error("time step {dt} exceeds stability limit {dt_max}")]
    StepSize { dt: f64, dt_max: f64 },

    /// Fixed-point iteration exhausted its iteration budget. The residual
    /// history is kept so callers can report or analyze the stall.
    #[error("fixed-point iteration failed to converge: residuals {residuals:?}")]
    Convergence { residuals: Vec<f64> },

    /// Malformed or inconsistent configuration file.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
