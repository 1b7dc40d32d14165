use thiserror::Error;

use crate::spec::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {found})")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid model specification: {}", format_violations(.0))]
    InvalidSpec(Vec<Violation>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Adiabatic elimination needs a strictly positive pair dephasing rate.
    #[error("pair dephasing rate gamma({mu},{nu}) is zero; the ultradecoherence assumption does not hold for this pair")]
    NoDephasing { mu: usize, nu: usize },

    #[error("step size underflow at t = {t:e} (h = {step:e}); the problem is stiff: keep gamma_max * max_step <= 0.1 (gamma_max = {gamma_max:e})")]
    StepUnderflow { t: f64, step: f64, gamma_max: f64 },

    #[error("fixed RK4 step {step:e} is unstable for gamma_max = {gamma_max:e}; keep gamma_max * max_step <= 2.5")]
    UnstableStep { step: f64, gamma_max: f64 },

    #[error("invariant violated at t = {t:e}: {what} (value {value:e}, tolerance {tol:e})")]
    Invariant {
        what: String,
        t: f64,
        value: f64,
        tol: f64,
    },

    #[error("positivity lost at t = {t:e}: minimum eigenvalue {min_eig:e} (with the exact K mode, try the resonant one)")]
    PositivityLost { t: f64, min_eig: f64 },

    #[error("trace increased during trace-decreasing evolution at t = {t:e} (from {before:e} to {after:e}); check the sign convention of the back-reaction operator")]
    TraceIncrease { t: f64, before: f64, after: f64 },

    #[error("forbidden transition {from} -> {to}: transition weight {weight:e} is below the degeneracy tolerance")]
    ForbiddenTransition { from: usize, to: usize, weight: f64 },

    #[error("transition rate W({to},{from}) = {rate:e} is negative")]
    NegativeRate { from: usize, to: usize, rate: f64 },
}

impl Error {
    /// Numerical failures (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::StepUnderflow { .. }
                | Error::UnstableStep { .. }
                | Error::Invariant { .. }
                | Error::PositivityLost { .. }
                | Error::TraceIncrease { .. }
                | Error::NegativeRate { .. }
        )
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
