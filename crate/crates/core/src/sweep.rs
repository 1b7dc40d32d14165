//! Full-versus-reduced comparisons and convergence in the dephasing rate.

use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export;
use crate::lindblad::{evolve_full, product_state};
use crate::ode::IntegratorConfig;
use crate::operator::ComplexOperator;
use crate::parallel::{self, Execution};
use crate::reduction::{compute_reduced, evolve_diagonal, KMode};
use crate::spec::{ModelSpec, Tolerances};

/// Device populations from the joint master equation and from the reduced
/// diagonal equation on the same grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub times: Vec<f64>,
    pub full: Vec<Vec<f64>>,
    pub reduced: Vec<Vec<f64>>,
    /// sup over times and levels of |p_full − p_reduced|.
    pub max_abs_error: f64,
    pub warnings: Vec<String>,
}

impl Comparison {
    /// Columns `t, full_p_0.., reduced_p_0.., abs_err`.
    pub fn write_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        let levels = self.full.first().map(Vec::len).unwrap_or(0);
        let mut header = vec!["t".to_string()];
        header.extend((0..levels).map(|mu| format!("full_p_{mu}")));
        header.extend((0..levels).map(|mu| format!("reduced_p_{mu}")));
        header.push("abs_err".into());
        let rows = (0..self.times.len()).map(|k| {
            let mut row = vec![export::number(self.times[k])];
            row.extend(self.full[k].iter().map(|p| export::number(*p)));
            row.extend(self.reduced[k].iter().map(|p| export::number(*p)));
            let err = self.full[k]
                .iter()
                .zip(&self.reduced[k])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            row.push(export::number(err));
            row
        });
        export::write_csv(w, &header, rows)
    }
}

/// Starts both solvers from |level⟩⟨level| ⊗ `state`.
pub fn compare(
    spec: &ModelSpec,
    state: &ComplexOperator,
    level: usize,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    mode: KMode,
) -> Result<Comparison> {
    let rho0 = product_state(spec, level, state)?;
    let full = evolve_full(spec, &rho0, t_grid, cfg)?;
    let red = compute_reduced(spec, mode)?;
    let diag = evolve_diagonal(&red, &rho0.diagonal_blocks(), t_grid, cfg)?;
    let full_p = full.populations(&Tolerances::default())?;
    let red_p = diag.populations();
    let max_abs_error = full_p
        .iter()
        .zip(&red_p)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    let mut warnings = red.warnings().to_vec();
    if full.renormalizations > 0 {
        warnings.push(format!(
            "full solver renormalized the trace {} times",
            full.renormalizations
        ));
    }
    Ok(Comparison {
        times: full.times,
        full: full_p,
        reduced: red_p,
        max_abs_error,
        warnings,
    })
}

/// Checks a list of dephasing rates for a sweep: at least two values, all
/// positive and finite, strictly ascending.
pub fn check_gammas(gammas: &[f64]) -> Result<()> {
    if gammas.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "gammas: a sweep needs at least 2 values, got {}",
            gammas.len()
        )));
    }
    if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "gammas: every rate must be positive and finite, got {g}"
        )));
    }
    if let Some(w) = gammas.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(format!(
            "gammas: values must be strictly ascending ({} followed by {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaSweep {
    pub points: Vec<SweepPoint>,
    /// Whether the error decreases strictly with γ.
    pub monotone: bool,
    pub warnings: Vec<String>,
}

impl GammaSweep {
    /// Columns `gamma, max_abs_error`.
    pub fn write_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        let header = ["gamma", "max_abs_error"].map(String::from);
        let rows = self
            .points
            .iter()
            .map(|p| vec![export::number(p.gamma), export::number(p.error)]);
        export::write_csv(w, &header, rows)
    }
}

/// Runs [`compare`] on `build(γ)` for each γ. Points are independent and
/// may run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn gamma_sweep<B>(
    gammas: &[f64],
    build: B,
    state: &ComplexOperator,
    level: usize,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    mode: KMode,
    exec: Execution,
) -> Result<GammaSweep>
where
    B: Fn(f64) -> Result<ModelSpec> + Sync + Send,
{
    check_gammas(gammas)?;
    let runs = parallel::try_map_indexed(exec, gammas.len(), |i| {
        let spec = build(gammas[i])?;
        compare(&spec, state, level, t_grid, cfg, mode)
    })?;
    let points: Vec<SweepPoint> = gammas
        .iter()
        .zip(&runs)
        .map(|(&gamma, r)| SweepPoint {
            gamma,
            error: r.max_abs_error,
        })
        .collect();
    let monotone = points.windows(2).all(|w| w[1].error < w[0].error);
    let warnings = gammas
        .iter()
        .zip(&runs)
        .flat_map(|(g, r)| r.warnings.iter().map(move |w| format!("gamma = {g}: {w}")))
        .collect();
    Ok(GammaSweep {
        points,
        monotone,
        warnings,
    })
}
