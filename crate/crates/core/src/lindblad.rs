//! Reference integration of the joint device-system master equation.
//!
//! The state is evolved in the interaction picture, block by block:
//!
//! ```text
//! dρ_{μν}/dt = −i Σ_λ ( e^{iΩ_{μλ}t} V^I_{μλ} ρ_{λν} − ρ_{μλ} V^I_{λν} e^{iΩ_{λν}t} ) − γ_{μν} ρ_{μν}
//! V^I_{μν}(t) = e^{iH_Q t} V_{μν} e^{−iH_Q t}
//! ```
//!
//! Internally every block lives in the eigenbasis of H_Q, where the
//! interaction-picture couplings only pick up scalar phases. States handed
//! back to the caller are in the original basis.

use std::io;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::density::BlockDensityMatrix;
use crate::error::{Error, Result};
use crate::export;
use crate::frame::Eigenbasis;
use crate::ode::{self, IntegratorConfig, Method, OdeSystem};
use crate::operator::{c, ComplexOperator, C64};
use crate::spec::{ModelSpec, Tolerances};

/// Sampled solution of [`evolve_full`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timeline {
    pub times: Vec<f64>,
    pub states: Vec<BlockDensityMatrix>,
    /// How often the trace was renormalised because drift exceeded the tolerance.
    pub renormalizations: usize,
}

impl Timeline {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn populations(&self, tol: &Tolerances) -> Result<Vec<Vec<f64>>> {
        self.states.iter().map(|s| device_populations(s, tol)).collect()
    }

    /// Columns `t, p_0..p_M, maxcoh`.
    pub fn write_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        let levels = self.states.first().map(BlockDensityMatrix::levels).unwrap_or(0);
        let mut header = vec!["t".to_string()];
        header.extend((0..levels).map(|mu| format!("p_{mu}")));
        header.push("maxcoh".into());
        let rows = self.times.iter().zip(&self.states).map(|(t, s)| {
            let mut row = vec![export::number(*t)];
            row.extend((0..levels).map(|mu| export::number(s.block(mu, mu).trace().re)));
            row.push(export::number(max_coherence(s)));
            row
        });
        export::write_csv(w, &header, rows)
    }
}

/// Options beyond the integrator configuration.
#[derive(Debug, Clone, Copy)]
pub struct FullOptions {
    pub tolerances: Tolerances,
    /// Check the minimum eigenvalue of the joint state at every output time.
    pub check_positivity: bool,
}

impl Default for FullOptions {
    fn default() -> Self {
        Self {
            tolerances: Tolerances::default(),
            check_positivity: true,
        }
    }
}

pub fn evolve_full(
    spec: &ModelSpec,
    rho0: &BlockDensityMatrix,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Timeline> {
    evolve_full_with(spec, rho0, t_grid, cfg, &FullOptions::default())
}

pub fn evolve_full_with(
    spec: &ModelSpec,
    rho0: &BlockDensityMatrix,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    opts: &FullOptions,
) -> Result<Timeline> {
    let tol = opts.tolerances;
    spec.ensure_valid(&tol)?;
    if rho0.levels() != spec.num_levels() || rho0.dim() != spec.dim() {
        return Err(Error::Dimension {
            context: format!(
                "initial state has {} levels of dimension {}",
                rho0.levels(),
                rho0.dim()
            ),
            expected: spec.num_levels() * spec.dim(),
            found: rho0.levels() * rho0.dim(),
        });
    }
    let initial = rho0.check(&tol);
    if !initial.is_empty() {
        return Err(Error::InvalidInput(format!(
            "initial state is not a density matrix: {}",
            initial.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
        )));
    }
    ode::check_grid(t_grid)?;
    if t_grid[0] != 0.0 {
        return Err(Error::InvalidInput("time grid must start at t = 0".into()));
    }

    let gamma_max = spec.device.max_rate();
    let cfg = stiffness_bounded(cfg, gamma_max)?;
    let basis = Eigenbasis::of(&spec.system.hamiltonian);
    let mut sys = JointSystem::new(spec, &basis);
    let y0 = rho0.to_basis(&basis.vectors).to_flat();

    let (levels, dim) = (spec.num_levels(), spec.dim());
    let mut times = Vec::with_capacity(t_grid.len());
    let mut states = Vec::with_capacity(t_grid.len());
    let mut renormalizations = 0;
    ode::integrate(&mut sys, &y0, t_grid, &cfg, gamma_max, |_, t, y| {
        let tr: f64 = (0..levels)
            .map(|mu| {
                let off = (mu * levels + mu) * dim * dim;
                crate::operator::trace_re(dim, &y[off..off + dim * dim])
            })
            .sum();
        if (tr - 1.0).abs() > tol.trace {
            warn!("trace drift {:e} at t = {t}; renormalising", tr - 1.0);
            renormalizations += 1;
            let s = 1.0 / tr;
            y.iter_mut().for_each(|z| *z *= s);
        }
        let state = BlockDensityMatrix::from_flat(levels, dim, y).from_basis(&basis.vectors);
        let herm = state.hermiticity_defect();
        if herm > tol.hermitian {
            return Err(Error::Invariant {
                what: "hermiticity of the joint state".into(),
                t,
                value: herm,
                tol: tol.hermitian,
            });
        }
        if opts.check_positivity {
            let min = state.min_eigenvalue();
            if min < -tol.psd {
                return Err(Error::Invariant {
                    what: "positivity of the joint state".into(),
                    t,
                    value: min,
                    tol: tol.psd,
                });
            }
        }
        times.push(t);
        states.push(state);
        Ok(())
    })?;
    Ok(Timeline {
        times,
        states,
        renormalizations,
    })
}

/// Applies the stiffness rule: adaptive steps are capped at 0.1/γ_max, and a
/// fixed RK4 step must stay inside the stability region.
pub(crate) fn stiffness_bounded(cfg: &IntegratorConfig, gamma_max: f64) -> Result<IntegratorConfig> {
    let mut cfg = *cfg;
    cfg.check()?;
    if gamma_max > 0.0 {
        match cfg.method {
            Method::Rk45 => cfg.max_step = cfg.max_step.min(0.1 / gamma_max),
            Method::Rk4 => {
                if gamma_max * cfg.max_step > 2.5 {
                    return Err(Error::UnstableStep {
                        step: cfg.max_step,
                        gamma_max,
                    });
                }
            }
        }
    }
    Ok(cfg)
}

/// p_μ = tr ρ_{μμ}. Fails if any population carries an imaginary part above
/// the trace tolerance.
pub fn device_populations(rho: &BlockDensityMatrix, tol: &Tolerances) -> Result<Vec<f64>> {
    (0..rho.levels())
        .map(|mu| {
            let p = rho.block(mu, mu).trace();
            if p.im.abs() > tol.trace {
                Err(Error::Invariant {
                    what: format!("imaginary part of population {mu}"),
                    t: f64::NAN,
                    value: p.im,
                    tol: tol.trace,
                })
            } else {
                Ok(p.re)
            }
        })
        .collect()
}

/// Frobenius norms ‖ρ_{μν}‖ of the coherence blocks; zero on the diagonal.
pub fn coherence_norms(rho: &BlockDensityMatrix) -> Vec<Vec<f64>> {
    let l = rho.levels();
    (0..l)
        .map(|mu| {
            (0..l)
                .map(|nu| if mu == nu { 0.0 } else { rho.block(mu, nu).frobenius_norm() })
                .collect()
        })
        .collect()
}

pub fn max_coherence(rho: &BlockDensityMatrix) -> f64 {
    coherence_norms(rho).into_iter().flatten().fold(0.0, f64::max)
}

struct Pair {
    mu: usize,
    lambda: usize,
    /// V_{μλ} in the H_Q eigenbasis, row-major.
    v: Vec<C64>,
    /// e^{iΩ_{μλ}t} V^I_{μλ}(t), refreshed per evaluation.
    w: Vec<C64>,
}

struct JointSystem {
    levels: usize,
    dim: usize,
    pair_rates: Vec<f64>,
    level_energy: Vec<f64>,
    energies: Vec<f64>,
    pairs: Vec<Pair>,
    phase: Vec<C64>,
    static_phases: bool,
}

impl JointSystem {
    fn new(spec: &ModelSpec, basis: &Eigenbasis) -> Self {
        let levels = spec.num_levels();
        let dim = spec.dim();
        let mut pairs = Vec::new();
        for mu in 0..levels {
            for lambda in 0..levels {
                if mu == lambda {
                    continue;
                }
                if let Some(v) = spec.coupling_block(mu, lambda) {
                    if v.is_zero(0.0) {
                        continue;
                    }
                    let v = basis.to_eigen(&v).to_row_major();
                    pairs.push(Pair {
                        mu,
                        lambda,
                        w: v.clone(),
                        v,
                    });
                }
            }
        }
        let pair_rates = (0..levels * levels)
            .map(|k| spec.device.pair_rate(k / levels, k % levels))
            .collect();
        let static_phases = basis.is_trivial() && spec.device.energies.iter().all(|e| *e == spec.device.energies[0]);
        Self {
            levels,
            dim,
            pair_rates,
            level_energy: spec.device.energies.clone(),
            energies: basis.energies.clone(),
            pairs,
            phase: vec![c(1.0, 0.0); levels * dim],
            static_phases,
        }
    }

    fn refresh(&mut self, t: f64) {
        if self.static_phases {
            return;
        }
        let d = self.dim;
        for mu in 0..self.levels {
            for a in 0..d {
                self.phase[mu * d + a] = c(0.0, (self.level_energy[mu] + self.energies[a]) * t).exp();
            }
        }
        for p in &mut self.pairs {
            for a in 0..d {
                let pa = self.phase[p.mu * d + a];
                for b in 0..d {
                    p.w[a * d + b] = p.v[a * d + b] * pa * self.phase[p.lambda * d + b].conj();
                }
            }
        }
    }
}

impl OdeSystem for JointSystem {
    fn len(&self) -> usize {
        self.levels * self.levels * self.dim * self.dim
    }

    fn rhs(&mut self, t: f64, y: &[C64], dy: &mut [C64]) {
        self.refresh(t);
        let (l, d) = (self.levels, self.dim);
        let d2 = d * d;
        let blk = |mu: usize, nu: usize| (mu * l + nu) * d2;
        for (k, rate) in self.pair_rates.iter().enumerate() {
            let off = k * d2;
            for i in 0..d2 {
                dy[off + i] = y[off + i] * (-rate);
            }
        }
        let minus_i = c(0.0, -1.0);
        let plus_i = c(0.0, 1.0);
        for p in &self.pairs {
            // −i W_{μλ} ρ_{λν} into block (μ,ν)
            for nu in 0..l {
                let src = blk(p.lambda, nu);
                let dst = blk(p.mu, nu);
                let (rho, out) = (&y[src..src + d2], &mut dy[dst..dst + d2]);
                crate::operator::gemm_acc(d, minus_i, &p.w, rho, out);
            }
            // +i ρ_{xμ} W_{μλ} into block (x,λ)
            for x in 0..l {
                let src = blk(x, p.mu);
                let dst = blk(x, p.lambda);
                let (rho, out) = (&y[src..src + d2], &mut dy[dst..dst + d2]);
                crate::operator::gemm_acc(d, plus_i, rho, &p.w, out);
            }
        }
    }
}

/// Builds ρ0 = |level⟩⟨level| ⊗ state for a spec.
pub fn product_state(spec: &ModelSpec, level: usize, state: &ComplexOperator) -> Result<BlockDensityMatrix> {
    if state.dim() != spec.dim() {
        return Err(Error::Dimension {
            context: "system state".into(),
            expected: spec.dim(),
            found: state.dim(),
        });
    }
    BlockDensityMatrix::product(spec.num_levels(), level, state)
}
