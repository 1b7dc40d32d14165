//! Adiabatic elimination of the device coherences.
//!
//! The fast-damped coherence blocks are slaved to the diagonal ones through
//! the operators
//!
//! ```text
//! K_{μν} = ∫_0^∞ dτ e^{−(γ_{μν} + iΩ_{μν})τ} V^I_{μν}(−τ)
//! F_{μλ} = K_{λμ} V_{μλ} + V_{λμ} K_{μλ}          (gain, λ → μ)
//! Γ_μ    = Σ_{λ≠μ} V_{μλ} K_{λμ}                  (back-reaction / loss)
//! ```
//!
//! In the eigenbasis of H_Q the integral for K is evaluated in closed form:
//! `(K_{μν})_{ab} = (V_{μν})_{ab} / (γ_{μν} + i(Ω_{μν} + E_a − E_b))`.
//! The resonant mode replaces it by `V_{μν}/γ_{μν}`.
//!
//! All stored operators are the time-independent (Schrödinger-frame) ones;
//! the interaction-picture versions are their conjugations by e^{iH_Q t}.

use std::collections::BTreeMap;
use std::io;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export;
use crate::frame::Eigenbasis;
use crate::ode::{self, IntegratorConfig, OdeSystem};
use crate::operator::{c, gemm_acc, gemm_adj_acc, ComplexOperator, C64, I};
use crate::spec::{ModelSpec, Tolerances};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMode {
    Exact,
    #[default]
    Resonant,
}

impl std::str::FromStr for KMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(KMode::Exact),
            "resonant" => Ok(KMode::Resonant),
            other => Err(format!("unknown K mode '{other}' (expected exact or resonant)")),
        }
    }
}

/// The operators defining the classical jump process of a model.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    mode: KMode,
    spec: ModelSpec,
    basis: Eigenbasis,
    k: BTreeMap<(usize, usize), ComplexOperator>,
    f: BTreeMap<(usize, usize), ComplexOperator>,
    gamma: Vec<ComplexOperator>,
    warnings: Vec<String>,
}

impl ReducedModel {
    pub fn mode(&self) -> KMode {
        self.mode
    }

    /// The specification this model was derived from.
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn basis(&self) -> &Eigenbasis {
        &self.basis
    }

    pub fn levels(&self) -> usize {
        self.spec.num_levels()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn k(&self, mu: usize, nu: usize) -> Option<&ComplexOperator> {
        self.k.get(&(mu, nu))
    }

    /// F_{μλ}: gain operator for the transition λ → μ.
    pub fn f(&self, mu: usize, lambda: usize) -> Option<&ComplexOperator> {
        self.f.get(&(mu, lambda))
    }

    /// Γ_μ: back-reaction operator of level μ.
    pub fn gamma(&self, mu: usize) -> &ComplexOperator {
        &self.gamma[mu]
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Levels reachable from `lambda` in one transition.
    pub fn targets(&self, lambda: usize) -> impl Iterator<Item = usize> + '_ {
        self.f.keys().filter(move |(_, l)| *l == lambda).map(|(mu, _)| *mu)
    }

    pub fn dump(&self) -> ReducedDump {
        let pack = |m: &BTreeMap<(usize, usize), ComplexOperator>| {
            m.iter()
                .map(|(&(to, from), op)| DumpEntry {
                    to,
                    from,
                    operator: op.clone(),
                })
                .collect()
        };
        ReducedDump {
            mode: self.mode,
            k: pack(&self.k),
            f: pack(&self.f),
            gamma: self.gamma.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Long format: `kind,to,from,row,col,re,im` (for Γ, `to = from = μ`).
    pub fn write_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        let header: Vec<String> = ["kind", "to", "from", "row", "col", "re", "im"].map(String::from).into();
        let mut rows = Vec::new();
        let mut push = |kind: &str, to: usize, from: usize, op: &ComplexOperator| {
            for (i, r) in op.rows().into_iter().enumerate() {
                for (j, z) in r.into_iter().enumerate() {
                    rows.push(vec![
                        kind.to_string(),
                        to.to_string(),
                        from.to_string(),
                        i.to_string(),
                        j.to_string(),
                        export::number(z.re),
                        export::number(z.im),
                    ]);
                }
            }
        };
        for (&(to, from), op) in &self.k {
            push("K", to, from, op);
        }
        for (&(to, from), op) in &self.f {
            push("F", to, from, op);
        }
        for (mu, op) in self.gamma.iter().enumerate() {
            push("Gamma", mu, mu, op);
        }
        export::write_csv(w, &header, rows)
    }
}

/// Serializable snapshot of a [`ReducedModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedDump {
    pub mode: KMode,
    pub k: Vec<DumpEntry>,
    pub f: Vec<DumpEntry>,
    pub gamma: Vec<ComplexOperator>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpEntry {
    pub to: usize,
    pub from: usize,
    pub operator: ComplexOperator,
}

/// K_{μν} for one ordered pair of distinct levels.
pub fn compute_k(spec: &ModelSpec, mu: usize, nu: usize, mode: KMode) -> Result<ComplexOperator> {
    let levels = spec.num_levels();
    if mu >= levels || nu >= levels {
        return Err(Error::InvalidInput(format!("level pair ({mu},{nu}) out of range 0..{levels}")));
    }
    let basis = Eigenbasis::of(&spec.system.hamiltonian);
    k_in_basis(spec, &basis, mu, nu, mode)
}

fn k_in_basis(spec: &ModelSpec, basis: &Eigenbasis, mu: usize, nu: usize, mode: KMode) -> Result<ComplexOperator> {
    if mu == nu {
        return Err(Error::InvalidInput(format!("K is only defined between distinct levels, got ({mu},{mu})")));
    }
    let rate = spec.device.pair_rate(mu, nu);
    if rate <= 0.0 {
        return Err(Error::NoDephasing { mu, nu });
    }
    let v = spec
        .coupling_block(mu, nu)
        .unwrap_or_else(|| ComplexOperator::zeros(spec.dim()));
    Ok(match mode {
        KMode::Resonant => v.scale_re(1.0 / rate),
        KMode::Exact => {
            let gap = spec.device.energy_gap(mu, nu);
            let e = &basis.energies;
            let vt = basis.to_eigen(&v);
            let kt = ComplexOperator::from_fn(v.dim(), |a, b| vt.get(a, b) / c(rate, gap + e[a] - e[b]));
            basis.from_eigen(&kt)
        }
    })
}

/// Builds K for every coupled pair, then F and Γ.
pub fn compute_reduced(spec: &ModelSpec, mode: KMode) -> Result<ReducedModel> {
    spec.ensure_valid(&Tolerances::default())?;
    let basis = Eigenbasis::of(&spec.system.hamiltonian);
    let levels = spec.num_levels();
    let dim = spec.dim();

    let coupled = |mu: usize, nu: usize| spec.coupling_block(mu, nu).filter(|v| !v.is_zero(0.0));
    let mut k = BTreeMap::new();
    for mu in 0..levels {
        for nu in 0..levels {
            if mu != nu && coupled(mu, nu).is_some() {
                k.insert((mu, nu), k_in_basis(spec, &basis, mu, nu, mode)?);
            }
        }
    }

    let mut f = BTreeMap::new();
    let mut gamma = vec![ComplexOperator::zeros(dim); levels];
    for (&(mu, lambda), k_mu_lambda) in &k {
        let v_mu_lambda = coupled(mu, lambda).expect("K only exists for coupled pairs");
        let v_lambda_mu = v_mu_lambda.adjoint();
        let k_lambda_mu = &k[&(lambda, mu)];
        // F_{μλ} = K_{λμ} V_{μλ} + V_{λμ} K_{μλ}
        let gain = &(k_lambda_mu * &v_mu_lambda) + &(&v_lambda_mu * k_mu_lambda);
        f.insert((mu, lambda), gain);
        // Γ_μ += V_{μλ} K_{λμ}
        gamma[mu] += &(&v_mu_lambda * k_lambda_mu);
    }

    let mut warnings = Vec::new();
    let slowest_decoherence = k
        .keys()
        .map(|&(mu, nu)| spec.device.pair_rate(mu, nu))
        .fold(f64::INFINITY, f64::min);
    let fastest_rate = f.values().map(|op| op.max_eigenvalue().abs()).fold(0.0, f64::max);
    if slowest_decoherence.is_finite() && fastest_rate / slowest_decoherence > 0.1 {
        let msg = format!(
            "transition rate scale {fastest_rate:e} is not small against the slowest decoherence rate {slowest_decoherence:e}; the adiabatic reduction may be inaccurate"
        );
        warn!("{msg}");
        warnings.push(msg);
    }

    Ok(ReducedModel {
        mode,
        spec: spec.clone(),
        basis,
        k,
        f,
        gamma,
        warnings,
    })
}

/// W_{μλ} = tr(F_{μλ} ρ) for every μ; the entry at λ itself is 0.
/// Negative rates below −1e−12 are reported as errors.
pub fn transition_rates(red: &ReducedModel, rho: &ComplexOperator, lambda: usize) -> Result<Vec<f64>> {
    let rates = raw_transition_rates(red, rho, lambda)?;
    if let Some((mu, &r)) = rates.iter().enumerate().find(|(_, r)| **r < -1e-12) {
        return Err(Error::NegativeRate {
            from: lambda,
            to: mu,
            rate: r,
        });
    }
    Ok(rates)
}

/// As [`transition_rates`] but without the sign check.
pub fn raw_transition_rates(red: &ReducedModel, rho: &ComplexOperator, lambda: usize) -> Result<Vec<f64>> {
    check_state(rho, red.dim(), &Tolerances::default())?;
    if lambda >= red.levels() {
        return Err(Error::InvalidInput(format!("level {lambda} out of range")));
    }
    Ok((0..red.levels())
        .map(|mu| match red.f(mu, lambda) {
            Some(f) if mu != lambda => f.trace_product(rho).re,
            _ => 0.0,
        })
        .collect())
}

pub(crate) fn check_state(rho: &ComplexOperator, dim: usize, tol: &Tolerances) -> Result<()> {
    if rho.dim() != dim {
        return Err(Error::Dimension {
            context: "system state".into(),
            expected: dim,
            found: rho.dim(),
        });
    }
    let tr = rho.trace();
    if (tr.re - 1.0).abs() > tol.trace || tr.im.abs() > tol.trace {
        return Err(Error::InvalidInput(format!("state must have unit trace, got {tr}")));
    }
    if !rho.is_psd(tol.psd) {
        return Err(Error::InvalidInput("state is not hermitian positive semidefinite".into()));
    }
    Ok(())
}

/// Diagonal blocks ρ_{μμ}(t) in the interaction picture.
#[derive(Debug, Clone)]
pub struct DiagonalTimeline {
    pub times: Vec<f64>,
    pub blocks: Vec<Vec<ComplexOperator>>,
}

impl DiagonalTimeline {
    pub fn populations(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|bs| bs.iter().map(|b| b.trace().re).collect())
            .collect()
    }
}

/// Integrates the reduced equation for the diagonal blocks,
///
/// ```text
/// dρ_{μμ}/dt = −Σ_{λ≠μ}(V_{μλ}K_{λμ}ρ_{μμ} + ρ_{μμ}K_{μλ}V_{λμ}) + Σ_{λ≠μ}(V_{μλ}ρ_{λλ}K_{λμ} + K_{μλ}ρ_{λλ}V_{λμ})
/// ```
///
/// with interaction-picture operators. The integration runs in the
/// Schrödinger frame, where the generator is time independent, and the
/// blocks are rotated back at the output times.
pub fn evolve_diagonal(
    red: &ReducedModel,
    diag0: &[ComplexOperator],
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<DiagonalTimeline> {
    evolve_diagonal_with(red, diag0, t_grid, cfg, &Tolerances::default())
}

pub fn evolve_diagonal_with(
    red: &ReducedModel,
    diag0: &[ComplexOperator],
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    tol: &Tolerances,
) -> Result<DiagonalTimeline> {
    let (levels, dim) = (red.levels(), red.dim());
    if diag0.len() != levels {
        return Err(Error::Dimension {
            context: "number of diagonal blocks".into(),
            expected: levels,
            found: diag0.len(),
        });
    }
    let mut total = C64::default();
    for b in diag0 {
        if b.dim() != dim {
            return Err(Error::Dimension {
                context: "diagonal block".into(),
                expected: dim,
                found: b.dim(),
            });
        }
        if !b.is_psd(tol.psd) {
            return Err(Error::InvalidInput("initial diagonal blocks must be positive semidefinite".into()));
        }
        total += b.trace();
    }
    if (total.re - 1.0).abs() > tol.trace || total.im.abs() > tol.trace {
        return Err(Error::InvalidInput(format!("initial populations sum to {total}, not 1")));
    }
    ode::check_grid(t_grid)?;
    if t_grid[0] != 0.0 {
        return Err(Error::InvalidInput("time grid must start at t = 0".into()));
    }

    let mut sys = DiagonalSystem::new(red);
    let d2 = dim * dim;
    let mut y0 = vec![C64::default(); levels * d2];
    for (mu, b) in diag0.iter().enumerate() {
        b.write_row_major(&mut y0[mu * d2..(mu + 1) * d2]);
    }
    let mut times = Vec::with_capacity(t_grid.len());
    let mut blocks = Vec::with_capacity(t_grid.len());
    let stiffness = red.gamma.iter().map(|g| g.frobenius_norm()).fold(0.0, f64::max);
    ode::integrate(&mut sys, &y0, t_grid, cfg, stiffness, |_, t, y| {
        let mut out = Vec::with_capacity(levels);
        for mu in 0..levels {
            let sigma = ComplexOperator::from_row_major(dim, &y[mu * d2..(mu + 1) * d2])?;
            let min = sigma.min_eigenvalue();
            if min < -tol.psd {
                return Err(match red.mode {
                    KMode::Exact => Error::PositivityLost { t, min_eig: min },
                    KMode::Resonant => Error::Invariant {
                        what: format!("positivity of diagonal block {mu}"),
                        t,
                        value: min,
                        tol: tol.psd,
                    },
                });
            }
            out.push(red.basis.interaction(&sigma, t));
        }
        times.push(t);
        blocks.push(out);
        Ok(())
    })?;
    Ok(DiagonalTimeline { times, blocks })
}

/// Gain into level `to` from level `from`; operators row-major.
struct GainTerm {
    to: usize,
    from: usize,
    v_to_from: Vec<C64>,
    k_from_to: Vec<C64>,
    k_to_from: Vec<C64>,
    v_from_to: Vec<C64>,
}

struct DiagonalSystem {
    levels: usize,
    dim: usize,
    /// A_μ = −iH_Q − Γ_μ, so that the loss part is A_μ σ + σ A_μ†.
    drift: Vec<Vec<C64>>,
    gains: Vec<GainTerm>,
    tmp: Vec<C64>,
}

impl DiagonalSystem {
    fn new(red: &ReducedModel) -> Self {
        let h = &red.spec.system.hamiltonian;
        let drift = red
            .gamma
            .iter()
            .map(|g| (&h.scale(-I) - g).to_row_major())
            .collect();
        let mut gains = Vec::new();
        for (&(to, from), k_to_from) in &red.k {
            let v = red.spec.coupling_block(to, from).expect("coupled");
            gains.push(GainTerm {
                to,
                from,
                v_to_from: v.to_row_major(),
                k_from_to: red.k[&(from, to)].to_row_major(),
                k_to_from: k_to_from.to_row_major(),
                v_from_to: v.adjoint().to_row_major(),
            });
        }
        let dim = red.dim();
        Self {
            levels: red.levels(),
            dim,
            drift,
            gains,
            tmp: vec![C64::default(); dim * dim],
        }
    }
}

impl OdeSystem for DiagonalSystem {
    fn len(&self) -> usize {
        self.levels * self.dim * self.dim
    }

    fn rhs(&mut self, _t: f64, y: &[C64], dy: &mut [C64]) {
        let d = self.dim;
        let d2 = d * d;
        let one = c(1.0, 0.0);
        dy.iter_mut().for_each(|z| *z = C64::default());
        for mu in 0..self.levels {
            let sigma = &y[mu * d2..(mu + 1) * d2];
            let out = &mut dy[mu * d2..(mu + 1) * d2];
            gemm_acc(d, one, &self.drift[mu], sigma, out);
            gemm_adj_acc(d, one, sigma, &self.drift[mu], out);
        }
        for g in &self.gains {
            let src = &y[g.from * d2..(g.from + 1) * d2];
            // V_{μλ} σ_λ K_{λμ}
            self.tmp.iter_mut().for_each(|z| *z = C64::default());
            gemm_acc(d, one, &g.v_to_from, src, &mut self.tmp);
            gemm_acc(d, one, &self.tmp, &g.k_from_to, &mut dy[g.to * d2..(g.to + 1) * d2]);
            // K_{μλ} σ_λ V_{λμ}
            self.tmp.iter_mut().for_each(|z| *z = C64::default());
            gemm_acc(d, one, &g.k_to_from, src, &mut self.tmp);
            gemm_acc(d, one, &self.tmp, &g.v_from_to, &mut dy[g.to * d2..(g.to + 1) * d2]);
        }
    }
}
