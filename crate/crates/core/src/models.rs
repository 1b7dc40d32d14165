//! The three reference devices and their closed-form survival curves.
//!
//! * von Neumann: an ideal measurement, M pointer levels each coupled to one
//!   projector of an orthonormal probe basis.
//! * Photon detector: a two-level absorber resonant with a single field mode
//!   truncated at `n_max` photons, with E⁺ = g·a.
//! * Two-site: a particle hopping between |L⟩ and |R⟩ and a detector that
//!   watches |R⟩.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{c, ComplexOperator, C64};
use crate::spec::{CouplingSpec, DeviceSpec, ModelSpec, SystemSpec, Violation};

const BASIS_TOL: f64 = 1e-10;

fn invalid(location: &str, message: impl Into<String>) -> Violation {
    Violation {
        location: location.into(),
        message: message.into(),
    }
}

fn finite_positive(v: &mut Vec<Violation>, location: &str, x: f64) {
    if !(x.is_finite() && x > 0.0) {
        v.push(invalid(location, format!("must be positive and finite, got {x}")));
    }
}

fn finite(v: &mut Vec<Violation>, location: &str, x: f64) {
    if !x.is_finite() {
        v.push(invalid(location, format!("must be finite, got {x}")));
    }
}

fn into_result(v: Vec<Violation>) -> Result<()> {
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VonNeumannParams {
    /// Number of outcomes M, also the dimension of Q.
    pub outcomes: usize,
    pub g: f64,
    pub gamma: f64,
    /// |s_1⟩..|s_M⟩ as columns of amplitudes; the computational basis if
    /// absent.
    #[serde(default)]
    pub probe_basis: Option<Vec<Vec<C64>>>,
}

impl VonNeumannParams {
    pub fn new(outcomes: usize, g: f64, gamma: f64) -> Self {
        Self {
            outcomes,
            g,
            gamma,
            probe_basis: None,
        }
    }

    pub fn chi(&self) -> f64 {
        self.g * self.g / self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.outcomes < 1 {
            v.push(invalid("outcomes", "need at least one outcome"));
        }
        finite(&mut v, "g", self.g);
        finite_positive(&mut v, "gamma", self.gamma);
        if let Some(basis) = &self.probe_basis {
            if basis.len() != self.outcomes {
                v.push(invalid(
                    "probe_basis",
                    format!("expected {} vectors, got {}", self.outcomes, basis.len()),
                ));
            } else if let Some(bad) = basis.iter().position(|s| s.len() != self.outcomes) {
                v.push(invalid(
                    "probe_basis",
                    format!("vector {} has length {}, expected {}", bad + 1, basis[bad].len(), self.outcomes),
                ));
            } else {
                for (i, a) in basis.iter().enumerate() {
                    for (j, b) in basis.iter().enumerate().skip(i) {
                        let ip: C64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
                        let want = if i == j { 1.0 } else { 0.0 };
                        if (ip - c(want, 0.0)).norm() > BASIS_TOL {
                            v.push(invalid(
                                "probe_basis",
                                format!("not orthonormal: <s_{}|s_{}> = {ip}", i + 1, j + 1),
                            ));
                        }
                    }
                }
            }
        }
        into_result(v)
    }

    /// |s_μ⟩, μ = 1..=M.
    pub fn probe(&self, mu: usize) -> Vec<C64> {
        match &self.probe_basis {
            Some(b) => b[mu - 1].clone(),
            None => (0..self.outcomes).map(|k| c(if k + 1 == mu { 1.0 } else { 0.0 }, 0.0)).collect(),
        }
    }

    /// Σ_μ c_μ|s_μ⟩ as a density operator (normalized).
    pub fn state_from_amplitudes(&self, amps: &[C64]) -> Result<ComplexOperator> {
        if amps.len() != self.outcomes {
            return Err(Error::Dimension {
                context: "probe amplitudes".into(),
                expected: self.outcomes,
                found: amps.len(),
            });
        }
        let mut psi = vec![C64::default(); self.outcomes];
        for (mu, a) in amps.iter().enumerate() {
            for (k, s) in self.probe(mu + 1).iter().enumerate() {
                psi[k] += a * s;
            }
        }
        ComplexOperator::pure_state(&psi)
    }

    /// Real amplitudes √p_μ in the probe basis.
    pub fn state_from_probabilities(&self, probs: &[f64]) -> Result<ComplexOperator> {
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidInput(format!("probabilities must be non-negative, got {p}")));
        }
        let amps: Vec<C64> = probs.iter().map(|p| c(p.sqrt(), 0.0)).collect();
        self.state_from_amplitudes(&amps)
    }
}

pub fn build_von_neumann(p: &VonNeumannParams) -> Result<ModelSpec> {
    p.validate()?;
    let m = p.outcomes;
    let mut coupling = CouplingSpec::new();
    for mu in 1..=m {
        let s = p.probe(mu);
        coupling.insert(mu, 0, ComplexOperator::outer(&s, &s)?.scale_re(p.g));
    }
    Ok(ModelSpec::new(DeviceSpec::uniform(m, p.gamma), SystemSpec::free(m), coupling))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FieldState {
    Fock { n: usize },
    Coherent { re: f64, im: f64 },
    Density { rho: ComplexOperator },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonDetectorParams {
    pub g: f64,
    /// Dephasing rate of both device levels, hence γ₁₀.
    pub gamma: f64,
    /// Detector transition energy Ω₁₀, equal to the mode frequency.
    pub omega: f64,
    pub n_max: usize,
    pub field: FieldState,
}

impl PhotonDetectorParams {
    pub const DEFAULT_N_MAX: usize = 20;

    pub fn new(g: f64, gamma: f64, field: FieldState) -> Self {
        Self {
            g,
            gamma,
            omega: 1.0,
            n_max: Self::DEFAULT_N_MAX,
            field,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        finite(&mut v, "g", self.g);
        finite_positive(&mut v, "gamma", self.gamma);
        finite(&mut v, "omega", self.omega);
        if self.n_max < 1 {
            v.push(invalid("n_max", "must be at least 1"));
        }
        match &self.field {
            FieldState::Fock { n } if *n > self.n_max => {
                v.push(invalid("field.n", format!("Fock number {n} exceeds n_max = {}", self.n_max)));
            }
            FieldState::Coherent { re, im } => {
                finite(&mut v, "field.re", *re);
                finite(&mut v, "field.im", *im);
            }
            FieldState::Density { rho } => {
                if rho.dim() != self.n_max + 1 {
                    v.push(invalid(
                        "field.rho",
                        format!("dimension {} does not match n_max + 1 = {}", rho.dim(), self.n_max + 1),
                    ));
                } else if (rho.trace() - c(1.0, 0.0)).norm() > 1e-9 || !rho.is_psd(1e-8) {
                    v.push(invalid("field.rho", "must be a unit-trace positive semidefinite operator"));
                }
            }
            _ => {}
        }
        into_result(v)
    }
}

/// Annihilation operator on the Fock space truncated at `n_max`.
pub fn annihilation(n_max: usize) -> ComplexOperator {
    let mut a = ComplexOperator::zeros(n_max + 1);
    for n in 1..=n_max {
        a.set(n - 1, n, c((n as f64).sqrt(), 0.0));
    }
    a
}

#[derive(Debug, Clone)]
pub struct PhotonDetector {
    pub spec: ModelSpec,
    pub field: ComplexOperator,
    /// Probability weight of the requested field state above n_max.
    pub truncation_weight: f64,
    pub warnings: Vec<String>,
    g: f64,
    gamma: f64,
}

impl PhotonDetector {
    /// W₁₀(ρ) = (2/γ₁₀) tr(ρ E⁻E⁺) = (2g²/γ₁₀) tr(ρ a†a).
    pub fn click_rate(&self, rho: &ComplexOperator) -> f64 {
        let a = annihilation(rho.dim() - 1);
        let n = &a.adjoint() * &a;
        2.0 * self.g * self.g / self.gamma * n.trace_product(rho).re
    }
}

pub fn build_photon_detector(p: &PhotonDetectorParams) -> Result<PhotonDetector> {
    p.validate()?;
    let dim = p.n_max + 1;
    let mut warnings = Vec::new();
    let (field, truncation_weight) = match &p.field {
        FieldState::Fock { n } => (ComplexOperator::basis_projector(dim, *n), 0.0),
        FieldState::Coherent { re, im } => {
            let alpha = c(*re, *im);
            let mean = alpha.norm_sqr();
            if mean > p.n_max as f64 / 4.0 {
                let msg = format!(
                    "coherent amplitude |alpha|^2 = {mean} exceeds n_max/4 = {}; truncation may be inaccurate",
                    p.n_max as f64 / 4.0
                );
                warn!("{msg}");
                warnings.push(msg);
            }
            // c_n = e^{-|α|²/2} α^n/√n!, built by recursion
            let mut amps = Vec::with_capacity(dim);
            let mut cn = c((-mean / 2.0).exp(), 0.0);
            amps.push(cn);
            for n in 1..dim {
                cn = cn * alpha / (n as f64).sqrt();
                amps.push(cn);
            }
            let kept: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
            (ComplexOperator::pure_state(&amps)?, (1.0 - kept).max(0.0))
        }
        FieldState::Density { rho } => (rho.hermitian_part(), 0.0),
    };
    let number: Vec<f64> = (0..dim).map(|n| p.omega * n as f64).collect();
    let spec = ModelSpec::new(
        DeviceSpec::new(vec![0.0, p.omega], vec![p.gamma, p.gamma]),
        SystemSpec::new(ComplexOperator::diagonal(&number)),
        CouplingSpec::new().with(1, 0, annihilation(p.n_max).scale_re(p.g)),
    );
    Ok(PhotonDetector {
        spec,
        field,
        truncation_weight,
        warnings,
        g: p.g,
        gamma: p.gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSiteParams {
    /// Hopping energy Δ.
    pub delta: f64,
    pub g: f64,
    pub gamma: f64,
}

impl TwoSiteParams {
    pub fn new(delta: f64, g: f64, gamma: f64) -> Self {
        Self { delta, g, gamma }
    }

    /// Parameters with the given χ at dephasing rate γ.
    pub fn from_chi(delta: f64, chi: f64, gamma: f64) -> Self {
        Self::new(delta, (chi * gamma).sqrt(), gamma)
    }

    pub fn chi(&self) -> f64 {
        self.g * self.g / self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        finite_positive(&mut v, "delta", self.delta);
        finite(&mut v, "g", self.g);
        finite_positive(&mut v, "gamma", self.gamma);
        into_result(v)
    }

    /// −Δσ_x in the basis {|L⟩, |R⟩}.
    pub fn hamiltonian(&self) -> ComplexOperator {
        let off = c(-self.delta, 0.0);
        let zero = C64::default();
        ComplexOperator::from_rows(&[vec![zero, off], vec![off, zero]]).expect("2x2")
    }

    /// H_Q − iΓ₀ = −Δσ_x − iχ|R⟩⟨R|.
    pub fn effective_hamiltonian(&self) -> ComplexOperator {
        let mut h = self.hamiltonian();
        h.set(1, 1, c(0.0, -self.chi()));
        h
    }

    /// |L⟩⟨L|
    pub fn initial_state() -> ComplexOperator {
        ComplexOperator::basis_projector(2, 0)
    }
}

pub fn build_two_site(p: &TwoSiteParams) -> Result<ModelSpec> {
    p.validate()?;
    Ok(ModelSpec::new(
        DeviceSpec::uniform(1, p.gamma),
        SystemSpec::new(p.hamiltonian()),
        CouplingSpec::new().with(1, 0, ComplexOperator::basis_projector(2, 1).scale_re(p.g)),
    ))
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

fn sinhc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 + x * x / 6.0
    } else {
        x.sinh() / x
    }
}

/// Pr(T₀ ≥ t) for the two-site detector started in |L⟩:
/// e^{−χt}(4Δ² − χ²cos ωt + χω sin ωt)/ω² with ω = √(4Δ² − χ²).
///
/// Written as e^{−χt}[1 + (χt)²/2·s(θ/2)² + χt·s(θ)] with s = sinc and
/// θ = ωt below critical damping, s(x) = sinh(x)/x and θ = κt,
/// κ = √(χ² − 4Δ²), above it. The form is continuous through χ = 2Δ, where
/// it reduces to e^{−χt}(1 + χt + χ²t²/2).
pub fn analytic_survival_two_site(delta: f64, chi: f64, t: f64) -> f64 {
    let disc = 4.0 * delta * delta - chi * chi;
    let ct = chi * t;
    if disc >= 0.0 {
        let theta = disc.sqrt() * t;
        let s_half = sinc(theta / 2.0);
        (-ct).exp() * (1.0 + 0.5 * ct * ct * s_half * s_half + ct * sinc(theta))
    } else {
        let kappa = (-disc).sqrt();
        let theta = kappa * t;
        if theta > 40.0 {
            // sinh x ≈ e^x/2; keeps e^{κt} from overflowing
            let r = chi / kappa;
            (-ct).exp() + ((kappa - chi) * t).exp() * (0.5 * r * r + 0.5 * r)
        } else {
            let s_half = sinhc(theta / 2.0);
            (-ct).exp() * (1.0 + 0.5 * ct * ct * s_half * s_half + ct * sinhc(theta))
        }
    }
}

/// e^{−2χt}
pub fn analytic_survival_von_neumann(chi: f64, t: f64) -> f64 {
    (-2.0 * chi * t).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jump::{back_react, back_react_level, post_transition_state, survival};
    use crate::ode::{uniform_grid, IntegratorConfig};
    use crate::reduction::{compute_reduced, transition_rates, KMode};

    fn tight() -> IntegratorConfig {
        IntegratorConfig::rk45(1e-12, 1e-14)
    }

    #[test]
    fn von_neumann_structure() {
        let p = VonNeumannParams::new(2, 1.0, 200.0);
        let spec = build_von_neumann(&p).unwrap();
        assert!(spec.validate().is_empty());
        assert_eq!(spec.num_levels(), 3);
        assert_eq!(spec.coupling.len(), 2);
        let red = compute_reduced(&spec, KMode::Resonant).unwrap();
        assert!(red.gamma(0).max_abs_diff(&ComplexOperator::identity(2).scale_re(p.chi())) < 1e-15);
    }

    #[test]
    fn von_neumann_rotated_basis() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut p = VonNeumannParams::new(2, 1.0, 50.0);
        p.probe_basis = Some(vec![vec![c(h, 0.0), c(h, 0.0)], vec![c(h, 0.0), c(-h, 0.0)]]);
        let spec = build_von_neumann(&p).unwrap();
        let red = compute_reduced(&spec, KMode::Resonant).unwrap();
        let rho = p.state_from_probabilities(&[0.36, 0.64]).unwrap();
        let w = transition_rates(&red, &rho, 0).unwrap();
        assert!((w[1] / (w[1] + w[2]) - 0.36).abs() < 1e-14);
        let post = post_transition_state(&red, &rho, 0, 2).unwrap();
        let s2 = ComplexOperator::pure_state(&p.probe(2)).unwrap();
        assert!(post.max_abs_diff(&s2) < 1e-14);
    }

    #[test]
    fn non_orthonormal_basis_rejected() {
        let mut p = VonNeumannParams::new(2, 1.0, 50.0);
        p.probe_basis = Some(vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.6, 0.0), c(0.8, 0.0)]]);
        match build_von_neumann(&p) {
            Err(Error::InvalidSpec(v)) => assert_eq!(v[0].location, "probe_basis"),
            other => panic!("{other:?}"),
        }
        assert!(build_von_neumann(&VonNeumannParams::new(2, 1.0, 0.0)).is_err());
    }

    #[test]
    fn von_neumann_survival_matches_closed_form() {
        let p = VonNeumannParams::new(3, 1.0, 10.0);
        let red = compute_reduced(&build_von_neumann(&p).unwrap(), KMode::Resonant).unwrap();
        let rho = p.state_from_probabilities(&[0.1, 0.2, 0.7]).unwrap();
        let s = survival(&back_react_level(&red, &rho, 0, &uniform_grid(50.0, 101), &tight()).unwrap());
        for (t, v) in s.times.iter().zip(&s.values) {
            assert!((v - analytic_survival_von_neumann(p.chi(), *t)).abs() < 1e-8);
        }
        assert!((analytic_survival_von_neumann(0.5, 2f64.ln()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn photon_fock_rate_and_post_state() {
        let det = build_photon_detector(&PhotonDetectorParams::new(0.1, 10.0, FieldState::Fock { n: 2 })).unwrap();
        assert!(det.spec.validate().is_empty());
        let red = compute_reduced(&det.spec, KMode::Exact).unwrap();
        let w = transition_rates(&red, &det.field, 0).unwrap();
        assert!((w[1] - 0.004).abs() < 1e-15);
        assert!((det.click_rate(&det.field) - 0.004).abs() < 1e-15);
        let post = post_transition_state(&red, &det.field, 0, 1).unwrap();
        assert!(post.max_abs_diff(&ComplexOperator::basis_projector(21, 1)) < 1e-15);
    }

    #[test]
    fn photon_exact_equals_resonant() {
        let det = build_photon_detector(&PhotonDetectorParams::new(0.3, 5.0, FieldState::Fock { n: 1 })).unwrap();
        let exact = compute_reduced(&det.spec, KMode::Exact).unwrap();
        let res = compute_reduced(&det.spec, KMode::Resonant).unwrap();
        assert!(exact.k(1, 0).unwrap().max_abs_diff(res.k(1, 0).unwrap()) < 1e-14);
    }

    #[test]
    fn photon_vacuum_never_clicks() {
        let det = build_photon_detector(&PhotonDetectorParams::new(0.1, 10.0, FieldState::Fock { n: 0 })).unwrap();
        let red = compute_reduced(&det.spec, KMode::Resonant).unwrap();
        let s = survival(&back_react_level(&red, &det.field, 0, &uniform_grid(100.0, 11), &tight()).unwrap());
        assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn photon_coherent_state() {
        let det =
            build_photon_detector(&PhotonDetectorParams::new(0.1, 10.0, FieldState::Coherent { re: 0.6, im: 0.8 }))
                .unwrap();
        assert!(det.warnings.is_empty());
        assert!(det.truncation_weight < 1e-15);
        assert!((det.click_rate(&det.field) - 0.002).abs() < 1e-12);
        let loud =
            build_photon_detector(&PhotonDetectorParams::new(0.1, 10.0, FieldState::Coherent { re: 3.0, im: 0.0 }))
                .unwrap();
        assert_eq!(loud.warnings.len(), 1);
        assert!(loud.truncation_weight > 0.0);
    }

    #[test]
    fn photon_params_checked() {
        let mut p = PhotonDetectorParams::new(0.1, 10.0, FieldState::Fock { n: 30 });
        assert!(build_photon_detector(&p).is_err());
        p.field = FieldState::Density {
            rho: ComplexOperator::identity(3),
        };
        assert!(build_photon_detector(&p).is_err());
    }

    #[test]
    fn two_site_operators() {
        let p = TwoSiteParams::from_chi(1.0, 1.0, 100.0);
        let red = compute_reduced(&build_two_site(&p).unwrap(), KMode::Resonant).unwrap();
        let want = ComplexOperator::basis_projector(2, 1).scale_re(p.chi());
        assert!(red.gamma(0).max_abs_diff(&want) < 1e-14);
        let heff = &p.hamiltonian() - &red.gamma(0).scale(c(0.0, 1.0));
        assert!(heff.max_abs_diff(&p.effective_hamiltonian()) < 1e-14);
        assert!(p.validate().is_ok());
        assert!(TwoSiteParams::new(0.0, 1.0, 1.0).validate().is_err());
    }

    #[test]
    fn two_site_closed_form_values() {
        for (d, chi) in [(1.0, 0.5), (1.0, 2.0), (1.0, 3.0), (0.3, 0.0)] {
            assert!((analytic_survival_two_site(d, chi, 0.0) - 1.0).abs() < 1e-15);
        }
        assert!((0..50).all(|k| analytic_survival_two_site(1.0, 0.0, k as f64) == 1.0));
        // the formula as written, ω = √3
        let w = 3f64.sqrt();
        let direct = (-1f64).exp() * (4.0 - w.cos() + w * w.sin()) / 3.0;
        assert!((analytic_survival_two_site(1.0, 1.0, 1.0) - direct).abs() < 1e-15);
        assert!((direct - 0.7198).abs() < 1e-4);
        // overdamped branch against the continued formula
        let k = 5f64.sqrt();
        let t = 0.8f64;
        let cont = (-3.0 * t).exp() * (4.0 - 9.0 * (k * t).cosh() - 3.0 * k * (k * t).sinh()) / (-5.0);
        assert!((analytic_survival_two_site(1.0, 3.0, t) - cont).abs() < 1e-14);
        // large times stay finite and decay
        let far = analytic_survival_two_site(1.0, 50.0, 1e4);
        assert!(far.is_finite() && far > 0.0 && far < 1.0);
    }

    #[test]
    fn two_site_critical_continuity() {
        for t in [0.1, 1.0, 3.0, 10.0] {
            let at = analytic_survival_two_site(1.0, 2.0, t);
            let want = (-2.0 * t).exp() * (1.0 + 2.0 * t + 2.0 * t * t);
            assert!((at - want).abs() < 1e-14);
            for eps in [1e-6, -1e-6] {
                assert!((analytic_survival_two_site(1.0, 2.0 + eps, t) - at).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn two_site_numeric_at_unit_time() {
        let p = TwoSiteParams::from_chi(1.0, 1.0, 100.0);
        let gamma = ComplexOperator::basis_projector(2, 1).scale_re(p.chi());
        let tl = back_react(&gamma, &TwoSiteParams::initial_state(), &p.hamiltonian(), &[0.0, 1.0], &tight()).unwrap();
        assert!((tl.states[1].trace().re - 0.7198).abs() < 1e-3);
    }
}
