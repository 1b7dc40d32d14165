//! Model specifications: device levels, the measured system and their coupling.
//!
//! Level 0 is always the ready state of the device.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::ComplexOperator;

/// Numerical tolerances shared by the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub trace: f64,
    pub hermitian: f64,
    pub psd: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            trace: 1e-9,
            hermitian: 1e-10,
            psd: 1e-8,
        }
    }
}

/// One invariant violation found by [`ModelSpec::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl Violation {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// Device levels: energies Ω_μ and dephasing rates γ_μ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub energies: Vec<f64>,
    pub dephasing_rates: Vec<f64>,
}

impl DeviceSpec {
    pub fn new(energies: Vec<f64>, dephasing_rates: Vec<f64>) -> Self {
        Self {
            energies,
            dephasing_rates,
        }
    }

    /// M levels of the same dephasing rate plus the ready level, all degenerate.
    pub fn uniform(num_outcomes: usize, gamma: f64) -> Self {
        Self::new(vec![0.0; num_outcomes + 1], vec![gamma; num_outcomes + 1])
    }

    pub fn num_levels(&self) -> usize {
        self.energies.len()
    }

    /// M, the number of pointer levels.
    pub fn num_outcomes(&self) -> usize {
        self.num_levels().saturating_sub(1)
    }

    /// γ_{μν} = (γ_μ + γ_ν)/2 for μ ≠ ν, 0 on the diagonal.
    pub fn pair_rate(&self, mu: usize, nu: usize) -> f64 {
        if mu == nu {
            0.0
        } else {
            0.5 * (self.dephasing_rates[mu] + self.dephasing_rates[nu])
        }
    }

    /// Ω_{μν} = Ω_μ − Ω_ν
    pub fn energy_gap(&self, mu: usize, nu: usize) -> f64 {
        self.energies[mu] - self.energies[nu]
    }

    pub fn max_rate(&self) -> f64 {
        self.dephasing_rates.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub hamiltonian: ComplexOperator,
}

impl SystemSpec {
    pub fn new(hamiltonian: ComplexOperator) -> Self {
        Self { hamiltonian }
    }

    pub fn free(dim: usize) -> Self {
        Self::new(ComplexOperator::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }
}

/// Serialized form of one coupling block V_{to,from}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingEntry {
    pub to: usize,
    pub from: usize,
    pub operator: ComplexOperator,
}

/// Coupling blocks V_{μν}. Only the lower triangle (μ ≥ ν) is stored; the
/// upper one follows from V_{νμ} = V_{μν}†.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CouplingEntry>", into = "Vec<CouplingEntry>")]
pub struct CouplingSpec {
    blocks: BTreeMap<(usize, usize), ComplexOperator>,
}

impl CouplingSpec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets V_{to,from} (and implicitly V_{from,to} = V_{to,from}†).
    pub fn insert(&mut self, to: usize, from: usize, v: ComplexOperator) {
        if to >= from {
            self.blocks.insert((to, from), v);
        } else {
            self.blocks.insert((from, to), v.adjoint());
        }
    }

    pub fn with(mut self, to: usize, from: usize, v: ComplexOperator) -> Self {
        self.insert(to, from, v);
        self
    }

    /// V_{μν}, derived from the stored triangle.
    pub fn block(&self, mu: usize, nu: usize) -> Option<ComplexOperator> {
        if mu >= nu {
            self.blocks.get(&(mu, nu)).cloned()
        } else {
            self.blocks.get(&(nu, mu)).map(ComplexOperator::adjoint)
        }
    }

    /// Stored (lower-triangle) blocks.
    pub fn stored(&self) -> impl Iterator<Item = (&(usize, usize), &ComplexOperator)> {
        self.blocks.iter()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

impl TryFrom<Vec<CouplingEntry>> for CouplingSpec {
    type Error = String;

    fn try_from(entries: Vec<CouplingEntry>) -> std::result::Result<Self, String> {
        let mut spec = CouplingSpec::new();
        for e in entries {
            if let Some(existing) = spec.block(e.to, e.from) {
                if existing.max_abs_diff(&e.operator) > 1e-12 {
                    return Err(format!(
                        "coupling ({},{}) given twice with values that are not adjoint to each other",
                        e.to, e.from
                    ));
                }
            }
            spec.insert(e.to, e.from, e.operator);
        }
        Ok(spec)
    }
}

impl From<CouplingSpec> for Vec<CouplingEntry> {
    fn from(spec: CouplingSpec) -> Self {
        spec.blocks
            .into_iter()
            .map(|((to, from), operator)| CouplingEntry { to, from, operator })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub device: DeviceSpec,
    pub system: SystemSpec,
    pub coupling: CouplingSpec,
}

impl ModelSpec {
    pub fn new(device: DeviceSpec, system: SystemSpec, coupling: CouplingSpec) -> Self {
        Self {
            device,
            system,
            coupling,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.device.num_levels()
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    /// V_{μν}; `None` where no coupling is present.
    pub fn coupling_block(&self, mu: usize, nu: usize) -> Option<ComplexOperator> {
        self.coupling.block(mu, nu)
    }

    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with(&Tolerances::default())
    }

    /// Every invariant violation of the specification. An empty list means valid.
    pub fn validate_with(&self, tol: &Tolerances) -> Vec<Violation> {
        let mut out = Vec::new();
        let dev = &self.device;
        let levels = dev.energies.len();
        if levels < 2 {
            out.push(Violation::new(
                "device.energies",
                format!("need the ready level and at least one pointer level, got {levels} level(s)"),
            ));
        }
        if dev.dephasing_rates.len() != levels {
            out.push(Violation::new(
                "device.dephasing_rates",
                format!("expected {levels} rates (one per level), got {}", dev.dephasing_rates.len()),
            ));
        }
        for (mu, e) in dev.energies.iter().enumerate() {
            if !e.is_finite() {
                out.push(Violation::new(format!("device.energies[{mu}]"), "not finite"));
            }
        }
        for (mu, g) in dev.dephasing_rates.iter().enumerate() {
            if !g.is_finite() || *g < 0.0 {
                out.push(Violation::new(
                    format!("device.dephasing_rates[{mu}]"),
                    format!("must be a finite nonnegative rate, got {g}"),
                ));
            }
        }

        let d = self.system.dim();
        let h = &self.system.hamiltonian;
        if h.matrix().iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            out.push(Violation::new("system.hamiltonian (H_Q)", "contains non-finite entries"));
        } else {
            let defect = h.hermiticity_defect();
            if defect > tol.hermitian {
                out.push(Violation::new(
                    "system.hamiltonian (H_Q)",
                    format!("not hermitian: max |H - H†| = {defect:e}"),
                ));
            }
        }

        for (&(mu, nu), v) in self.coupling.stored() {
            let loc = format!("coupling block ({mu},{nu})");
            if mu >= levels || nu >= levels {
                out.push(Violation::new(
                    loc.clone(),
                    format!("level index out of range 0..={}", levels.saturating_sub(1)),
                ));
            }
            if v.dim() != d {
                out.push(Violation::new(
                    loc.clone(),
                    format!("dimension {} does not match system dimension {d}", v.dim()),
                ));
            }
            if mu == nu && !v.is_zero(tol.hermitian) {
                out.push(Violation::new(loc, "diagonal coupling blocks V_{μμ} must vanish"));
            }
        }
        out
    }

    /// Fails with [`Error::InvalidSpec`] when `validate` reports anything.
    pub fn ensure_valid(&self, tol: &Tolerances) -> Result<()> {
        let v = self.validate_with(tol);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::c;

    fn small_spec() -> ModelSpec {
        let p0 = ComplexOperator::basis_projector(2, 0);
        ModelSpec::new(
            DeviceSpec::uniform(1, 10.0),
            SystemSpec::free(2),
            CouplingSpec::new().with(1, 0, p0),
        )
    }

    #[test]
    fn pair_rates_and_gaps() {
        let d = DeviceSpec::new(vec![0.0, 1.5, -2.0], vec![2.0, 4.0, 10.0]);
        assert_eq!(d.pair_rate(0, 1), 3.0);
        assert_eq!(d.pair_rate(2, 1), 7.0);
        assert_eq!(d.pair_rate(1, 1), 0.0);
        for mu in 0..3 {
            for nu in 0..3 {
                assert_eq!(d.energy_gap(mu, nu), -d.energy_gap(nu, mu));
            }
        }
    }

    #[test]
    fn coupling_stores_one_triangle() {
        let v = ComplexOperator::from_rows(&[vec![c(0.0, 0.0), c(1.0, 2.0)], vec![c(0.0, 0.0), c(0.0, 0.0)]])
            .unwrap();
        let cs = CouplingSpec::new().with(0, 1, v.clone());
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.block(0, 1).unwrap(), v);
        assert_eq!(cs.block(1, 0).unwrap(), v.adjoint());
        assert!(cs.block(2, 0).is_none());
    }

    #[test]
    fn valid_spec_has_no_violations() {
        assert!(small_spec().validate().is_empty());
    }

    #[test]
    fn diagonal_block_is_flagged() {
        let mut s = small_spec();
        s.coupling.insert(0, 0, ComplexOperator::identity(2));
        let v = s.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].location.contains("(0,0)"), "{v:?}");
    }

    #[test]
    fn non_hermitian_hamiltonian_is_flagged() {
        let mut s = small_spec();
        let mut h = ComplexOperator::zeros(2);
        h.set(0, 1, c(1.0, 0.0));
        s.system = SystemSpec::new(h);
        let v = s.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].location.contains("H_Q"));
    }

    #[test]
    fn dimension_and_count_problems_are_flagged() {
        let mut s = small_spec();
        s.device.dephasing_rates.pop();
        s.coupling.insert(1, 0, ComplexOperator::identity(3));
        let v = s.validate();
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn validate_is_idempotent() {
        let mut s = small_spec();
        s.coupling.insert(1, 1, ComplexOperator::identity(2));
        assert_eq!(s.validate(), s.validate());
    }

    #[test]
    fn serde_round_trip() {
        let s = small_spec();
        let json = serde_json::to_string(&s).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn conflicting_duplicate_coupling_is_rejected() {
        let entries = vec![
            CouplingEntry {
                to: 1,
                from: 0,
                operator: ComplexOperator::identity(1),
            },
            CouplingEntry {
                to: 0,
                from: 1,
                operator: ComplexOperator::identity(1).scale_re(2.0),
            },
        ];
        assert!(CouplingSpec::try_from(entries).is_err());
    }
}
