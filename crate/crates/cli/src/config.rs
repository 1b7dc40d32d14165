//! Run configuration: a TOML file with `[model]`, `[solver]` and `[run]`
//! sections. Every field except the model parameters has a default.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use ultradeco::models::{
    build_photon_detector, build_two_site, build_von_neumann, FieldState, PhotonDetectorParams, TwoSiteParams,
    VonNeumannParams,
};
use ultradeco::operator::c;
use ultradeco::{ComplexOperator, Error as CoreError, IntegratorConfig, KMode, Method, ModelSpec, Tolerances, C64};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    VonNeumann {
        outcomes: usize,
        g: f64,
        gamma: f64,
        /// |s_μ⟩ as lists of [re, im] pairs; computational basis if absent.
        #[serde(default)]
        probe_basis: Option<Vec<Vec<[f64; 2]>>>,
        /// Initial |c_μ|² in the probe basis (uniform if neither this nor
        /// `amplitudes` is given).
        #[serde(default)]
        probabilities: Option<Vec<f64>>,
        #[serde(default)]
        amplitudes: Option<Vec<[f64; 2]>>,
    },
    PhotonDetector {
        g: f64,
        gamma: f64,
        #[serde(default = "one")]
        omega: f64,
        #[serde(default = "default_n_max")]
        n_max: usize,
        field: FieldConfig,
    },
    TwoSite {
        delta: f64,
        gamma: f64,
        /// Give either `g` or `chi` = g²/γ.
        #[serde(default)]
        g: Option<f64>,
        #[serde(default)]
        chi: Option<f64>,
        /// Initial amplitudes on (|L⟩, |R⟩); |L⟩ if absent.
        #[serde(default)]
        initial: Option<Vec<[f64; 2]>>,
    },
    Custom {
        spec: ModelSpec,
        /// Initial density operator of Q as rows of [re, im] pairs.
        state: ComplexOperator,
    },
}

fn one() -> f64 {
    1.0
}

fn default_n_max() -> usize {
    PhotonDetectorParams::DEFAULT_N_MAX
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldConfig {
    Fock { n: usize },
    Coherent { re: f64, #[serde(default)] im: f64 },
    Density { rho: ComplexOperator },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub k_mode: KMode,
    pub tolerances: Tolerances,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let i = IntegratorConfig::default();
        Self {
            method: i.method,
            rel_tol: i.rel_tol,
            abs_tol: i.abs_tol,
            max_step: i.max_step,
            k_mode: KMode::Resonant,
            tolerances: Tolerances::default(),
        }
    }
}

impl SolverConfig {
    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            method: self.method,
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            max_step: self.max_step,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Mandatory for `trajectories`.
    pub seed: Option<u64>,
    pub n_traj: usize,
    pub t_max: f64,
    pub t_points: usize,
    /// Device level the system starts in.
    pub initial_level: usize,
    /// Dephasing rates for `gamma-sweep`.
    pub gammas: Vec<f64>,
    /// Upper bound on clicks per trajectory with `--multi-click`.
    pub max_clicks: usize,
    /// Survival left at t_max above which `firststep` warns.
    pub cutoff: f64,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: None,
            n_traj: 10_000,
            t_max: 100.0,
            t_points: 201,
            initial_level: 0,
            gammas: vec![50.0, 100.0, 200.0, 400.0, 800.0],
            max_clicks: 10,
            cutoff: 1e-6,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Printed by `--print-defaults`.
pub const DEFAULTS: &str = r#"# ultradeco run configuration. Only [model] is required.

[model]
# one of: von-neumann, photon-detector, two-site, custom
kind = "von-neumann"
outcomes = 2
g = 1.0
gamma = 10.0
# initial |c_mu|^2 in the probe basis (default: uniform)
probabilities = [0.36, 0.64]
# amplitudes = [[0.6, 0.0], [0.0, 0.8]]
# probe_basis = [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]]

# [model]
# kind = "photon-detector"
# g = 0.1
# gamma = 10.0
# omega = 1.0            # detector transition energy = mode frequency
# n_max = 20             # Fock truncation
# field = { state = "fock", n = 2 }
# field = { state = "coherent", re = 1.0, im = 0.0 }

# [model]
# kind = "two-site"
# delta = 1.0
# gamma = 100.0
# chi = 1.0              # or g = 10.0
# initial = [[1.0, 0.0], [0.0, 0.0]]   # |L>

[solver]
method = "rk45"          # rk45 (adaptive) or rk4 (fixed step = max_step)
rel_tol = 1e-8
abs_tol = 1e-10
max_step = 1.0           # adaptive steps are also capped at 0.1/gamma_max
k_mode = "resonant"      # resonant or exact

[solver.tolerances]
trace = 1e-9
hermitian = 1e-10
psd = 1e-8

[run]
# seed = 1               # required for trajectories
n_traj = 10000
t_max = 100.0
t_points = 201
initial_level = 0
gammas = [50.0, 100.0, 200.0, 400.0, 800.0]
max_clicks = 10
cutoff = 1e-6
output_dir = "out"
"#;

/// A model ready to run: its spec, the initial state of Q and whatever
/// closed forms are known for it.
pub struct Prepared {
    pub spec: ModelSpec,
    pub state: ComplexOperator,
    pub analytic: Option<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
    pub warnings: Vec<String>,
}

fn complex(v: &[[f64; 2]]) -> Vec<C64> {
    v.iter().map(|[re, im]| c(*re, *im)).collect()
}

fn model_error(e: CoreError) -> CliError {
    model_error_at("model", e)
}

fn model_error_at(prefix: &str, e: CoreError) -> CliError {
    match e {
        CoreError::InvalidSpec(v) => CliError::Config(
            v.iter()
                .map(|v| format!("{prefix}.{}: {}", v.location, v.message))
                .collect::<Vec<_>>()
                .join("; "),
        ),
        other => CliError::Config(format!("{prefix}: {other}")),
    }
}

fn pure(field: &str, amps: &[C64], dim: usize) -> Result<ComplexOperator, CliError> {
    if amps.len() != dim {
        return Err(CliError::Config(format!(
            "{field}: expected {dim} amplitudes, got {}",
            amps.len()
        )));
    }
    ComplexOperator::pure_state(amps).map_err(|e| CliError::Config(format!("{field}: {e}")))
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::VonNeumann { .. } => "von-neumann",
            ModelConfig::PhotonDetector { .. } => "photon-detector",
            ModelConfig::TwoSite { .. } => "two-site",
            ModelConfig::Custom { .. } => "custom",
        }
    }

    /// The same model with its dephasing rate(s) set to `gamma`, holding
    /// the coupling fixed.
    pub fn with_gamma(&self, gamma: f64) -> Result<ModelConfig, CliError> {
        let mut m = self.clone();
        match &mut m {
            ModelConfig::VonNeumann { gamma: g, .. } | ModelConfig::PhotonDetector { gamma: g, .. } => *g = gamma,
            ModelConfig::TwoSite { gamma: old, g, chi, .. } => {
                if let Some(chi) = chi.take() {
                    *g = Some((chi * *old).sqrt());
                }
                *old = gamma;
            }
            ModelConfig::Custom { spec, .. } => {
                for r in &mut spec.device.dephasing_rates {
                    *r = gamma;
                }
            }
        }
        Ok(m)
    }

    pub fn prepare(&self) -> Result<Prepared, CliError> {
        match self {
            ModelConfig::VonNeumann {
                outcomes,
                g,
                gamma,
                probe_basis,
                probabilities,
                amplitudes,
            } => {
                let p = VonNeumannParams {
                    outcomes: *outcomes,
                    g: *g,
                    gamma: *gamma,
                    probe_basis: probe_basis.as_ref().map(|b| b.iter().map(|v| complex(v)).collect()),
                };
                let spec = build_von_neumann(&p).map_err(model_error)?;
                let state = match (probabilities, amplitudes) {
                    (Some(_), Some(_)) => {
                        return Err(CliError::Config(
                            "model.probabilities and model.amplitudes are mutually exclusive".into(),
                        ))
                    }
                    (Some(probs), None) => {
                        if probs.len() != *outcomes {
                            return Err(CliError::Config(format!(
                                "model.probabilities: expected {outcomes} values, got {}",
                                probs.len()
                            )));
                        }
                        let total: f64 = probs.iter().sum();
                        if (total - 1.0).abs() > 1e-9 {
                            return Err(CliError::Config(format!(
                                "model.probabilities: must sum to 1, got {total}"
                            )));
                        }
                        p.state_from_probabilities(probs)
                            .map_err(|e| CliError::Config(format!("model.probabilities: {e}")))?
                    }
                    (None, Some(a)) => {
                        let amps = complex(a);
                        if amps.len() != *outcomes {
                            return Err(CliError::Config(format!(
                                "model.amplitudes: expected {outcomes} amplitudes, got {}",
                                amps.len()
                            )));
                        }
                        p.state_from_amplitudes(&amps)
                            .map_err(|e| CliError::Config(format!("model.amplitudes: {e}")))?
                    }
                    (None, None) => p
                        .state_from_probabilities(&vec![1.0 / *outcomes as f64; *outcomes])
                        .map_err(model_error)?,
                };
                let chi = p.chi();
                Ok(Prepared {
                    spec,
                    state,
                    analytic: Some(Box::new(move |t| ultradeco::models::analytic_survival_von_neumann(chi, t))),
                    warnings: Vec::new(),
                })
            }
            ModelConfig::PhotonDetector {
                g,
                gamma,
                omega,
                n_max,
                field,
            } => {
                let field = match field {
                    FieldConfig::Fock { n } => FieldState::Fock { n: *n },
                    FieldConfig::Coherent { re, im } => FieldState::Coherent { re: *re, im: *im },
                    FieldConfig::Density { rho } => FieldState::Density { rho: rho.clone() },
                };
                let det = build_photon_detector(&PhotonDetectorParams {
                    g: *g,
                    gamma: *gamma,
                    omega: *omega,
                    n_max: *n_max,
                    field,
                })
                .map_err(model_error)?;
                let mut warnings = det.warnings.clone();
                if det.truncation_weight > 1e-8 {
                    warnings.push(format!(
                        "Fock truncation drops probability weight {:e}",
                        det.truncation_weight
                    ));
                }
                Ok(Prepared {
                    spec: det.spec,
                    state: det.field,
                    analytic: None,
                    warnings,
                })
            }
            ModelConfig::TwoSite {
                delta,
                gamma,
                g,
                chi,
                initial,
            } => {
                let g = match (g, chi) {
                    (Some(g), None) => *g,
                    (None, Some(chi)) => {
                        if !(chi.is_finite() && *chi >= 0.0) {
                            return Err(CliError::Config(format!("model.chi: must be non-negative, got {chi}")));
                        }
                        (chi * gamma).sqrt()
                    }
                    _ => return Err(CliError::Config("model: give exactly one of g and chi".into())),
                };
                let p = TwoSiteParams::new(*delta, g, *gamma);
                let spec = build_two_site(&p).map_err(model_error)?;
                let state = match initial {
                    Some(a) => pure("model.initial", &complex(a), 2)?,
                    None => TwoSiteParams::initial_state(),
                };
                // the closed form is for a start in |L⟩
                let from_left = state.max_abs_diff(&TwoSiteParams::initial_state()) < 1e-12;
                let (delta, chi) = (*delta, p.chi());
                Ok(Prepared {
                    spec,
                    state,
                    analytic: from_left.then(|| {
                        Box::new(move |t| ultradeco::models::analytic_survival_two_site(delta, chi, t))
                            as Box<dyn Fn(f64) -> f64 + Send + Sync>
                    }),
                    warnings: Vec::new(),
                })
            }
            ModelConfig::Custom { spec, state } => {
                let violations = spec.validate();
                if !violations.is_empty() {
                    return Err(model_error_at("model.spec", CoreError::InvalidSpec(violations)));
                }
                if state.dim() != spec.dim() {
                    return Err(CliError::Config(format!(
                        "model.state: dimension {} does not match the system dimension {}",
                        state.dim(),
                        spec.dim()
                    )));
                }
                Ok(Prepared {
                    spec: spec.clone(),
                    state: state.clone(),
                    analytic: None,
                    warnings: Vec::new(),
                })
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks the fields every experiment relies on.
    pub fn check(&self) -> Result<(), CliError> {
        let r = &self.run;
        if !(r.t_max.is_finite() && r.t_max > 0.0) {
            return Err(CliError::Config(format!("run.t_max: must be positive, got {}", r.t_max)));
        }
        if r.t_points < 2 {
            return Err(CliError::Config(format!("run.t_points: need at least 2, got {}", r.t_points)));
        }
        if !(r.cutoff.is_finite() && r.cutoff > 0.0) {
            return Err(CliError::Config(format!("run.cutoff: must be positive, got {}", r.cutoff)));
        }
        self.solver
            .integrator()
            .check()
            .map_err(|e| CliError::Config(format!("solver: {e}")))?;
        Ok(())
    }

    pub fn time_grid(&self) -> Vec<f64> {
        ultradeco::ode::uniform_grid(self.run.t_max, self.run.t_points)
    }
}
