//! Simulation of measurement devices in the ultradecoherence limit.
//!
//! A device with levels `0..=M` (0 is the ready state) dephases quickly in its
//! level basis while it is coupled to a measured system Q. This crate
//!
//! * integrates the joint master equation exactly ([`lindblad`]),
//! * eliminates the fast coherences to obtain a reduced rate model
//!   ([`reduction`]),
//! * turns the reduced model into a first-click jump process with survival
//!   curves, first-step distributions and sampled trajectories ([`jump`]),
//! * and provides the three reference devices with their closed forms
//!   ([`models`]).

pub mod density;
pub mod error;
pub mod export;
pub mod frame;
pub mod jump;
pub mod lindblad;
pub mod models;
pub mod ode;
pub mod reduction;
pub mod operator;
pub mod parallel;
pub mod spec;
pub mod sweep;

pub use density::BlockDensityMatrix;
pub use error::{Error, Result};
pub use jump::{ClickEvent, FirstClickSampler, FirstStepDistribution, SurvivalCurve, Trajectory};
pub use ode::{IntegratorConfig, Method};
pub use operator::{ComplexOperator, C64};
pub use parallel::Execution;
pub use reduction::{compute_reduced, KMode, ReducedModel};
pub use spec::{CouplingSpec, DeviceSpec, ModelSpec, SystemSpec, Tolerances, Violation};
