//! Shared helpers for the integration tests: an independent quadrature
//! oracle for K and a generator of random model specs.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ultradeco::operator::c;
use ultradeco::{ComplexOperator, CouplingSpec, DeviceSpec, ModelSpec, SystemSpec, C64};

/// K_{μν} = ∫_0^∞ e^{−(γ_{μν} + iΩ_{μν})τ} e^{−iHτ} V_{μν} e^{iHτ} dτ by
/// composite Simpson on [0, 40/γ]. The propagator comes from a matrix
/// exponential, not from an eigendecomposition.
pub fn k_by_quadrature(spec: &ModelSpec, mu: usize, nu: usize) -> ComplexOperator {
    let gamma = spec.device.pair_rate(mu, nu);
    let omega = spec.device.energy_gap(mu, nu);
    let v = spec.coupling_block(mu, nu).unwrap().into_matrix();
    let h = spec.system.hamiltonian.matrix().clone();
    let d = h.nrows();

    let h_norm = h.iter().map(|z| z.norm()).sum::<f64>();
    let fastest = gamma.max(omega.abs() + 2.0 * h_norm);
    let tau_max = 40.0 / gamma;
    let mut n = (tau_max * fastest / 0.01).ceil() as usize;
    n += n % 2;
    let step = tau_max / n as f64;

    let u_step: DMatrix<C64> = (h.map(|z| z * c(0.0, -step))).exp();
    let mut u = DMatrix::<C64>::identity(d, d);
    let mut acc = DMatrix::<C64>::zeros(d, d);
    for k in 0..=n {
        let tau = k as f64 * step;
        let weight = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let phase = c(-gamma * tau, -omega * tau).exp();
        let term = &u * &v * u.adjoint();
        acc += term * (phase * weight);
        u = &u_step * u;
    }
    ComplexOperator::from_matrix(acc * c(step / 3.0, 0.0)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_complex<R: Rng>(rng: &mut R, scale: f64) -> C64 {
    c(rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

pub fn random_operator<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> ComplexOperator {
    ComplexOperator::from_fn(dim, |_, _| random_complex(rng, scale))
}

pub fn random_hermitian<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> ComplexOperator {
    random_operator(rng, dim, scale).hermitian_part()
}

/// A random mixed state of rank up to `dim`.
pub fn random_state<R: Rng>(rng: &mut R, dim: usize) -> ComplexOperator {
    let a = random_operator(rng, dim, 1.0);
    let rho = &a * &a.adjoint();
    let tr = rho.trace().re;
    rho.scale_re(1.0 / tr)
}

pub fn random_pure_state<R: Rng>(rng: &mut R, dim: usize) -> ComplexOperator {
    let psi: Vec<C64> = (0..dim).map(|_| random_complex(rng, 1.0)).collect();
    ComplexOperator::pure_state(&psi).unwrap()
}

/// Random unitary from the QR decomposition of a random complex matrix.
pub fn random_unitary<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<C64> {
    random_operator(rng, dim, 1.0).into_matrix().qr().q()
}

/// A random device with 2 or 3 levels, fast dephasing, a small random
/// system Hamiltonian and random couplings on every level pair.
pub fn random_spec(seed: u64) -> ModelSpec {
    let mut r = rng(seed);
    let levels = r.random_range(2..=3);
    let dim = r.random_range(1..=3);
    let energies = (0..levels).map(|_| r.random_range(-1.0..1.0)).collect();
    let rates = (0..levels).map(|_| r.random_range(20.0..60.0)).collect();
    let h = random_hermitian(&mut r, dim, 0.5);
    let mut coupling = CouplingSpec::new();
    for mu in 1..levels {
        for nu in 0..mu {
            coupling.insert(mu, nu, random_operator(&mut r, dim, 0.5));
        }
    }
    ModelSpec::new(DeviceSpec::new(energies, rates), SystemSpec::new(h), coupling)
}
