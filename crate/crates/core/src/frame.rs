//! Eigenbasis of the system Hamiltonian and interaction-picture transforms.

use nalgebra::DMatrix;

use crate::operator::{c, ComplexOperator, C64};

/// H_Q = U diag(E) U†, computed once per run.
#[derive(Debug, Clone)]
pub struct Eigenbasis {
    pub energies: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

impl Eigenbasis {
    pub fn of(h: &ComplexOperator) -> Self {
        if h.is_zero(0.0) {
            return Self {
                energies: vec![0.0; h.dim()],
                vectors: DMatrix::identity(h.dim(), h.dim()),
            };
        }
        let (energies, vectors) = h.eigh();
        Self { energies, vectors }
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn is_trivial(&self) -> bool {
        self.energies.iter().all(|e| *e == 0.0)
    }

    /// U† A U
    pub fn to_eigen(&self, a: &ComplexOperator) -> ComplexOperator {
        a.to_basis(&self.vectors)
    }

    /// U A U†
    pub fn from_eigen(&self, a: &ComplexOperator) -> ComplexOperator {
        a.from_basis(&self.vectors)
    }

    /// e^{iHt} A e^{-iHt}
    pub fn interaction(&self, a: &ComplexOperator, t: f64) -> ComplexOperator {
        self.rotate(a, t)
    }

    /// e^{-iHt} A e^{iHt}
    pub fn schrodinger(&self, a: &ComplexOperator, t: f64) -> ComplexOperator {
        self.rotate(a, -t)
    }

    fn rotate(&self, a: &ComplexOperator, t: f64) -> ComplexOperator {
        if self.is_trivial() || t == 0.0 {
            return a.clone();
        }
        let e = &self.energies;
        let tilde = self.to_eigen(a);
        let rotated = ComplexOperator::from_fn(self.dim(), |i, j| tilde.get(i, j) * c(0.0, (e[i] - e[j]) * t).exp());
        self.from_eigen(&rotated)
    }
}
