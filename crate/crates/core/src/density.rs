//! Joint device-system state in block form, ρ = Σ |μ⟩⟨ν| ⊗ ρ_{μν}.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{ComplexOperator, C64};
use crate::spec::{Tolerances, Violation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDensityMatrix {
    levels: usize,
    dim: usize,
    /// Row-major over (μ, ν).
    blocks: Vec<ComplexOperator>,
}

impl BlockDensityMatrix {
    pub fn zeros(levels: usize, dim: usize) -> Self {
        Self {
            levels,
            dim,
            blocks: vec![ComplexOperator::zeros(dim); levels * levels],
        }
    }

    /// Builds from a full (levels x levels) grid of blocks.
    pub fn from_blocks(levels: usize, blocks: Vec<ComplexOperator>) -> Result<Self> {
        if blocks.len() != levels * levels || levels == 0 {
            return Err(Error::Dimension {
                context: "block count".into(),
                expected: levels * levels,
                found: blocks.len(),
            });
        }
        let dim = blocks[0].dim();
        if let Some(b) = blocks.iter().find(|b| b.dim() != dim) {
            return Err(Error::Dimension {
                context: "block dimension".into(),
                expected: dim,
                found: b.dim(),
            });
        }
        Ok(Self { levels, dim, blocks })
    }

    /// |level⟩⟨level| ⊗ state
    pub fn product(levels: usize, level: usize, state: &ComplexOperator) -> Result<Self> {
        if level >= levels {
            return Err(Error::InvalidInput(format!("device level {level} out of range 0..{levels}")));
        }
        let mut rho = Self::zeros(levels, state.dim());
        *rho.block_mut(level, level) = state.clone();
        Ok(rho)
    }

    /// Block-diagonal state from one block per level.
    pub fn from_diagonal(diag: &[ComplexOperator]) -> Result<Self> {
        let levels = diag.len();
        let dim = diag.first().map(ComplexOperator::dim).unwrap_or(0);
        let mut rho = Self::zeros(levels, dim);
        for (mu, b) in diag.iter().enumerate() {
            if b.dim() != dim {
                return Err(Error::Dimension {
                    context: "diagonal block dimension".into(),
                    expected: dim,
                    found: b.dim(),
                });
            }
            *rho.block_mut(mu, mu) = b.clone();
        }
        Ok(rho)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block(&self, mu: usize, nu: usize) -> &ComplexOperator {
        &self.blocks[mu * self.levels + nu]
    }

    pub fn block_mut(&mut self, mu: usize, nu: usize) -> &mut ComplexOperator {
        &mut self.blocks[mu * self.levels + nu]
    }

    pub fn diagonal_blocks(&self) -> Vec<ComplexOperator> {
        (0..self.levels).map(|mu| self.block(mu, mu).clone()).collect()
    }

    /// Σ_μ tr ρ_{μμ}
    pub fn total_trace(&self) -> C64 {
        (0..self.levels).map(|mu| self.block(mu, mu).trace()).sum()
    }

    /// The full (levels·dim) square matrix; block (μ,ν) occupies rows
    /// [μ·dim, (μ+1)·dim) and the matching columns.
    pub fn assemble_full(&self) -> ComplexOperator {
        let d = self.dim;
        let n = self.levels * d;
        let m = DMatrix::from_fn(n, n, |r, col| self.block(r / d, col / d).get(r % d, col % d));
        ComplexOperator::from_matrix(m).expect("square by construction")
    }

    pub fn disassemble(full: &ComplexOperator, levels: usize) -> Result<Self> {
        let n = full.dim();
        if levels == 0 || !n.is_multiple_of(levels) {
            return Err(Error::Dimension {
                context: format!("full dimension {n} is not a multiple of the level count"),
                expected: levels,
                found: n,
            });
        }
        let d = n / levels;
        let blocks = (0..levels * levels)
            .map(|k| {
                let (mu, nu) = (k / levels, k % levels);
                ComplexOperator::from_fn(d, |i, j| full.get(mu * d + i, nu * d + j))
            })
            .collect();
        Ok(Self {
            levels,
            dim: d,
            blocks,
        })
    }

    /// Largest ‖ρ_{μν} − ρ_{νμ}†‖ entry over all block pairs.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for mu in 0..self.levels {
            for nu in mu..self.levels {
                worst = worst.max(self.block(mu, nu).max_abs_diff(&self.block(nu, mu).adjoint()));
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.assemble_full().min_eigenvalue()
    }

    /// Every density-matrix invariant that does not hold within `tol`.
    pub fn check(&self, tol: &Tolerances) -> Vec<Violation> {
        let mut out = Vec::new();
        let herm = self.hermiticity_defect();
        if herm > tol.hermitian {
            out.push(Violation {
                location: "blocks".into(),
                message: format!("ρ_{{μν}} ≠ ρ_{{νμ}}†: defect {herm:e}"),
            });
        }
        let tr = self.total_trace();
        if (tr.re - 1.0).abs() > tol.trace || tr.im.abs() > tol.trace {
            out.push(Violation {
                location: "trace".into(),
                message: format!("total trace {tr} differs from 1"),
            });
        }
        let min = self.min_eigenvalue();
        if min < -tol.psd {
            out.push(Violation {
                location: "spectrum".into(),
                message: format!("minimum eigenvalue {min:e} is negative"),
            });
        }
        for mu in 0..self.levels {
            let p = self.block(mu, mu).trace();
            if p.im.abs() > tol.trace || p.re < -tol.trace || p.re > 1.0 + tol.trace {
                out.push(Violation {
                    location: format!("population {mu}"),
                    message: format!("p = {p} is not a probability"),
                });
            }
        }
        out
    }

    /// Same block structure in another basis: each block becomes U† ρ_{μν} U.
    pub fn to_basis(&self, u: &DMatrix<C64>) -> Self {
        Self {
            levels: self.levels,
            dim: self.dim,
            blocks: self.blocks.iter().map(|b| b.to_basis(u)).collect(),
        }
    }

    pub fn from_basis(&self, u: &DMatrix<C64>) -> Self {
        Self {
            levels: self.levels,
            dim: self.dim,
            blocks: self.blocks.iter().map(|b| b.from_basis(u)).collect(),
        }
    }

    /// Row-major concatenation of all blocks, for the integrators.
    pub(crate) fn to_flat(&self) -> Vec<C64> {
        let d2 = self.dim * self.dim;
        let mut out = vec![C64::default(); self.blocks.len() * d2];
        for (k, b) in self.blocks.iter().enumerate() {
            b.write_row_major(&mut out[k * d2..(k + 1) * d2]);
        }
        out
    }

    pub(crate) fn from_flat(levels: usize, dim: usize, flat: &[C64]) -> Self {
        let d2 = dim * dim;
        let blocks = (0..levels * levels)
            .map(|k| ComplexOperator::from_row_major(dim, &flat[k * d2..(k + 1) * d2]).expect("sized by caller"))
            .collect();
        Self { levels, dim, blocks }
    }
}
