//! Finite-dimensional states, propagators and the coupling eigensystem.

use alloc::vec::Vec;

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::math;

pub type C64 = Complex<f64>;

/// Tolerance for Hermiticity and normalization of model inputs.
pub const MODEL_TOLERANCE: f64 = 1e-12;
/// Eigenvalues of the coupling closer than this are merged.
pub const DEGENERACY_GAP: f64 = 1e-9;

pub fn c(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

pub fn modulus(z: C64) -> f64 {
    math::sqrt(z.norm_sqr())
}

pub fn pauli_x() -> DMatrix<C64> {
    DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)])
}

pub fn pauli_y() -> DMatrix<C64> {
    DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)])
}

pub fn pauli_z() -> DMatrix<C64> {
    DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)])
}

pub fn basis_state(dim: usize, k: usize) -> DVector<C64> {
    DVector::from_fn(dim, |i, _| if i == k { c(1.0, 0.0) } else { c(0.0, 0.0) })
}

/// `(|0⟩ + |1⟩)/√2`.
pub fn plus_state() -> DVector<C64> {
    let s = core::f64::consts::FRAC_1_SQRT_2;
    DVector::from_vec(alloc::vec![c(s, 0.0), c(s, 0.0)])
}

/// System under measurement: Hamiltonian (ħ = 1), coupled observable and
/// initial pure state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    hamiltonian: DMatrix<C64>,
    coupling: DMatrix<C64>,
    initial_state: DVector<C64>,
}

impl ModelSpec {
    pub fn new(
        hamiltonian: DMatrix<C64>,
        coupling: DMatrix<C64>,
        initial_state: DVector<C64>,
    ) -> Result<Self> {
        let d = initial_state.len();
        if d == 0 {
            return Err(invalid("model dimension must be positive"));
        }
        for (what, m) in [("hamiltonian", &hamiltonian), ("coupling", &coupling)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: d,
                    found: m.nrows(),
                });
            }
            if (m - m.adjoint())
                .iter()
                .any(|e| modulus(*e) > MODEL_TOLERANCE)
            {
                return Err(invalid(alloc::format!("{what} is not Hermitian")));
            }
        }
        if (initial_state.norm() - 1.0).abs() > MODEL_TOLERANCE {
            return Err(invalid("initial state is not normalized"));
        }
        Ok(Self {
            hamiltonian,
            coupling,
            initial_state,
        })
    }

    /// Driven qubit `H = σ_x`, coupling `σ_z`, starting in `|0⟩`.
    pub fn default_qubit() -> Self {
        Self::new(pauli_x(), pauli_z(), basis_state(2, 0)).expect("valid default model")
    }

    /// Pure dephasing `H = 0`, coupling `σ_z`, starting in `|+⟩`.
    pub fn dephasing_qubit() -> Self {
        Self::new(DMatrix::zeros(2, 2), pauli_z(), plus_state()).expect("valid dephasing model")
    }

    pub fn dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn hamiltonian(&self) -> &DMatrix<C64> {
        &self.hamiltonian
    }

    pub fn coupling(&self) -> &DMatrix<C64> {
        &self.coupling
    }

    pub fn initial_state(&self) -> &DVector<C64> {
        &self.initial_state
    }

    pub fn initial_density(&self) -> DensityOperator {
        DensityOperator::from_pure(&self.initial_state)
    }

    /// Same model with a different coupling observable.
    pub fn with_coupling(&self, coupling: DMatrix<C64>) -> Result<Self> {
        Self::new(
            self.hamiltonian.clone(),
            coupling,
            self.initial_state.clone(),
        )
    }

    pub fn with_initial_state(&self, state: DVector<C64>) -> Result<Self> {
        Self::new(self.hamiltonian.clone(), self.coupling.clone(), state)
    }
}

/// `exp(−iHτ)` through the eigendecomposition of `H`.
pub fn free_step(model: &ModelSpec, tau: f64) -> DMatrix<C64> {
    hermitian_function(model.hamiltonian(), |e| {
        let phase = -e * tau;
        c(math::cos(phase), math::sin(phase))
    })
}

/// `f(M)` for Hermitian `M`.
pub fn hermitian_function(m: &DMatrix<C64>, f: impl Fn(f64) -> C64) -> DMatrix<C64> {
    let eig = m.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let diag = DMatrix::from_diagonal(&DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&e| f(e)),
    ));
    v * diag * v.adjoint()
}

/// Spectral decomposition `x̂ = Σ_a X_a P_a` with degenerate eigenvalues merged.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingEigensystem {
    eigenvalues: Vec<f64>,
    projectors: Vec<DMatrix<C64>>,
}

impl CouplingEigensystem {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn projectors(&self) -> &[DMatrix<C64>] {
        &self.projectors
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

pub fn eigendecompose_coupling(model: &ModelSpec) -> CouplingEigensystem {
    let eig = model.coupling().clone().symmetric_eigen();
    let d = model.dim();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut eigenvalues = Vec::new();
    let mut projectors: Vec<DMatrix<C64>> = Vec::new();
    let mut members: Vec<usize> = Vec::new();
    let flush = |members: &mut Vec<usize>,
                 eigenvalues: &mut Vec<f64>,
                 projectors: &mut Vec<DMatrix<C64>>| {
        if members.is_empty() {
            return;
        }
        let mean = members.iter().map(|&k| eig.eigenvalues[k]).sum::<f64>() / members.len() as f64;
        let mut p = DMatrix::zeros(d, d);
        for &k in members.iter() {
            let v = eig.eigenvectors.column(k);
            p += v * v.adjoint();
        }
        eigenvalues.push(mean);
        projectors.push(p);
        members.clear();
    };
    for &k in &order {
        if let Some(&last) = members.last() {
            if eig.eigenvalues[k] - eig.eigenvalues[last] >= DEGENERACY_GAP {
                flush(&mut members, &mut eigenvalues, &mut projectors);
            }
        }
        members.push(k);
    }
    flush(&mut members, &mut eigenvalues, &mut projectors);
    CouplingEigensystem {
        eigenvalues,
        projectors,
    }
}

/// Density operator of the system.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    matrix: DMatrix<C64>,
}

impl DensityOperator {
    pub fn from_pure(psi: &DVector<C64>) -> Self {
        let n = psi.norm_squared();
        Self {
            matrix: psi * psi.adjoint() / c(n, 0.0),
        }
    }

    /// Normalizes to unit trace and removes the anti-Hermitian rounding part.
    pub fn from_unnormalized(m: DMatrix<C64>) -> Self {
        let tr = m.trace().re;
        let h = (&m + m.adjoint()) * c(0.5 / tr, 0.0);
        Self { matrix: h }
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn purity(&self) -> f64 {
        purity(self)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.matrix
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect()
    }

    /// `Tr(ρ O)`.
    pub fn expectation(&self, observable: &DMatrix<C64>) -> C64 {
        (&self.matrix * observable).trace()
    }

    /// `UρU†`.
    pub fn evolve(&self, u: &DMatrix<C64>) -> Self {
        Self {
            matrix: u * &self.matrix * u.adjoint(),
        }
    }

    /// Hermitian, unit trace and PSD within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let herm = (&self.matrix - self.matrix.adjoint())
            .iter()
            .all(|e| modulus(*e) <= tol);
        herm && (self.trace() - 1.0).abs() <= tol && self.eigenvalues().iter().all(|&e| e >= -tol)
    }
}

/// `Tr ρ²`.
pub fn purity(rho: &DensityOperator) -> f64 {
    rho.matrix.iter().map(|e| e.norm_sqr()).sum()
}

/// `½‖ρ₁ − ρ₂‖₁`.
pub fn trace_distance(a: &DensityOperator, b: &DensityOperator) -> f64 {
    let diff = &a.matrix - &b.matrix;
    let herm = (&diff + diff.adjoint()) * c(0.5, 0.0);
    0.5 * herm
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|e| e.abs())
        .sum::<f64>()
}
