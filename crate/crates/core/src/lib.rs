//! Exact finite-dimensional simulation of a quantum system monitored
//! continuously by a chain of correlated detectors.
//!
//! Time is a uniform grid `t_k = kε`. The detector memory enters through the
//! kernel matrix `A_ij = ε²α(t_i − t_j)`, the readout noise `z` has density
//! `N(0, A)` on any window, and the system is propagated as a sum over
//! histories of coupling eigenvalues. Everything here is `no_std` with `alloc`.

#![no_std]
// Negated float comparisons are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
#[macro_use]
extern crate std;

pub mod detector;
pub mod error;
pub mod gaussian;
pub mod kernel;
mod math;
pub mod nmsse;
pub mod quantum;

pub use detector::{
    build_paths, conditional_state_x, conditional_state_z, delayed_state, reduced_state,
    vn_measure, ConditionalState, DetectorChain, PathEnsemble, SingleDetector,
};
pub use error::{Error, Result};
pub use gaussian::{GaussianDensity, NoiseKind, NoiseRecord, Schedule};
pub use kernel::{
    build_kernel_matrix, restricted_inverse, KernelMatrix, MemoryKernel, TimeGrid, Window,
};
pub use quantum::{purity, trace_distance, DensityOperator, ModelSpec, C64};
