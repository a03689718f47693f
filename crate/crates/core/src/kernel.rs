//! Time discretization and the memory kernel on the grid.
//!
//! Continuum double integrals `∫∫ f(τ) α(τ−σ) f(σ)` become `fᵀ A f` with
//! `A_ij = ε²·α(t_i − t_j)`. Readouts are per-step integrated quantities, so a
//! readout vector drawn from the kernel has covariance exactly `A`.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::math;

/// Relative tolerance below which a negative eigenvalue still counts as PSD.
pub const PSD_TOLERANCE: f64 = 1e-12;
/// Largest condition number accepted for a window submatrix.
pub const MAX_CONDITION: f64 = 1e12;
/// Maximum entrywise residual of `A_w⁻¹·A_w − I`.
pub const INVERSE_RESIDUAL: f64 = 1e-10;

/// Uniform left-endpoint grid `t_k = k·ε`, `k = 0..n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    epsilon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(epsilon: f64, n_steps: usize) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(invalid("time step must be positive and finite"));
        }
        if n_steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        Ok(Self { epsilon, n_steps })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Label time of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.epsilon
    }

    pub fn duration(&self) -> f64 {
        self.n_steps as f64 * self.epsilon
    }

    pub fn full(&self) -> Window {
        Window::prefix(self.n_steps)
    }

    /// Steps read out by time `t`: `{k : t_k < t}`.
    pub fn window_until(&self, t: f64) -> Result<Window> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(invalid("time must be non-negative"));
        }
        let n = libm::ceil(t / self.epsilon - 1e-9).max(0.0) as usize;
        if n > self.n_steps {
            return Err(Error::InvalidWindow {
                start: 0,
                end: n,
                n_steps: self.n_steps,
            });
        }
        Ok(Window::prefix(n))
    }

    /// Number of whole steps in a duration, rejecting non-multiples of ε.
    pub fn steps_in(&self, duration: f64) -> Result<usize> {
        let steps = duration / self.epsilon;
        let rounded = libm::round(steps);
        if !(duration >= 0.0) || (steps - rounded).abs() > 1e-9 * rounded.max(1.0) {
            return Err(invalid(
                "duration must be a non-negative multiple of the time step",
            ));
        }
        Ok(rounded as usize)
    }

    pub fn check(&self, window: Window) -> Result<()> {
        if window.start > window.end || window.end > self.n_steps {
            return Err(Error::InvalidWindow {
                start: window.start,
                end: window.end,
                n_steps: self.n_steps,
            });
        }
        Ok(())
    }
}

/// Half-open range of grid step indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub const fn prefix(n: usize) -> Self {
        Self { start: 0, end: n }
    }

    pub const fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn contains_window(&self, other: &Window) -> bool {
        other.is_empty() || (other.start >= self.start && other.end <= self.end)
    }

    pub fn indices(&self) -> core::ops::Range<usize> {
        self.start..self.end
    }
}

/// Reservoir correlation function `α(τ)`, real and even.
#[derive(Debug, Clone, PartialEq)]
pub enum MemoryKernel {
    /// `α(τ) = amplitude·e^{−λ|τ|}`; the detector-inertia case uses amplitude `λ/2`.
    Exponential { lambda: f64, amplitude: f64 },
    /// `α(τ) = g²δ(τ)`, discretized with `δ(0) → 1/ε`.
    MarkovDelta { g: f64 },
    /// Samples `(lag, value)` with ascending lags starting at 0; linear
    /// interpolation in between and zero beyond the last lag.
    Tabulated { lags: Vec<f64>, values: Vec<f64> },
}

impl MemoryKernel {
    /// Exponential kernel with the canonical amplitude `λ/2`, so that
    /// `2∫₀^∞ α = 1`.
    pub fn exponential(lambda: f64) -> Self {
        MemoryKernel::Exponential {
            lambda,
            amplitude: lambda / 2.0,
        }
    }

    pub fn markov(g: f64) -> Self {
        MemoryKernel::MarkovDelta { g }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MemoryKernel::Exponential { lambda, amplitude } => {
                if !(lambda.is_finite() && *lambda > 0.0) {
                    return Err(invalid("exponential kernel rate must be positive"));
                }
                if !(amplitude.is_finite() && *amplitude > 0.0) {
                    return Err(invalid("exponential kernel amplitude must be positive"));
                }
            }
            MemoryKernel::MarkovDelta { g } => {
                if !g.is_finite() {
                    return Err(invalid("Markov coupling must be finite"));
                }
            }
            MemoryKernel::Tabulated { lags, values } => {
                if lags.is_empty() || lags.len() != values.len() {
                    return Err(invalid(
                        "tabulated kernel needs matching, non-empty lag and value arrays",
                    ));
                }
                if lags[0] != 0.0 {
                    return Err(invalid("tabulated kernel must start at lag 0"));
                }
                if lags.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(invalid("tabulated lags must be strictly increasing"));
                }
                if lags.iter().chain(values.iter()).any(|v| !v.is_finite()) {
                    return Err(invalid("tabulated kernel contains non-finite entries"));
                }
            }
        }
        Ok(())
    }

    /// Continuum value away from any delta singularity. The Markov kernel
    /// returns 0 for every lag including 0.
    pub fn value(&self, lag: f64) -> f64 {
        let lag = lag.abs();
        match self {
            MemoryKernel::Exponential { lambda, amplitude } => amplitude * math::exp(-lambda * lag),
            MemoryKernel::MarkovDelta { .. } => 0.0,
            MemoryKernel::Tabulated { lags, values } => interpolate(lags, values, lag),
        }
    }

    /// Kernel value seen by the lattice at a lag of `steps` grid steps.
    pub fn lattice_value(&self, steps: usize, epsilon: f64) -> f64 {
        match self {
            MemoryKernel::MarkovDelta { g } => {
                if steps == 0 {
                    g * g / epsilon
                } else {
                    0.0
                }
            }
            _ => self.value(steps as f64 * epsilon),
        }
    }

    /// `∫₀ᵗ∫₀ᵗ α(τ−σ) dτ dσ`, closed form where available.
    pub fn double_integral(&self, t: f64) -> f64 {
        match self {
            MemoryKernel::Exponential { lambda, amplitude } => {
                2.0 * amplitude * (t / lambda - (1.0 - math::exp(-lambda * t)) / (lambda * lambda))
            }
            MemoryKernel::MarkovDelta { g } => g * g * t,
            MemoryKernel::Tabulated { .. } => {
                // 2∫₀ᵗ (t−u) α(u) du by composite Simpson
                let n = 4096;
                let h = t / n as f64;
                let f = |u: f64| (t - u) * self.value(u);
                let mut acc = f(0.0) + f(t);
                for i in 1..n {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    acc += w * f(i as f64 * h);
                }
                2.0 * acc * h / 3.0
            }
        }
    }
}

fn interpolate(lags: &[f64], values: &[f64], lag: f64) -> f64 {
    let last = lags.len() - 1;
    if lag > lags[last] {
        return 0.0;
    }
    if last == 0 || lag <= 0.0 {
        return values[0];
    }
    let i = lags.partition_point(|&l| l <= lag).min(last);
    let (l0, l1) = (lags[i - 1], lags[i]);
    let (v0, v1) = (values[i - 1], values[i]);
    v0 + (v1 - v0) * (lag - l0) / (l1 - l0)
}

/// Symmetric kernel matrix `A_ij = ε²α(t_i − t_j)` over a window of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    window: Window,
    entries: DMatrix<f64>,
    min_eigenvalue: f64,
    norm: f64,
}

impl KernelMatrix {
    /// Wraps explicit entries; `window.len()` must match the matrix size.
    pub fn from_entries(window: Window, entries: DMatrix<f64>) -> Result<Self> {
        let n = window.len();
        if entries.nrows() != n || entries.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "kernel matrix",
                expected: n,
                found: entries.nrows(),
            });
        }
        for i in 0..n {
            for j in 0..i {
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(invalid("kernel matrix must be exactly symmetric"));
                }
            }
        }
        let (min_eigenvalue, norm) = if n == 0 {
            (0.0, 0.0)
        } else {
            let eig = entries.clone().symmetric_eigen();
            let min = eig
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (min, max_abs)
        };
        if min_eigenvalue < -PSD_TOLERANCE * norm || min_eigenvalue.is_nan() {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue,
                norm,
            });
        }
        Ok(Self {
            window,
            entries,
            min_eigenvalue,
            norm,
        })
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    /// Spectral norm.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Entry at global grid indices.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i - self.window.start, j - self.window.start)]
    }

    /// Block `A[rows, cols]` addressed by global grid indices.
    pub fn block(&self, rows: Window, cols: Window) -> Result<DMatrix<f64>> {
        for w in [rows, cols] {
            if !self.window.contains_window(&w) {
                return Err(Error::InvalidWindow {
                    start: w.start,
                    end: w.end,
                    n_steps: self.window.end,
                });
            }
        }
        let (r0, c0) = (
            rows.start.saturating_sub(self.window.start),
            cols.start.saturating_sub(self.window.start),
        );
        Ok(self
            .entries
            .view((r0, c0), (rows.len(), cols.len()))
            .into_owned())
    }

    /// The kernel matrix of a sub-window.
    pub fn restrict(&self, window: Window) -> Result<KernelMatrix> {
        let block = self.block(window, window)?;
        KernelMatrix::from_entries(window, block)
    }

    /// `Σ_{i,j ∈ window} A_ij`.
    pub fn window_sum(&self, window: Window) -> Result<f64> {
        Ok(self.block(window, window)?.sum())
    }

    pub fn restricted_inverse(&self, window: Window) -> Result<RestrictedInverse> {
        restricted_inverse(self, window)
    }

    pub fn cholesky(&self) -> Result<DMatrix<f64>> {
        cholesky(self)
    }
}

/// Builds `A` over `window`, checking symmetry and positive semidefiniteness.
pub fn build_kernel_matrix(
    kernel: &MemoryKernel,
    grid: &TimeGrid,
    window: Window,
) -> Result<KernelMatrix> {
    kernel.validate()?;
    grid.check(window)?;
    let eps = grid.epsilon();
    let n = window.len();
    // Toeplitz: one evaluation per lag, mirrored so symmetry is exact.
    let lags: Vec<f64> = (0..n)
        .map(|l| eps * eps * kernel.lattice_value(l, eps))
        .collect();
    let entries = DMatrix::from_fn(n, n, |i, j| lags[i.abs_diff(j)]);
    KernelMatrix::from_entries(window, entries)
}

/// Inverse of a window submatrix of the full-grid kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedInverse {
    window: Window,
    entries: DMatrix<f64>,
    condition: f64,
}

impl RestrictedInverse {
    pub fn window(&self) -> Window {
        self.window
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }
}

/// Inverts `A[window, window]`, rejecting ill-conditioned blocks.
pub fn restricted_inverse(a: &KernelMatrix, window: Window) -> Result<RestrictedInverse> {
    let block = a.block(window, window)?;
    let (inverse, condition) = spd_inverse(&block)?;
    Ok(RestrictedInverse {
        window,
        entries: inverse,
        condition,
    })
}

/// Inverse of a symmetric positive definite matrix together with its
/// condition number.
pub(crate) fn spd_inverse(block: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = block.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), 1.0));
    }
    let eig = block.clone().symmetric_eigen();
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularWindow { condition });
    }
    let chol = nalgebra::Cholesky::new(block.clone()).ok_or(Error::SingularWindow { condition })?;
    let mut inverse = chol.inverse();
    // symmetrize away rounding asymmetry
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inverse[(i, j)] + inverse[(j, i)]);
            inverse[(i, j)] = m;
            inverse[(j, i)] = m;
        }
    }
    let residual = (&inverse * block - DMatrix::<f64>::identity(n, n)).amax();
    if residual > INVERSE_RESIDUAL {
        return Err(Error::SingularWindow { condition });
    }
    Ok((inverse, condition))
}

/// Lower-triangular `L` with `L·Lᵀ = A`. A PSD but singular matrix gets a
/// diagonal jitter of `1e−12·‖A‖` before factorization.
pub fn cholesky(a: &KernelMatrix) -> Result<DMatrix<f64>> {
    let m = a.entries().clone();
    if let Some(c) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(c.l());
    }
    let jitter = PSD_TOLERANCE * a.norm();
    let mut shifted = m;
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += jitter;
    }
    nalgebra::Cholesky::new(shifted)
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite {
            min_eigenvalue: a.min_eigenvalue(),
            norm: a.norm(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use nalgebra::dmatrix;

    fn grid(eps: f64, n: usize) -> TimeGrid {
        TimeGrid::new(eps, n).unwrap()
    }

    #[test]
    fn exponential_zero_lag() {
        let g = grid(0.1, 4);
        let a = build_kernel_matrix(&MemoryKernel::exponential(2.0), &g, g.full()).unwrap();
        for i in 0..4 {
            assert!((a.get(i, i) - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn markov_is_scaled_identity() {
        let g = grid(0.1, 5);
        let a = build_kernel_matrix(&MemoryKernel::markov(1.0), &g, g.full()).unwrap();
        let expected = DMatrix::<f64>::identity(5, 5) * 0.1;
        assert!((a.entries() - expected).amax() < 1e-16);
    }

    #[test]
    fn exponential_three_steps_matches_scalar_evaluation() {
        let g = grid(0.5, 3);
        let a = build_kernel_matrix(&MemoryKernel::exponential(1.0), &g, g.full()).unwrap();
        // independent per-lag evaluation of (λ/2)e^{−λ|τ|}
        let alpha = |lag: f64| 0.5 * libm::exp(-lag.abs());
        for i in 0..3 {
            for j in 0..3 {
                let want = alpha((i as f64 - j as f64) * 0.5);
                assert!((a.get(i, j) / 0.25 - want).abs() < 1e-15);
            }
        }
        assert!((a.get(0, 1) / 0.25 - 0.5 * libm::exp(-0.5)).abs() < 1e-15);
        assert!((a.get(0, 2) / 0.25 - 0.5 * libm::exp(-1.0)).abs() < 1e-15);
    }

    #[test]
    fn invalid_tabulated_kernel_is_rejected() {
        let g = grid(0.1, 6);
        let k = MemoryKernel::Tabulated {
            lags: vec![0.0, 0.1, 0.2],
            values: vec![-1.0, 0.5, 0.1],
        };
        assert!(matches!(
            build_kernel_matrix(&k, &g, g.full()),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let k = MemoryKernel::Tabulated {
            lags: vec![0.0, 0.2, 0.1],
            values: vec![1.0, 0.5, 0.1],
        };
        assert!(matches!(
            build_kernel_matrix(&k, &g, g.full()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn tabulated_matches_exponential_at_nodes() {
        let g = grid(0.1, 6);
        let lags: Vec<f64> = (0..10).map(|k| k as f64 * 0.1).collect();
        let values: Vec<f64> = lags.iter().map(|l| 0.5 * libm::exp(-l)).collect();
        let tab =
            build_kernel_matrix(&MemoryKernel::Tabulated { lags, values }, &g, g.full()).unwrap();
        let exp = build_kernel_matrix(&MemoryKernel::exponential(1.0), &g, g.full()).unwrap();
        assert!((tab.entries() - exp.entries()).amax() < 1e-15);
    }

    #[test]
    fn diagonal_inverse() {
        let w = Window::prefix(3);
        let a = KernelMatrix::from_entries(w, DMatrix::identity(3, 3) * 4.0).unwrap();
        let inv = restricted_inverse(&a, w).unwrap();
        assert!((inv.entries() - DMatrix::<f64>::identity(3, 3) * 0.25).amax() < 1e-15);
    }

    #[test]
    fn two_by_two_closed_form_inverse() {
        let (p, q) = (3.0, 1.25);
        let w = Window::prefix(2);
        let a = KernelMatrix::from_entries(w, dmatrix![p, q; q, p]).unwrap();
        let inv = restricted_inverse(&a, w).unwrap();
        let closed = dmatrix![p, -q; -q, p] / (p * p - q * q);
        assert!((inv.entries() - &closed).amax() < 1e-14);
        // the closed form solves A·y = b
        let b = nalgebra::dvector![0.3, -1.7];
        let y = &closed * &b;
        assert!((a.entries() * y - b).amax() < 1e-14);
    }

    #[test]
    fn full_window_restricted_inverse_is_full_inverse() {
        let g = grid(0.2, 5);
        let a = build_kernel_matrix(&MemoryKernel::exponential(1.5), &g, g.full()).unwrap();
        let inv = restricted_inverse(&a, g.full()).unwrap();
        let direct = a.entries().clone().try_inverse().unwrap();
        assert!((inv.entries() - direct).amax() / inv.entries().amax() < 1e-12);
    }

    #[test]
    fn singular_window_detected() {
        let w = Window::prefix(2);
        let a = KernelMatrix::from_entries(w, dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        assert!(matches!(
            restricted_inverse(&a, w),
            Err(Error::SingularWindow { .. })
        ));
    }

    #[test]
    fn cholesky_examples() {
        let w = Window::prefix(2);
        let id = KernelMatrix::from_entries(w, DMatrix::identity(2, 2)).unwrap();
        assert!((cholesky(&id).unwrap() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
        let a = KernelMatrix::from_entries(w, dmatrix![4.0, 2.0; 2.0, 5.0]).unwrap();
        let l = cholesky(&a).unwrap();
        assert!((&l - dmatrix![2.0, 0.0; 1.0, 2.0]).amax() < 1e-15);
        assert!((&l * l.transpose() - a.entries()).amax() < 1e-14);

        let g = grid(0.1, 4);
        let m = build_kernel_matrix(&MemoryKernel::markov(1.5), &g, g.full()).unwrap();
        let l = cholesky(&m).unwrap();
        let want = DMatrix::<f64>::identity(4, 4) * (libm::sqrt(0.1) * 1.5);
        assert!((l - want).amax() < 1e-15);
    }

    #[test]
    fn cholesky_jitters_singular_psd() {
        let w = Window::prefix(2);
        let a = KernelMatrix::from_entries(w, dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        let l = cholesky(&a).unwrap();
        assert!((&l * l.transpose() - a.entries()).amax() < 1e-10);
    }

    #[test]
    fn window_until_is_left_endpoint() {
        let g = grid(0.1, 8);
        assert_eq!(g.window_until(0.8).unwrap(), Window::prefix(8));
        assert_eq!(g.window_until(0.35).unwrap(), Window::prefix(4));
        assert_eq!(g.window_until(0.0).unwrap(), Window::prefix(0));
        assert!(g.window_until(0.95).is_err());
        assert_eq!(g.steps_in(0.3).unwrap(), 3);
        assert!(g.steps_in(0.25).is_err());
    }

    #[test]
    fn double_integral_exponential_closed_form() {
        let k = MemoryKernel::exponential(2.0);
        let t = 1.3;
        let want = t - (1.0 - libm::exp(-2.0 * t)) / 2.0;
        assert!((k.double_integral(t) - want).abs() < 1e-14);
        let lags: Vec<f64> = (0..=4000).map(|i| i as f64 * 0.001).collect();
        let values: Vec<f64> = lags.iter().map(|&l| k.value(l)).collect();
        let tab = MemoryKernel::Tabulated { lags, values };
        assert!((tab.double_integral(t) - want).abs() < 1e-6);
    }
}
