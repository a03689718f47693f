//! Discrete Gaussian functionals of pointer and readout records.
//!
//! Readouts `z` have covariance `A` (precision `A⁻¹`); raw pointers `x` have
//! precision `4A` over the detector universe, hence covariance `¼A⁻¹`. The map
//! `z = 2Ax` carries one onto the other. Everything is kept in log-space.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::{spd_inverse, KernelMatrix, Window};
use crate::math;

/// Which detector variable a record holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Smoothed readouts `z = 2Ax`.
    Readout,
    /// Raw pointer coordinates `x`.
    Pointer,
}

/// When each pointer is read relative to its label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    ZeroDelay,
    Delayed { delay: f64 },
    AllInOne,
}

/// Readout or pointer values over a window of grid steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub window: Window,
    pub kind: NoiseKind,
    pub schedule: Schedule,
    pub values: DVector<f64>,
}

impl NoiseRecord {
    pub fn new(
        window: Window,
        kind: NoiseKind,
        schedule: Schedule,
        values: DVector<f64>,
    ) -> Result<Self> {
        if values.len() != window.len() {
            return Err(Error::DimensionMismatch {
                what: "noise record",
                expected: window.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            window,
            kind,
            schedule,
            values,
        })
    }

    pub fn readout(window: Window, values: DVector<f64>) -> Result<Self> {
        Self::new(window, NoiseKind::Readout, Schedule::ZeroDelay, values)
    }

    pub fn pointer(window: Window, values: DVector<f64>) -> Result<Self> {
        Self::new(window, NoiseKind::Pointer, Schedule::ZeroDelay, values)
    }

    /// Values restricted to a sub-window.
    pub fn restrict(&self, window: Window) -> Result<NoiseRecord> {
        if !self.window.contains_window(&window) {
            return Err(Error::InvalidWindow {
                start: window.start,
                end: window.end,
                n_steps: self.window.end,
            });
        }
        let offset = window.start.saturating_sub(self.window.start);
        let values = self.values.rows(offset, window.len()).into_owned();
        Ok(NoiseRecord {
            window,
            kind: self.kind,
            schedule: self.schedule,
            values,
        })
    }
}

/// Multivariate normal density over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    window: Window,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(window: Window, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = window.len();
        if mean.len() != n || covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "gaussian density",
                expected: n,
                found: mean.len(),
            });
        }
        let (precision, _) = spd_inverse(&covariance)?;
        let chol =
            nalgebra::Cholesky::new(covariance.clone()).ok_or(Error::NotPositiveDefinite {
                min_eigenvalue: f64::NAN,
                norm: covariance.amax(),
            })?;
        let l = chol.l();
        let logdet: f64 = 2.0 * (0..n).map(|i| math::ln(l[(i, i)])).sum::<f64>();
        let log_norm = -0.5 * (n as f64 * math::ln(2.0 * math::PI) + logdet);
        Ok(Self {
            window,
            mean,
            covariance,
            precision,
            chol_lower: l,
            log_norm,
        })
    }

    pub fn centered(window: Window, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(window, DVector::zeros(window.len()), covariance)
    }

    /// Marginal of the readout functional `G̃` on `window`: covariance `A[w,w]`.
    pub fn readout_prior(a: &KernelMatrix, window: Window) -> Result<Self> {
        Self::centered(window, a.block(window, window)?)
    }

    /// Marginal of the pointer functional `G` on `window`. The full functional
    /// lives on `a.window()` with covariance `¼A⁻¹`; the marginal keeps the
    /// corresponding block.
    pub fn pointer_prior(a: &KernelMatrix, window: Window) -> Result<Self> {
        let (inverse, _) = spd_inverse(a.entries())?;
        let offset = window
            .start
            .checked_sub(a.window().start)
            .filter(|_| a.window().contains_window(&window));
        let offset = offset.ok_or(Error::InvalidWindow {
            start: window.start,
            end: window.end,
            n_steps: a.window().end,
        })?;
        let cov = inverse.view((offset, offset), (window.len(), window.len())) * 0.25;
        Self::centered(window, cov)
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_normalization(&self) -> f64 {
        self.log_norm
    }

    pub fn log_density(&self, values: &DVector<f64>) -> f64 {
        let d = values - &self.mean;
        self.log_norm - 0.5 * d.dot(&(&self.precision * &d))
    }

    /// Density of the sub-window obtained by integrating out the rest.
    pub fn marginal(&self, sub: Window) -> Result<GaussianDensity> {
        if !self.window.contains_window(&sub) {
            return Err(Error::InvalidWindow {
                start: sub.start,
                end: sub.end,
                n_steps: self.window.end,
            });
        }
        let o = sub.start.saturating_sub(self.window.start);
        let n = sub.len();
        GaussianDensity::new(
            sub,
            self.mean.rows(o, n).into_owned(),
            self.covariance.view((o, o), (n, n)).into_owned(),
        )
    }

    /// `log G[v − s] − log G[v]` as a function of `v`.
    pub fn shift(&self, shift: &DVector<f64>) -> ShiftRatio {
        let precision_shift = &self.precision * shift;
        let offset = -0.5 * shift.dot(&precision_shift);
        ShiftRatio {
            mean: self.mean.clone(),
            precision_shift,
            offset,
        }
    }

    /// `count` draws `μ + L·ξ`; draw `i` uses ChaCha stream `i` of `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        (0..count)
            .map(|i| self.sample_one(seed, i as u64))
            .collect()
    }

    /// Draw number `index` of the stream family rooted at `seed`.
    pub fn sample_one(&self, seed: u64, index: u64) -> DVector<f64> {
        let mut rng = substream(seed, index);
        let xi = DVector::from_fn(self.window.len(), |_, _| StandardNormal.sample(&mut rng));
        &self.mean + &self.chol_lower * xi
    }
}

/// Counter-based generator for sample `index`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Log ratio of a Gaussian density at a shifted argument.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRatio {
    mean: DVector<f64>,
    precision_shift: DVector<f64>,
    offset: f64,
}

impl ShiftRatio {
    pub fn eval(&self, values: &DVector<f64>) -> f64 {
        (values - &self.mean).dot(&self.precision_shift) + self.offset
    }
}

/// `log G̃_w[z]`, the readout marginal on `z.window`.
pub fn gtilde_logdensity(z: &NoiseRecord, a: &KernelMatrix) -> Result<f64> {
    Ok(GaussianDensity::readout_prior(a, z.window)?.log_density(&z.values))
}

/// `log G_w[x]`, the pointer marginal on `x.window` of the functional on `a.window()`.
pub fn g_logdensity(x: &NoiseRecord, a: &KernelMatrix) -> Result<f64> {
    Ok(GaussianDensity::pointer_prior(a, x.window)?.log_density(&x.values))
}

/// `count` readout records drawn from `G̃` over `a.window()`.
pub fn sample_gtilde(a: &KernelMatrix, count: usize, seed: u64) -> Result<Vec<NoiseRecord>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let window = a.window();
    let l = crate::kernel::cholesky(a)?;
    let mean = DVector::zeros(window.len());
    let draws = (0..count as u64).map(|i| {
        let mut rng = substream(seed, i);
        let xi = DVector::from_fn(window.len(), |_, _| StandardNormal.sample(&mut rng));
        NoiseRecord::readout(window, &mean + &l * xi).expect("window length")
    });
    Ok(draws.collect())
}

/// Gauss–Hermite rule for the standard normal: nodes and weights with
/// `Σ wᵢ f(uᵢ) ≈ E[f(u)]`, exact for polynomials up to degree `2n−1`.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    if n == 0 {
        return Vec::new();
    }
    // Golub–Welsch on the Jacobi matrix of the probabilists' Hermite family.
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            math::sqrt(i.max(j) as f64)
        } else {
            0.0
        }
    });
    let eig = jacobi.symmetric_eigen();
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            (
                eig.eigenvalues[k],
                eig.eigenvectors[(0, k)] * eig.eigenvectors[(0, k)],
            )
        })
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}
