//! Trajectories of the non-Markovian stochastic Schrödinger equation.
//!
//! The unnormalized conditional state is evaluated from its explicit
//! time-ordered form: over the readout window `w = [0, n)`
//!
//! `Ψ_t[z] = Σ_a v_a exp(zᵀX^a − X^aᵀA_w X^a)`
//!
//! with the same histories and step ordering as the detector chain, so the
//! two constructions agree to rounding. `∂Ψ/∂z_j` inserts `X^a_j` into each
//! path weight.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::detector::{build_paths_with_budget, DEFAULT_PATH_BUDGET};
use crate::error::{invalid, Error, Result};
use crate::gaussian::{gauss_hermite, GaussianDensity, NoiseKind, NoiseRecord};
use crate::kernel::{KernelMatrix, TimeGrid, Window};
use crate::math;
use crate::quantum::{c, free_step, DensityOperator, ModelSpec, C64};

/// Smallest effective sample size accepted by the ensemble estimators.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 10.0;

/// Histories over one prefix `[0, k)` with non-zero amplitude.
#[derive(Debug, Clone)]
struct Level {
    amplitudes: Vec<DVector<C64>>,
    histories: Vec<DVector<f64>>,
    quad: Vec<f64>,
}

impl Level {
    fn new(
        model: &ModelSpec,
        kernel: &KernelMatrix,
        grid: &TimeGrid,
        steps: usize,
        budget: usize,
    ) -> Result<Self> {
        let window = Window::prefix(steps);
        let paths = build_paths_with_budget(model, grid, window, budget)?;
        let a_w = kernel.block(window, window)?;
        let support = paths.support();
        let amplitudes = support
            .iter()
            .map(|&i| paths.amplitude(i).into_owned())
            .collect();
        let histories: Vec<DVector<f64>> =
            support.iter().map(|&i| paths.history_vector(i)).collect();
        let quad = histories.iter().map(|x| x.dot(&(&a_w * x))).collect();
        Ok(Self {
            amplitudes,
            histories,
            quad,
        })
    }

    /// Path log weights `zᵀX^a − X^aᵀA X^a`.
    fn log_weights(&self, z: &[f64]) -> Vec<f64> {
        self.histories
            .iter()
            .zip(&self.quad)
            .map(|(x, q)| x.iter().zip(z).map(|(x, z)| x * z).sum::<f64>() - q)
            .collect()
    }

    /// `e^{-s}·Σ_a f(a)·v_a·e^{l_a}` together with the scale `s`.
    fn combine(&self, logw: &[f64], f: impl Fn(usize) -> f64) -> ScaledVector {
        let dim = self.amplitudes.first().map_or(0, |v| v.len());
        let scale = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = DVector::<C64>::zeros(dim);
        for (i, (v, l)) in self.amplitudes.iter().zip(logw).enumerate() {
            let w = f(i) * math::exp(l - scale);
            if w != 0.0 {
                acc.axpy(c(w, 0.0), v, c(1.0, 0.0));
            }
        }
        ScaledVector {
            log_scale: scale,
            vector: acc,
        }
    }
}

/// A vector stored as `e^{log_scale}·vector`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledVector {
    pub log_scale: f64,
    pub vector: DVector<C64>,
}

impl ScaledVector {
    pub fn log_norm_squared(&self) -> f64 {
        2.0 * self.log_scale + math::ln(self.vector.norm_squared())
    }

    pub fn to_vector(&self) -> DVector<C64> {
        &self.vector * c(math::exp(self.log_scale), 0.0)
    }
}

/// Conditional state history for one readout record.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub noise: NoiseRecord,
    states: Vec<DVector<C64>>,
    log_norms: Vec<f64>,
    expectations: DVector<f64>,
    free_expectations: DVector<f64>,
}

impl Trajectory {
    /// Number of steps `n` in the readout window.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Normalized state `ψ_k` after `k` steps.
    pub fn state(&self, k: usize) -> &DVector<C64> {
        &self.states[k]
    }

    pub fn final_state(&self) -> &DVector<C64> {
        &self.states[self.steps()]
    }

    /// `log ‖Ψ_k‖²`.
    pub fn log_norm_squared(&self, k: usize) -> f64 {
        self.log_norms[k]
    }

    pub fn norm_squared(&self, k: usize) -> f64 {
        math::exp(self.log_norms[k])
    }

    /// Unnormalized `Ψ_k`.
    pub fn unnormalized(&self, k: usize) -> DVector<C64> {
        &self.states[k] * c(math::exp(0.5 * self.log_norms[k]), 0.0)
    }

    /// `⟨x̂_σ⟩_t = Re⟨Ψ_t|∂_σΨ_t⟩/‖Ψ_t‖²` for every `σ` in the window: the
    /// coupling at `σ` propagated to `t` by the conditional evolution itself
    /// and read in the final state.
    pub fn expectations(&self) -> &DVector<f64> {
        &self.expectations
    }

    /// `⟨ψ_t|x̂_σ|ψ_t⟩` with `x̂_σ` carried to `t` by the free propagator alone.
    pub fn free_expectations(&self) -> &DVector<f64> {
        &self.free_expectations
    }

    pub fn final_density(&self) -> DensityOperator {
        DensityOperator::from_pure(self.final_state())
    }
}

/// Path-sum solver over a fixed prefix window.
#[derive(Debug, Clone)]
pub struct NmsseSolver {
    kernel: KernelMatrix,
    window: Window,
    levels: Vec<Level>,
    heisenberg: Vec<DMatrix<C64>>,
}

impl NmsseSolver {
    pub fn new(
        model: &ModelSpec,
        kernel: &KernelMatrix,
        grid: &TimeGrid,
        window: Window,
    ) -> Result<Self> {
        Self::with_budget(model, kernel, grid, window, DEFAULT_PATH_BUDGET)
    }

    pub fn with_budget(
        model: &ModelSpec,
        kernel: &KernelMatrix,
        grid: &TimeGrid,
        window: Window,
        budget: usize,
    ) -> Result<Self> {
        grid.check(window)?;
        if window.start != 0 || !kernel.window().contains_window(&window) {
            return Err(Error::InvalidWindow {
                start: window.start,
                end: window.end,
                n_steps: kernel.window().end,
            });
        }
        let n = window.len();
        let levels = (0..=n)
            .map(|k| Level::new(model, kernel, grid, k, budget))
            .collect::<Result<Vec<_>>>()?;
        // x̂ at step j acts at (j+1)ε; seen from t = nε it is U^{n−1−j} x̂ U^{†(n−1−j)}.
        let u = free_step(model, grid.epsilon());
        let mut heisenberg = Vec::with_capacity(n);
        let mut op = model.coupling().clone();
        for _ in 0..n {
            heisenberg.push(op.clone());
            op = &u * op * u.adjoint();
        }
        heisenberg.reverse();
        Ok(Self {
            kernel: kernel.clone(),
            window,
            levels,
            heisenberg,
        })
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn kernel(&self) -> &KernelMatrix {
        &self.kernel
    }

    /// Heisenberg coupling of step `j` expressed at the final time.
    pub fn heisenberg_at_final(&self, j: usize) -> &DMatrix<C64> {
        &self.heisenberg[j]
    }

    fn check_noise(&self, z: &NoiseRecord) -> Result<()> {
        if z.kind != NoiseKind::Readout {
            return Err(invalid("expected a readout record"));
        }
        if z.window != self.window {
            return Err(Error::DimensionMismatch {
                what: "readout window",
                expected: self.window.len(),
                found: z.values.len(),
            });
        }
        Ok(())
    }

    /// `Ψ_t[z]` over the full window.
    pub fn psi(&self, z: &NoiseRecord) -> Result<ScaledVector> {
        self.check_noise(z)?;
        let level = &self.levels[self.window.len()];
        Ok(level.combine(&level.log_weights(z.values.as_slice()), |_| 1.0))
    }

    /// `Ψ_t[z]` and `∂Ψ_t/∂z_j` for every `j`, sharing one scale.
    pub fn psi_and_derivatives(
        &self,
        z: &NoiseRecord,
    ) -> Result<(ScaledVector, Vec<DVector<C64>>)> {
        self.check_noise(z)?;
        let level = &self.levels[self.window.len()];
        let logw = level.log_weights(z.values.as_slice());
        let psi = level.combine(&logw, |_| 1.0);
        let derivs = (0..self.window.len())
            .map(|j| level.combine(&logw, |i| level.histories[i][j]).vector)
            .collect();
        Ok((psi, derivs))
    }

    pub fn solve(&self, z: &NoiseRecord) -> Result<Trajectory> {
        self.check_noise(z)?;
        let zs = z.values.as_slice();
        let mut states = Vec::with_capacity(self.levels.len());
        let mut log_norms = Vec::with_capacity(self.levels.len());
        for (k, level) in self.levels.iter().enumerate() {
            let psi = level.combine(&level.log_weights(&zs[..k]), |_| 1.0);
            let norm = psi.vector.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(invalid("conditional state vanished"));
            }
            log_norms.push(psi.log_norm_squared());
            states.push(psi.vector.unscale(norm));
        }
        let last = states.last().expect("at least the initial state");
        let free_expectations = DVector::from_iterator(
            self.heisenberg.len(),
            self.heisenberg.iter().map(|op| last.dotc(&(op * last)).re),
        );
        let expectations = self.insertion_expectations(z)?;
        Ok(Trajectory {
            noise: z.clone(),
            states,
            log_norms,
            expectations,
            free_expectations,
        })
    }

    /// `Re⟨Ψ|∂_jΨ⟩/‖Ψ‖²`: the coupling inserted at its place inside the
    /// time-ordered product.
    pub fn insertion_expectations(&self, z: &NoiseRecord) -> Result<DVector<f64>> {
        let (psi, derivs) = self.psi_and_derivatives(z)?;
        let n2 = psi.vector.norm_squared();
        Ok(DVector::from_iterator(
            derivs.len(),
            derivs.iter().map(|d| psi.vector.dotc(d).re / n2),
        ))
    }

    /// One importance-sampling draw from the readout prior.
    pub fn sample(&self, prior: &GaussianDensity, seed: u64, index: u64) -> Result<EnsembleSample> {
        let z = NoiseRecord::readout(self.window, prior.sample_one(seed, index))?;
        let traj = self.solve(&z)?;
        let k = self.window.len() - 1;
        Ok(EnsembleSample {
            log_weight: traj.log_norm_squared(traj.steps()),
            density: traj.final_density().into_matrix(),
            readout: z.values[k],
            retarded: retarded_expectation(&traj, &self.kernel, k),
            retarded_free: retarded_sum(&self.kernel, k, traj.free_expectations()),
        })
    }
}

/// Solves for the trajectory driven by `z` on `z.window`.
pub fn solve_unnormalized(
    model: &ModelSpec,
    a: &KernelMatrix,
    grid: &TimeGrid,
    z: &NoiseRecord,
) -> Result<Trajectory> {
    NmsseSolver::new(model, a, grid, z.window)?.solve(z)
}

/// `log p_t[z] = log G̃_w[z] + log ‖Ψ_t[z]‖²`.
pub fn readout_pdf(trajectory: &Trajectory, a: &KernelMatrix) -> Result<f64> {
    let prior = GaussianDensity::readout_prior(a, trajectory.noise.window)?;
    Ok(prior.log_density(&trajectory.noise.values)
        + trajectory.log_norm_squared(trajectory.steps()))
}

fn retarded_sum(a: &KernelMatrix, k: usize, expectations: &DVector<f64>) -> f64 {
    2.0 * expectations
        .iter()
        .enumerate()
        .map(|(j, x)| a.get(k, j) * x)
        .sum::<f64>()
}

/// `ẑ_k = 2Σ_j A_kj ⟨x̂_j⟩_t`, summed over the trajectory's window.
pub fn retarded_expectation(trajectory: &Trajectory, a: &KernelMatrix, k: usize) -> f64 {
    retarded_sum(a, k, trajectory.expectations())
}

/// Norm of the discrete equation residual at step `k`, in the interaction
/// picture where the free evolution drops out:
///
/// `R = (Ψ_{k+1} − Ψ_k)/ε − (z_k/ε)·x̂_k Ψ_k + 2x̂_k Σ_{j≤k} (A_kj/ε)·∂_jΨ_k`
///
/// with `x̂_k` the Heisenberg coupling at `(k+1)ε`. `Ψ_k` does not depend on
/// `z_k`, so the `j = k` term vanishes.
pub fn residual_check(
    model: &ModelSpec,
    a: &KernelMatrix,
    grid: &TimeGrid,
    z: &NoiseRecord,
    k: usize,
) -> Result<f64> {
    if k == 0 || k + 1 > z.window.len() {
        return Err(invalid("residual step must satisfy 1 ≤ k < n"));
    }
    let eps = grid.epsilon();
    let before = NmsseSolver::new(model, a, grid, Window::prefix(k))?;
    let after = NmsseSolver::new(model, a, grid, Window::prefix(k + 1))?;
    let (psi_k, derivs) = before.psi_and_derivatives(&z.restrict(Window::prefix(k))?)?;
    let psi_next = after.psi(&z.restrict(Window::prefix(k + 1))?)?;
    let scale = c(math::exp(psi_k.log_scale), 0.0);

    let back_k = free_step(model, -(k as f64) * eps);
    let back_next = free_step(model, -((k + 1) as f64) * eps);
    let u_next = free_step(model, (k + 1) as f64 * eps);
    let x_k = back_next.clone() * model.coupling() * &u_next;

    let psi_i = &back_k * psi_k.vector.clone() * scale;
    let next_i = &back_next * psi_next.to_vector();
    let mut memory = DVector::<C64>::zeros(model.dim());
    for (j, d) in derivs.iter().enumerate() {
        memory += (&back_k * d) * c(a.get(k, j) / eps, 0.0);
    }
    memory *= scale;
    let r = (&next_i - &psi_i) / c(eps, 0.0) - (&x_k * &psi_i) * c(z.values[k] / eps, 0.0)
        + (&x_k * memory) * c(2.0, 0.0);
    Ok(r.norm())
}

/// Per-sample contribution to an ensemble estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSample {
    /// `log ‖Ψ_t[z]‖²`, the importance weight relative to the prior.
    pub log_weight: f64,
    /// `ψψ†` of the normalized state.
    pub density: DMatrix<C64>,
    /// Last readout `z_k`, `k = n − 1`.
    pub readout: f64,
    /// `ẑ_k` from [`Trajectory::expectations`].
    pub retarded: f64,
    /// `ẑ_k` from [`Trajectory::free_expectations`].
    pub retarded_free: f64,
}

/// Weighted mean with standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

/// Both sides of the mean-readout law at the last readout index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanReadout {
    pub index: usize,
    /// Mean of `z_k` under `p_t`.
    pub measured: Estimate,
    /// Mean of `ẑ_k = 2Σ_j A_kj⟨x̂_j⟩_t`.
    pub predicted: Estimate,
    /// Mean of `z_k − ẑ_k`, estimated per sample.
    pub difference: Estimate,
    /// Same with `ẑ_k` built from freely evolved couplings.
    pub free_difference: Estimate,
}

impl MeanReadout {
    /// `|difference|` in units of its standard error.
    pub fn discrepancy_in_se(&self) -> f64 {
        self.difference.mean.abs() / self.difference.se
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEstimate {
    pub samples: usize,
    pub seed: u64,
    pub rho: DensityOperator,
    /// Standard errors of the real and imaginary parts, entry by entry.
    pub rho_se: DMatrix<C64>,
    pub mean_readout: MeanReadout,
    pub effective_samples: f64,
}

impl EnsembleEstimate {
    /// Weighted average of the samples in the order given.
    pub fn from_samples(samples: &[EnsembleSample], seed: u64, index: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| invalid("empty ensemble"))?;
        let d = first.density.nrows();
        let top = samples
            .iter()
            .map(|s| s.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = samples
            .iter()
            .map(|s| math::exp(s.log_weight - top))
            .collect();
        let total: f64 = w.iter().sum();
        let total2: f64 = w.iter().map(|w| w * w).sum();
        let ess = total * total / total2;
        if !(ess >= MIN_EFFECTIVE_SAMPLES) {
            return Err(Error::DegenerateWeights {
                ess,
                minimum: MIN_EFFECTIVE_SAMPLES,
            });
        }
        let estimate = |f: &dyn Fn(&EnsembleSample) -> f64| {
            let mean = samples.iter().zip(&w).map(|(s, w)| w * f(s)).sum::<f64>() / total;
            let var = samples
                .iter()
                .zip(&w)
                .map(|(s, w)| (w * (f(s) - mean)).powi(2))
                .sum::<f64>();
            Estimate {
                mean,
                se: math::sqrt(var) / total,
            }
        };
        let mut mean = DMatrix::<C64>::zeros(d, d);
        let mut se = DMatrix::<C64>::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let re = estimate(&|s| s.density[(i, j)].re);
                let im = estimate(&|s| s.density[(i, j)].im);
                mean[(i, j)] = c(re.mean, im.mean);
                se[(i, j)] = c(re.se, im.se);
            }
        }
        let mean_readout = MeanReadout {
            index,
            measured: estimate(&|s| s.readout),
            predicted: estimate(&|s| s.retarded),
            difference: estimate(&|s| s.readout - s.retarded),
            free_difference: estimate(&|s| s.readout - s.retarded_free),
        };
        Ok(Self {
            samples: samples.len(),
            seed,
            rho: DensityOperator::from_unnormalized(mean),
            rho_se: se,
            mean_readout,
            effective_samples: ess,
        })
    }

    /// Scale of the trace-distance error: `½√d·(Σ_ij se_ij²)^{1/2}`, which
    /// bounds the expected trace norm of the estimation error.
    pub fn pooled_se(&self) -> f64 {
        let d = self.rho.dim() as f64;
        let sum: f64 = self.rho_se.iter().map(|e| e.re * e.re + e.im * e.im).sum();
        0.5 * math::sqrt(d) * math::sqrt(sum)
    }
}

/// Importance-sampled estimate of `ρ_t` over `window`: readouts drawn from
/// the prior `G̃_w`, each weighted by `‖Ψ_t[z]‖²`.
pub fn ensemble_average(
    model: &ModelSpec,
    a: &KernelMatrix,
    grid: &TimeGrid,
    window: Window,
    n_samples: usize,
    seed: u64,
) -> Result<EnsembleEstimate> {
    if n_samples < 100 {
        return Err(invalid("an ensemble needs at least 100 samples"));
    }
    if window.is_empty() {
        return Err(invalid("an ensemble needs at least one readout"));
    }
    let solver = NmsseSolver::new(model, a, grid, window)?;
    let prior = GaussianDensity::readout_prior(a, window)?;
    let samples = (0..n_samples as u64)
        .map(|i| solver.sample(&prior, seed, i))
        .collect::<Result<Vec<_>>>()?;
    EnsembleEstimate::from_samples(&samples, seed, window.len() - 1)
}

/// Both sides of the mean-readout law carried by an ensemble.
pub fn mean_readout(ensemble: &EnsembleEstimate) -> MeanReadout {
    ensemble.mean_readout
}

/// Delayed-readout state obtained by averaging zero-delay trajectories over
/// the readouts not yet known, with a tensor Gauss–Hermite rule of `nodes`
/// points per unread step. Returns the normalized state and `log p_t[z;T]`.
pub fn quadrature_delayed_state(
    solver: &NmsseSolver,
    known: &NoiseRecord,
    nodes: usize,
) -> Result<(DensityOperator, f64)> {
    let full = solver.window();
    let read = known.window;
    if read.start != 0 || read.end > full.end {
        return Err(Error::InvalidWindow {
            start: read.start,
            end: read.end,
            n_steps: full.end,
        });
    }
    let a = solver.kernel();
    let tail = Window::new(read.end, full.end);
    let m = tail.len();
    let (mean, chol) = if read.is_empty() {
        (
            DVector::zeros(m),
            crate::kernel::cholesky(&a.restrict(tail)?)?,
        )
    } else {
        let a_rr = a.block(read, read)?;
        let a_tr = a.block(tail, read)?;
        let (inv, _) = crate::kernel::spd_inverse(&a_rr)?;
        let gain = &a_tr * inv;
        let cov = a.block(tail, tail)? - &gain * a_tr.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        let cond = KernelMatrix::from_entries(tail, cov)?;
        (&gain * &known.values, crate::kernel::cholesky(&cond)?)
    };
    let rule = gauss_hermite(nodes);
    let count = rule.len().pow(m as u32);
    let mut terms: Vec<(f64, DMatrix<C64>)> = Vec::with_capacity(count);
    let mut xi = DVector::<f64>::zeros(m);
    for flat in 0..count {
        let mut rest = flat;
        let mut log_w = 0.0;
        for d in 0..m {
            let (node, weight) = rule[rest % rule.len()];
            rest /= rule.len();
            xi[d] = node;
            log_w += math::ln(weight);
        }
        let tail_values = &mean + &chol * &xi;
        let mut values = DVector::zeros(full.len());
        values.rows_mut(0, read.len()).copy_from(&known.values);
        values.rows_mut(read.len(), m).copy_from(&tail_values);
        let psi = solver.psi(&NoiseRecord::readout(full, values)?)?;
        let outer = &psi.vector * psi.vector.adjoint();
        terms.push((log_w + 2.0 * psi.log_scale, outer));
    }
    let top = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let dim = terms[0].1.nrows();
    let mut acc = DMatrix::<C64>::zeros(dim, dim);
    for (l, outer) in &terms {
        acc += outer * c(math::exp(l - top), 0.0);
    }
    let tr = acc.trace().re;
    let prior = if read.is_empty() {
        0.0
    } else {
        GaussianDensity::readout_prior(a, read)?.log_density(&known.values)
    };
    Ok((
        DensityOperator::from_unnormalized(acc),
        prior + top + math::ln(tr),
    ))
}
