//! Exact discrete model of the correlated von Neumann detector chain.
//!
//! Every step applies the free propagator and then inserts the coupling
//! eigenprojectors, so a ket history `a` carries the amplitude
//! `v_a = P_{a_{N−1}}U_ε···P_{a_0}U_ε ψ₀` and turns every Heisenberg coupling
//! superoperator into a number. For a bra/ket pair `(a, b)` the left, right,
//! symmetrized and commutator actions become `X^a`, `X^b`, `(X^a+X^b)/2` and
//! `X^a−X^b`. Pointer integrals are Gaussian and are done in closed form, so
//! no pointer coordinate is ever represented.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianDensity, NoiseKind, NoiseRecord, Schedule};
use crate::kernel::{KernelMatrix, TimeGrid, Window};
use crate::math;
use crate::quantum::{c, eigendecompose_coupling, free_step, DensityOperator, ModelSpec, C64};

pub const DEFAULT_PATH_BUDGET: usize = 1 << 20;

/// Eigenvalue histories of the coupling over a prefix window. Histories whose
/// amplitude is exactly zero are dropped as soon as they appear.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    steps: usize,
    dim: usize,
    eigenvalues: Vec<f64>,
    histories: Vec<f64>,
    amplitudes: Vec<C64>,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.amplitudes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenvalue sequence `X^a`.
    pub fn history(&self, i: usize) -> &[f64] {
        &self.histories[i * self.steps..(i + 1) * self.steps]
    }

    pub fn history_vector(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.history(i))
    }

    pub fn amplitude(&self, i: usize) -> DVectorView<'_, C64> {
        DVectorView::from_slice(&self.amplitudes[i * self.dim..(i + 1) * self.dim], self.dim)
    }

    /// `Σ_a v_a`, which equals the freely evolved state.
    pub fn total(&self) -> DVector<C64> {
        let mut acc = DVector::zeros(self.dim);
        for i in 0..self.len() {
            acc += self.amplitude(i);
        }
        acc
    }

    /// Indices of histories with a non-zero amplitude.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.amplitude(i).norm_squared() > 0.0)
            .collect()
    }
}

/// Enumerates histories over `window` (which must start at 0) with the
/// default budget.
pub fn build_paths(model: &ModelSpec, grid: &TimeGrid, window: Window) -> Result<PathEnsemble> {
    build_paths_with_budget(model, grid, window, DEFAULT_PATH_BUDGET)
}

pub fn build_paths_with_budget(
    model: &ModelSpec,
    grid: &TimeGrid,
    window: Window,
    budget: usize,
) -> Result<PathEnsemble> {
    grid.check(window)?;
    if window.start != 0 {
        return Err(Error::InvalidWindow {
            start: window.start,
            end: window.end,
            n_steps: grid.n_steps(),
        });
    }
    let es = eigendecompose_coupling(model);
    let m = es.len();
    let steps = window.len();
    let d = model.dim();
    let u = free_step(model, grid.epsilon());
    let mut amplitudes: Vec<C64> = model.initial_state().iter().copied().collect();
    let mut histories: Vec<f64> = Vec::new();
    for step in 0..steps {
        let n = amplitudes.len() / d;
        let mut next_amp = Vec::with_capacity(n * m * d);
        let mut next_hist = Vec::with_capacity(n * m * (step + 1));
        for p in 0..n {
            let v = DVectorView::from_slice(&amplitudes[p * d..(p + 1) * d], d);
            let w = &u * v;
            for (a, proj) in es.projectors().iter().enumerate() {
                let child = proj * &w;
                // exactly vanishing branches never contribute
                if child.iter().all(|e| e.re == 0.0 && e.im == 0.0) {
                    continue;
                }
                next_amp.extend(child.iter());
                next_hist.extend_from_slice(&histories[p * step..(p + 1) * step]);
                next_hist.push(es.eigenvalues()[a]);
            }
        }
        let count = next_amp.len() / d;
        if count > budget {
            let remaining = (m as u128)
                .checked_pow((steps - step - 1) as u32)
                .unwrap_or(u128::MAX);
            return Err(Error::PathBudgetExceeded {
                count: (count as u128).saturating_mul(remaining),
                budget,
            });
        }
        amplitudes = next_amp;
        histories = next_hist;
    }
    Ok(PathEnsemble {
        steps,
        dim: d,
        eigenvalues: es.eigenvalues().to_vec(),
        histories,
        amplitudes,
    })
}

/// Pairwise exponent `E_ab = lin_a + lin_b + Σ_k sign_k·(left_k[a]·right_k[b])`.
/// Every bilinear part is symmetric in `(a, b)`.
/// `(left, right, sign)` for one bilinear part.
type Bilinear = (Vec<DVector<f64>>, Vec<DVector<f64>>, f64);

struct PairExponent {
    lin: Vec<f64>,
    bilinear: Vec<Bilinear>,
}

impl PairExponent {
    fn eval(&self, a: usize, b: usize) -> f64 {
        let mut e = self.lin[a] + self.lin[b];
        for (left, right, sign) in &self.bilinear {
            e += sign * left[a].dot(&right[b]);
        }
        e
    }
}

/// Returns `(M, s)` with `Σ_ab e^{E_ab} v_a v_b† = e^s·M`.
fn pair_sum(
    paths: &PathEnsemble,
    support: &[usize],
    exponent: &PairExponent,
) -> (DMatrix<C64>, f64) {
    let d = paths.dim();
    let scale = support
        .iter()
        .enumerate()
        .map(|(k, &a)| exponent.eval(k, k) + math::ln(paths.amplitude(a).norm_squared()))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc = DMatrix::<C64>::zeros(d, d);
    if !scale.is_finite() {
        return (acc, scale);
    }
    for (ka, &a) in support.iter().enumerate() {
        let va = paths.amplitude(a);
        for (kb, &b) in support.iter().enumerate().skip(ka) {
            let w = math::exp(exponent.eval(ka, kb) - scale);
            if w == 0.0 {
                continue;
            }
            let vb = paths.amplitude(b);
            if ka == kb {
                acc += (va * va.adjoint()) * c(w, 0.0);
            } else {
                let outer = (va * vb.adjoint()) * c(w, 0.0);
                acc += &outer + outer.adjoint();
            }
        }
    }
    (acc, scale)
}

/// State of the system conditioned on a readout schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalState {
    pub rho: DensityOperator,
    /// Log of the readout probability density at the observed record.
    pub log_weight: f64,
    pub schedule: Schedule,
    /// Pointers read so far.
    pub window: Window,
}

impl ConditionalState {
    pub fn purity(&self) -> f64 {
        self.rho.purity()
    }
}

/// The detector chain over a prefix window `[0, t)`, with the full-grid
/// kernel matrix describing every detector in the universe.
#[derive(Debug, Clone)]
pub struct DetectorChain {
    kernel: KernelMatrix,
    grid: TimeGrid,
    window: Window,
    paths: PathEnsemble,
    support: Vec<usize>,
    histories: Vec<DVector<f64>>,
}

impl DetectorChain {
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
        if !kernel.window().contains_window(&window) {
            return Err(Error::InvalidWindow {
                start: window.start,
                end: window.end,
                n_steps: kernel.window().end,
            });
        }
        let paths = build_paths_with_budget(model, grid, window, budget)?;
        let support = paths.support();
        let histories = support.iter().map(|&i| paths.history_vector(i)).collect();
        Ok(Self {
            kernel: kernel.clone(),
            grid: *grid,
            window,
            paths,
            support,
            histories,
        })
    }

    pub fn paths(&self) -> &PathEnsemble {
        &self.paths
    }

    pub fn window(&self) -> Window {
        self.window
    }

    /// Decoherence part `−½(X^a−X^b)ᵀA_w(X^a−X^b)`.
    fn decoherence(&self) -> Result<PairExponent> {
        let a_w = self.kernel.block(self.window, self.window)?;
        let y: Vec<DVector<f64>> = self.histories.iter().map(|x| &a_w * x).collect();
        let lin = self
            .histories
            .iter()
            .zip(&y)
            .map(|(x, y)| -0.5 * x.dot(y))
            .collect();
        Ok(PairExponent {
            lin,
            bilinear: alloc::vec![(self.histories.clone(), y, 1.0)],
        })
    }

    /// Adds `log D[v − (s_a + s_b)] − log D[v]` with `s_a = M·X^a`.
    fn add_shift(
        &self,
        e: &mut PairExponent,
        density: &GaussianDensity,
        values: &DVector<f64>,
        map: &DMatrix<f64>,
    ) {
        let r = density.precision() * (values - density.mean());
        let s: Vec<DVector<f64>> = self.histories.iter().map(|x| map * x).collect();
        let u: Vec<DVector<f64>> = s.iter().map(|s| density.precision() * s).collect();
        for (k, (s, u)) in s.iter().zip(&u).enumerate() {
            e.lin[k] += r.dot(s) - 0.5 * s.dot(u);
        }
        e.bilinear.push((s, u, -1.0));
    }

    fn finish(
        &self,
        e: &PairExponent,
        log_prior: f64,
        schedule: Schedule,
        read: Window,
    ) -> ConditionalState {
        let (m, scale) = pair_sum(&self.paths, &self.support, e);
        let tr = m.trace().re;
        ConditionalState {
            rho: DensityOperator::from_unnormalized(m),
            log_weight: log_prior + scale + math::ln(tr),
            schedule,
            window: read,
        }
    }

    /// Reduced density operator at `t`: every pointer traced out.
    pub fn reduced_state(&self) -> Result<DensityOperator> {
        let e = self.decoherence()?;
        let (m, _) = pair_sum(&self.paths, &self.support, &e);
        Ok(DensityOperator::from_unnormalized(m))
    }

    /// Conditional state after reading the raw pointers `x` on `[0, t)`;
    /// unread pointers of the universe are integrated out.
    pub fn conditional_state_x(&self, x: &NoiseRecord) -> Result<ConditionalState> {
        self.expect_record(x, NoiseKind::Pointer, self.window)?;
        let mut e = self.decoherence()?;
        let prior = GaussianDensity::pointer_prior(&self.kernel, self.window)?;
        let half = DMatrix::<f64>::identity(self.window.len(), self.window.len()) * 0.5;
        self.add_shift(&mut e, &prior, &x.values, &half);
        Ok(self.finish(
            &e,
            prior.log_density(&x.values),
            Schedule::ZeroDelay,
            self.window,
        ))
    }

    /// Conditional state after reading the smoothed pointers `z` on `[0, t)`
    /// at their label times.
    pub fn conditional_state_z(&self, z: &NoiseRecord) -> Result<ConditionalState> {
        self.expect_record(z, NoiseKind::Readout, self.window)?;
        let mut e = self.decoherence()?;
        let prior = GaussianDensity::readout_prior(&self.kernel, self.window)?;
        let map = self.kernel.block(self.window, self.window)?;
        self.add_shift(&mut e, &prior, &z.values, &map);
        Ok(self.finish(&e, prior.log_density(&z.values), z.schedule, self.window))
    }

    /// State at `t` when pointer `τ` is read at `τ + delay`: only `z` on
    /// `[0, t − delay)` is known and the remaining pointers are integrated out.
    pub fn delayed_state(&self, delay: f64, z: &NoiseRecord) -> Result<ConditionalState> {
        let lag = self.grid.steps_in(delay)?;
        if lag > self.window.len() {
            return Err(crate::error::invalid("delay exceeds the elapsed time"));
        }
        let read = Window::prefix(self.window.len() - lag);
        self.expect_record(z, NoiseKind::Readout, read)?;
        let schedule = Schedule::Delayed { delay };
        let mut e = self.decoherence()?;
        if read.is_empty() {
            return Ok(self.finish(&e, 0.0, schedule, read));
        }
        let prior = GaussianDensity::readout_prior(&self.kernel, read)?;
        let map = self.kernel.block(read, self.window)?;
        self.add_shift(&mut e, &prior, &z.values, &map);
        Ok(self.finish(&e, prior.log_density(&z.values), schedule, read))
    }

    fn expect_record(&self, r: &NoiseRecord, kind: NoiseKind, window: Window) -> Result<()> {
        if r.kind != kind {
            return Err(crate::error::invalid(
                "record holds the wrong detector variable",
            ));
        }
        if r.window != window {
            return Err(Error::InvalidWindow {
                start: r.window.start,
                end: r.window.end,
                n_steps: window.end,
            });
        }
        Ok(())
    }
}

pub fn reduced_state(
    model: &ModelSpec,
    a: &KernelMatrix,
    grid: &TimeGrid,
    window: Window,
) -> Result<DensityOperator> {
    DetectorChain::new(model, a, grid, window)?.reduced_state()
}

pub fn conditional_state_x(
    model: &ModelSpec,
    a: &KernelMatrix,
    grid: &TimeGrid,
    x: &NoiseRecord,
) -> Result<ConditionalState> {
    DetectorChain::new(model, a, grid, x.window)?.conditional_state_x(x)
}

pub fn conditional_state_z(
    model: &ModelSpec,
    a: &KernelMatrix,
    grid: &TimeGrid,
    z: &NoiseRecord,
) -> Result<ConditionalState> {
    DetectorChain::new(model, a, grid, z.window)?.conditional_state_z(z)
}

pub fn delayed_state(
    model: &ModelSpec,
    a: &KernelMatrix,
    grid: &TimeGrid,
    window: Window,
    delay: f64,
    z: &NoiseRecord,
) -> Result<ConditionalState> {
    DetectorChain::new(model, a, grid, window)?.delayed_state(delay, z)
}

/// A lone detector with a pure Gaussian pointer wavefunction whose position
/// density is `N(center, width²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleDetector {
    pub center: f64,
    pub width: f64,
}

impl SingleDetector {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(crate::error::invalid("detector width must be positive"));
        }
        Ok(Self { center, width })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let d = (x - self.center) / self.width;
        -0.5 * d * d - math::ln(self.width) - 0.5 * math::ln(2.0 * math::PI)
    }
}

/// Impulsive measurement of `x̂` at time `tau`: the state evolves freely to
/// `tau`, the pointer shifts by the coupling and is read at `x`. Returns the
/// post-measurement state (Schrödinger picture at `tau`) and the readout
/// probability density.
pub fn vn_measure(
    detector: &SingleDetector,
    model: &ModelSpec,
    tau: f64,
    rho0: &DensityOperator,
    x: f64,
) -> (DensityOperator, f64) {
    let rho = rho0.evolve(&free_step(model, tau));
    let es = eigendecompose_coupling(model);
    let sigma2 = detector.width * detector.width;
    let m = es.len();
    let exponent = |a: usize, b: usize| {
        let (xa, xb) = (es.eigenvalues()[a], es.eigenvalues()[b]);
        let delta = xa - xb;
        detector.log_density(x - 0.5 * (xa + xb)) - delta * delta / (8.0 * sigma2)
    };
    let blocks: Vec<Vec<DMatrix<C64>>> = (0..m)
        .map(|a| {
            (0..m)
                .map(|b| &es.projectors()[a] * rho.matrix() * &es.projectors()[b])
                .collect()
        })
        .collect();
    let scale = (0..m)
        .filter(|&a| blocks[a][a].trace().re > 0.0)
        .map(|a| exponent(a, a))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc = DMatrix::<C64>::zeros(model.dim(), model.dim());
    for (a, row) in blocks.iter().enumerate() {
        for (b, block) in row.iter().enumerate() {
            acc += block * c(math::exp(exponent(a, b) - scale), 0.0);
        }
    }
    let tr = acc.trace().re;
    (
        DensityOperator::from_unnormalized(acc),
        math::exp(scale) * tr,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::sample_gtilde;
    use crate::kernel::{build_kernel_matrix, MemoryKernel};
    use crate::quantum::{basis_state, modulus, pauli_x, pauli_z, plus_state, trace_distance};

    fn setup(lambda: f64, eps: f64, n: usize) -> (TimeGrid, KernelMatrix) {
        let g = TimeGrid::new(eps, n).unwrap();
        let a = build_kernel_matrix(&MemoryKernel::exponential(lambda), &g, g.full()).unwrap();
        (g, a)
    }

    #[test]
    fn single_step_paths() {
        let model = ModelSpec::dephasing_qubit();
        let g = TimeGrid::new(0.1, 1).unwrap();
        let p = build_paths(&model, &g, g.full()).unwrap();
        assert_eq!(p.len(), 2);
        let s = core::f64::consts::FRAC_1_SQRT_2;
        // eigenvalues ascending: −1 ↔ |1⟩, +1 ↔ |0⟩
        assert_eq!(p.history(0), &[-1.0]);
        assert!(
            modulus(p.amplitude(0)[1] - c(s, 0.0)) < 1e-15 && modulus(p.amplitude(0)[0]) < 1e-15
        );
        assert!(
            modulus(p.amplitude(1)[0] - c(s, 0.0)) < 1e-15 && modulus(p.amplitude(1)[1]) < 1e-15
        );
    }

    #[test]
    fn completeness_of_projector_insertions() {
        let model = ModelSpec::default_qubit();
        let g = TimeGrid::new(0.1, 7).unwrap();
        let p = build_paths(&model, &g, g.full()).unwrap();
        assert_eq!(p.len(), 128);
        let free = free_step(&model, 0.7) * model.initial_state();
        assert!((p.total() - free).norm() < 1e-10);
    }

    #[test]
    fn commuting_case_has_diagonal_support() {
        let h = pauli_z() * c(0.4, 0.0);
        let model = ModelSpec::new(h, pauli_z(), plus_state()).unwrap();
        let g = TimeGrid::new(0.1, 6).unwrap();
        let p = build_paths(&model, &g, g.full()).unwrap();
        let support = p.support();
        assert_eq!(support.len(), 2);
        for i in support {
            let x = p.history(i);
            assert!(x.iter().all(|&v| v == x[0]));
        }
    }

    #[test]
    fn path_budget_is_enforced() {
        let model = ModelSpec::default_qubit();
        let g = TimeGrid::new(0.1, 30).unwrap();
        assert!(matches!(
            build_paths(&model, &g, g.full()),
            Err(Error::PathBudgetExceeded { .. })
        ));
        assert!(build_paths_with_budget(&model, &g, Window::prefix(4), 15).is_err());
        assert!(build_paths_with_budget(&model, &g, Window::prefix(4), 16).is_ok());
    }

    #[test]
    fn zero_kernel_gives_free_evolution() {
        let model = ModelSpec::default_qubit();
        let g = TimeGrid::new(0.1, 6).unwrap();
        let zero = KernelMatrix::from_entries(g.full(), DMatrix::zeros(6, 6)).unwrap();
        let rho = reduced_state(&model, &zero, &g, g.full()).unwrap();
        let free = model.initial_density().evolve(&free_step(&model, 0.6));
        assert!(trace_distance(&rho, &free) < 1e-12);
    }

    #[test]
    fn dephasing_coherence_closed_form() {
        let model = ModelSpec::dephasing_qubit();
        let (g, a) = setup(1.3, 0.1, 8);
        for n in 1..=8 {
            let w = Window::prefix(n);
            let rho = reduced_state(&model, &a, &g, w).unwrap();
            let want = 0.5 * (-2.0 * a.window_sum(w).unwrap()).exp();
            assert!((rho.matrix()[(0, 1)].re - want).abs() < 1e-12);
            assert!(rho.matrix()[(0, 1)].im.abs() < 1e-15);
            assert!((rho.trace() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn markov_dephasing_is_exact_on_the_lattice() {
        let model = ModelSpec::dephasing_qubit();
        let g = TimeGrid::new(0.05, 10).unwrap();
        let gc = 0.8;
        let a = build_kernel_matrix(&MemoryKernel::markov(gc), &g, g.full()).unwrap();
        let rho = reduced_state(&model, &a, &g, g.full()).unwrap();
        let want = 0.5 * (-2.0 * gc * gc * 0.5f64).exp();
        assert!((rho.matrix()[(0, 1)].re - want).abs() < 1e-12);
    }

    #[test]
    fn reduced_state_is_a_valid_density_operator() {
        let model = ModelSpec::default_qubit();
        let (g, a) = setup(1.0, 0.1, 8);
        let rho = reduced_state(&model, &a, &g, g.full()).unwrap();
        assert!(rho.is_valid(1e-10));
        assert!(rho.purity() < 1.0 - 1e-4);
    }

    #[test]
    fn zero_coupling_readouts_are_prior_weighted_free_states() {
        let model = ModelSpec::default_qubit()
            .with_coupling(DMatrix::zeros(2, 2))
            .unwrap();
        let (g, a) = setup(1.0, 0.1, 6);
        let w = Window::prefix(4);
        let chain = DetectorChain::new(&model, &a, &g, w).unwrap();
        let free = model.initial_density().evolve(&free_step(&model, 0.4));
        let z = NoiseRecord::readout(w, DVector::from_vec(alloc::vec![0.02, -0.01, 0.03, 0.0]))
            .unwrap();
        let s = chain.conditional_state_z(&z).unwrap();
        assert!(trace_distance(&s.rho, &free) < 1e-12);
        let prior = GaussianDensity::readout_prior(&a, w)
            .unwrap()
            .log_density(&z.values);
        assert!((s.log_weight - prior).abs() < 1e-12);

        let x =
            NoiseRecord::pointer(w, DVector::from_vec(alloc::vec![1.0, -0.5, 0.3, 2.0])).unwrap();
        let s = chain.conditional_state_x(&x).unwrap();
        assert!(trace_distance(&s.rho, &free) < 1e-12);
        let prior = GaussianDensity::pointer_prior(&a, w)
            .unwrap()
            .log_density(&x.values);
        assert!((s.log_weight - prior).abs() < 1e-12);
    }

    #[test]
    fn pair_exponent_matches_direct_shift_ratio() {
        // decomposed pair exponent vs a direct per-pair evaluation through
        // the density's shift ratio
        let model = ModelSpec::default_qubit();
        let (g, a) = setup(1.0, 0.1, 8);
        let w = Window::prefix(5);
        let chain = DetectorChain::new(&model, &a, &g, w).unwrap();
        let z = sample_gtilde(&a.restrict(w).unwrap(), 1, 3)
            .unwrap()
            .pop()
            .unwrap();
        let mut e = chain.decoherence().unwrap();
        let prior = GaussianDensity::readout_prior(&a, w).unwrap();
        let a_w = a.block(w, w).unwrap();
        chain.add_shift(&mut e, &prior, &z.values, &a_w);
        for (ka, xa) in chain.histories.iter().enumerate().step_by(5) {
            for (kb, xb) in chain.histories.iter().enumerate().step_by(3) {
                let delta = xa - xb;
                let shift = &a_w * (xa + xb);
                let direct =
                    -0.5 * delta.dot(&(&a_w * &delta)) + prior.shift(&shift).eval(&z.values);
                assert!((e.eval(ka, kb) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn z_readout_states_are_pure() {
        let model = ModelSpec::default_qubit();
        let (g, a) = setup(1.0, 0.1, 6);
        let chain = DetectorChain::new(&model, &a, &g, g.full()).unwrap();
        for z in sample_gtilde(&a, 10, 11).unwrap() {
            let s = chain.conditional_state_z(&z).unwrap();
            assert!((s.purity() - 1.0).abs() < 1e-10);
            assert!(s.rho.is_valid(1e-10));
        }
    }

    #[test]
    fn x_readout_states_are_mixed_while_future_pointers_are_unread() {
        let model = ModelSpec::default_qubit();
        let (g, a) = setup(1.0, 0.1, 8);
        let w = Window::prefix(4);
        let chain = DetectorChain::new(&model, &a, &g, w).unwrap();
        let prior = GaussianDensity::pointer_prior(&a, w).unwrap();
        for v in prior.sample(5, 1) {
            let s = chain
                .conditional_state_x(&NoiseRecord::pointer(w, v).unwrap())
                .unwrap();
            assert!(s.purity() < 1.0 - 1e-6);
            assert!(s.rho.is_valid(1e-10));
        }
        // with the whole universe read, pointers and readouts carry the same
        // information and the state is pure
        let chain = DetectorChain::new(&model, &a, &g, g.full()).unwrap();
        let prior = GaussianDensity::pointer_prior(&a, g.full()).unwrap();
        let v = prior.sample(1, 2).pop().unwrap();
        let s = chain
            .conditional_state_x(&NoiseRecord::pointer(g.full(), v).unwrap())
            .unwrap();
        assert!((s.purity() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn dephasing_x_readout_matches_two_branch_formula() {
        // [H, x̂] = 0: only the two constant histories survive and ρ_t[x]
        // reweights the diagonal by shifted Gaussian likelihoods.
        let model = ModelSpec::dephasing_qubit();
        let (g, a) = setup(1.0, 0.2, 5);
        let w = Window::prefix(3);
        let chain = DetectorChain::new(&model, &a, &g, w).unwrap();
        let prior = GaussianDensity::pointer_prior(&a, w).unwrap();
        let x = DVector::from_vec(alloc::vec![0.4, -0.3, 1.1]);
        let s = chain
            .conditional_state_x(&NoiseRecord::pointer(w, x.clone()).unwrap())
            .unwrap();
        let ones = DVector::from_element(3, 1.0);
        let like = |sign: f64| prior.log_density(&(&x - &ones * sign)).exp();
        let (lp, lm) = (like(1.0), like(-1.0));
        let a_w = a.block(w, w).unwrap();
        let coherence = 0.5 * (-2.0 * a_w.sum()).exp() * prior.log_density(&x).exp();
        let p = 0.5 * (lp + lm);
        let r = s.rho.matrix();
        assert!((r[(0, 0)].re - 0.5 * lp / p).abs() < 1e-12);
        assert!((r[(1, 1)].re - 0.5 * lm / p).abs() < 1e-12);
        assert!((r[(0, 1)].re - coherence / p).abs() < 1e-12);
        assert!((s.log_weight - p.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_step_z_readout_closed_form() {
        // N = 1, H = 0: Ψ = Σ_± e^{±z − A₀₀}|±⟩/√2
        let model = ModelSpec::dephasing_qubit();
        let (g, a) = setup(1.0, 0.3, 1);
        let a00 = a.get(0, 0);
        let z = 0.21;
        let rec = NoiseRecord::readout(g.full(), DVector::from_vec(alloc::vec![z])).unwrap();
        let s = conditional_state_z(&model, &a, &g, &rec).unwrap();
        let (wp, wm) = ((z - a00).exp(), (-z - a00).exp());
        let norm = 0.5 * (wp * wp + wm * wm);
        let r = s.rho.matrix();
        assert!((r[(0, 0)].re - 0.5 * wp * wp / norm).abs() < 1e-13);
        assert!((r[(0, 1)].re - 0.5 * wp * wm / norm).abs() < 1e-13);
        let log_p = -z * z / (2.0 * a00) - 0.5 * (2.0 * math::PI * a00).ln() + norm.ln();
        assert!((s.log_weight - log_p).abs() < 1e-12);
    }

    #[test]
    fn delayed_state_limits() {
        let model = ModelSpec::default_qubit();
        let (g, a) = setup(1.0, 0.1, 6);
        let chain = DetectorChain::new(&model, &a, &g, g.full()).unwrap();
        let z = sample_gtilde(&a, 1, 5).unwrap().pop().unwrap();
        let zero_delay = chain.conditional_state_z(&z).unwrap();
        let delayed0 = chain.delayed_state(0.0, &z).unwrap();
        assert!(trace_distance(&zero_delay.rho, &delayed0.rho) < 1e-12);
        assert!((zero_delay.log_weight - delayed0.log_weight).abs() < 1e-12);

        let empty = NoiseRecord::readout(Window::prefix(0), DVector::zeros(0)).unwrap();
        let full = chain.delayed_state(0.6, &empty).unwrap();
        let reduced = chain.reduced_state().unwrap();
        assert!(trace_distance(&full.rho, &reduced) < 1e-12);
        assert!(full.log_weight.abs() < 1e-12);
    }

    #[test]
    fn one_step_chain_is_a_single_von_neumann_detector() {
        let model = ModelSpec::default_qubit();
        let (g, a) = setup(1.0, 0.1, 1);
        let a00 = a.get(0, 0);
        let det = SingleDetector::new(0.0, (0.25 / a00).sqrt()).unwrap();
        for x in [-3.0, 0.2, 1.0, 7.5] {
            let rec = NoiseRecord::pointer(g.full(), DVector::from_vec(alloc::vec![x])).unwrap();
            let s = conditional_state_x(&model, &a, &g, &rec).unwrap();
            let (rho, p) = vn_measure(&det, &model, 0.1, &model.initial_density(), x);
            assert!(trace_distance(&s.rho, &rho) < 1e-12);
            assert!((s.log_weight - p.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn von_neumann_eigenstate_only_shifts_pointer() {
        let model = ModelSpec::new(DMatrix::zeros(2, 2), pauli_z(), basis_state(2, 0)).unwrap();
        let det = SingleDetector::new(0.0, 0.7).unwrap();
        let rho0 = model.initial_density();
        for x in [-1.0, 0.3, 2.0] {
            let (rho, p) = vn_measure(&det, &model, 0.0, &rho0, x);
            assert!(trace_distance(&rho, &rho0) < 1e-14);
            assert!((p - det.log_density(x - 1.0).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn von_neumann_plus_state_mixture_is_normalized() {
        let model = ModelSpec::dephasing_qubit();
        let det = SingleDetector::new(0.0, 0.6).unwrap();
        let rho0 = model.initial_density();
        let (lo, hi, n) = (-8.0, 8.0, 16000);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let (_, p) = vn_measure(&det, &model, 0.0, &rho0, x);
            let mix = 0.5 * det.log_density(x - 1.0).exp() + 0.5 * det.log_density(x + 1.0).exp();
            assert!((p - mix).abs() < 1e-15);
            total += if i == 0 || i == n { 0.5 } else { 1.0 } * p;
        }
        assert!((total * h - 1.0).abs() < 1e-10);
    }

    #[test]
    fn narrow_detector_is_projective() {
        let model = ModelSpec::new(pauli_x(), pauli_z(), plus_state()).unwrap();
        let det = SingleDetector::new(0.0, 1e-3).unwrap();
        let rho0 = model.initial_density();
        let (rho, _) = vn_measure(&det, &model, 0.3, &rho0, 0.9985);
        let up = DensityOperator::from_pure(&basis_state(2, 0));
        assert!(trace_distance(&rho, &up) < 1e-12);
        let (rho, _) = vn_measure(&det, &model, 0.3, &rho0, -1.002);
        let down = DensityOperator::from_pure(&basis_state(2, 1));
        assert!(trace_distance(&rho, &down) < 1e-12);
    }
}
