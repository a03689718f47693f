//! Invariants of the public engine over random qubit models and kernels.

use nalgebra::{DMatrix, DVector};
use nmqm_core::gaussian::sample_gtilde;
use nmqm_core::nmsse::NmsseSolver;
use nmqm_core::quantum::c;
use nmqm_core::{
    build_kernel_matrix, conditional_state_x, reduced_state, trace_distance, GaussianDensity,
    MemoryKernel, ModelSpec, NoiseRecord, TimeGrid, C64,
};
use proptest::prelude::*;

fn hermitian(diag: (f64, f64), off: (f64, f64)) -> DMatrix<C64> {
    DMatrix::from_row_slice(
        2,
        2,
        &[c(diag.0, 0.0), c(off.0, off.1), c(off.0, -off.1), c(diag.1, 0.0)],
    )
}

fn model(h: [f64; 4], x: [f64; 4], theta: f64) -> ModelSpec {
    let psi = DVector::from_vec(vec![c(theta.cos(), 0.0), c(theta.sin(), 0.0)]);
    ModelSpec::new(
        hermitian((h[0], h[1]), (h[2], h[3])),
        hermitian((x[0], x[1]), (x[2], x[3])),
        psi,
    )
    .unwrap()
}

fn entries() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0f64..1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reduced_state_is_a_density_operator(
        h in entries(), x in entries(), theta in 0.0f64..3.2,
        lambda in 0.3f64..10.0, n in 1usize..6,
    ) {
        let m = model(h, x, theta);
        let grid = TimeGrid::new(0.1, n).unwrap();
        let a = build_kernel_matrix(&MemoryKernel::exponential(lambda), &grid, grid.full()).unwrap();
        let rho = reduced_state(&m, &a, &grid, grid.full()).unwrap();
        prop_assert!(rho.is_valid(1e-10));
        prop_assert!(rho.purity() <= 1.0 + 1e-10);
    }

    #[test]
    fn chain_and_equation_agree_on_readout_records(
        h in entries(), x in entries(), theta in 0.0f64..3.2,
        lambda in 0.3f64..10.0, n in 1usize..6, seed in 0u64..1000,
    ) {
        let m = model(h, x, theta);
        let grid = TimeGrid::new(0.1, n).unwrap();
        let a = build_kernel_matrix(&MemoryKernel::exponential(lambda), &grid, grid.full()).unwrap();
        let solver = NmsseSolver::new(&m, &a, &grid, grid.full()).unwrap();
        for z in sample_gtilde(&a, 3, seed).unwrap() {
            let s = nmqm_core::conditional_state_z(&m, &a, &grid, &z).unwrap();
            let psi = solver.solve(&z).unwrap().final_density();
            prop_assert!(trace_distance(&s.rho, &psi) <= 1e-10);
            prop_assert!((s.purity() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn pointer_states_are_valid(
        h in entries(), theta in 0.0f64..3.2,
        lambda in 0.3f64..10.0, n in 1usize..6, seed in 0u64..1000,
    ) {
        let m = model(h, [1.0, -1.0, 0.0, 0.0], theta);
        let grid = TimeGrid::new(0.1, n).unwrap();
        let a = build_kernel_matrix(&MemoryKernel::exponential(lambda), &grid, grid.full()).unwrap();
        let prior = GaussianDensity::pointer_prior(&a, grid.full()).unwrap();
        let values = prior.sample_one(seed, 0);
        let xr = NoiseRecord::pointer(grid.full(), values).unwrap();
        let s = conditional_state_x(&m, &a, &grid, &xr).unwrap();
        prop_assert!(s.rho.is_valid(1e-10));
        prop_assert!(s.log_weight.is_finite());
    }
}

#[test]
fn markov_kernel_dephases_at_the_lattice_rate() {
    let m = ModelSpec::dephasing_qubit();
    for n in [1usize, 4, 10] {
        let grid = TimeGrid::new(0.05, n).unwrap();
        let a = build_kernel_matrix(&MemoryKernel::markov(1.0), &grid, grid.full()).unwrap();
        let rho = reduced_state(&m, &a, &grid, grid.full()).unwrap();
        let expected = 0.5 * (-2.0 * a.window_sum(grid.full()).unwrap()).exp();
        assert!((rho.matrix()[(0, 1)].re - expected).abs() < 1e-13);
    }
}
