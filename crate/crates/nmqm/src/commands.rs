//! Experiment drivers behind the subcommands.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nmqm_core::detector::DetectorChain;
use nmqm_core::gaussian::{GaussianDensity, NoiseRecord};
use nmqm_core::kernel::Window;
use nmqm_core::nmsse::{retarded_expectation, EnsembleEstimate, Estimate, NmsseSolver};
use nmqm_core::quantum::{DensityOperator, C64};
use nmqm_core::trace_distance;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Resolved, ScheduleKind};
use crate::error::{CliError, Result};
use crate::output::Table;

fn density_headers(d: usize, what: &str) -> Vec<String> {
    let mut h = Vec::new();
    for i in 0..d {
        for j in 0..d {
            h.push(format!("rho_{i}{j}_re [{what}]"));
            h.push(format!("rho_{i}{j}_im [{what}]"));
        }
    }
    h
}

fn density_cells(rho: &DMatrix<C64>) -> Vec<Option<f64>> {
    let d = rho.nrows();
    let mut out = Vec::with_capacity(2 * d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(Some(rho[(i, j)].re));
            out.push(Some(rho[(i, j)].im));
        }
    }
    out
}

/// Reduced state at every grid time by exact path sums.
pub fn cmd_evolve(r: &Resolved) -> Result<Table> {
    let d = r.model.dim();
    let mut headers = vec!["t [time units]".to_string()];
    headers.extend(density_headers(d, "reduced state, path sum"));
    headers.push("purity [tr rho^2]".into());
    headers.push("decay_lattice [exp(-2 sum_ij A_ij) over steps before t; dephasing factor for x eigenvalues +-1]".into());
    headers.push(
        "decay_continuum [exp(-2 Q(t)), Q(t) = double integral of alpha over [0,t]^2]".into(),
    );
    let mut table = Table::new(headers);
    for k in 0..=r.grid.n_steps() {
        let w = Window::prefix(k);
        let rho = DetectorChain::new(&r.model, &r.matrix, &r.grid, w)?.reduced_state()?;
        let t = k as f64 * r.grid.epsilon();
        let mut row = vec![Some(t)];
        row.extend(density_cells(rho.matrix()));
        row.push(Some(rho.purity()));
        row.push(Some((-2.0 * r.matrix.window_sum(w)?).exp()));
        row.push(Some((-2.0 * r.kernel.double_integral(t)).exp()));
        table.push(row);
    }
    Ok(table)
}

/// Reads a single-column CSV of values (header required), one row per step.
pub fn read_noise(path: &Path, expected: usize) -> Result<DVector<f64>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cell = rec.get(0).unwrap_or("").trim();
        let v: f64 = cell.parse().map_err(|_| CliError::Noise {
            path: path.to_path_buf(),
            message: format!("row {}: `{cell}` is not a number", i + 1),
        })?;
        values.push(v);
    }
    if values.len() != expected {
        return Err(CliError::Noise {
            path: path.to_path_buf(),
            message: format!("expected {expected} values, found {}", values.len()),
        });
    }
    Ok(DVector::from_vec(values))
}

/// Readout record over the full grid: from a file or draw 0 of the prior.
pub fn readout_record(r: &Resolved, noise: Option<&Path>, seed: u64) -> Result<NoiseRecord> {
    let w = r.grid.full();
    let values = match noise {
        Some(path) => read_noise(path, w.len())?,
        None => GaussianDensity::readout_prior(&r.matrix, w)?.sample_one(seed, 0),
    };
    Ok(NoiseRecord::readout(w, values)?)
}

fn pointer_record(r: &Resolved, noise: Option<&Path>, seed: u64) -> Result<NoiseRecord> {
    let w = r.grid.full();
    let values = match noise {
        Some(path) => read_noise(path, w.len())?,
        None => GaussianDensity::pointer_prior(&r.matrix, w)?.sample_one(seed, 0),
    };
    Ok(NoiseRecord::pointer(w, values)?)
}

/// One trajectory of the conditional state, row `k` after `k` steps.
pub fn cmd_trajectory(r: &Resolved, noise: Option<&Path>, seed: u64) -> Result<Table> {
    let d = r.model.dim();
    let z = readout_record(r, noise, seed)?;
    let solver = NmsseSolver::new(&r.model, &r.matrix, &r.grid, r.grid.full())?;
    let traj = solver.solve(&z)?;
    let mut headers = vec![
        "t [time units]".to_string(),
        "z [readout integrated over the step starting at t]".to_string(),
        "norm [||Psi_t||, unnormalized conditional state]".to_string(),
    ];
    for i in 0..d {
        headers.push(format!("psi_{i}_re [normalized conditional state]"));
        headers.push(format!("psi_{i}_im [normalized conditional state]"));
    }
    headers.push("x_mean [<psi_t|x|psi_t>]".into());
    headers.push("z_hat [2 sum_j A_(k-1)j <x_j>_t, retarded readout of the last step]".into());
    let mut table = Table::new(headers);
    for k in 0..=traj.steps() {
        let t = k as f64 * r.grid.epsilon();
        let psi = traj.state(k);
        let mut row = vec![
            Some(t),
            (k < traj.steps()).then(|| z.values[k]),
            Some(traj.norm_squared(k).sqrt()),
        ];
        for v in psi.iter() {
            row.push(Some(v.re));
            row.push(Some(v.im));
        }
        row.push(Some(psi.dotc(&(r.model.coupling() * psi)).re));
        let z_hat = if k == 0 {
            None
        } else {
            let w = Window::prefix(k);
            let sub = NmsseSolver::new(&r.model, &r.matrix, &r.grid, w)?.solve(&z.restrict(w)?)?;
            Some(retarded_expectation(&sub, &r.matrix, k - 1))
        };
        row.push(z_hat);
        table.push(row);
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixReport {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl MatrixReport {
    pub fn new(m: &DMatrix<C64>) -> Self {
        let rows = |f: fn(&C64) -> f64| {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| f(&m[(i, j)])).collect())
                .collect()
        };
        Self {
            re: rows(|z| z.re),
            im: rows(|z| z.im),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub mean: f64,
    pub se: f64,
}

impl From<Estimate> for EstimateReport {
    fn from(e: Estimate) -> Self {
        Self {
            mean: e.mean,
            se: e.se,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanReadoutReport {
    pub readout_index: usize,
    pub measured: EstimateReport,
    pub predicted: EstimateReport,
    pub difference: EstimateReport,
    pub discrepancy_in_se: f64,
    pub pass_3se: bool,
    /// Same comparison with the couplings evolved freely to `t`.
    pub free_evolution_difference: EstimateReport,
    pub free_evolution_discrepancy_in_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleReport {
    pub samples: usize,
    pub seed: u64,
    pub effective_samples: f64,
    pub t: f64,
    pub rho: MatrixReport,
    pub rho_se: MatrixReport,
    pub pooled_se: f64,
    pub reduced_state: MatrixReport,
    pub trace_distance_to_reduced_state: f64,
    pub pass_3se: bool,
    pub mean_readout: MeanReadoutReport,
}

/// Importance-sampled ensemble over the full grid. Samples are computed in
/// parallel and merged in index order, so the result does not depend on the
/// thread count.
pub fn run_ensemble(r: &Resolved, samples: usize, seed: u64) -> Result<EnsembleEstimate> {
    if samples < 100 {
        return Err(CliError::Config {
            field: "sampling.n_samples".into(),
            message: "an ensemble needs at least 100 samples".into(),
        });
    }
    let w = r.grid.full();
    let solver = NmsseSolver::new(&r.model, &r.matrix, &r.grid, w)?;
    let prior = GaussianDensity::readout_prior(&r.matrix, w)?;
    let draws = (0..samples as u64)
        .into_par_iter()
        .map(|i| solver.sample(&prior, seed, i))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(EnsembleEstimate::from_samples(&draws, seed, w.len() - 1)?)
}

pub fn cmd_ensemble(r: &Resolved, samples: usize, seed: u64) -> Result<EnsembleReport> {
    if matches!(r.schedule, ScheduleKind::XReadout | ScheduleKind::Delayed) {
        return Err(CliError::Config {
            field: "schedule.kind".into(),
            message: "the ensemble unravels readout records read without delay; use zero-delay or all-in-one".into(),
        });
    }
    let est = run_ensemble(r, samples, seed)?;
    let reduced =
        DetectorChain::new(&r.model, &r.matrix, &r.grid, r.grid.full())?.reduced_state()?;
    let td = trace_distance(&est.rho, &reduced);
    let m = est.mean_readout;
    Ok(EnsembleReport {
        samples: est.samples,
        seed,
        effective_samples: est.effective_samples,
        t: r.grid.duration(),
        rho: MatrixReport::new(est.rho.matrix()),
        rho_se: MatrixReport::new(&est.rho_se),
        pooled_se: est.pooled_se(),
        reduced_state: MatrixReport::new(reduced.matrix()),
        trace_distance_to_reduced_state: td,
        pass_3se: td <= 3.0 * est.pooled_se(),
        mean_readout: MeanReadoutReport {
            readout_index: m.index,
            measured: m.measured.into(),
            predicted: m.predicted.into(),
            difference: m.difference.into(),
            discrepancy_in_se: m.discrepancy_in_se(),
            pass_3se: m.discrepancy_in_se() <= 3.0,
            free_evolution_difference: m.free_difference.into(),
            free_evolution_discrepancy_in_se: m.free_difference.mean.abs() / m.free_difference.se,
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectorReport {
    pub schedule: String,
    pub delay: f64,
    pub t: f64,
    pub readouts_known: usize,
    pub record: Vec<f64>,
    pub rho: MatrixReport,
    pub purity: f64,
    pub log_weight: Option<f64>,
}

/// Conditional states of the detector chain for one readout record under the
/// configured schedule, at every grid time.
pub fn cmd_detector(
    r: &Resolved,
    noise: Option<&Path>,
    seed: u64,
) -> Result<(Table, DetectorReport)> {
    let d = r.model.dim();
    let n = r.grid.n_steps();
    let lag = r.grid.steps_in(r.delay)?;
    let record = match r.schedule {
        ScheduleKind::XReadout => pointer_record(r, noise, seed)?,
        _ => readout_record(r, noise, seed)?,
    };
    let mut headers = vec![
        "t [time units]".to_string(),
        "known [number of readouts available at t]".to_string(),
        "log_weight [log density of the known readouts]".to_string(),
        "purity [tr rho^2]".to_string(),
    ];
    headers.extend(density_headers(d, "conditional state"));
    let mut table = Table::new(headers);
    let mut last = None;
    for k in 0..=n {
        let w = Window::prefix(k);
        let chain = DetectorChain::new(&r.model, &r.matrix, &r.grid, w)?;
        let (rho, log_weight, known): (DensityOperator, Option<f64>, usize) = match r.schedule {
            ScheduleKind::ZeroDelay => {
                let s = chain.conditional_state_z(&record.restrict(w)?)?;
                (s.rho, Some(s.log_weight), k)
            }
            ScheduleKind::XReadout => {
                let s = chain.conditional_state_x(&record.restrict(w)?)?;
                (s.rho, Some(s.log_weight), k)
            }
            ScheduleKind::Delayed => {
                let known = k.saturating_sub(lag);
                let delay = (k - known) as f64 * r.grid.epsilon();
                let mut rec = record.restrict(Window::prefix(known))?;
                rec.schedule = r.core_schedule();
                let s = chain.delayed_state(delay, &rec)?;
                (s.rho, Some(s.log_weight), known)
            }
            ScheduleKind::AllInOne if k < n => (chain.reduced_state()?, None, 0),
            ScheduleKind::AllInOne => {
                let mut rec = record.restrict(w)?;
                rec.schedule = r.core_schedule();
                let s = chain.conditional_state_z(&rec)?;
                (s.rho, Some(s.log_weight), k)
            }
        };
        let mut row = vec![
            Some(k as f64 * r.grid.epsilon()),
            Some(known as f64),
            log_weight,
            Some(rho.purity()),
        ];
        row.extend(density_cells(rho.matrix()));
        table.push(row);
        last = Some((rho, log_weight, known));
    }
    let (rho, log_weight, known) = last.expect("at least one row");
    let report = DetectorReport {
        schedule: r.schedule.name().to_string(),
        delay: r.delay,
        t: r.grid.duration(),
        readouts_known: known,
        record: record.values.iter().copied().collect(),
        rho: MatrixReport::new(rho.matrix()),
        purity: rho.purity(),
        log_weight,
    };
    Ok((table, report))
}
