//! Run configuration: a TOML file with `model`, `kernel`, `grid`,
//! `schedule`, `sampling` and `output` blocks.
//!
//! Complex numbers are written as `[re, im]` pairs, matrices as nested rows
//! of pairs.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use nmqm_core::kernel::{build_kernel_matrix, KernelMatrix, MemoryKernel, TimeGrid};
use nmqm_core::quantum::{c, ModelSpec, C64};
use nmqm_core::Schedule;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub type Pair = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub kernel: KernelBlock,
    pub grid: GridBlock,
    pub schedule: ScheduleBlock,
    pub sampling: SamplingBlock,
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub dim: usize,
    pub hamiltonian: Vec<Vec<Pair>>,
    pub coupling: Vec<Vec<Pair>>,
    pub initial_state: Vec<Pair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Exponential,
    Markov,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBlock {
    pub kind: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Defaults to `lambda / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    /// `[lag, value]` rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Pair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub epsilon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    ZeroDelay,
    Delayed,
    XReadout,
    AllInOne,
}

impl ScheduleKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "zero-delay" => Some(Self::ZeroDelay),
            "delayed" => Some(Self::Delayed),
            "x-readout" => Some(Self::XReadout),
            "all-in-one" => Some(Self::AllInOne),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ZeroDelay => "zero-delay",
            Self::Delayed => "delayed",
            Self::XReadout => "x-readout",
            Self::AllInOne => "all-in-one",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    pub kind: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBlock {
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub directory: PathBuf,
    pub format: OutputFormat,
}

/// Everything a command needs, validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelSpec,
    pub kernel: MemoryKernel,
    pub grid: TimeGrid,
    pub matrix: KernelMatrix,
    pub schedule: ScheduleKind,
    pub delay: f64,
}

impl Resolved {
    pub fn core_schedule(&self) -> Schedule {
        match self.schedule {
            ScheduleKind::Delayed => Schedule::Delayed { delay: self.delay },
            ScheduleKind::AllInOne => Schedule::AllInOne,
            ScheduleKind::ZeroDelay | ScheduleKind::XReadout => Schedule::ZeroDelay,
        }
    }
}

fn pair(p: &[f64; 2]) -> C64 {
    c(p[0], p[1])
}

fn to_pair(z: C64) -> Pair {
    [z.re, z.im]
}

fn field(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

fn matrix(name: &str, rows: &[Vec<Pair>], dim: usize) -> Result<DMatrix<C64>> {
    if rows.len() != dim {
        return Err(field(
            name,
            format!("expected {dim} rows, found {}", rows.len()),
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(field(
                &format!("{name}[{i}]"),
                format!("expected {dim} entries, found {}", row.len()),
            ));
        }
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| pair(&rows[i][j])))
}

fn matrix_rows(m: &DMatrix<C64>) -> Vec<Vec<Pair>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| to_pair(m[(i, j)])).collect())
        .collect()
}

impl Default for RunConfig {
    /// Driven qubit `H = σx` monitored through `x̂ = σz` from `|0⟩`,
    /// exponential kernel with `λ = 1`, `ε = 0.1`, `N = 8`, `10⁴` samples.
    fn default() -> Self {
        let model = ModelSpec::default_qubit();
        RunConfig {
            model: ModelBlock {
                dim: 2,
                hamiltonian: matrix_rows(model.hamiltonian()),
                coupling: matrix_rows(model.coupling()),
                initial_state: model.initial_state().iter().map(|z| to_pair(*z)).collect(),
            },
            kernel: KernelBlock {
                kind: KernelKind::Exponential,
                lambda: Some(1.0),
                amplitude: None,
                g: None,
                table: None,
            },
            grid: GridBlock {
                epsilon: 0.1,
                n_steps: 8,
            },
            schedule: ScheduleBlock {
                kind: ScheduleKind::ZeroDelay,
                delay: None,
            },
            sampling: SamplingBlock {
                n_samples: 10_000,
                seed: 1,
            },
            output: OutputBlock {
                directory: PathBuf::from("out"),
                format: OutputFormat::Csv,
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn memory_kernel(&self) -> Result<MemoryKernel> {
        let k = &self.kernel;
        let kernel = match k.kind {
            KernelKind::Exponential => {
                let lambda = k
                    .lambda
                    .ok_or_else(|| field("kernel.lambda", "required for an exponential kernel"))?;
                if !(lambda.is_finite() && lambda > 0.0) {
                    return Err(field("kernel.lambda", "must be positive"));
                }
                let amplitude = k.amplitude.unwrap_or(lambda / 2.0);
                if !(amplitude.is_finite() && amplitude > 0.0) {
                    return Err(field("kernel.amplitude", "must be positive"));
                }
                MemoryKernel::Exponential { lambda, amplitude }
            }
            KernelKind::Markov => {
                let g =
                    k.g.ok_or_else(|| field("kernel.g", "required for a Markov kernel"))?;
                if !g.is_finite() {
                    return Err(field("kernel.g", "must be finite"));
                }
                MemoryKernel::MarkovDelta { g }
            }
            KernelKind::Tabulated => {
                let table = k
                    .table
                    .as_ref()
                    .ok_or_else(|| field("kernel.table", "required for a tabulated kernel"))?;
                let lags = table.iter().map(|p| p[0]).collect();
                let values = table.iter().map(|p| p[1]).collect();
                let kernel = MemoryKernel::Tabulated { lags, values };
                kernel
                    .validate()
                    .map_err(|e| field("kernel.table", e.to_string()))?;
                kernel
            }
        };
        Ok(kernel)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        if m.dim == 0 {
            return Err(field("model.dim", "must be at least 1"));
        }
        let h = matrix("model.hamiltonian", &m.hamiltonian, m.dim)?;
        let x = matrix("model.coupling", &m.coupling, m.dim)?;
        if m.initial_state.len() != m.dim {
            return Err(field(
                "model.initial_state",
                format!(
                    "expected {} entries, found {}",
                    m.dim,
                    m.initial_state.len()
                ),
            ));
        }
        let psi = DVector::from_iterator(m.dim, m.initial_state.iter().map(pair));
        ModelSpec::new(h, x, psi).map_err(|e| field("model", e.to_string()))
    }

    /// Checks every block and builds the numerical objects.
    pub fn resolve(&self) -> Result<Resolved> {
        let model = self.model_spec()?;
        let kernel = self.memory_kernel()?;
        if !(self.grid.epsilon.is_finite() && self.grid.epsilon > 0.0) {
            return Err(field("grid.epsilon", "must be positive"));
        }
        if self.grid.n_steps == 0 {
            return Err(field("grid.n_steps", "must be at least 1"));
        }
        let grid = TimeGrid::new(self.grid.epsilon, self.grid.n_steps)
            .map_err(|e| field("grid", e.to_string()))?;
        let delay = match (self.schedule.kind, self.schedule.delay) {
            (ScheduleKind::Delayed, None) => {
                return Err(field("schedule.delay", "required for a delayed schedule"))
            }
            (ScheduleKind::Delayed, Some(t)) => {
                let steps = grid
                    .steps_in(t)
                    .map_err(|e| field("schedule.delay", e.to_string()))?;
                if steps > grid.n_steps() {
                    return Err(field("schedule.delay", "exceeds the simulated time"));
                }
                t
            }
            _ => 0.0,
        };
        if self.sampling.n_samples == 0 {
            return Err(field("sampling.n_samples", "must be positive"));
        }
        let matrix = build_kernel_matrix(&kernel, &grid, grid.full()).map_err(CliError::Core)?;
        Ok(Resolved {
            model,
            kernel,
            grid,
            matrix,
            schedule: self.schedule.kind,
            delay,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        let r = back.resolve().unwrap();
        assert_eq!(r.grid.n_steps(), 8);
        assert_eq!(r.model.dim(), 2);
    }

    #[test]
    fn missing_block_is_rejected() {
        let text = RunConfig::default().to_toml();
        let cut = text.split("[sampling]").next().unwrap();
        assert!(matches!(RunConfig::from_toml(cut), Err(CliError::Parse(_))));
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let text = RunConfig::default()
            .to_toml()
            .replace("epsilon = 0.1", "epsilon = \"fast\"");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn field_diagnostics() {
        let mut cfg = RunConfig::default();
        cfg.kernel.lambda = Some(-1.0);
        assert!(cfg
            .resolve()
            .unwrap_err()
            .to_string()
            .contains("kernel.lambda"));

        let cfg = RunConfig {
            schedule: ScheduleBlock {
                kind: ScheduleKind::Delayed,
                delay: Some(0.25),
            },
            ..RunConfig::default()
        };
        assert!(cfg
            .resolve()
            .unwrap_err()
            .to_string()
            .contains("schedule.delay"));

        let mut cfg = RunConfig::default();
        cfg.model.initial_state = vec![[1.0, 0.0], [1.0, 0.0]];
        assert!(cfg.resolve().unwrap_err().to_string().contains("model"));

        let mut cfg = RunConfig::default();
        cfg.model.hamiltonian.pop();
        assert!(cfg
            .resolve()
            .unwrap_err()
            .to_string()
            .contains("model.hamiltonian"));
    }

    #[test]
    fn corrupted_tabulated_kernel_is_not_positive() {
        let cfg = RunConfig {
            kernel: KernelBlock {
                kind: KernelKind::Tabulated,
                lambda: None,
                amplitude: None,
                g: None,
                table: Some(vec![[0.0, -0.5], [0.1, -0.45], [1.0, 0.0]]),
            },
            ..RunConfig::default()
        };
        assert!(matches!(
            cfg.resolve(),
            Err(CliError::Core(nmqm_core::Error::NotPositiveDefinite { .. }))
        ));
    }

    #[test]
    fn delayed_schedule_resolves() {
        let cfg = RunConfig {
            schedule: ScheduleBlock {
                kind: ScheduleKind::Delayed,
                delay: Some(0.3),
            },
            ..RunConfig::default()
        };
        let r = cfg.resolve().unwrap();
        assert_eq!(r.core_schedule(), Schedule::Delayed { delay: 0.3 });
    }
}
