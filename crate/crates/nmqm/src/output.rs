//! Tables, reports and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{OutputFormat, RunConfig};
use crate::error::{CliError, Result};

/// Numeric table; `None` cells are written empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn new(headers: Vec<String>) -> Self {
        Self {
            headers,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Option<f64>>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn column(&self, name_prefix: &str) -> Option<usize> {
        self.headers.iter().position(|h| h.starts_with(name_prefix))
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(
                row.iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            )?;
        }
        w.into_inner()
            .map_err(|e| CliError::Csv(e.into_error().into()))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let rows: Vec<BTreeMap<&str, Option<f64>>> = self
            .rows
            .iter()
            .map(|r| {
                self.headers
                    .iter()
                    .map(String::as_str)
                    .zip(r.iter().copied())
                    .collect()
            })
            .collect();
        Ok(serde_json::to_vec_pretty(&rows)?)
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let headers = r.headers()?.iter().map(str::to_string).collect();
        let mut table = Table::new(headers);
        for rec in r.records() {
            let rec = rec?;
            table
                .rows
                .push(rec.iter().map(|s| s.parse().ok()).collect());
        }
        Ok(table)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance of one run. Wall-clock time lives only here, never in the
/// numeric outputs, so those stay byte-identical across reruns.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub outputs: BTreeMap<String, String>,
}

/// Writes artifacts into one directory and tracks their checksums.
pub struct RunWriter {
    dir: PathBuf,
    format: OutputFormat,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

impl RunWriter {
    pub fn new(dir: &Path, format: OutputFormat) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            outputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Writes `stem.csv` or `stem.json` depending on the configured format.
    pub fn table(&mut self, stem: &str, table: &Table) -> Result<PathBuf> {
        match self.format {
            OutputFormat::Csv => self.write(&format!("{stem}.csv"), &table.to_csv()?),
            OutputFormat::Json => self.write(&format!("{stem}.json"), &table.to_json()?),
        }
    }

    pub fn report<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(self, command: &str, config: &RunConfig) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: sha256_hex(config.to_toml().as_bytes()),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.sampling.seed,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
        };
        let path = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_empty_cells() {
        let mut t = Table::new(vec!["a".into(), "b".into()]);
        t.push(vec![Some(0.1), None]);
        t.push(vec![Some(-2.5e-17), Some(3.0)]);
        let back = Table::from_csv(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn checksum_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
