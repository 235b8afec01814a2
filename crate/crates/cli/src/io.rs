//! File formats: solution and schedule JSON, the persistent seed store,
//! and CSV emission.
//!
//! All floating-point numbers are serialized with 17 significant digits,
//! which round-trips f64 losslessly and makes write -> read -> write
//! byte-identical. Seed-store entries carry a SHA-256 checksum over their
//! canonical serialization; a mismatch on load is an error, never a
//! silent repair.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qbrach::baseline::{Schedule, ScheduleLabel, Segment};
use qbrach::chain::ChainSpec;
use qbrach::solver::{ShootingParams, SolveMethod, Solution, SolverMetadata};

use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;

/// 17-significant-digit float formatting shared by JSON and CSV output.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// serde_json formatter that prints every float with 17 significant
/// digits.
struct Fixed17Formatter;

impl serde_json::ser::Formatter for Fixed17Formatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Pretty is deliberately avoided: a single canonical line layout keeps
/// byte-identical round trips trivial.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Fixed17Formatter);
    value
        .serialize(&mut ser)
        .map_err(|e| CliError::Schema(format!("serialization failed: {e}")))?;
    String::from_utf8(out).map_err(|e| CliError::Schema(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = to_json_string(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

/// Solved transfer instance on disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolutionFile {
    pub format_version: u32,
    pub kind: String,
    pub n_sites: usize,
    pub j0: f64,
    pub tau: f64,
    pub fidelity: f64,
    pub residual_norm: f64,
    pub converged: bool,
    pub method: SolveMethod,
    pub iterations: usize,
    pub residual_tol: f64,
    pub integration_tol: f64,
    /// Canonical parameters: j1_initial = J0, dimensionless multipliers.
    pub params: ShootingParams,
}

impl SolutionFile {
    pub fn from_solution(sol: &Solution, converged: bool) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: "solution".into(),
            n_sites: sol.spec.n_sites(),
            j0: sol.spec.j0(),
            tau: sol.tau,
            fidelity: sol.fidelity,
            residual_norm: sol.residual_norm,
            converged,
            method: sol.metadata.method,
            iterations: sol.metadata.iterations,
            residual_tol: sol.metadata.residual_tol,
            integration_tol: sol.metadata.integration_tol,
            params: sol.params.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.kind != "solution" {
            return Err(CliError::Schema(format!(
                "expected kind \"solution\", found \"{}\"",
                self.kind
            )));
        }
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::Schema(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.params.lambda_initial.len() != self.n_sites - 2 {
            return Err(CliError::Schema(format!(
                "params.lambda_initial has {} entries, expected {}",
                self.params.lambda_initial.len(),
                self.n_sites - 2
            )));
        }
        if !(self.tau > 0.0) || !(0.0..=1.0).contains(&self.fidelity) {
            return Err(CliError::Schema(
                "tau must be positive and fidelity in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn to_solution(&self) -> Result<Solution, CliError> {
        self.validate()?;
        let spec = ChainSpec::new(self.n_sites, self.j0).map_err(CliError::from_core)?;
        Ok(Solution {
            spec,
            params: self.params.clone(),
            tau: self.tau,
            fidelity: self.fidelity,
            residual_norm: self.residual_norm,
            trajectory: None,
            metadata: SolverMetadata {
                method: self.method,
                iterations: self.iterations,
                residual_tol: self.residual_tol,
                integration_tol: self.integration_tol,
            },
        })
    }
}

/// Piecewise-constant schedule on disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleFile {
    pub format_version: u32,
    pub kind: String,
    pub n_sites: usize,
    pub j0: f64,
    pub label: ScheduleLabel,
    pub segments: Vec<Segment>,
}

impl ScheduleFile {
    pub fn from_schedule(s: &Schedule) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: "schedule".into(),
            n_sites: s.spec.n_sites(),
            j0: s.spec.j0(),
            label: s.label,
            segments: s.segments().to_vec(),
        }
    }

    pub fn to_schedule(&self) -> Result<Schedule, CliError> {
        if self.kind != "schedule" {
            return Err(CliError::Schema(format!(
                "expected kind \"schedule\", found \"{}\"",
                self.kind
            )));
        }
        let spec = ChainSpec::new(self.n_sites, self.j0).map_err(CliError::from_core)?;
        Schedule::new(spec, self.label, self.segments.clone()).map_err(CliError::from_core)
    }
}

/// Minimal tag used to dispatch on input files.
#[derive(Debug, Deserialize)]
pub struct KindProbe {
    pub kind: String,
}

/// One canonical solution summary per chain length.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedEntry {
    pub n_sites: usize,
    pub j0: f64,
    pub tau: f64,
    pub fidelity: f64,
    pub method: SolveMethod,
    pub iterations: usize,
    pub params: ShootingParams,
    pub checksum: String,
}

/// Checksum input: the entry with its checksum field blanked.
#[derive(Serialize)]
struct SeedEntryCore<'a> {
    n_sites: usize,
    j0: f64,
    tau: f64,
    fidelity: f64,
    method: SolveMethod,
    iterations: usize,
    params: &'a ShootingParams,
}

impl SeedEntry {
    pub fn from_solution(sol: &Solution) -> Result<Self, CliError> {
        let mut entry = Self {
            n_sites: sol.spec.n_sites(),
            j0: sol.spec.j0(),
            tau: sol.tau,
            fidelity: sol.fidelity,
            method: sol.metadata.method,
            iterations: sol.metadata.iterations,
            params: sol.params.clone(),
            checksum: String::new(),
        };
        entry.checksum = entry.compute_checksum()?;
        Ok(entry)
    }

    pub fn compute_checksum(&self) -> Result<String, CliError> {
        let core = SeedEntryCore {
            n_sites: self.n_sites,
            j0: self.j0,
            tau: self.tau,
            fidelity: self.fidelity,
            method: self.method,
            iterations: self.iterations,
            params: &self.params,
        };
        let canonical = to_json_string(&core)?;
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        Ok(hex)
    }

    /// Raw shooting guess implied by this entry (entries are re-solved,
    /// never trusted as answers).
    pub fn raw_guess(&self) -> ShootingParams {
        let tau_scaled = self.tau * self.j0;
        ShootingParams {
            j1_initial: tau_scaled,
            lambda_initial: self
                .params
                .lambda_initial
                .iter()
                .map(|l| l * tau_scaled)
                .collect(),
        }
    }
}

/// Persistent map from chain length to canonical solution summary.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct SeedStore {
    pub format_version: u32,
    pub kind: String,
    pub entries: BTreeMap<usize, SeedEntry>,
}

impl SeedStore {
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: "seed_store".into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let store: SeedStore = read_json(path)?;
        if store.kind != "seed_store" {
            return Err(CliError::Schema(format!(
                "expected kind \"seed_store\", found \"{}\"",
                store.kind
            )));
        }
        for (n, entry) in &store.entries {
            if *n != entry.n_sites {
                return Err(CliError::Validation(format!(
                    "seed entry keyed {n} claims n_sites = {}",
                    entry.n_sites
                )));
            }
            if entry.params.lambda_initial.len() != entry.n_sites - 2 {
                return Err(CliError::Validation(format!(
                    "seed entry {n} has {} multipliers, expected {}",
                    entry.params.lambda_initial.len(),
                    entry.n_sites - 2
                )));
            }
            if !(0.0..=1.0).contains(&entry.fidelity) || !(entry.tau > 0.0) {
                return Err(CliError::Validation(format!(
                    "seed entry {n} violates solution invariants"
                )));
            }
            let expect = entry.compute_checksum()?;
            if expect != entry.checksum {
                return Err(CliError::Validation(format!(
                    "seed entry {n} checksum mismatch: stored {}, computed {expect}",
                    entry.checksum
                )));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self)
    }

    pub fn insert_solution(&mut self, sol: &Solution) -> Result<(), CliError> {
        let entry = SeedEntry::from_solution(sol)?;
        self.entries.insert(entry.n_sites, entry);
        Ok(())
    }
}

/// Write one CSV row of 17-digit floats after arbitrary leading fields.
pub fn csv_row(fields: &[String]) -> String {
    fields.join(",")
}
