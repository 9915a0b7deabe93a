//! Experiment reports: per-instance scores, aggregates and an
//! experiment-specific payload, serialized as JSON.

use std::collections::BTreeMap;
use std::path::Path;

use cost_core::probe::mean_stderr;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// A mean with its standard error and sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, stderr) = mean_stderr(values);
        Some(Self { mean, stderr, n: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceScore {
    pub id: String,
    /// Position of the instance in its split.
    pub index: u64,
    pub score: f64,
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Sorted by instance id.
    pub instances: Vec<InstanceScore>,
    /// Absent when the experiment scores no instances.
    pub aggregate: Option<Stat>,
    pub payload: serde_json::Value,
    /// Files written next to the report, relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
}

impl Report {
    pub fn new(
        experiment: &str,
        config_hash: &str,
        seeds: Vec<u64>,
        mut instances: Vec<InstanceScore>,
        payload: serde_json::Value,
    ) -> Self {
        instances.sort_by(|a, b| a.id.cmp(&b.id).then(a.index.cmp(&b.index)));
        let scores: Vec<f64> = instances.iter().map(|i| i.score).collect();
        Self {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.into(),
            config_hash: config_hash.into(),
            seeds,
            aggregate: Stat::of(&scores),
            instances,
            payload,
            artifacts: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    /// Recomputes the aggregate from the instance entries and compares.
    pub fn verify_aggregate(&self) -> Result<()> {
        let scores: Vec<f64> = self.instances.iter().map(|i| i.score).collect();
        match (Stat::of(&scores), self.aggregate) {
            (None, None) => Ok(()),
            (Some(a), Some(b))
                if a.n == b.n && (a.mean - b.mean).abs() <= 1e-12 && (a.stderr - b.stderr).abs() <= 1e-12 =>
            {
                Ok(())
            }
            (a, b) => Err(CliError::Report(format!("aggregate {b:?} does not match recomputation {a:?}"))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
