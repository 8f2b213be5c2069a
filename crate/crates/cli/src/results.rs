//! Run result files. Wall-clock times live in a `.timing.json` sidecar so the
//! result file itself is reproducible byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tweeze_core::metrics::MetricReport;

use crate::bench::{Method, Outcome};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceResult {
    pub id: usize,
    pub seed: u64,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub n: usize,
    pub mse: Stat,
    pub ssim: Option<Stat>,
    pub path_length: Stat,
    pub target_nll: Stat,
}

impl Aggregate {
    pub fn of(instances: &[InstanceResult]) -> Self {
        let col = |f: fn(&MetricReport) -> f64| -> Vec<f64> {
            instances.iter().map(|i| f(&i.metrics)).collect()
        };
        let ssim: Option<Vec<f64>> = instances.iter().map(|i| i.metrics.ssim).collect();
        Self {
            n: instances.len(),
            mse: Stat::of(&col(|m| m.mse)),
            ssim: ssim.filter(|v| !v.is_empty()).map(|v| Stat::of(&v)),
            path_length: Stat::of(&col(|m| m.path_length)),
            target_nll: Stat::of(&col(|m| m.target_nll)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub label: String,
    pub method: Method,
    pub config: ExperimentConfig,
    pub instances: Vec<InstanceResult>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seconds_per_edit: Vec<f64>,
    pub total_seconds: f64,
}

impl RunResult {
    pub fn new(
        label: String,
        method: Method,
        config: ExperimentConfig,
        outcomes: &[Outcome],
    ) -> Self {
        let mut instances: Vec<InstanceResult> = outcomes
            .iter()
            .map(|o| InstanceResult {
                id: o.id,
                seed: o.seed,
                metrics: o.metrics.clone(),
            })
            .collect();
        instances.sort_by_key(|i| i.id);
        let aggregate = Aggregate::of(&instances);
        Self {
            label,
            method,
            config,
            instances,
            aggregate,
        }
    }

    /// Aggregates must be exactly what the instance list produces.
    pub fn check(&self) -> CliResult<()> {
        if Aggregate::of(&self.instances) != self.aggregate {
            return Err(CliError::Verification(format!(
                "run '{}': aggregates do not match the instance entries",
                self.label
            )));
        }
        for i in &self.instances {
            i.metrics.check()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Verification(format!("serializing run result: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let r: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Verification(format!("malformed run result: {e}")))?;
        r.check()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Writes `<stem>.json` and `<stem>.timing.json` under `dir`.
    pub fn save(
        &self,
        dir: &Path,
        stem: &str,
        outcomes: &[Outcome],
        total_seconds: f64,
    ) -> CliResult<PathBuf> {
        let path = dir.join(format!("{stem}.json"));
        write_file(&path, self.to_json()?.as_bytes())?;
        let timing = Timing {
            label: self.label.clone(),
            seconds_per_edit: outcomes.iter().map(|o| o.seconds).collect(),
            total_seconds,
        };
        write_json(&dir.join(format!("{stem}.timing.json")), &timing)?;
        Ok(path)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Verification(format!("serializing {}: {e}", path.display())))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}
