//! Experiment configuration files (TOML) and their resolution into runnable
//! objects.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tweeze_core::denoiser::{Distribution, DistributionSpec, MixtureDenoiser};
use tweeze_core::editor::{EditConfig, Guidance};
use tweeze_core::{
    make_timestep_grid, GridSpacing, NoiseSchedule, PromptCondition, RegSchedule, Registry,
};

use crate::error::{CliError, CliResult};

pub const BUILTIN_TWO_CLUSTER: &str = "two_cluster";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub reg: RegSchedule,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub plot: PlotConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_steps: usize,
    pub t_max_fraction: f64,
    pub spacing: GridSpacing,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_steps: 12,
            t_max_fraction: 0.98,
            spacing: GridSpacing::UniformT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub src_scale: f64,
    pub tar_scale: f64,
    /// Distribution used as the unconditional prediction.
    pub uncond: Option<String>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            src_scale: 1.5,
            tar_scale: 1.5,
            uncond: Some("uncond".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `"two_cluster"` or a JSON file of distribution specs, relative to the
    /// config file.
    pub registry: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            registry: BUILTIN_TWO_CLUSTER.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n_instances: usize,
    pub src_distribution: String,
    pub tar_distribution: String,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_instances: 200,
            src_distribution: "src".into(),
            tar_distribution: "tar".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub dynamic_range: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { dynamic_range: 1.0 }
    }
}

/// Empty lists fall back to the single value in `[reg]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub active_steps: Vec<usize>,
    pub strength: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub gradient_states: usize,
    pub gradient_tolerance: f64,
    pub mc_triples: usize,
    pub mc_samples: usize,
    pub mc_required: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            gradient_states: 100,
            gradient_tolerance: tweeze_core::verify::DEFAULT_GRAD_TOLERANCE,
            mc_triples: 50,
            mc_samples: 1_000_000,
            mc_required: 48,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Existing trace to render; without it the configured edit is run.
    pub trace: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((cfg, base))
    }
}

/// A validated configuration together with the objects it refers to.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub edit: EditConfig,
    pub registry: Arc<Registry>,
    pub denoiser: Arc<MixtureDenoiser>,
}

impl Experiment {
    pub fn resolve(config: ExperimentConfig, base_dir: &Path) -> CliResult<Self> {
        let registry = Arc::new(load_registry(&config.model.registry, base_dir)?);
        let schedule = config.schedule;
        let grid = make_timestep_grid(
            &schedule,
            config.grid.n_steps,
            config.grid.t_max_fraction,
            config.grid.spacing,
        )?;
        let g = &config.guidance;
        // the unconditional distribution only matters when guidance is active
        let uncond = match &g.uncond {
            Some(name) if g.src_scale != 1.0 || g.tar_scale != 1.0 => Some(registry.prompt(name)?),
            _ => None,
        };
        let edit = EditConfig {
            grid,
            reg: config.reg,
            guidance: Guidance {
                src_scale: config.guidance.src_scale,
                tar_scale: config.guidance.tar_scale,
                uncond,
            },
            seed: config.seed,
        };
        edit.validate()?;
        for m in &config.sweep.active_steps {
            RegSchedule {
                active_steps: *m,
                ..config.reg
            }
            .validate(edit.grid.len())?;
        }
        for s in &config.sweep.strength {
            RegSchedule {
                strength: *s,
                ..config.reg
            }
            .validate(edit.grid.len())?;
        }
        let src = registry.get(&config.benchmark.src_distribution)?;
        let tar = registry.get(&config.benchmark.tar_distribution)?;
        if src.mixture.dim() != tar.mixture.dim() || src.layout != tar.layout {
            return Err(CliError::Config(
                "source and target distributions have different shapes".into(),
            ));
        }
        let r = config.metrics.dynamic_range;
        if !(r.is_finite() && r > 0.0) {
            return Err(CliError::Config(format!(
                "metrics.dynamic_range must be positive, got {r}"
            )));
        }
        let denoiser = Arc::new(MixtureDenoiser::new(registry.clone(), schedule));
        Ok(Self {
            config,
            schedule,
            edit,
            registry,
            denoiser,
        })
    }

    pub fn from_path(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let (mut cfg, base) = ExperimentConfig::load(path)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Self::resolve(cfg, &base)
    }

    pub fn prompts(&self) -> CliResult<(PromptCondition, PromptCondition)> {
        let b = &self.config.benchmark;
        Ok((
            self.registry.prompt(&b.src_distribution)?,
            self.registry.prompt(&b.tar_distribution)?,
        ))
    }

    pub fn target(&self) -> CliResult<&Distribution> {
        Ok(self.registry.get(&self.config.benchmark.tar_distribution)?)
    }
}

fn load_registry(reference: &str, base_dir: &Path) -> CliResult<Registry> {
    if reference == BUILTIN_TWO_CLUSTER {
        return Ok(Registry::two_cluster_benchmark());
    }
    let path = base_dir.join(reference);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let specs: Vec<DistributionSpec> = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Registry::from_specs(&specs)?)
}
