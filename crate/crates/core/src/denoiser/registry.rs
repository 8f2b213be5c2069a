//! Named data distributions that prompt conditions select.
//!
//! A registry entry is either an inline Gaussian mixture or a set of `G x G`
//! templates built from Gaussian blobs; both end up as a [`GaussianMixture`]
//! whose layout records whether samples are vectors or grids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mixture::GaussianMixture;
use crate::error::{Error, Result};
use crate::latent::Layout;

/// Conditioning handle passed to a denoiser. `distribution_ref` names the
/// registry entry the condition resolves to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptCondition {
    pub label: String,
    pub distribution_ref: String,
}

impl PromptCondition {
    pub fn new(label: impl Into<String>, distribution_ref: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            distribution_ref: distribution_ref.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// `[row, col]` in pixel units.
    pub center: [f64; 2],
    pub amplitude: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub blobs: Vec<Blob>,
}

/// One entry of a registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Gmm {
        name: String,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        sigma: f64,
    },
    Templates {
        name: String,
        grid_size: usize,
        weights: Vec<f64>,
        templates: Vec<Template>,
        sigma: f64,
    },
}

impl DistributionSpec {
    pub fn name(&self) -> &str {
        match self {
            DistributionSpec::Gmm { name, .. } | DistributionSpec::Templates { name, .. } => name,
        }
    }
}

/// Renders blobs onto a row-major `side x side` grid.
pub fn render_template(template: &Template, side: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for row in 0..side {
        for col in 0..side {
            let v: f64 = template
                .blobs
                .iter()
                .map(|b| {
                    let dr = row as f64 - b.center[0];
                    let dc = col as f64 - b.center[1];
                    b.amplitude * (-(dr * dr + dc * dc) / (2.0 * b.width * b.width)).exp()
                })
                .sum();
            out[row * side + col] = v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub mixture: GaussianMixture,
    pub layout: Layout,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    entries: BTreeMap<String, Distribution>,
}

impl Registry {
    pub fn from_specs(specs: &[DistributionSpec]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for spec in specs {
            let dist = match spec {
                DistributionSpec::Gmm {
                    weights,
                    means,
                    sigma,
                    ..
                } => Distribution {
                    mixture: GaussianMixture::new(weights.clone(), means.clone(), *sigma)?,
                    layout: Layout::Vector,
                },
                DistributionSpec::Templates {
                    grid_size,
                    weights,
                    templates,
                    sigma,
                    ..
                } => {
                    if *grid_size == 0 {
                        return Err(Error::config("templates.grid_size must be positive"));
                    }
                    for b in templates.iter().flat_map(|t| &t.blobs) {
                        if b.width.is_nan() || b.width <= 0.0 {
                            return Err(Error::config("blob width must be positive"));
                        }
                    }
                    let means = templates
                        .iter()
                        .map(|t| render_template(t, *grid_size))
                        .collect();
                    Distribution {
                        mixture: GaussianMixture::new(weights.clone(), means, *sigma)?,
                        layout: Layout::Grid(*grid_size),
                    }
                }
            };
            if entries.insert(spec.name().to_string(), dist).is_some() {
                return Err(Error::config(format!(
                    "distribution '{}' registered twice",
                    spec.name()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, name: impl Into<String>, dist: Distribution) {
        self.entries.insert(name.into(), dist);
    }

    pub fn get(&self, name: &str) -> Result<&Distribution> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown distribution '{name}'")))
    }

    pub fn resolve(&self, prompt: &PromptCondition) -> Result<&Distribution> {
        self.get(&prompt.distribution_ref)
    }

    /// A prompt whose label is the distribution name.
    pub fn prompt(&self, name: &str) -> Result<PromptCondition> {
        self.get(name)?;
        Ok(PromptCondition::new(name, name))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// The 2D benchmark: two source clusters at `x = -2`, two target clusters
    /// at `x = +2`, the cluster row at `y = +-3` shared between them, plus the
    /// union of all four as `uncond`.
    pub fn two_cluster_benchmark() -> Self {
        let src = vec![vec![-2.0, -3.0], vec![-2.0, 3.0]];
        let tar = vec![vec![2.0, -3.0], vec![2.0, 3.0]];
        let union: Vec<Vec<f64>> = src.iter().chain(&tar).cloned().collect();
        let specs = [
            DistributionSpec::Gmm {
                name: "src".into(),
                weights: vec![0.5, 0.5],
                means: src,
                sigma: 1.0,
            },
            DistributionSpec::Gmm {
                name: "tar".into(),
                weights: vec![0.5, 0.5],
                means: tar,
                sigma: 1.0,
            },
            DistributionSpec::Gmm {
                name: "uncond".into(),
                weights: vec![0.25; 4],
                means: union,
                sigma: 1.0,
            },
        ];
        Self::from_specs(&specs).expect("built-in registry is valid")
    }
}
