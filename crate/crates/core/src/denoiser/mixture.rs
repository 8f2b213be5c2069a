//! Isotropic Gaussian mixtures and their exact posterior-mean denoiser.

use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::schedule::NoiseSchedule;

/// `sum_k w_k N(mu_k, sigma^2 I)` with one shared component scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    component_sigma: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, component_sigma: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::config(format!(
                "mixture needs one weight per mean ({} weights, {} means)",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::config("mixture dimension must be at least 1"));
        }
        for m in &means {
            check_len(dim, m.len())?;
            check_finite(m, "mixture mean")?;
        }
        if !(component_sigma.is_finite() && component_sigma > 0.0) {
            return Err(Error::config("mixture component_sigma must be positive"));
        }
        Ok(Self {
            weights,
            means,
            component_sigma,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn component_sigma(&self) -> f64 {
        self.component_sigma
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Normalized component responsibilities for an observation
    /// `z ~ sum_k w_k N(scale * mu_k, var I)`.
    pub(crate) fn responsibilities(&self, z: &[f64], scale: f64, var: f64) -> Vec<f64> {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, mu)| {
                let d2: f64 = z
                    .iter()
                    .zip(mu)
                    .map(|(zi, mi)| {
                        let r = zi - scale * mi;
                        r * r
                    })
                    .sum();
                w.ln() - d2 / (2.0 * var)
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        unnorm.into_iter().map(|u| u / total).collect()
    }

    /// Appends one draw to `out`: a uniform picks the component, then one
    /// standard normal per coordinate.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.n_components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        for m in &self.means[k] {
            let e: f64 = StandardNormal.sample(rng);
            out.push(m + self.component_sigma * e);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.sample_into(rng, &mut out);
        out
    }

    /// `ln sum_k w_k N(z; mu_k, sigma^2 I)`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_len(self.dim(), z.len())?;
        check_finite(z, "log_density input")?;
        let var = self.component_sigma * self.component_sigma;
        let norm = -0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI * var).ln();
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, mu)| {
                let d2: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() + norm - d2 / (2.0 * var)
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }
}

/// `E[z_0 | z_t = z]` for `z_0` drawn from `mixture` and pushed through the
/// forward process to time `t`.
///
/// Each component contributes its Gaussian conditional mean
/// `mu_k + sqrt(a) s^2 / (a s^2 + 1 - a) * (z - sqrt(a) mu_k)`, weighted by
/// responsibilities computed in log space.
pub fn gmm_posterior_mean(
    mixture: &GaussianMixture,
    z: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len(mixture.dim(), z.len())?;
    check_finite(z, "posterior mean input")?;
    let a = schedule.alpha_bar(t)?;
    if a == 1.0 {
        return Ok(z.to_vec());
    }
    let root = a.sqrt();
    let s2 = mixture.component_sigma * mixture.component_sigma;
    let var = a * s2 + (1.0 - a);
    let gain = root * s2 / var;
    let resp = mixture.responsibilities(z, root, var);

    let mut out = vec![0.0; z.len()];
    for (r, mu) in resp.iter().zip(&mixture.means) {
        for ((o, zi), mi) in out.iter_mut().zip(z).zip(mu) {
            *o += r * (mi + gain * (zi - root * mi));
        }
    }
    check_finite(&out, "posterior mean")?;
    Ok(out)
}
