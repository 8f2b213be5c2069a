//! Clean-sample predictors `f(z, t, prompt)`.
//!
//! [`MixtureDenoiser`] is the exact posterior mean under a registered
//! distribution, which is the ideal consistency function for that data.
//! Noise- and velocity-prediction models plug in through the adapters in
//! this module.

mod mixture;
mod registry;

use std::sync::Arc;

pub use mixture::{gmm_posterior_mean, GaussianMixture};
pub use registry::{
    render_template, Blob, Distribution, DistributionSpec, PromptCondition, Registry, Template,
};

use crate::error::{check_len, Error, Result};
use crate::schedule::NoiseSchedule;

/// Predicts the clean sample from `z` at time `t` under `prompt`.
///
/// Implementations are pure: repeated calls with the same arguments return
/// identical output.
pub trait Denoiser: Send + Sync {
    fn predict(&self, z: &[f64], t: f64, prompt: &PromptCondition) -> Result<Vec<f64>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, z: &[f64], t: f64, prompt: &PromptCondition) -> Result<Vec<f64>> {
        (**self).predict(z, t, prompt)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict(&self, z: &[f64], t: f64, prompt: &PromptCondition) -> Result<Vec<f64>> {
        (**self).predict(z, t, prompt)
    }
}

/// Exact posterior-mean denoiser over a [`Registry`].
#[derive(Debug, Clone)]
pub struct MixtureDenoiser {
    registry: Arc<Registry>,
    schedule: NoiseSchedule,
}

impl MixtureDenoiser {
    pub fn new(registry: Arc<Registry>, schedule: NoiseSchedule) -> Self {
        Self { registry, schedule }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl Denoiser for MixtureDenoiser {
    fn predict(&self, z: &[f64], t: f64, prompt: &PromptCondition) -> Result<Vec<f64>> {
        let dist = self.registry.resolve(prompt)?;
        gmm_posterior_mean(&dist.mixture, z, t, &self.schedule)
    }
}

/// `(z - sqrt(1 - a) eps_hat) / sqrt(a)`.
pub fn clean_from_noise_pred(
    z: &[f64],
    t: f64,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len(z.len(), eps_hat.len())?;
    let a = schedule.alpha_bar(t)?;
    if a <= schedule.alpha_floor() {
        return Err(Error::DegenerateTimestep { t, alpha_bar: a });
    }
    let (root, noise) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z.iter()
        .zip(eps_hat)
        .map(|(zi, ei)| (zi - noise * ei) / root)
        .collect())
}

/// Inverse of [`clean_from_noise_pred`]: `(z - sqrt(a) f) / sqrt(1 - a)`.
///
/// At `alpha_bar = 1` the noisy and clean samples coincide and the noise is
/// unidentifiable; zero is returned there.
pub fn noise_from_clean_pred(
    z: &[f64],
    t: f64,
    clean: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len(z.len(), clean.len())?;
    let a = schedule.alpha_bar(t)?;
    if a == 1.0 {
        return Ok(vec![0.0; z.len()]);
    }
    let (root, noise) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z.iter()
        .zip(clean)
        .map(|(zi, fi)| (zi - root * fi) / noise)
        .collect())
}

fn check_unit_time(t_unit: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t_unit) {
        return Err(Error::Domain {
            t: t_unit,
            horizon: 1.0,
        });
    }
    Ok(())
}

/// Linear-path velocity model: `z - t_unit * v_hat` with `t_unit in [0, 1]`.
pub fn clean_from_velocity_pred(z: &[f64], t_unit: f64, v_hat: &[f64]) -> Result<Vec<f64>> {
    check_len(z.len(), v_hat.len())?;
    check_unit_time(t_unit)?;
    Ok(z.iter()
        .zip(v_hat)
        .map(|(zi, vi)| zi - t_unit * vi)
        .collect())
}

/// Inverse of [`clean_from_velocity_pred`]; zero velocity at `t_unit = 0`.
pub fn velocity_from_clean_pred(z: &[f64], t_unit: f64, clean: &[f64]) -> Result<Vec<f64>> {
    check_len(z.len(), clean.len())?;
    check_unit_time(t_unit)?;
    if t_unit == 0.0 {
        return Ok(vec![0.0; z.len()]);
    }
    Ok(z.iter()
        .zip(clean)
        .map(|(zi, fi)| (zi - fi) / t_unit)
        .collect())
}

/// A model that predicts the noise `eps` added by the forward process.
pub trait NoisePredictor: Send + Sync {
    fn predict_noise(&self, z: &[f64], t: f64, prompt: &PromptCondition) -> Result<Vec<f64>>;
}

/// A model that predicts linear-path velocity at unit time `t_unit`.
pub trait VelocityPredictor: Send + Sync {
    fn predict_velocity(
        &self,
        z: &[f64],
        t_unit: f64,
        prompt: &PromptCondition,
    ) -> Result<Vec<f64>>;
}

/// Wraps a noise predictor as a clean-sample [`Denoiser`].
pub struct FromNoisePredictor<P> {
    pub model: P,
    pub schedule: NoiseSchedule,
}

impl<P: NoisePredictor> Denoiser for FromNoisePredictor<P> {
    fn predict(&self, z: &[f64], t: f64, prompt: &PromptCondition) -> Result<Vec<f64>> {
        let eps = self.model.predict_noise(z, t, prompt)?;
        clean_from_noise_pred(z, t, &eps, &self.schedule)
    }
}

/// Wraps a velocity predictor as a [`Denoiser`]. Schedule time maps to the
/// linear path as `t_unit = t / T`.
pub struct FromVelocityPredictor<P> {
    pub model: P,
    pub schedule: NoiseSchedule,
}

impl<P: VelocityPredictor> Denoiser for FromVelocityPredictor<P> {
    fn predict(&self, z: &[f64], t: f64, prompt: &PromptCondition) -> Result<Vec<f64>> {
        let t_unit = t / self.schedule.horizon();
        let v = self.model.predict_velocity(z, t_unit, prompt)?;
        clean_from_velocity_pred(z, t_unit, &v)
    }
}

/// Exposes a clean-sample denoiser as a noise predictor.
pub struct AsNoisePredictor<D> {
    pub denoiser: D,
    pub schedule: NoiseSchedule,
}

impl<D: Denoiser> NoisePredictor for AsNoisePredictor<D> {
    fn predict_noise(&self, z: &[f64], t: f64, prompt: &PromptCondition) -> Result<Vec<f64>> {
        let f = self.denoiser.predict(z, t, prompt)?;
        noise_from_clean_pred(z, t, &f, &self.schedule)
    }
}

/// Exposes a clean-sample denoiser as a velocity predictor.
pub struct AsVelocityPredictor<D> {
    pub denoiser: D,
    pub schedule: NoiseSchedule,
}

impl<D: Denoiser> VelocityPredictor for AsVelocityPredictor<D> {
    fn predict_velocity(
        &self,
        z: &[f64],
        t_unit: f64,
        prompt: &PromptCondition,
    ) -> Result<Vec<f64>> {
        check_unit_time(t_unit)?;
        let f = self
            .denoiser
            .predict(z, t_unit * self.schedule.horizon(), prompt)?;
        velocity_from_clean_pred(z, t_unit, &f)
    }
}

/// Classifier-free guidance blend `u + scale (c - u)`.
///
/// `scale = 1` returns the conditional prediction and `scale = 0` the
/// unconditional one without re-blending.
pub fn guided_predict<D: Denoiser + ?Sized>(
    d: &D,
    z: &[f64],
    t: f64,
    cond: &PromptCondition,
    uncond: &PromptCondition,
    scale: f64,
) -> Result<Vec<f64>> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::config(format!(
            "guidance scale must be finite and non-negative, got {scale}"
        )));
    }
    if scale == 1.0 {
        return d.predict(z, t, cond);
    }
    let u = d.predict(z, t, uncond)?;
    if scale == 0.0 {
        return Ok(u);
    }
    let c = d.predict(z, t, cond)?;
    check_len(u.len(), c.len())?;
    Ok(u.iter()
        .zip(&c)
        .map(|(ui, ci)| ui + scale * (ci - ui))
        .collect())
}
