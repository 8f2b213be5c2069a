//! Deterministic DDIM inversion and denoising, the inversion-anchor baseline.
//!
//! The denoiser is used as a noise predictor through the clean-to-noise
//! adapter, so the baseline sees exactly the same model as the editor.

use crate::denoiser::{noise_from_clean_pred, Denoiser, PromptCondition};
use crate::error::{check_finite, check_len, Error, Result};
use crate::latent::Latent;
use crate::schedule::{NoiseSchedule, TimestepGrid};

/// One deterministic DDIM move from `t` to `t_next` with fixed `eps_hat`.
/// Works in either direction.
pub fn ddim_denoise_step(
    z_t: &[f64],
    t: f64,
    t_next: f64,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len(z_t.len(), eps_hat.len())?;
    let a = schedule.alpha_bar(t)?;
    let a_next = schedule.alpha_bar(t_next)?;
    for (time, ab) in [(t, a), (t_next, a_next)] {
        if ab <= schedule.alpha_floor() {
            return Err(Error::DegenerateTimestep {
                t: time,
                alpha_bar: ab,
            });
        }
    }
    if t == t_next {
        return Ok(z_t.to_vec());
    }
    let (ra, na) = (a.sqrt(), (1.0 - a).sqrt());
    let (rn, nn) = (a_next.sqrt(), (1.0 - a_next).sqrt());
    let out: Vec<f64> = z_t
        .iter()
        .zip(eps_hat)
        .map(|(z, e)| rn * ((z - na * e) / ra) + nn * e)
        .collect();
    check_finite(&out, "ddim step")?;
    Ok(out)
}

fn eps_at<D: Denoiser + ?Sized>(
    f: &D,
    prompt: &PromptCondition,
    z: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let clean = f.predict(z, t, prompt)?;
    noise_from_clean_pred(z, t, &clean, schedule)
}

/// Runs DDIM up the grid from `t = 0` to its first (largest) timestep. The
/// noise for each move is predicted at the lower end of the move.
pub fn ddim_invert<D: Denoiser + ?Sized>(
    f: &D,
    prompt: &PromptCondition,
    z0: &Latent,
    grid: &TimestepGrid,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let mut times = vec![0.0];
    times.extend(grid.timesteps().iter().rev());
    let mut z = z0.values().to_vec();
    for w in times.windows(2) {
        let eps = eps_at(f, prompt, &z, w[0], schedule)?;
        z = ddim_denoise_step(&z, w[0], w[1], &eps, schedule)?;
    }
    z0.like(z)
}

/// Runs DDIM down the grid from its first timestep to `t = 0`.
pub fn ddim_denoise<D: Denoiser + ?Sized>(
    f: &D,
    prompt: &PromptCondition,
    z_top: &Latent,
    grid: &TimestepGrid,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let mut times = grid.timesteps().to_vec();
    times.push(0.0);
    let mut z = z_top.values().to_vec();
    for w in times.windows(2) {
        let eps = eps_at(f, prompt, &z, w[0], schedule)?;
        z = ddim_denoise_step(&z, w[0], w[1], &eps, schedule)?;
    }
    z_top.like(z)
}

/// Inverts under `p_src` and denoises under `p_tar`. With equal prompts this
/// is the invert-then-reconstruct round trip.
pub fn ddim_edit<D: Denoiser + ?Sized>(
    f: &D,
    z0: &Latent,
    p_src: &PromptCondition,
    p_tar: &PromptCondition,
    grid: &TimestepGrid,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let anchor = ddim_invert(f, p_src, z0, grid, schedule)?;
    ddim_denoise(f, p_tar, &anchor, grid, schedule)
}
