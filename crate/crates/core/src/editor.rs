//! The TweezeEdit loop: direct-path state evolution with calibrated target
//! predictions and denoising-path regularization.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::denoiser::{guided_predict, Denoiser, PromptCondition};
use crate::error::{check_finite, check_len, Error, Result};
use crate::forward::{shared_noise_pair, NoiseDraw};
use crate::latent::{same_len, Latent};
use crate::schedule::{
    make_timestep_grid, GridSpacing, NoiseSchedule, TimestepGrid, DEFAULT_STEPS,
    DEFAULT_T_MAX_FRACTION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegForm {
    /// Gradient with the `alpha_bar_dot` correction term.
    FullEq10,
    /// `gamma_hat (f_src - f_tar)`.
    #[default]
    Simplified,
    /// Regularized steps skip the denoiser and rescale `z_mix - z0_src`.
    Bypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegSchedule {
    pub form: RegForm,
    /// `s` in `[0, 1]`: 0 edits freely, 1 preserves the source.
    pub strength: f64,
    /// Number of leading grid steps that are regularized.
    pub active_steps: usize,
    pub taylor_delta: f64,
}

impl Default for RegSchedule {
    fn default() -> Self {
        Self {
            form: RegForm::Simplified,
            strength: 1.0,
            active_steps: 6,
            taylor_delta: 0.5,
        }
    }
}

impl RegSchedule {
    pub fn validate(&self, grid_len: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::config(format!(
                "reg.strength must lie in [0, 1], got {}",
                self.strength
            )));
        }
        if self.active_steps > grid_len {
            return Err(Error::config(format!(
                "reg.active_steps = {} exceeds the grid length {grid_len}",
                self.active_steps
            )));
        }
        if !(self.taylor_delta > 0.0 && self.taylor_delta <= 1.0) {
            return Err(Error::config(format!(
                "reg.taylor_delta must lie in (0, 1], got {}",
                self.taylor_delta
            )));
        }
        Ok(())
    }
}

/// Guidance scales for the source and target predictions. `uncond` is only
/// consulted when a scale differs from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guidance {
    pub src_scale: f64,
    pub tar_scale: f64,
    pub uncond: Option<PromptCondition>,
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            src_scale: 1.5,
            tar_scale: 1.5,
            uncond: Some(PromptCondition::new("uncond", "uncond")),
        }
    }
}

impl Guidance {
    /// Plain conditional predictions.
    pub fn none() -> Self {
        Self {
            src_scale: 1.0,
            tar_scale: 1.0,
            uncond: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("src_scale", self.src_scale), ("tar_scale", self.tar_scale)] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::config(format!(
                    "guidance.{name} must be finite and non-negative, got {s}"
                )));
            }
        }
        if self.uncond.is_none() && (self.src_scale != 1.0 || self.tar_scale != 1.0) {
            return Err(Error::config(
                "guidance.uncond is required when a guidance scale differs from 1",
            ));
        }
        Ok(())
    }

    fn predict<D: Denoiser + ?Sized>(
        &self,
        f: &D,
        z: &[f64],
        t: f64,
        cond: &PromptCondition,
        scale: f64,
    ) -> Result<Vec<f64>> {
        match &self.uncond {
            Some(u) => guided_predict(f, z, t, cond, u, scale),
            None => f.predict(z, t, cond),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub grid: TimestepGrid,
    pub reg: RegSchedule,
    pub guidance: Guidance,
    pub seed: u64,
}

impl EditConfig {
    /// 12 uniform steps from `0.98 T`, first 6 regularized at full strength,
    /// guidance 1.5 on both prompts.
    pub fn default_for(schedule: &NoiseSchedule) -> Result<Self> {
        Ok(Self {
            grid: make_timestep_grid(
                schedule,
                DEFAULT_STEPS,
                DEFAULT_T_MAX_FRACTION,
                GridSpacing::UniformT,
            )?,
            reg: RegSchedule::default(),
            guidance: Guidance::default(),
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config("edit grid is empty"));
        }
        self.reg.validate(self.grid.len())?;
        self.guidance.validate()
    }
}

/// Full state of one editing step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step_index: usize,
    pub t: f64,
    pub alpha_bar: f64,
    pub z_mix_before: Vec<f64>,
    pub z_src: Vec<f64>,
    pub z_tar: Vec<f64>,
    /// `None` on bypassed steps, where the denoiser is not called.
    pub zhat0_src: Option<Vec<f64>>,
    pub zhat0_tar: Option<Vec<f64>>,
    pub v_t: Vec<f64>,
    pub reg_grad: Vec<f64>,
    pub z_mix_after: Vec<f64>,
}

impl StepRecord {
    /// Checks the bitwise step identities against `z0_src`.
    pub fn check(&self, z0_src: &[f64]) -> Result<()> {
        let n = z0_src.len();
        for (name, v) in [
            ("z_mix_before", &self.z_mix_before),
            ("z_src", &self.z_src),
            ("z_tar", &self.z_tar),
            ("v_t", &self.v_t),
            ("reg_grad", &self.reg_grad),
            ("z_mix_after", &self.z_mix_after),
        ] {
            if v.len() != n {
                return Err(Error::Trace(format!(
                    "step {}: {name} has {} values, expected {n}",
                    self.step_index,
                    v.len()
                )));
            }
        }
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            if (self.z_mix_before[i] - z0_src[i]) + self.z_src[i] != self.z_tar[i] {
                return Err(Error::Trace(format!(
                    "step {}: z_tar is not (z_mix_before - z0_src) + z_src at index {i}",
                    self.step_index
                )));
            }
            if self.v_t[i] - self.reg_grad[i] != self.z_mix_after[i] {
                return Err(Error::Trace(format!(
                    "step {}: z_mix_after is not v_t - reg_grad at index {i}",
                    self.step_index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub source: Latent,
    pub output: Latent,
    pub steps: Vec<StepRecord>,
    pub config: EditConfig,
    pub schedule: NoiseSchedule,
    pub p_src: PromptCondition,
    pub p_tar: PromptCondition,
}

impl Trajectory {
    /// Every step identity plus the chaining between steps and endpoints.
    pub fn check_invariants(&self) -> Result<()> {
        let first = self.steps.first().ok_or(Error::EmptyTrajectory)?;
        let z0 = self.source.values();
        if first.z_mix_before != z0 {
            return Err(Error::Trace("first z_mix_before is not the source".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.step_index != i {
                return Err(Error::Trace(format!(
                    "step {i} recorded as step_index {}",
                    step.step_index
                )));
            }
            step.check(z0)?;
            if let Some(next) = self.steps.get(i + 1) {
                if next.z_mix_before != step.z_mix_after {
                    return Err(Error::Trace(format!(
                        "steps {i} and {} do not chain",
                        i + 1
                    )));
                }
            }
        }
        if self.steps.last().unwrap().z_mix_after != self.output.values() {
            return Err(Error::Trace("output is not the last z_mix_after".into()));
        }
        Ok(())
    }
}

/// `zhat0_tar + z0_src - zhat0_src`.
pub fn calibrated_target_prediction(
    zhat0_tar: &[f64],
    zhat0_src: &[f64],
    z0_src: &[f64],
) -> Result<Vec<f64>> {
    same_len(zhat0_tar, zhat0_src)?;
    same_len(zhat0_tar, z0_src)?;
    Ok(zhat0_tar
        .iter()
        .zip(zhat0_src)
        .zip(z0_src)
        .map(|((ft, fs), z)| ft + z - fs)
        .collect())
}

/// `z0_src + sqrt(alpha_bar(t_next)) (zhat0_tar - zhat0_src)`.
pub fn edit_direction(
    z0_src: &[f64],
    zhat0_src: &[f64],
    zhat0_tar: &[f64],
    t_next: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    same_len(z0_src, zhat0_src)?;
    same_len(z0_src, zhat0_tar)?;
    let root = schedule.alpha_bar(t_next)?.sqrt();
    Ok(z0_src
        .iter()
        .zip(zhat0_src)
        .zip(zhat0_tar)
        .map(|((z, fs), ft)| z + root * (ft - fs))
        .collect())
}

/// Gradient with the default Taylor step `delta = 1/2`.
#[allow(clippy::too_many_arguments)]
pub fn reg_gradient_full(
    z_src: &[f64],
    z_tar: &[f64],
    zhat0_src: &[f64],
    zhat0_tar: &[f64],
    t: f64,
    gamma_hat: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    reg_gradient_full_with_delta(
        z_src, z_tar, zhat0_src, zhat0_tar, t, gamma_hat, 0.5, schedule,
    )
}

/// `gamma_hat [z_src - z_tar - k (zhat0_src - zhat0_tar)]` with
/// `k = delta * alpha_bar_dot / (2 sqrt(alpha_bar))`.
#[allow(clippy::too_many_arguments)]
pub fn reg_gradient_full_with_delta(
    z_src: &[f64],
    z_tar: &[f64],
    zhat0_src: &[f64],
    zhat0_tar: &[f64],
    t: f64,
    gamma_hat: f64,
    delta: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    same_len(z_src, z_tar)?;
    same_len(z_src, zhat0_src)?;
    same_len(z_src, zhat0_tar)?;
    let a = schedule.alpha_bar(t)?;
    if !schedule.is_unclamped(t)? {
        return Err(Error::DegenerateTimestep { t, alpha_bar: a });
    }
    let k = delta * schedule.alpha_bar_dot(t)? / (2.0 * a.sqrt());
    let out: Vec<f64> = (0..z_src.len())
        .map(|i| gamma_hat * (z_src[i] - z_tar[i] - k * (zhat0_src[i] - zhat0_tar[i])))
        .collect();
    check_finite(&out, "full regularization gradient")?;
    Ok(out)
}

/// `gamma_hat (zhat0_src - zhat0_tar)`.
pub fn reg_gradient_simplified(
    zhat0_src: &[f64],
    zhat0_tar: &[f64],
    gamma_hat: f64,
) -> Result<Vec<f64>> {
    same_len(zhat0_src, zhat0_tar)?;
    Ok(zhat0_src
        .iter()
        .zip(zhat0_tar)
        .map(|(s, t)| gamma_hat * (s - t))
        .collect())
}

/// Regularization weight for one step.
///
/// Subtracting `gamma_hat (f_src - f_tar)` from `v_t` turns the update into
/// `z0_src + c (f_tar - f_src)` with `c = sqrt(a_next) + gamma_hat`. The
/// weight is `s (sqrt(a_t) - sqrt(a_next))`, which is non-positive and moves
/// `c` from `sqrt(a_next)` at `s = 0` to `sqrt(a_t)` at `s = 1`. Steps at or
/// beyond `active_steps` get 0.
pub fn gamma_hat_for_step(
    reg: &RegSchedule,
    step_index: usize,
    t: f64,
    t_next: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if step_index >= reg.active_steps || reg.strength == 0.0 {
        return Ok(0.0);
    }
    let now = schedule.alpha_bar(t)?.sqrt();
    let next = schedule.alpha_bar(t_next)?.sqrt();
    Ok(reg.strength * (now - next))
}

/// Effective coefficient on `(f_tar - f_src)` after regularization.
pub fn effective_coefficient(gamma_hat: f64, t_next: f64, schedule: &NoiseSchedule) -> Result<f64> {
    Ok(schedule.alpha_bar(t_next)?.sqrt() + gamma_hat)
}

/// Everything an editing step needs besides the evolving `z_mix`.
pub struct EditContext<'a, D: ?Sized> {
    pub denoiser: &'a D,
    pub z0_src: &'a Latent,
    pub p_src: &'a PromptCondition,
    pub p_tar: &'a PromptCondition,
    pub config: &'a EditConfig,
    pub schedule: &'a NoiseSchedule,
}

impl<D: Denoiser + ?Sized> EditContext<'_, D> {
    /// Runs step `step_index` from `z_mix`.
    pub fn step(&self, step_index: usize, z_mix: &Latent) -> Result<StepRecord> {
        let cfg = self.config;
        let grid = &cfg.grid;
        let t = *grid.timesteps().get(step_index).ok_or_else(|| {
            Error::config(format!("step {step_index} beyond grid of {}", grid.len()))
        })?;
        let t_next = grid.next_time(step_index);
        let z0 = self.z0_src.values();
        check_len(z0.len(), z_mix.dim())?;

        let eps = NoiseDraw::keyed(cfg.seed, step_index as u64, z0.len());
        let (z_src, z_tar) = shared_noise_pair(self.z0_src, z_mix, t, &eps, self.schedule)?;
        let alpha_bar = self.schedule.alpha_bar(t)?;
        let gamma = gamma_hat_for_step(&cfg.reg, step_index, t, t_next, self.schedule)?;
        let active = step_index < cfg.reg.active_steps;

        let (zhat0_src, zhat0_tar, v_t, reg_grad) = if active && cfg.reg.form == RegForm::Bypass {
            let c = effective_coefficient(gamma, t_next, self.schedule)?;
            let ratio = c / alpha_bar.sqrt();
            let v: Vec<f64> = z_mix
                .values()
                .iter()
                .zip(z0)
                .map(|(m, s)| s + ratio * (m - s))
                .collect();
            (None, None, v, vec![0.0; z0.len()])
        } else {
            let g = &cfg.guidance;
            let fs = g.predict(self.denoiser, z_src.values(), t, self.p_src, g.src_scale)?;
            let ft = g.predict(self.denoiser, z_tar.values(), t, self.p_tar, g.tar_scale)?;
            check_finite(&fs, "source prediction")?;
            check_finite(&ft, "target prediction")?;
            let v = edit_direction(z0, &fs, &ft, t_next, self.schedule)?;
            let grad = if gamma == 0.0 {
                vec![0.0; z0.len()]
            } else {
                match cfg.reg.form {
                    RegForm::FullEq10 => reg_gradient_full_with_delta(
                        z_src.values(),
                        z_tar.values(),
                        &fs,
                        &ft,
                        t,
                        gamma,
                        cfg.reg.taylor_delta,
                        self.schedule,
                    )?,
                    RegForm::Simplified | RegForm::Bypass => {
                        reg_gradient_simplified(&fs, &ft, gamma)?
                    }
                }
            };
            (Some(fs), Some(ft), v, grad)
        };

        let z_mix_after: Vec<f64> = v_t.iter().zip(&reg_grad).map(|(v, g)| v - g).collect();
        check_finite(&z_mix_after, "z_mix update")?;
        Ok(StepRecord {
            step_index,
            t,
            alpha_bar,
            z_mix_before: z_mix.values().to_vec(),
            z_src: z_src.into_values(),
            z_tar: z_tar.into_values(),
            zhat0_src,
            zhat0_tar,
            v_t,
            reg_grad,
            z_mix_after,
        })
    }
}

/// Edits `z0_src` from `p_src` towards `p_tar`, recording every step.
pub fn tweeze_edit<D: Denoiser + ?Sized>(
    f: &D,
    z0_src: &Latent,
    p_src: &PromptCondition,
    p_tar: &PromptCondition,
    config: &EditConfig,
    schedule: &NoiseSchedule,
) -> Result<(Latent, Trajectory)> {
    config.validate()?;
    let ctx = EditContext {
        denoiser: f,
        z0_src,
        p_src,
        p_tar,
        config,
        schedule,
    };
    let mut z_mix = z0_src.clone();
    let mut steps = Vec::with_capacity(config.grid.len());
    for i in 0..config.grid.len() {
        let rec = ctx.step(i, &z_mix)?;
        z_mix = z_mix.like(rec.z_mix_after.clone())?;
        steps.push(rec);
    }
    let traj = Trajectory {
        source: z0_src.clone(),
        output: z_mix.clone(),
        steps,
        config: config.clone(),
        schedule: *schedule,
        p_src: p_src.clone(),
        p_tar: p_tar.clone(),
    };
    Ok((z_mix, traj))
}

/// Same result as [`tweeze_edit`] without keeping the per-step records.
/// Returns the output and the summed step lengths of `z_mix`.
pub fn tweeze_edit_untraced<D: Denoiser + ?Sized>(
    f: &D,
    z0_src: &Latent,
    p_src: &PromptCondition,
    p_tar: &PromptCondition,
    config: &EditConfig,
    schedule: &NoiseSchedule,
) -> Result<(Latent, f64)> {
    config.validate()?;
    let ctx = EditContext {
        denoiser: f,
        z0_src,
        p_src,
        p_tar,
        config,
        schedule,
    };
    let mut z_mix = z0_src.clone();
    let mut path = 0.0;
    for i in 0..config.grid.len() {
        let rec = ctx.step(i, &z_mix)?;
        path += crate::latent::norm(&crate::latent::sub(&rec.z_mix_after, &rec.z_mix_before));
        z_mix = z_mix.like(rec.z_mix_after)?;
    }
    Ok((z_mix, path))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceHeader {
    config: EditConfig,
    source: Latent,
    schedule: NoiseSchedule,
    prompts: TracePrompts,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TracePrompts {
    src: PromptCondition,
    tar: PromptCondition,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: TraceHeader,
}

/// Writes a header line followed by one JSON object per step.
pub fn write_trace<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    let header = HeaderLine {
        header: TraceHeader {
            config: traj.config.clone(),
            source: traj.source.clone(),
            schedule: traj.schedule,
            prompts: TracePrompts {
                src: traj.p_src.clone(),
                tar: traj.p_tar.clone(),
            },
        },
    };
    let to_trace = |e: serde_json::Error| Error::Trace(e.to_string());
    serde_json::to_writer(&mut w, &header).map_err(to_trace)?;
    w.write_all(b"\n")?;
    for step in &traj.steps {
        serde_json::to_writer(&mut w, step).map_err(to_trace)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a trace written by [`write_trace`] and checks its invariants.
pub fn read_trace<R: BufRead>(r: R) -> Result<Trajectory> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Trace("empty trace".into()))??;
    let header: HeaderLine =
        serde_json::from_str(&first).map_err(|e| Error::Trace(format!("header: {e}")))?;
    let mut steps = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Trace(format!("line {}: {e}", n + 2)))?;
        steps.push(rec);
    }
    let h = header.header;
    let last = steps.last().ok_or(Error::EmptyTrajectory)?;
    let output = h.source.like(last.z_mix_after.clone())?;
    let traj = Trajectory {
        source: h.source,
        output,
        steps,
        config: h.config,
        schedule: h.schedule,
        p_src: h.prompts.src,
        p_tar: h.prompts.tar,
    };
    traj.check_invariants()?;
    Ok(traj)
}
