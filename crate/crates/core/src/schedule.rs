//! Continuous-time noise schedules and timestep grids.
//!
//! `alpha_bar(t)` is the signal retention of the forward process
//! `z_t = sqrt(alpha_bar) z_0 + sqrt(1 - alpha_bar) eps` over `t in [0, T]`.
//! Values are clamped from below at `alpha_floor`, so `alpha_bar(T)` equals
//! the floor exactly and every coefficient that divides by `sqrt(alpha_bar)`
//! stays finite.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HORIZON: u32 = 1000;
pub const DEFAULT_ALPHA_FLOOR: f64 = 1e-6;
pub const DEFAULT_T_MAX_FRACTION: f64 = 0.98;
pub const DEFAULT_STEPS: usize = 12;
pub const MAX_GRID_LEN: usize = 64;

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha_bar(t) = cos^2(pi t / 2T)` with a closed-form derivative.
    Cosine,
    /// Continuous product of `(1 - beta)` with `beta` linear in `t` from
    /// 1e-4 to 2e-2, rescaled so that `alpha_bar(T) = 0` before clamping.
    ScaledLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    horizon: u32,
    alpha_floor: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    #[serde(default = "default_kind")]
    kind: ScheduleKind,
    #[serde(rename = "T", default = "default_horizon")]
    horizon: u32,
    #[serde(default = "default_floor")]
    alpha_floor: f64,
}

fn default_kind() -> ScheduleKind {
    ScheduleKind::Cosine
}
fn default_horizon() -> u32 {
    DEFAULT_HORIZON
}
fn default_floor() -> f64 {
    DEFAULT_ALPHA_FLOOR
}

impl TryFrom<RawSchedule> for NoiseSchedule {
    type Error = Error;
    fn try_from(raw: RawSchedule) -> Result<Self> {
        NoiseSchedule::new(raw.kind, raw.horizon, raw.alpha_floor)
    }
}

impl From<NoiseSchedule> for RawSchedule {
    fn from(s: NoiseSchedule) -> Self {
        RawSchedule {
            kind: s.kind,
            horizon: s.horizon,
            alpha_floor: s.alpha_floor,
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            horizon: DEFAULT_HORIZON,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
        }
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, horizon: u32, alpha_floor: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("schedule.T must be a positive integer"));
        }
        if !(alpha_floor > 0.0 && alpha_floor < 1.0) {
            return Err(Error::config(format!(
                "schedule.alpha_floor must lie in (0, 1), got {alpha_floor}"
            )));
        }
        Ok(Self {
            kind,
            horizon,
            alpha_floor,
        })
    }

    pub fn cosine(horizon: u32) -> Self {
        Self {
            horizon,
            ..Self::default()
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `T` as a float.
    pub fn horizon(&self) -> f64 {
        self.horizon as f64
    }

    pub fn alpha_floor(&self) -> f64 {
        self.alpha_floor
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon()).contains(&t) {
            return Err(Error::Domain {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(())
    }

    /// Unclamped `sqrt(alpha_bar)`. Defined slightly outside `[0, T]` so that
    /// finite differences can straddle the boundaries.
    fn sqrt_alpha_raw(&self, t: f64) -> f64 {
        let horizon = self.horizon();
        match self.kind {
            ScheduleKind::Cosine => (PI * t / (2.0 * horizon)).cos(),
            ScheduleKind::ScaledLinear => {
                let end = (0.5 * linear_log_alpha(horizon, horizon)).exp();
                let s = (0.5 * linear_log_alpha(t, horizon)).exp();
                (s - end) / (1.0 - end)
            }
        }
    }

    fn alpha_raw(&self, t: f64) -> f64 {
        let s = self.sqrt_alpha_raw(t);
        s * s
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        if t == 0.0 {
            return Ok(1.0);
        }
        Ok(self.alpha_raw(t).max(self.alpha_floor))
    }

    /// Time derivative of `alpha_bar`. Closed form for the cosine kind; central
    /// difference with step `T / 1e4` for the scaled-linear kind.
    pub fn alpha_bar_dot(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        if self.alpha_raw(t) <= self.alpha_floor {
            return Err(Error::ScheduleDegenerate { t });
        }
        let horizon = self.horizon();
        Ok(match self.kind {
            ScheduleKind::Cosine => -(PI / (2.0 * horizon)) * (PI * t / horizon).sin(),
            ScheduleKind::ScaledLinear => {
                let h = horizon * 1e-4;
                (self.alpha_raw(t + h) - self.alpha_raw(t - h)) / (2.0 * h)
            }
        })
    }

    /// Noise scale used when re-noising: `sqrt(1 - alpha_bar(t))`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// Whether `alpha_bar(t)` is above the clamp, i.e. `1 / sqrt(alpha_bar)`
    /// style coefficients are meaningful.
    pub fn is_unclamped(&self, t: f64) -> Result<bool> {
        Ok(self.alpha_bar(t)? > self.alpha_floor)
    }

    /// Time at which the unclamped `sqrt(alpha_bar)` equals `target`.
    fn time_for_sqrt_alpha(&self, target: f64) -> f64 {
        let horizon = self.horizon();
        match self.kind {
            ScheduleKind::Cosine => 2.0 * horizon / PI * target.clamp(0.0, 1.0).acos(),
            ScheduleKind::ScaledLinear => {
                let (mut lo, mut hi) = (0.0, horizon);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.sqrt_alpha_raw(mid) > target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }
}

/// `ln prod (1 - beta)` in continuous form: the integral of `ln(1 - beta(tau))`
/// over `[0, t]` with `beta` linear in `tau`.
fn linear_log_alpha(t: f64, horizon: f64) -> f64 {
    let slope = (LINEAR_BETA_END - LINEAR_BETA_START) / horizon;
    // antiderivative of ln(1 - u) du
    let g = |u: f64| -(1.0 - u) * (-u).ln_1p() - u;
    (g(LINEAR_BETA_START + slope * t) - g(LINEAR_BETA_START)) / slope
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridSpacing {
    /// Evenly spaced in `t`.
    #[default]
    UniformT,
    /// Evenly spaced in `sqrt(alpha_bar(t))`.
    UniformSqrtAlpha,
}

/// Descending evaluation timesteps. `strides[i]` is the gap to the next
/// timestep, the last stride reaching `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepGrid {
    timesteps: Vec<f64>,
    strides: Vec<f64>,
}

impl TimestepGrid {
    /// Validates an explicit descending grid within `(0, T]`.
    pub fn from_timesteps(timesteps: Vec<f64>, schedule: &NoiseSchedule) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::config("timestep grid is empty"));
        }
        if timesteps.len() > MAX_GRID_LEN {
            return Err(Error::config(format!(
                "timestep grid has {} entries, at most {MAX_GRID_LEN} allowed",
                timesteps.len()
            )));
        }
        for &t in &timesteps {
            if !(t > 0.0 && t <= schedule.horizon()) {
                return Err(Error::config(format!(
                    "grid timestep {t} outside (0, {}]",
                    schedule.horizon()
                )));
            }
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("grid timesteps must be strictly descending"));
        }
        let mut strides: Vec<f64> = timesteps.windows(2).map(|w| w[0] - w[1]).collect();
        strides.push(*timesteps.last().unwrap());
        Ok(Self { timesteps, strides })
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn strides(&self) -> &[f64] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Timestep following step `i`; `0.0` after the last one.
    pub fn next_time(&self, i: usize) -> f64 {
        self.timesteps.get(i + 1).copied().unwrap_or(0.0)
    }
}

/// Builds a descending grid from `t_max_fraction * T` down to `T / n_steps`.
pub fn make_timestep_grid(
    schedule: &NoiseSchedule,
    n_steps: usize,
    t_max_fraction: f64,
    spacing: GridSpacing,
) -> Result<TimestepGrid> {
    if n_steps < 2 {
        return Err(Error::config(format!(
            "grid.n_steps must be at least 2, got {n_steps}"
        )));
    }
    if !(t_max_fraction > 0.0 && t_max_fraction <= 1.0) {
        return Err(Error::config(format!(
            "grid.t_max_fraction must lie in (0, 1], got {t_max_fraction}"
        )));
    }
    let horizon = schedule.horizon();
    let start = t_max_fraction * horizon;
    let end = horizon / n_steps as f64;
    if start <= end {
        return Err(Error::config(format!(
            "grid start {start} must exceed grid end {end}"
        )));
    }
    let last = (n_steps - 1) as f64;
    let lerp = |a: f64, b: f64, i: usize| {
        if i == n_steps - 1 {
            b
        } else {
            a + (b - a) * (i as f64 / last)
        }
    };
    let timesteps: Vec<f64> = match spacing {
        GridSpacing::UniformT => (0..n_steps).map(|i| lerp(start, end, i)).collect(),
        GridSpacing::UniformSqrtAlpha => {
            let (a, b) = (schedule.sqrt_alpha_raw(start), schedule.sqrt_alpha_raw(end));
            (0..n_steps)
                .map(|i| match i {
                    0 => start,
                    i if i == n_steps - 1 => end,
                    i => schedule.time_for_sqrt_alpha(lerp(a, b, i)),
                })
                .collect()
        }
    };
    TimestepGrid::from_timesteps(timesteps, schedule)
}
