//! TweezeEdit: inversion-free editing over consistency models, run against
//! exact posterior-mean denoisers so every step can be checked.
//!
//! The editing loop lives in [`editor`]; [`denoiser`] supplies the analytic
//! models, [`baseline`] the DDIM comparison and [`verify`] the oracles.

pub mod baseline;
pub mod denoiser;
pub mod editor;
mod error;
pub mod forward;
mod latent;
pub mod metrics;
pub mod schedule;
pub mod verify;

pub use denoiser::{Denoiser, GaussianMixture, MixtureDenoiser, PromptCondition, Registry};
pub use editor::{tweeze_edit, EditConfig, RegForm, RegSchedule, StepRecord, Trajectory};
pub use error::{Error, Result};
pub use latent::{Latent, Layout};
pub use schedule::{make_timestep_grid, GridSpacing, NoiseSchedule, ScheduleKind, TimestepGrid};
