use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} is outside the schedule domain [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("schedule derivative requested at t = {t} where alpha_bar is clamped to the floor")]
    ScheduleDegenerate { t: f64 },

    #[error(
        "degenerate timestep t = {t}: alpha_bar = {alpha_bar} is at or below the usable range"
    )]
    DegenerateTimestep { t: f64, alpha_bar: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unreliable Monte-Carlo estimate: effective sample size {ess:.2} < 10")]
    UnreliableEstimate { ess: f64 },

    #[error("trajectory has no steps")]
    EmptyTrajectory,

    #[error("trace format error: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { expected, got });
    }
    Ok(())
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "{what}: non-finite value {} at index {i}",
            values[i]
        )));
    }
    Ok(())
}
