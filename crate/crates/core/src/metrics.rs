//! Consistency and alignment metrics for edit outputs.

use serde::{Deserialize, Serialize};

use crate::denoiser::GaussianMixture;
use crate::editor::Trajectory;
use crate::error::{Error, Result};
use crate::latent::{norm, same_len, sub, Latent};

const SSIM_WINDOW: usize = 7;

pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    same_len(a.values(), b.values())?;
    let total: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(total / a.dim() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Latent, b: &Latent, dynamic_range: f64) -> Result<f64> {
    check_range(dynamic_range)?;
    Ok(psnr_from_mse(mse(a, b)?, dynamic_range))
}

pub fn psnr_from_mse(mse: f64, dynamic_range: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (dynamic_range * dynamic_range / mse).log10()
}

fn check_range(l: f64) -> Result<()> {
    if !(l.is_finite() && l > 0.0) {
        return Err(Error::config(format!(
            "dynamic_range must be positive, got {l}"
        )));
    }
    Ok(())
}

/// Single-scale SSIM with a uniform 7x7 window, averaged over every window
/// that fits inside the grid. Window statistics use population variances.
pub fn ssim(a: &Latent, b: &Latent, dynamic_range: f64) -> Result<f64> {
    check_range(dynamic_range)?;
    let side = match (a.layout(), b.layout()) {
        (crate::Layout::Grid(g), crate::Layout::Grid(h)) if g == h => g,
        (crate::Layout::Grid(g), crate::Layout::Grid(h)) => {
            return Err(Error::Layout(format!("ssim on grids of side {g} and {h}")))
        }
        _ => return Err(Error::Layout("ssim needs grid-layout inputs".into())),
    };
    if side < SSIM_WINDOW {
        return Err(Error::Layout(format!(
            "ssim needs a grid of side at least {SSIM_WINDOW}, got {side}"
        )));
    }
    let (x, y) = (a.values(), b.values());
    let sx = Integral::new(side, |i| x[i]);
    let sy = Integral::new(side, |i| y[i]);
    let sxx = Integral::new(side, |i| x[i] * x[i]);
    let syy = Integral::new(side, |i| y[i] * y[i]);
    let sxy = Integral::new(side, |i| x[i] * y[i]);

    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let positions = side - SSIM_WINDOW + 1;
    let mut total = 0.0;
    for r in 0..positions {
        for c in 0..positions {
            let mx = sx.window(r, c) / n;
            let my = sy.window(r, c) / n;
            let vx = sxx.window(r, c) / n - mx * mx;
            let vy = syy.window(r, c) / n - my * my;
            let cov = sxy.window(r, c) / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (positions * positions) as f64)
}

/// Summed-area table over a row-major square grid.
struct Integral {
    side: usize,
    table: Vec<f64>,
}

impl Integral {
    fn new(side: usize, value: impl Fn(usize) -> f64) -> Self {
        let w = side + 1;
        let mut table = vec![0.0; w * w];
        for r in 0..side {
            for c in 0..side {
                table[(r + 1) * w + c + 1] =
                    value(r * side + c) + table[r * w + c + 1] + table[(r + 1) * w + c]
                        - table[r * w + c];
            }
        }
        Self { side, table }
    }

    fn window(&self, r: usize, c: usize) -> f64 {
        let w = self.side + 1;
        let k = SSIM_WINDOW;
        self.table[(r + k) * w + c + k] - self.table[r * w + c + k] - self.table[(r + k) * w + c]
            + self.table[r * w + c]
    }
}

/// Total distance travelled by `z_mix`.
pub fn path_length(traj: &Trajectory) -> Result<f64> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    Ok(traj
        .steps
        .iter()
        .map(|s| norm(&sub(&s.z_mix_after, &s.z_mix_before)))
        .sum())
}

/// Negative log-likelihood of `z` under `target`.
pub fn target_nll(z: &Latent, target: &GaussianMixture) -> Result<f64> {
    Ok(-target.log_density(z.values())?)
}

/// Posterior component probabilities of `z` under `mixture`.
pub fn component_posteriors(z: &Latent, mixture: &GaussianMixture) -> Result<Vec<f64>> {
    crate::error::check_len(mixture.dim(), z.dim())?;
    let s = mixture.component_sigma();
    Ok(mixture.responsibilities(z.values(), 1.0, s * s))
}

/// Metrics of one edit output against its source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub mse: f64,
    /// Infinite for an exact reconstruction; serialized as `"inf"`.
    #[serde(with = "inf_as_string")]
    pub psnr_db: f64,
    /// Grid-layout outputs only.
    pub ssim: Option<f64>,
    pub path_length: f64,
    pub target_nll: f64,
}

impl MetricReport {
    pub fn compute(
        output: &Latent,
        source: &Latent,
        path_length: f64,
        target: &GaussianMixture,
        dynamic_range: f64,
    ) -> Result<Self> {
        let m = mse(output, source)?;
        check_range(dynamic_range)?;
        let ssim = match output.layout() {
            crate::Layout::Grid(_) => Some(ssim(output, source, dynamic_range)?),
            crate::Layout::Vector => None,
        };
        let report = Self {
            mse: m,
            psnr_db: psnr_from_mse(m, dynamic_range),
            ssim,
            path_length,
            target_nll: target_nll(output, target)?,
        };
        report.check()?;
        Ok(report)
    }

    /// Zero MSE, infinite PSNR and unit SSIM must coincide.
    pub fn check(&self) -> Result<()> {
        let exact = self.mse == 0.0;
        if exact != self.psnr_db.is_infinite() {
            return Err(Error::numeric("psnr flag disagrees with mse"));
        }
        if let Some(s) = self.ssim {
            if exact && (s - 1.0).abs() > 1e-12 {
                return Err(Error::numeric("ssim is not 1 on identical inputs"));
            }
        }
        if !(self.mse >= 0.0 && self.path_length >= 0.0) {
            return Err(Error::numeric("negative mse or path length"));
        }
        Ok(())
    }
}

mod inf_as_string {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            "inf".serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!(
                "expected a number or \"inf\", got {t}"
            ))),
        }
    }
}
