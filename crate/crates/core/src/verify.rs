//! Independent oracles: finite-difference checks of the full regularization
//! gradient and Monte-Carlo estimates of the posterior mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{gmm_posterior_mean, GaussianMixture};
use crate::editor::reg_gradient_full;
use crate::error::{check_finite, check_len, Error, Result};
use crate::latent::Latent;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_FD_STEP: f64 = 1e-6;
pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-5;
const MC_CHUNK: usize = 1 << 15;
const MIN_ESS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_coordinate_errors: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Per-coordinate `|a - b| / max(|a|, |b|, 1e-6 max|a|)`. The floor keeps
    /// coordinates whose true gradient is nearly zero from dominating.
    pub fn compare(analytic: &[f64], numeric: &[f64], tolerance: f64) -> Result<Self> {
        check_len(analytic.len(), numeric.len())?;
        let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let floor = 1e-6 * scale;
        let errs: Vec<f64> = analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d == 0.0 {
                    0.0
                } else {
                    d / a.abs().max(b.abs()).max(floor)
                }
            })
            .collect();
        let max = errs.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            max_rel_error: max,
            per_coordinate_errors: errs,
            tolerance,
            passed: max <= tolerance,
        })
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Central differences per coordinate. The step actually taken,
/// `(z + h) - (z - h)`, is used as the divisor.
pub fn finite_diff_gradient<F>(objective: F, z: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = z.to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let (up, down) = (z[i] + h, z[i] - h);
        probe[i] = up;
        let fu = objective(&probe)?;
        probe[i] = down;
        let fd = objective(&probe)?;
        probe[i] = z[i];
        if !(fu.is_finite() && fd.is_finite()) {
            return Err(Error::numeric(format!(
                "objective is not finite near coordinate {i}"
            )));
        }
        grad.push((fu - fd) / (up - down));
    }
    Ok(grad)
}

/// Quantities held fixed while the surrogate is differentiated in `z_mix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFrozen {
    pub z0_src: Vec<f64>,
    pub z_src: Vec<f64>,
    pub eps_hat_tar: Vec<f64>,
    pub zhat0_src: Vec<f64>,
}

/// `gamma ||z_src - z_tar - c (zhat0_src - f~(z_tar))||^2` where
/// `z_tar = z_mix - z0_src + z_src`, `c = alpha_bar_dot / (4 sqrt(alpha_bar))`,
/// and `f~(z) = (z - sqrt(1 - alpha_bar) eps_hat_tar) / sqrt(alpha_bar)` is the
/// target prediction with its noise estimate frozen.
pub fn surrogate_objective(
    z_mix: &[f64],
    frozen: &SurrogateFrozen,
    t: f64,
    gamma_t: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let n = z_mix.len();
    for v in [
        &frozen.z0_src,
        &frozen.z_src,
        &frozen.eps_hat_tar,
        &frozen.zhat0_src,
    ] {
        check_len(n, v.len())?;
    }
    let a = schedule.alpha_bar(t)?;
    if !schedule.is_unclamped(t)? {
        return Err(Error::DegenerateTimestep { t, alpha_bar: a });
    }
    let (root, noise) = (a.sqrt(), (1.0 - a).sqrt());
    let c = 0.5 * schedule.alpha_bar_dot(t)? / (2.0 * root);
    let sq = (0..n).map(|i| {
        let z_tar = z_mix[i] - frozen.z0_src[i] + frozen.z_src[i];
        let f_tar = (z_tar - noise * frozen.eps_hat_tar[i]) / root;
        let r = frozen.z_src[i] - z_tar - c * (frozen.zhat0_src[i] - f_tar);
        r * r
    });
    Ok(gamma_t * compensated_sum(sq))
}

/// The `gamma_hat` under which the full gradient is the exact gradient of
/// [`surrogate_objective`]: `2 gamma (-1 + alpha_bar_dot / (4 alpha_bar))`.
pub fn surrogate_gamma_hat(gamma_t: f64, t: f64, schedule: &NoiseSchedule) -> Result<f64> {
    let a = schedule.alpha_bar(t)?;
    Ok(2.0 * gamma_t * (-1.0 + schedule.alpha_bar_dot(t)? / (4.0 * a)))
}

/// One randomized surrogate state.
#[derive(Debug, Clone)]
pub struct SurrogateCase {
    pub schedule: NoiseSchedule,
    pub t: f64,
    pub gamma_t: f64,
    pub z_mix: Vec<f64>,
    pub z_tar: Vec<f64>,
    pub zhat0_tar: Vec<f64>,
    pub frozen: SurrogateFrozen,
}

impl SurrogateCase {
    /// Random state with `alpha_bar(t)` uniform in `[0.1, 0.9]` on a cosine
    /// schedule whose horizon is drawn from {1, 10, 1000}.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let horizon = [1u32, 10, 1000][rng.random_range(0..3)];
        let schedule = NoiseSchedule::cosine(horizon);
        let a: f64 = rng.random_range(0.1..=0.9);
        let t = 2.0 * schedule.horizon() * a.sqrt().acos() / std::f64::consts::PI;
        let a = schedule.alpha_bar(t).expect("t inside the horizon");
        let dim = rng.random_range(1..=8);
        let mut normal = |s: f64| -> Vec<f64> {
            (0..dim)
                .map(|_| s * std_normal(&mut *rng))
                .collect::<Vec<f64>>()
        };
        let z0_src = normal(2.0);
        let eps = normal(1.0);
        let offset = normal(1.0);
        let zhat0_src = normal(2.0);
        let zhat0_tar = normal(2.0);
        let z_mix: Vec<f64> = z0_src.iter().zip(&offset).map(|(z, o)| z + o).collect();
        let z_src: Vec<f64> = z0_src
            .iter()
            .zip(&eps)
            .map(|(z, e)| a.sqrt() * z + (1.0 - a).sqrt() * e)
            .collect();
        let z_tar: Vec<f64> = (0..dim)
            .map(|i| (z_mix[i] - z0_src[i]) + z_src[i])
            .collect();
        let eps_hat_tar = (0..dim)
            .map(|i| (z_tar[i] - a.sqrt() * zhat0_tar[i]) / (1.0 - a).sqrt())
            .collect();
        let gamma_t = rng.random_range(0.1..2.0);
        Self {
            schedule,
            t,
            gamma_t,
            z_mix,
            z_tar,
            zhat0_tar,
            frozen: SurrogateFrozen {
                z0_src,
                z_src,
                eps_hat_tar,
                zhat0_src,
            },
        }
    }

    /// Compares the full gradient against central differences of the surrogate.
    pub fn check(&self, h: f64, tolerance: f64) -> Result<GradCheckReport> {
        let gamma_hat = surrogate_gamma_hat(self.gamma_t, self.t, &self.schedule)?;
        let analytic = reg_gradient_full(
            &self.frozen.z_src,
            &self.z_tar,
            &self.frozen.zhat0_src,
            &self.zhat0_tar,
            self.t,
            gamma_hat,
            &self.schedule,
        )?;
        let numeric = finite_diff_gradient(
            |z| surrogate_objective(z, &self.frozen, self.t, self.gamma_t, &self.schedule),
            &self.z_mix,
            h,
        )?;
        GradCheckReport::compare(&analytic, &numeric, tolerance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSuiteReport {
    pub n_states: usize,
    pub n_passed: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs [`SurrogateCase::check`] over `n_states` seeded random states.
pub fn gradient_suite(n_states: usize, seed: u64, tolerance: f64) -> Result<GradientSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max = 0.0f64;
    let mut n_passed = 0;
    for _ in 0..n_states {
        let report = SurrogateCase::random(&mut rng).check(DEFAULT_FD_STEP, tolerance)?;
        max = max.max(report.max_rel_error);
        n_passed += report.passed as usize;
    }
    Ok(GradientSuiteReport {
        n_states,
        n_passed,
        max_rel_error: max,
        tolerance,
        passed: n_passed == n_states,
    })
}

/// Ratio of central-difference errors at `h` and `h / 2` on `||z||^4`.
/// Second-order accuracy makes this close to 4.
pub fn fd_convergence_ratio(z: &[f64], h: f64) -> Result<f64> {
    let quartic = |x: &[f64]| -> Result<f64> {
        let s: f64 = x.iter().map(|v| v * v).sum();
        Ok(s * s)
    };
    let s: f64 = z.iter().map(|v| v * v).sum();
    let exact: Vec<f64> = z.iter().map(|v| 4.0 * s * v).collect();
    let err = |h: f64| -> Result<f64> {
        let g = finite_diff_gradient(quartic, z, h)?;
        Ok(g.iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    };
    Ok(err(h)? / err(h / 2.0)?)
}

/// Self-normalized importance estimate of `E[z0 | z_t = z]` and its
/// per-coordinate delta-method standard error.
///
/// Samples `z0` from the mixture and weights each by the forward-process
/// likelihood `N(z; sqrt(a) z0, (1 - a) I)`. Chunks of samples use their own
/// ChaCha stream and are reduced in chunk order, so the result does not
/// depend on the thread count.
pub fn mc_posterior_mean(
    mixture: &GaussianMixture,
    z: &Latent,
    t: f64,
    n_samples: usize,
    seed: u64,
    schedule: &NoiseSchedule,
) -> Result<(Latent, Latent)> {
    let dim = mixture.dim();
    check_len(dim, z.dim())?;
    if n_samples < 1000 {
        return Err(Error::config(format!(
            "Monte-Carlo estimate needs at least 1000 samples, got {n_samples}"
        )));
    }
    let a = schedule.alpha_bar(t)?;
    if a == 1.0 {
        return Ok((z.clone(), z.like(vec![0.0; dim])?));
    }
    let (root, var) = (a.sqrt(), 1.0 - a);
    let zv = z.values();

    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let chunks: Vec<ChunkSums> = (0..n_chunks)
        .into_par_iter()
        .map(|j| {
            let len = MC_CHUNK.min(n_samples - j * MC_CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut samples = Vec::with_capacity(len * dim);
            let mut logw = Vec::with_capacity(len);
            for _ in 0..len {
                let start = samples.len();
                mixture.sample_into(&mut rng, &mut samples);
                let d2: f64 = samples[start..]
                    .iter()
                    .zip(zv)
                    .map(|(x, zi)| (zi - root * x).powi(2))
                    .sum();
                logw.push(-d2 / (2.0 * var));
            }
            ChunkSums::new(&samples, &logw, dim)
        })
        .collect();

    let max = chunks
        .iter()
        .map(|c| c.max)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sw = 0.0;
    let mut sw2 = 0.0;
    let mut swx = vec![0.0; dim];
    let mut sw2x = vec![0.0; dim];
    let mut sw2xx = vec![0.0; dim];
    for c in &chunks {
        let f1 = (c.max - max).exp();
        let f2 = f1 * f1;
        sw += f1 * c.sw;
        sw2 += f2 * c.sw2;
        for k in 0..dim {
            swx[k] += f1 * c.swx[k];
            sw2x[k] += f2 * c.sw2x[k];
            sw2xx[k] += f2 * c.sw2xx[k];
        }
    }
    let ess = sw * sw / sw2;
    if ess.is_nan() || ess < MIN_ESS {
        return Err(Error::UnreliableEstimate { ess });
    }
    let est: Vec<f64> = swx.iter().map(|v| v / sw).collect();
    let se: Vec<f64> = (0..dim)
        .map(|k| {
            let m = est[k];
            let centered = sw2xx[k] - 2.0 * m * sw2x[k] + m * m * sw2;
            centered.max(0.0).sqrt() / sw
        })
        .collect();
    check_finite(&est, "Monte-Carlo estimate")?;
    Ok((z.like(est)?, z.like(se)?))
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Weighted sums of one chunk relative to the chunk's largest log-weight.
struct ChunkSums {
    max: f64,
    sw: f64,
    sw2: f64,
    swx: Vec<f64>,
    sw2x: Vec<f64>,
    sw2xx: Vec<f64>,
}

impl ChunkSums {
    fn new(samples: &[f64], logw: &[f64], dim: usize) -> Self {
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = Self {
            max,
            sw: 0.0,
            sw2: 0.0,
            swx: vec![0.0; dim],
            sw2x: vec![0.0; dim],
            sw2xx: vec![0.0; dim],
        };
        for (x, lw) in samples.chunks_exact(dim).zip(logw) {
            let w = (lw - max).exp();
            let w2 = w * w;
            s.sw += w;
            s.sw2 += w2;
            #[allow(clippy::needless_range_loop)]
            for k in 0..dim {
                s.swx[k] += w * x[k];
                s.sw2x[k] += w2 * x[k];
                s.sw2xx[k] += w2 * x[k] * x[k];
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub alpha_bar: f64,
    pub n_components: usize,
    /// Largest `|mc - exact| / se` over coordinates.
    pub max_z_score: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCoverageReport {
    pub n_triples: usize,
    pub n_covered: usize,
    pub required: usize,
    pub cases: Vec<OracleCase>,
    pub passed: bool,
}

/// Random 2D mixture with 1 to 3 components.
pub fn random_mixture<R: Rng>(rng: &mut R) -> GaussianMixture {
    let k = rng.random_range(1..=3);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let head: f64 = weights[..k - 1].iter().sum();
    weights[k - 1] = 1.0 - head;
    let means = (0..k)
        .map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let sigma = rng.random_range(0.3..1.5);
    GaussianMixture::new(weights, means, sigma).expect("random mixture is valid")
}

/// Compares [`gmm_posterior_mean`] with [`mc_posterior_mean`] on random
/// (mixture, z, t) triples, where `z` is drawn from the noisy marginal.
/// A triple is covered when every coordinate lies within 3 standard errors.
pub fn mc_oracle_suite(
    n_triples: usize,
    n_samples: usize,
    required: usize,
    seed: u64,
) -> Result<OracleCoverageReport> {
    let schedule = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n_triples);
    for i in 0..n_triples {
        let mixture = random_mixture(&mut rng);
        let a: f64 = rng.random_range(0.1..=0.9);
        let t = 2.0 * schedule.horizon() * a.sqrt().acos() / std::f64::consts::PI;
        let a = schedule.alpha_bar(t)?;
        let mut x0 = Vec::new();
        mixture.sample_into(&mut rng, &mut x0);
        let zt: Vec<f64> = x0
            .iter()
            .map(|x| a.sqrt() * x + (1.0 - a).sqrt() * std_normal(&mut rng))
            .collect();
        let z = Latent::vector(zt)?;
        let exact = gmm_posterior_mean(&mixture, z.values(), t, &schedule)?;
        let (est, se) =
            mc_posterior_mean(&mixture, &z, t, n_samples, seed ^ (i as u64 + 1), &schedule)?;
        let max_z = exact
            .iter()
            .zip(est.values())
            .zip(se.values())
            .map(|((e, m), s)| (e - m).abs() / s)
            .fold(0.0, f64::max);
        cases.push(OracleCase {
            alpha_bar: a,
            n_components: mixture.n_components(),
            max_z_score: max_z,
            covered: max_z <= 3.0,
        });
    }
    let n_covered = cases.iter().filter(|c| c.covered).count();
    Ok(OracleCoverageReport {
        n_triples,
        n_covered,
        required,
        cases,
        passed: n_covered >= required,
    })
}
