//! Forward diffusion with shared noise and multistep consistency sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, PromptCondition};
use crate::error::{check_finite, check_len, Error, Result};
use crate::latent::Latent;
use crate::schedule::{NoiseSchedule, TimestepGrid};

/// A standard-normal draw. Draws made by [`NoiseDraw::keyed`] remember the
/// `(seed, step_index)` pair that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    values: Vec<f64>,
    seed_path: Option<(u64, u64)>,
}

impl NoiseDraw {
    /// Draw `dim` values from the ChaCha stream `step_index` of `seed`.
    ///
    /// Each step owns its stream, so toggling regularization or skipping
    /// denoiser calls never shifts the noise seen by later steps.
    pub fn keyed(seed: u64, step_index: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step_index);
        let values = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            values,
            seed_path: Some((seed, step_index)),
        }
    }

    /// Wraps caller-supplied noise.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "noise draw")?;
        Ok(Self {
            values,
            seed_path: None,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn seed_path(&self) -> Option<(u64, u64)> {
        self.seed_path
    }
}

/// Mixes a base seed with an index into an independent-looking seed
/// (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut x = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// `sqrt(a) z0 + sqrt(1 - a) eps`.
pub fn diffuse(z0: &Latent, t: f64, eps: &NoiseDraw, schedule: &NoiseSchedule) -> Result<Latent> {
    check_len(z0.dim(), eps.values.len())?;
    let a = schedule.alpha_bar(t)?;
    let (root, noise) = (a.sqrt(), (1.0 - a).sqrt());
    let values = z0
        .values()
        .iter()
        .zip(&eps.values)
        .map(|(x, e)| root * x + noise * e)
        .collect();
    z0.like(values)
}

/// Source and target samples on the denoising paths, sharing `eps`.
///
/// `z_tar` is evaluated as `(z_mix - z0_src) + z_src`, so the target always
/// sits at the current source-to-mix offset from `z_src`.
pub fn shared_noise_pair(
    z0_src: &Latent,
    z_mix: &Latent,
    t: f64,
    eps: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<(Latent, Latent)> {
    check_len(z0_src.dim(), z_mix.dim())?;
    let z_src = diffuse(z0_src, t, eps, schedule)?;
    let z_tar = z_mix
        .values()
        .iter()
        .zip(z0_src.values())
        .zip(z_src.values())
        .map(|((m, s0), s)| (m - s0) + s)
        .collect();
    let z_tar = z_mix.like(z_tar)?;
    Ok((z_src, z_tar))
}

/// Multistep consistency sampling: predict the clean sample, re-noise to the
/// next grid time with fresh noise, repeat. The final prediction is returned
/// without re-noising.
pub fn consistency_sample<D: Denoiser + ?Sized>(
    f: &D,
    prompt: &PromptCondition,
    grid: &TimestepGrid,
    z_init: &Latent,
    rng_seed: u64,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let ts = grid.timesteps();
    if ts.is_empty() {
        return Err(Error::config("consistency sampling needs a non-empty grid"));
    }
    let mut z = z_init.clone();
    for (i, pair) in ts.windows(2).enumerate() {
        let clean = z.like(f.predict(z.values(), pair[0], prompt)?)?;
        let eps = NoiseDraw::keyed(rng_seed, i as u64, z.dim());
        z = diffuse(&clean, pair[1], &eps, schedule)?;
    }
    let last = *ts.last().unwrap();
    let out = f.predict(z.values(), last, prompt)?;
    check_finite(&out, "consistency sample")?;
    z.like(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_draws_are_reproducible_and_distinct() {
        let a = NoiseDraw::keyed(7, 3, 16);
        assert_eq!(a, NoiseDraw::keyed(7, 3, 16));
        assert_ne!(a.values(), NoiseDraw::keyed(7, 4, 16).values());
        assert_ne!(a.values(), NoiseDraw::keyed(8, 3, 16).values());
        assert_eq!(a.seed_path(), Some((7, 3)));
        // a prefix of a longer draw from the same stream
        assert_eq!(&NoiseDraw::keyed(7, 3, 32).values()[..16], a.values());
    }

    #[test]
    fn diffuse_examples() {
        let s = NoiseSchedule::default();
        let z0 = Latent::vector(vec![1.0]).unwrap();
        let zero = NoiseDraw::from_values(vec![0.0]).unwrap();
        let out = diffuse(&z0, 2000.0 / 3.0, &zero, &s).unwrap();
        assert!((out.values()[0] - 0.5).abs() < 1e-12);

        let eps = NoiseDraw::from_values(vec![3.7]).unwrap();
        assert_eq!(diffuse(&z0, 0.0, &eps, &s).unwrap(), z0);

        let bad = NoiseDraw::from_values(vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            diffuse(&z0, 1.0, &bad, &s),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn shared_pair_examples() {
        let s = NoiseSchedule::default();
        let z0 = Latent::vector(vec![0.0, 0.0]).unwrap();
        let mix = Latent::vector(vec![1.0, 1.0]).unwrap();
        // choose eps so that z_src = (0.3, 0.3): z0 = 0 gives z_src = sigma * eps
        let t = 400.0;
        let sigma = s.sigma(t).unwrap();
        let eps = NoiseDraw::from_values(vec![0.3 / sigma; 2]).unwrap();
        let (zs, zt) = shared_noise_pair(&z0, &mix, t, &eps, &s).unwrap();
        for (a, b) in zs.values().iter().zip(zt.values()) {
            assert!((a - 0.3).abs() < 1e-15);
            assert!((b - 1.3).abs() < 1e-15);
        }

        let src = Latent::vector(vec![0.4, -1.1, 2.5]).unwrap();
        let eps = NoiseDraw::keyed(1, 0, 3);
        let (zs, zt) = shared_noise_pair(&src, &src, 700.0, &eps, &s).unwrap();
        assert_eq!(zs, zt);
    }

    #[test]
    fn final_sampling_step_is_not_renoised() {
        struct Fixed;
        impl Denoiser for Fixed {
            fn predict(&self, z: &[f64], _t: f64, _p: &PromptCondition) -> Result<Vec<f64>> {
                Ok(vec![0.25; z.len()])
            }
        }
        let s = NoiseSchedule::default();
        let grid = TimestepGrid::from_timesteps(vec![800.0, 400.0, 100.0], &s).unwrap();
        let z = Latent::vector(vec![5.0, -5.0]).unwrap();
        let p = PromptCondition::new("x", "x");
        let out = consistency_sample(&Fixed, &p, &grid, &z, 9, &s).unwrap();
        assert_eq!(out.values(), &[0.25, 0.25]);
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(derive_seed(42, 5), derive_seed(42, 5));
    }
}
