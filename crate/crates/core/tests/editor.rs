use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tweeze_core::denoiser::{Denoiser, MixtureDenoiser, PromptCondition, Registry};
use tweeze_core::editor::{
    effective_coefficient, gamma_hat_for_step, read_trace, tweeze_edit, tweeze_edit_untraced,
    write_trace, EditConfig, EditContext, Guidance, RegForm, RegSchedule,
};
use tweeze_core::forward::derive_seed;
use tweeze_core::metrics::{mse, path_length, target_nll};
use tweeze_core::{make_timestep_grid, Error, GridSpacing, Latent, NoiseSchedule, Result};

fn benchmark() -> (MixtureDenoiser, PromptCondition, PromptCondition) {
    let reg = Arc::new(Registry::two_cluster_benchmark());
    let src = reg.prompt("src").unwrap();
    let tar = reg.prompt("tar").unwrap();
    (
        MixtureDenoiser::new(reg, NoiseSchedule::default()),
        src,
        tar,
    )
}

fn sources(n: usize, seed: u64) -> Vec<Latent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let y = if rng.random::<bool>() { 3.0 } else { -3.0 };
            let e: [f64; 2] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            Latent::vector(vec![-2.0 + e[0], y + e[1]]).unwrap()
        })
        .collect()
}

/// Benchmark edit settings: 12 uniform steps from `T / 2`, no guidance.
fn config(form: RegForm, strength: f64, m: usize, seed: u64) -> EditConfig {
    let s = NoiseSchedule::default();
    let mut c = EditConfig::default_for(&s).unwrap();
    c.grid = make_timestep_grid(&s, 12, 0.5, GridSpacing::UniformT).unwrap();
    c.reg = RegSchedule {
        form,
        strength,
        active_steps: m,
        ..RegSchedule::default()
    };
    c.guidance = Guidance::none();
    c.seed = seed;
    c
}

#[test]
fn identity_edit_is_a_fixed_point() {
    let (d, src, _) = benchmark();
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, z0) in sources(100, 5).iter().enumerate() {
        let form = [RegForm::Simplified, RegForm::FullEq10, RegForm::Bypass][i % 3];
        let mut cfg = config(
            form,
            rng.random_range(0.0..=1.0),
            rng.random_range(0..=12),
            i as u64,
        );
        cfg.guidance = Guidance::default();
        let (out, traj) = tweeze_edit(&d, z0, &src, &src, &cfg, &s).unwrap();
        for (a, b) in out.values().iter().zip(z0.values()) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!(path_length(&traj).unwrap() <= 1e-9);
    }
}

/// Direct-path editing written out without any regularization machinery.
fn direct_path_only(
    d: &MixtureDenoiser,
    z0: &Latent,
    p_src: &PromptCondition,
    p_tar: &PromptCondition,
    cfg: &EditConfig,
    s: &NoiseSchedule,
) -> Vec<f64> {
    let z0 = z0.values();
    let mut z_mix = z0.to_vec();
    let ts = cfg.grid.timesteps();
    for (i, &t) in ts.iter().enumerate() {
        let t_next = ts.get(i + 1).copied().unwrap_or(0.0);
        let a = s.alpha_bar(t).unwrap();
        let a_next = s.alpha_bar(t_next).unwrap();
        let mut stream = ChaCha8Rng::seed_from_u64(cfg.seed);
        stream.set_stream(i as u64);
        let eps: Vec<f64> = (0..z0.len())
            .map(|_| StandardNormal.sample(&mut stream))
            .collect();
        let z_src: Vec<f64> = (0..z0.len())
            .map(|k| a.sqrt() * z0[k] + (1.0 - a).sqrt() * eps[k])
            .collect();
        let z_tar: Vec<f64> = (0..z0.len())
            .map(|k| (z_mix[k] - z0[k]) + z_src[k])
            .collect();
        let fs = d.predict(&z_src, t, p_src).unwrap();
        let ft = d.predict(&z_tar, t, p_tar).unwrap();
        z_mix = (0..z0.len())
            .map(|k| z0[k] + a_next.sqrt() * (ft[k] - fs[k]))
            .collect();
    }
    z_mix
}

#[test]
fn zero_strength_reduces_to_direct_path() {
    let (d, src, tar) = benchmark();
    let s = NoiseSchedule::default();
    for (i, z0) in sources(50, 17).iter().enumerate() {
        for form in [RegForm::Simplified, RegForm::FullEq10] {
            let cfg = config(form, 0.0, 6, derive_seed(3, i as u64));
            let (out, _) = tweeze_edit(&d, z0, &src, &tar, &cfg, &s).unwrap();
            let want = direct_path_only(&d, z0, &src, &tar, &cfg, &s);
            assert_eq!(out.values(), want.as_slice());
        }
    }
}

/// Returns fixed predictions per prompt label.
struct Fixed;

impl Denoiser for Fixed {
    fn predict(&self, z: &[f64], _t: f64, p: &PromptCondition) -> Result<Vec<f64>> {
        let v = if p.label == "tar" { 1.0 } else { -0.5 };
        Ok(vec![v; z.len()])
    }
}

#[test]
fn effective_coefficient_interpolates_with_strength() {
    let s = NoiseSchedule::default();
    let z0 = Latent::vector(vec![0.25, -1.0]).unwrap();
    let (p, q) = (
        PromptCondition::new("src", "src"),
        PromptCondition::new("tar", "tar"),
    );
    for strength in [0.0, 0.3, 1.0] {
        let cfg = config(RegForm::Simplified, strength, 12, 4);
        let (_, traj) = tweeze_edit(&Fixed, &z0, &p, &q, &cfg, &s).unwrap();
        for step in &traj.steps {
            let t_next = cfg.grid.next_time(step.step_index);
            let (now, next) = (step.alpha_bar.sqrt(), s.alpha_bar(t_next).unwrap().sqrt());
            let want = next + strength * (now - next);
            for k in 0..2 {
                let c = (step.z_mix_after[k] - z0.values()[k]) / 1.5;
                assert!(
                    (c - want).abs() < 1e-12,
                    "s={strength} step={}",
                    step.step_index
                );
            }
        }
    }
}

/// Clean prediction `z / sqrt(a)`, so prediction differences are exactly the
/// path offset divided by `sqrt(a)`.
struct Unscale(NoiseSchedule);

impl Denoiser for Unscale {
    fn predict(&self, z: &[f64], t: f64, _p: &PromptCondition) -> Result<Vec<f64>> {
        let r = self.0.alpha_bar(t)?.sqrt();
        Ok(z.iter().map(|v| v / r).collect())
    }
}

#[test]
fn full_strength_holds_the_offset_norm() {
    let s = NoiseSchedule::default();
    let d = Unscale(s);
    let z0 = Latent::vector(vec![0.5, 2.0, -1.0]).unwrap();
    let p = PromptCondition::new("p", "p");
    for (strength, grows) in [(1.0, false), (0.0, true)] {
        let cfg = config(RegForm::Simplified, strength, 12, 8);
        let ctx = EditContext {
            denoiser: &d,
            z0_src: &z0,
            p_src: &p,
            p_tar: &p,
            config: &cfg,
            schedule: &s,
        };
        let mut z_mix = Latent::vector(vec![1.5, 1.0, 0.0]).unwrap();
        let start = 3f64.sqrt();
        for i in 0..cfg.grid.len() {
            let rec = ctx.step(i, &z_mix).unwrap();
            let before: f64 = rec
                .z_mix_before
                .iter()
                .zip(z0.values())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let after: f64 = rec
                .z_mix_after
                .iter()
                .zip(z0.values())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if grows {
                let ratio =
                    s.alpha_bar(cfg.grid.next_time(i)).unwrap().sqrt() / rec.alpha_bar.sqrt();
                assert!((after / before - ratio).abs() < 1e-9);
            } else {
                assert!((after - start).abs() < 1e-12);
            }
            z_mix = z_mix.like(rec.z_mix_after).unwrap();
        }
    }
}

#[test]
fn bypass_skips_the_denoiser_on_regularized_steps() {
    struct Panics;
    impl Denoiser for Panics {
        fn predict(&self, _: &[f64], _: f64, _: &PromptCondition) -> Result<Vec<f64>> {
            Err(Error::Numeric("denoiser called".into()))
        }
    }
    let s = NoiseSchedule::default();
    let z0 = Latent::vector(vec![1.0, 2.0]).unwrap();
    let p = PromptCondition::new("p", "p");
    let cfg = config(RegForm::Bypass, 1.0, 12, 1);
    let (out, traj) = tweeze_edit(&Panics, &z0, &p, &p, &cfg, &s).unwrap();
    assert_eq!(out, z0);
    assert!(traj
        .steps
        .iter()
        .all(|r| r.zhat0_src.is_none() && r.zhat0_tar.is_none()));
    traj.check_invariants().unwrap();

    let partial = config(RegForm::Bypass, 1.0, 6, 1);
    assert!(tweeze_edit(&Panics, &z0, &p, &p, &partial, &s).is_err());
}

#[test]
fn bypass_matches_simplified_on_exact_prediction_differences() {
    let s = NoiseSchedule::default();
    let d = Unscale(s);
    let z0 = Latent::vector(vec![0.5, -0.75]).unwrap();
    let p = PromptCondition::new("p", "p");
    let z_mix = Latent::vector(vec![1.0, 0.25]).unwrap();
    for strength in [0.0, 0.5, 1.0] {
        let simple = config(RegForm::Simplified, strength, 12, 2);
        let bypass = config(RegForm::Bypass, strength, 12, 2);
        for i in 0..12 {
            let a = EditContext {
                denoiser: &d,
                z0_src: &z0,
                p_src: &p,
                p_tar: &p,
                config: &simple,
                schedule: &s,
            }
            .step(i, &z_mix)
            .unwrap();
            let b = EditContext {
                denoiser: &d,
                z0_src: &z0,
                p_src: &p,
                p_tar: &p,
                config: &bypass,
                schedule: &s,
            }
            .step(i, &z_mix)
            .unwrap();
            for (x, y) in a.z_mix_after.iter().zip(&b.z_mix_after) {
                assert!(
                    (x - y).abs() < 1e-9 * (1.0 + x.abs()),
                    "s={strength} step={i}: {x} vs {y}"
                );
            }
        }
    }
}

/// States are taken from running edits, where `z_mix - z0_src` has been
/// built up by earlier steps of the same edit.
#[test]
fn full_and_simplified_updates_agree_mid_schedule() {
    let (d, src, tar) = benchmark();
    let s = NoiseSchedule::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, z0) in sources(100, 99).iter().enumerate() {
        let simple = config(RegForm::Simplified, 1.0, 12, i as u64);
        let full = RegSchedule {
            form: RegForm::FullEq10,
            ..simple.reg
        };
        let full = EditConfig {
            reg: full,
            ..simple.clone()
        };
        let (_, traj) = tweeze_edit(&d, z0, &src, &tar, &simple, &s).unwrap();
        for rec in traj
            .steps
            .iter()
            .filter(|r| (0.2..=0.8).contains(&r.alpha_bar))
        {
            let z_mix = z0.like(rec.z_mix_before.clone()).unwrap();
            let alt = EditContext {
                denoiser: &d,
                z0_src: z0,
                p_src: &src,
                p_tar: &tar,
                config: &full,
                schedule: &s,
            }
            .step(rec.step_index, &z_mix)
            .unwrap();
            let diff: f64 = rec
                .z_mix_after
                .iter()
                .zip(&alt.z_mix_after)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = rec.z_mix_after.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst = worst.max(diff / norm);
            checked += 1;
        }
    }
    println!("checked {checked} states, worst relative difference {worst:.4}");
    assert!(checked >= 200, "{checked}");
    assert!(worst <= 0.10, "worst relative update difference {worst}");
}

#[test]
fn gamma_hat_is_zero_beyond_active_steps() {
    let s = NoiseSchedule::default();
    let cfg = config(RegForm::Simplified, 1.0, 6, 0);
    for i in 0..12 {
        let (t, tn) = (cfg.grid.timesteps()[i], cfg.grid.next_time(i));
        let g = gamma_hat_for_step(&cfg.reg, i, t, tn, &s).unwrap();
        assert_eq!(g == 0.0, i >= 6);
        if i < 6 {
            let c = effective_coefficient(g, tn, &s).unwrap();
            assert!((c - s.alpha_bar(t).unwrap().sqrt()).abs() < 1e-15);
        }
    }
}

#[test]
fn early_regularization_trades_alignment_for_consistency() {
    let (d, src, tar) = benchmark();
    let s = NoiseSchedule::default();
    let target = &d.registry().get("tar").unwrap().mixture;
    let zs = sources(200, 2024);
    let mut rows = Vec::new();
    for m in [0, 2, 4, 6, 8] {
        let (mut e, mut nll) = (0.0, 0.0);
        for (i, z0) in zs.iter().enumerate() {
            let cfg = config(RegForm::Simplified, 1.0, m, derive_seed(1, i as u64));
            let (out, _) = tweeze_edit_untraced(&d, z0, &src, &tar, &cfg, &s).unwrap();
            e += mse(&out, z0).unwrap();
            nll += target_nll(&out, target).unwrap();
        }
        rows.push((e / 200.0, nll / 200.0));
    }
    for w in rows.windows(2) {
        assert!(w[1].0 < w[0].0, "{rows:?}");
        assert!(w[1].1 > w[0].1, "{rows:?}");
    }
}

#[test]
fn trace_round_trip_is_bit_exact() {
    let (d, src, tar) = benchmark();
    let s = NoiseSchedule::default();
    for form in [RegForm::Simplified, RegForm::FullEq10, RegForm::Bypass] {
        let mut cfg = config(form, 0.7, 6, 77);
        cfg.guidance = Guidance::default();
        let (_, traj) = tweeze_edit(&d, &sources(1, 3)[0], &src, &tar, &cfg, &s).unwrap();
        traj.check_invariants().unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &traj).unwrap();
        let back = read_trace(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
        let mut again = Vec::new();
        write_trace(&mut again, &back).unwrap();
        assert_eq!(again, buf);
        let header = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        assert!(header.starts_with("{\"header\":"));
    }
}

#[test]
fn tampered_traces_are_rejected() {
    let (d, src, tar) = benchmark();
    let s = NoiseSchedule::default();
    let (_, traj) = tweeze_edit(
        &d,
        &sources(1, 4)[0],
        &src,
        &tar,
        &config(RegForm::Simplified, 1.0, 6, 5),
        &s,
    )
    .unwrap();
    let mut bad = traj.clone();
    bad.steps[3].reg_grad[0] += 1e-12;
    assert!(matches!(bad.check_invariants(), Err(Error::Trace(_))));
    let mut bad = traj.clone();
    bad.steps[2].z_tar[1] = f64::from_bits(bad.steps[2].z_tar[1].to_bits() + 1);
    assert!(matches!(bad.check_invariants(), Err(Error::Trace(_))));
    let mut buf = Vec::new();
    write_trace(&mut buf, &bad).unwrap();
    assert!(read_trace(buf.as_slice()).is_err());
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let (d, src, tar) = benchmark();
    let s = NoiseSchedule::default();
    let mut cfg = config(RegForm::Simplified, 1.0, 6, 0);
    cfg.reg.active_steps = 20;
    assert!(matches!(
        tweeze_edit(&d, &sources(1, 0)[0], &src, &tar, &cfg, &s),
        Err(Error::Config(_))
    ));
    let mut cfg = config(RegForm::Simplified, 1.0, 6, 0);
    cfg.guidance = Guidance::default();
    cfg.guidance.uncond = Some(PromptCondition::new("missing", "missing"));
    assert!(matches!(
        tweeze_edit(&d, &sources(1, 0)[0], &src, &tar, &cfg, &s),
        Err(Error::Config(_))
    ));
}

#[test]
fn editing_is_deterministic() {
    let (d, src, tar) = benchmark();
    let s = NoiseSchedule::default();
    let z0 = &sources(1, 8)[0];
    let mut cfg = config(RegForm::FullEq10, 0.5, 4, 6);
    cfg.guidance = Guidance::default();
    let (a, ta) = tweeze_edit(&d, z0, &src, &tar, &cfg, &s).unwrap();
    let (b, tb) = tweeze_edit(&d, z0, &src, &tar, &cfg, &s).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, len) = tweeze_edit_untraced(&d, z0, &src, &tar, &cfg, &s).unwrap();
    assert_eq!(a, c);
    assert_eq!(len, path_length(&ta).unwrap());
}

#[test]
fn regularization_shortens_the_path_on_average() {
    let (d, src, tar) = benchmark();
    let s = NoiseSchedule::default();
    let zs = sources(200, 31);
    let mean_len = |strength: f64| -> f64 {
        zs.iter()
            .enumerate()
            .map(|(i, z0)| {
                let cfg = config(RegForm::Simplified, strength, 6, i as u64);
                tweeze_edit_untraced(&d, z0, &src, &tar, &cfg, &s)
                    .unwrap()
                    .1
            })
            .sum::<f64>()
            / zs.len() as f64
    };
    assert!(mean_len(1.0) <= mean_len(0.0));
}
