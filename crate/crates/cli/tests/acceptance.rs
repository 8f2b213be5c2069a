//! Acceptance suite: one `[PASS]` / `[FAIL]` line per criterion, nonzero exit
//! status if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use tweeze_cli::commands::{edit_first_instance, run_bench, trace_bytes, RunOptions};
use tweeze_cli::{make_benchmark, run_method, Experiment, Instance, Method};
use tweeze_core::baseline::ddim_edit;
use tweeze_core::denoiser::{
    clean_from_noise_pred, clean_from_velocity_pred, noise_from_clean_pred,
    velocity_from_clean_pred, Denoiser,
};
use tweeze_core::editor::{read_trace, tweeze_edit, EditConfig, Guidance};
use tweeze_core::forward::{diffuse, NoiseDraw};
use tweeze_core::metrics::mse;
use tweeze_core::verify::{gradient_suite, mc_oracle_suite, DEFAULT_GRAD_TOLERANCE};
use tweeze_core::{Latent, NoiseSchedule, PromptCondition, RegForm, RegSchedule};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Experiment {
    Experiment::from_path(&configs().join(name), None).expect("shipped config resolves")
}

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(elapsed: Duration, limit: Duration, msg: String) -> Outcome {
    let msg = format!("{msg} in {:.2?} (limit {limit:?})", elapsed);
    ensure(elapsed < limit, msg)
}

fn e<T: std::fmt::Display>(err: T) -> String {
    err.to_string()
}

fn identity_fixed_point() -> Outcome {
    let start = Instant::now();
    let exp = load("default.toml");
    let instances = make_benchmark(&exp.registry, &exp.config.benchmark, 101).map_err(e)?;
    let p = instances[0].p_src.clone();
    let mut worst = 0.0f64;
    let mut runs = 0;
    for form in [RegForm::Simplified, RegForm::FullEq10, RegForm::Bypass] {
        for strength in [0.0, 0.5, 1.0] {
            for active_steps in [0, 6, 12] {
                for inst in instances.iter().take(100) {
                    let cfg = EditConfig {
                        reg: RegSchedule {
                            form,
                            strength,
                            active_steps,
                            ..exp.edit.reg
                        },
                        seed: inst.seed,
                        ..exp.edit.clone()
                    };
                    let (out, _) =
                        tweeze_edit(exp.denoiser.as_ref(), &inst.z0, &p, &p, &cfg, &exp.schedule)
                            .map_err(e)?;
                    for (a, b) in out.values().iter().zip(inst.z0.values()) {
                        worst = worst.max((a - b).abs());
                    }
                    runs += 1;
                }
            }
        }
    }
    let msg = format!("{runs} edits over 100 seeds, max |output - source| = {worst:.3e}");
    if worst > 1e-9 {
        return Err(msg);
    }
    within(start.elapsed(), Duration::from_secs(5), msg)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let r = gradient_suite(100, 2024, DEFAULT_GRAD_TOLERANCE).map_err(e)?;
    let msg = format!(
        "{}/{} states, max relative error {:.3e}",
        r.n_passed, r.n_states, r.max_rel_error
    );
    if !r.passed {
        return Err(msg);
    }
    within(start.elapsed(), Duration::from_secs(10), msg)
}

/// Direct-path editing with explicit guidance, coded against the denoiser
/// only.
fn direct_path_only(
    d: &dyn Denoiser,
    inst: &Instance,
    cfg: &EditConfig,
    schedule: &NoiseSchedule,
) -> Vec<f64> {
    let guide = |z: &[f64], t: f64, p: &PromptCondition, scale: f64| -> Vec<f64> {
        match (&cfg.guidance.uncond, scale == 1.0) {
            (Some(u), false) => {
                let un = d.predict(z, t, u).unwrap();
                let c = d.predict(z, t, p).unwrap();
                un.iter()
                    .zip(&c)
                    .map(|(a, b)| a + scale * (b - a))
                    .collect()
            }
            _ => d.predict(z, t, p).unwrap(),
        }
    };
    let z0 = inst.z0.values();
    let mut z_mix = z0.to_vec();
    let ts = cfg.grid.timesteps();
    for (i, &t) in ts.iter().enumerate() {
        let t_next = ts.get(i + 1).copied().unwrap_or(0.0);
        let a = schedule.alpha_bar(t).unwrap();
        let a_next = schedule.alpha_bar(t_next).unwrap();
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
        let fs = guide(&z_src, t, &inst.p_src, cfg.guidance.src_scale);
        let ft = guide(&z_tar, t, &inst.p_tar, cfg.guidance.tar_scale);
        z_mix = (0..z0.len())
            .map(|k| z0[k] + a_next.sqrt() * (ft[k] - fs[k]))
            .collect();
    }
    z_mix
}

fn zero_strength_reduction() -> Outcome {
    let mut runs = 0;
    for name in ["default.toml", "benchmark.toml"] {
        let exp = load(name);
        let instances = make_benchmark(&exp.registry, &exp.config.benchmark, 7).map_err(e)?;
        for form in [RegForm::Simplified, RegForm::FullEq10] {
            for inst in instances.iter().take(50) {
                let cfg = EditConfig {
                    reg: RegSchedule {
                        form,
                        strength: 0.0,
                        ..exp.edit.reg
                    },
                    seed: inst.seed,
                    ..exp.edit.clone()
                };
                let (out, _) = tweeze_edit(
                    exp.denoiser.as_ref(),
                    &inst.z0,
                    &inst.p_src,
                    &inst.p_tar,
                    &cfg,
                    &exp.schedule,
                )
                .map_err(e)?;
                let want = direct_path_only(exp.denoiser.as_ref(), inst, &cfg, &exp.schedule);
                let same = out
                    .values()
                    .iter()
                    .zip(&want)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Err(format!(
                        "{name} instance {} differs from the direct-path loop",
                        inst.id
                    ));
                }
                runs += 1;
            }
        }
    }
    Ok(format!(
        "{runs} seeded runs bitwise identical to the direct-path loop"
    ))
}

fn shared_noise_identity() -> Outcome {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let dist = |a: &Latent, b: &Latent| -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let latent = |rng: &mut ChaCha8Rng, dim: usize| {
        Latent::vector((0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    };
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let dim = rng.random_range(1..=64);
        let (a, b) = (latent(&mut rng, dim), latent(&mut rng, dim));
        let t = rng.random_range(0.0..=1000.0);
        let eps = NoiseDraw::keyed(9, i, dim);
        let got = dist(
            &diffuse(&a, t, &eps, &s).map_err(e)?,
            &diffuse(&b, t, &eps, &s).map_err(e)?,
        );
        let want = s.alpha_bar(t).map_err(e)?.sqrt() * dist(&a, &b);
        worst = worst.max((got - want).abs() / want);
    }
    // independent draws, alpha_bar <= 0.5, 8x8 grid-sized latents
    let mut larger = 0;
    for i in 0..1000 {
        let (a, b) = (latent(&mut rng, 64), latent(&mut rng, 64));
        let alpha: f64 = rng.random_range(0.05..=0.5);
        let t = 2000.0 * alpha.sqrt().acos() / std::f64::consts::PI;
        let za = diffuse(&a, t, &NoiseDraw::keyed(10, 2 * i, 64), &s).map_err(e)?;
        let zb = diffuse(&b, t, &NoiseDraw::keyed(10, 2 * i + 1, 64), &s).map_err(e)?;
        larger += (dist(&za, &zb) > s.alpha_bar(t).map_err(e)?.sqrt() * dist(&a, &b)) as usize;
    }
    ensure(
        worst <= 1e-12 && larger >= 950,
        format!("shared noise max relative error {worst:.2e}; independent noise larger in {larger}/1000"),
    )
}

fn mc_oracle() -> Outcome {
    let start = Instant::now();
    let r = mc_oracle_suite(50, 1_000_000, 48, 5150).map_err(e)?;
    let msg = format!(
        "{}/{} triples within 3 standard errors",
        r.n_covered, r.n_triples
    );
    if !r.passed {
        return Err(msg);
    }
    within(start.elapsed(), Duration::from_secs(60), msg)
}

fn adapters() -> Outcome {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (mut noise_err, mut vel_err) = (0.0f64, 0.0f64);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    for _ in 0..1000 {
        let dim = rng.random_range(1..=16);
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect();
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = rng.random_range(1.0..=980.0);
        let eps = noise_from_clean_pred(&z, t, &f, &s).map_err(e)?;
        let back = clean_from_noise_pred(&z, t, &eps, &s).map_err(e)?;
        let eps2 = noise_from_clean_pred(&z, t, &back, &s).map_err(e)?;
        for k in 0..dim {
            noise_err = noise_err.max(rel(back[k], f[k])).max(rel(eps2[k], eps[k]));
        }
        let u = t / 1000.0;
        let v = velocity_from_clean_pred(&z, u, &f).map_err(e)?;
        let back = clean_from_velocity_pred(&z, u, &v).map_err(e)?;
        let v2 = velocity_from_clean_pred(&z, u, &back).map_err(e)?;
        for k in 0..dim {
            vel_err = vel_err.max(rel(back[k], f[k])).max(rel(v2[k], v[k]));
        }
    }
    ensure(
        noise_err <= 1e-12 && vel_err <= 1e-12,
        format!("1000 states: clean<->noise {noise_err:.2e}, clean<->velocity {vel_err:.2e}"),
    )
}

fn mean_over(
    exp: &Experiment,
    reg: RegSchedule,
    instances: &[Instance],
) -> Result<(f64, f64, f64), String> {
    let out = run_method(exp, Method::Tweeze, reg, instances, None).map_err(e)?;
    let n = out.len() as f64;
    let m = |f: fn(&tweeze_cli::Outcome) -> f64| out.iter().map(f).sum::<f64>() / n;
    Ok((
        m(|o| o.metrics.mse),
        m(|o| o.metrics.target_nll),
        m(|o| o.metrics.path_length),
    ))
}

fn early_step_trend() -> Outcome {
    let start = Instant::now();
    let exp = load("benchmark.toml");
    let instances =
        make_benchmark(&exp.registry, &exp.config.benchmark, exp.config.seed).map_err(e)?;
    let mut rows = Vec::new();
    for m in [0, 2, 4, 6, 8] {
        let reg = RegSchedule {
            active_steps: m,
            strength: 1.0,
            ..exp.edit.reg
        };
        rows.push(mean_over(&exp, reg, &instances)?);
    }
    let mse_down = rows.windows(2).all(|w| w[1].0 < w[0].0);
    let nll_up = rows.windows(2).all(|w| w[1].1 > w[0].1);
    let fmt = |f: fn(&(f64, f64, f64)) -> f64| {
        rows.iter()
            .map(|r| format!("{:.4}", f(r)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let msg = format!(
        "{} instances, m = 0..8: mean MSE [{}], mean target NLL [{}]",
        instances.len(),
        fmt(|r| r.0),
        fmt(|r| r.1)
    );
    if !(mse_down && nll_up) {
        return Err(msg);
    }
    within(start.elapsed(), Duration::from_secs(120), msg)
}

fn strength_trend() -> Outcome {
    let exp = load("benchmark.toml");
    let instances =
        make_benchmark(&exp.registry, &exp.config.benchmark, exp.config.seed).map_err(e)?;
    let mut mse = Vec::new();
    for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let reg = RegSchedule {
            active_steps: 6,
            strength: s,
            ..exp.edit.reg
        };
        mse.push(mean_over(&exp, reg, &instances)?.0);
    }
    let row = mse
        .iter()
        .map(|v| format!("{v:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    ensure(
        mse.windows(2).all(|w| w[1] < w[0]),
        format!("m = 6, s = 0..1: mean MSE [{row}]"),
    )
}

fn inversion_gap() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["benchmark.toml", "default.toml"] {
        let exp = load(name);
        let instances =
            make_benchmark(&exp.registry, &exp.config.benchmark, exp.config.seed).map_err(e)?;
        let (mut ddim, mut tweeze) = (0.0, 0.0);
        for inst in &instances {
            let p = &inst.p_src;
            let rec = ddim_edit(
                exp.denoiser.as_ref(),
                &inst.z0,
                p,
                p,
                &exp.edit.grid,
                &exp.schedule,
            )
            .map_err(e)?;
            ddim += mse(&rec, &inst.z0).map_err(e)?;
            let cfg = EditConfig {
                seed: inst.seed,
                ..exp.edit.clone()
            };
            let (out, _) = tweeze_edit(exp.denoiser.as_ref(), &inst.z0, p, p, &cfg, &exp.schedule)
                .map_err(e)?;
            tweeze += mse(&out, &inst.z0).map_err(e)?;
        }
        let n = instances.len() as f64;
        ok &= ddim / n > tweeze / n;
        parts.push(format!(
            "{name}: DDIM reconstruction {:.3e} vs identity edit {:.3e}",
            ddim / n,
            tweeze / n
        ));
    }
    ensure(ok, parts.join("; "))
}

fn path_length_claim() -> Outcome {
    let exp = load("benchmark.toml");
    let instances =
        make_benchmark(&exp.registry, &exp.config.benchmark, exp.config.seed).map_err(e)?;
    let on = mean_over(
        &exp,
        RegSchedule {
            active_steps: 6,
            strength: 1.0,
            ..exp.edit.reg
        },
        &instances,
    )?
    .2;
    let off = mean_over(
        &exp,
        RegSchedule {
            active_steps: 6,
            strength: 0.0,
            ..exp.edit.reg
        },
        &instances,
    )?
    .2;
    ensure(
        on <= off,
        format!(
            "{} instances: mean path {on:.4} (s = 1, m = 6) vs {off:.4} (s = 0)",
            instances.len()
        ),
    )
}

fn determinism_and_round_trip() -> Outcome {
    let mut checked = 0;
    for name in ["default.toml", "benchmark.toml", "grid.toml"] {
        let exp = load(name);
        for form in [RegForm::Simplified, RegForm::FullEq10, RegForm::Bypass] {
            let mut exp = exp.clone();
            exp.edit.reg.form = form;
            let a = trace_bytes(&edit_first_instance(&exp).map_err(e)?).map_err(e)?;
            let b = trace_bytes(&edit_first_instance(&exp).map_err(e)?).map_err(e)?;
            if a != b {
                return Err(format!("{name} {form:?}: repeated traces differ"));
            }
            let traj = read_trace(a.as_slice()).map_err(|err| format!("{name} {form:?}: {err}"))?;
            if trace_bytes(&traj).map_err(e)? != a {
                return Err(format!("{name} {form:?}: re-exported trace differs"));
            }
            checked += 1;
        }
    }
    let exp = load("benchmark.toml");
    let dirs = [
        tempfile::tempdir().map_err(e)?,
        tempfile::tempdir().map_err(e)?,
    ];
    for d in &dirs {
        let opts = RunOptions {
            out: d.path().to_path_buf(),
            trace: true,
            quiet: true,
        };
        run_bench(&exp, &opts).map_err(e)?;
    }
    let mut files = 0;
    for sub in ["bench", "bench/traces/tweeze", "bench/traces/direct_s0"] {
        let mut names: Vec<_> = std::fs::read_dir(dirs[0].path().join(sub))
            .map_err(e)?
            .filter_map(|f| f.ok().map(|f| f.file_name()))
            .collect();
        names.sort();
        for n in names {
            let p0 = dirs[0].path().join(sub).join(&n);
            if p0.is_dir() || n.to_string_lossy().contains(".timing.") {
                continue;
            }
            let p1 = dirs[1].path().join(sub).join(&n);
            if std::fs::read(&p0).map_err(e)? != std::fs::read(&p1).map_err(e)? {
                return Err(format!("{} differs between runs", p0.display()));
            }
            if n.to_string_lossy().ends_with(".jsonl") {
                let f = std::fs::File::open(&p0).map_err(e)?;
                read_trace(std::io::BufReader::new(f)).map_err(e)?;
            }
            files += 1;
        }
    }
    Ok(format!("{checked} edit traces repeat and round-trip bit-exactly; {files} bench files identical across reruns"))
}

fn desk_scale_efficiency(suite_start: Instant) -> Outcome {
    let exp = load("default.toml");
    let inst = make_benchmark(&exp.registry, &exp.config.benchmark, 1)
        .map_err(e)?
        .remove(0);
    let cfg = EditConfig {
        seed: inst.seed,
        guidance: Guidance::default(),
        ..exp.edit.clone()
    };
    let mut times = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let t0 = Instant::now();
        let out = tweeze_edit(
            exp.denoiser.as_ref(),
            &inst.z0,
            &inst.p_src,
            &inst.p_tar,
            &cfg,
            &exp.schedule,
        )
        .map_err(e)?;
        times.push(t0.elapsed());
        std::hint::black_box(out);
    }
    times.sort();
    let median = times[times.len() / 2];
    let total = suite_start.elapsed();
    ensure(
        median < Duration::from_millis(1) && total < Duration::from_secs(300),
        format!(
            "12-step 2-D guided edit: median {median:.2?}, p99 {:.2?}; suite total {total:.2?}",
            times[times.len() * 99 / 100]
        ),
    )
}

fn main() {
    let suite_start = Instant::now();
    let criteria: Vec<Criterion> = vec![
        ("identity-edit fixed point", Box::new(identity_fixed_point)),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("zero-strength reduction", Box::new(zero_strength_reduction)),
        ("shared-noise identity", Box::new(shared_noise_identity)),
        ("analytic-denoiser oracle", Box::new(mc_oracle)),
        ("predictor adapters", Box::new(adapters)),
        ("early-step trend", Box::new(early_step_trend)),
        ("strength trend", Box::new(strength_trend)),
        ("inversion gap", Box::new(inversion_gap)),
        ("path length", Box::new(path_length_claim)),
        (
            "determinism and round trip",
            Box::new(determinism_and_round_trip),
        ),
        (
            "desk-scale efficiency",
            Box::new(move || desk_scale_efficiency(suite_start)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (tag, detail) = match check() {
            Ok(msg) => ("PASS", msg),
            Err(msg) => {
                failed += 1;
                ("FAIL", msg)
            }
        };
        println!("[{tag}] {:>2} {name}: {detail}", i + 1);
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
