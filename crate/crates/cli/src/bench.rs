//! Synthetic benchmark instances and per-method runs over them.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tweeze_core::baseline::{ddim_denoise, ddim_invert};
use tweeze_core::editor::{tweeze_edit, tweeze_edit_untraced, write_trace, EditConfig};
use tweeze_core::forward::derive_seed;
use tweeze_core::metrics::MetricReport;
use tweeze_core::{Latent, PromptCondition, RegSchedule, Registry};

use crate::config::{BenchmarkSpec, Experiment};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    /// Seeds both the source sample and the edit's noise draws.
    pub seed: u64,
    pub z0: Latent,
    pub p_src: PromptCondition,
    pub p_tar: PromptCondition,
}

/// Samples `spec.n_instances` sources from the source distribution.
/// Instance `i` depends only on `(seed, i)`.
pub fn make_benchmark(
    registry: &Registry,
    spec: &BenchmarkSpec,
    seed: u64,
) -> CliResult<Vec<Instance>> {
    let p_src = registry.prompt(&spec.src_distribution)?;
    let p_tar = registry.prompt(&spec.tar_distribution)?;
    let src = registry.get(&spec.src_distribution)?;
    (0..spec.n_instances)
        .map(|id| {
            let s = derive_seed(seed, id as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let z0 = Latent::with_layout(src.mixture.sample(&mut rng), src.layout)?;
            Ok(Instance {
                id,
                seed: s,
                z0,
                p_src: p_src.clone(),
                p_tar: p_tar.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tweeze,
    /// DDIM inversion under the source prompt, then denoising under the target.
    Ddim,
    /// The configured edit with regularization switched off.
    DirectS0,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Tweeze, Method::Ddim, Method::DirectS0];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tweeze => "tweeze",
            Method::Ddim => "ddim",
            Method::DirectS0 => "direct_s0",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: usize,
    pub seed: u64,
    pub output: Latent,
    pub metrics: MetricReport,
    pub seconds: f64,
}

/// Runs `method` on every instance in parallel; results come back in
/// instance order. With `trace_dir`, each edit's trace is written to
/// `<trace_dir>/<id>.jsonl`.
pub fn run_method(
    exp: &Experiment,
    method: Method,
    reg: RegSchedule,
    instances: &[Instance],
    trace_dir: Option<&Path>,
) -> CliResult<Vec<Outcome>> {
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut out: Vec<Outcome> = instances
        .par_iter()
        .map(|inst| run_one(exp, method, reg, inst, trace_dir))
        .collect::<CliResult<_>>()?;
    out.sort_by_key(|o| o.id);
    Ok(out)
}

fn run_one(
    exp: &Experiment,
    method: Method,
    reg: RegSchedule,
    inst: &Instance,
    trace_dir: Option<&Path>,
) -> CliResult<Outcome> {
    let mut cfg = EditConfig {
        reg,
        seed: inst.seed,
        ..exp.edit.clone()
    };
    if method == Method::DirectS0 {
        cfg.reg.strength = 0.0;
    }
    let f = exp.denoiser.as_ref();
    let start = Instant::now();
    let (output, path) = match method {
        Method::Ddim => {
            let top = ddim_invert(f, &inst.p_src, &inst.z0, &cfg.grid, &exp.schedule)?;
            let out = ddim_denoise(f, &inst.p_tar, &top, &cfg.grid, &exp.schedule)?;
            let len = distance(&inst.z0, &top) + distance(&top, &out);
            (out, len)
        }
        _ => match trace_dir {
            Some(dir) => {
                let (out, traj) =
                    tweeze_edit(f, &inst.z0, &inst.p_src, &inst.p_tar, &cfg, &exp.schedule)?;
                let path = dir.join(format!("{:04}.jsonl", inst.id));
                let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
                write_trace(std::io::BufWriter::new(file), &traj)?;
                let len = tweeze_core::metrics::path_length(&traj)?;
                (out, len)
            }
            None => {
                tweeze_edit_untraced(f, &inst.z0, &inst.p_src, &inst.p_tar, &cfg, &exp.schedule)?
            }
        },
    };
    let seconds = start.elapsed().as_secs_f64();
    let metrics = MetricReport::compute(
        &output,
        &inst.z0,
        path,
        &exp.target()?.mixture,
        exp.config.metrics.dynamic_range,
    )?;
    Ok(Outcome {
        id: inst.id,
        seed: inst.seed,
        output,
        metrics,
        seconds,
    })
}

/// For DDIM the path is the straight-line length of the detour through the
/// inverted noise.
fn distance(a: &Latent, b: &Latent) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
