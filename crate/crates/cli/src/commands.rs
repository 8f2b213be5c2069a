//! The five subcommands. Each writes its files under `<out>/<subcommand>/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tweeze_core::editor::{read_trace, tweeze_edit, write_trace, EditConfig};
use tweeze_core::metrics::{path_length, MetricReport};
use tweeze_core::verify::{
    fd_convergence_ratio, gradient_suite, mc_oracle_suite, GradientSuiteReport,
    OracleCoverageReport,
};
use tweeze_core::{Layout, RegSchedule, Trajectory};

use crate::bench::{make_benchmark, run_method, Instance, Method};
use crate::config::Experiment;
use crate::error::{CliError, CliResult};
use crate::plot::{grid_pgm, trajectory_svg};
use crate::results::{write_file, write_json, RunResult};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub trace: bool,
    pub quiet: bool,
}

impl RunOptions {
    pub fn for_experiment(exp: &Experiment) -> Self {
        Self {
            out: exp.config.output_dir.clone(),
            trace: true,
            quiet: true,
        }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn first_instance(exp: &Experiment) -> CliResult<Instance> {
    let spec = crate::config::BenchmarkSpec {
        n_instances: 1,
        ..exp.config.benchmark.clone()
    };
    make_benchmark(&exp.registry, &spec, exp.config.seed)?
        .pop()
        .ok_or_else(|| CliError::Config("benchmark produced no instance".into()))
}

/// The configured edit on benchmark instance 0.
pub fn edit_first_instance(exp: &Experiment) -> CliResult<Trajectory> {
    let inst = first_instance(exp)?;
    let cfg = EditConfig {
        seed: inst.seed,
        ..exp.edit.clone()
    };
    let (_, traj) = tweeze_edit(
        exp.denoiser.as_ref(),
        &inst.z0,
        &inst.p_src,
        &inst.p_tar,
        &cfg,
        &exp.schedule,
    )?;
    Ok(traj)
}

pub fn trace_bytes(traj: &Trajectory) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_trace(&mut buf, traj)?;
    Ok(buf)
}

pub fn run_edit(exp: &Experiment, opts: &RunOptions) -> CliResult<MetricReport> {
    let dir = opts.out.join("edit");
    let start = Instant::now();
    let traj = edit_first_instance(exp)?;
    let seconds = start.elapsed().as_secs_f64();
    let report = MetricReport::compute(
        &traj.output,
        &traj.source,
        path_length(&traj)?,
        &exp.target()?.mixture,
        exp.config.metrics.dynamic_range,
    )?;
    if opts.trace {
        let bytes = trace_bytes(&traj)?;
        read_trace(bytes.as_slice())?;
        write_file(&dir.join("trace.jsonl"), &bytes)?;
    }
    write_json(&dir.join("metrics.json"), &report)?;
    write_json(
        &dir.join("metrics.timing.json"),
        &serde_json::json!({ "seconds_per_edit": [seconds] }),
    )?;
    opts.say(format!(
        "edit: mse {:.6e}  target_nll {:.4}  path_length {:.4}",
        report.mse, report.target_nll, report.path_length
    ));
    Ok(report)
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub active_steps: usize,
    pub strength: f64,
    pub result: RunResult,
}

impl Cell {
    pub fn label(active_steps: usize, strength: f64) -> String {
        format!("m{active_steps}_s{strength}")
    }
}

pub fn sweep_cells(exp: &Experiment) -> Vec<(usize, f64)> {
    let sw = &exp.config.sweep;
    let ms = if sw.active_steps.is_empty() {
        vec![exp.config.reg.active_steps]
    } else {
        sw.active_steps.clone()
    };
    let ss = if sw.strength.is_empty() {
        vec![exp.config.reg.strength]
    } else {
        sw.strength.clone()
    };
    ms.iter()
        .flat_map(|&m| ss.iter().map(move |&s| (m, s)))
        .collect()
}

pub fn run_sweep(exp: &Experiment, opts: &RunOptions) -> CliResult<Vec<Cell>> {
    let dir = opts.out.join("sweep");
    let instances = make_benchmark(&exp.registry, &exp.config.benchmark, exp.config.seed)?;
    let cells: Vec<Cell> = sweep_cells(exp)
        .into_par_iter()
        .map(|(m, s)| {
            let label = Cell::label(m, s);
            let reg = RegSchedule {
                active_steps: m,
                strength: s,
                ..exp.config.reg
            };
            let traces = opts.trace.then(|| dir.join("traces").join(&label));
            let start = Instant::now();
            let outcomes = run_method(exp, Method::Tweeze, reg, &instances, traces.as_deref())?;
            let total = start.elapsed().as_secs_f64();
            let mut config = exp.config.clone();
            config.reg = reg;
            let result = RunResult::new(label.clone(), Method::Tweeze, config, &outcomes);
            result.save(&dir, &label, &outcomes, total)?;
            Ok(Cell {
                active_steps: m,
                strength: s,
                result,
            })
        })
        .collect::<CliResult<_>>()?;

    let mut table = String::from("active_steps\tstrength\tn\tmean_mse\tstd_mse\tmean_target_nll\tstd_target_nll\tmean_path_length\n");
    for c in &cells {
        let a = &c.result.aggregate;
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            c.active_steps,
            c.strength,
            a.n,
            a.mse.mean,
            a.mse.std,
            a.target_nll.mean,
            a.target_nll.std,
            a.path_length.mean
        );
    }
    write_file(&dir.join("summary.tsv"), table.as_bytes())?;
    opts.say(table.trim_end());
    Ok(cells)
}

pub fn run_bench(exp: &Experiment, opts: &RunOptions) -> CliResult<Vec<RunResult>> {
    let dir = opts.out.join("bench");
    let instances = make_benchmark(&exp.registry, &exp.config.benchmark, exp.config.seed)?;
    let results: Vec<RunResult> = Method::ALL
        .into_par_iter()
        .map(|method| {
            let traces = (opts.trace && method != Method::Ddim)
                .then(|| dir.join("traces").join(method.name()));
            let start = Instant::now();
            let outcomes = run_method(exp, method, exp.config.reg, &instances, traces.as_deref())?;
            let total = start.elapsed().as_secs_f64();
            let result =
                RunResult::new(method.name().into(), method, exp.config.clone(), &outcomes);
            result.save(&dir, method.name(), &outcomes, total)?;
            Ok(result)
        })
        .collect::<CliResult<_>>()?;

    let mut summary =
        String::from("method\tseed\tn\tmean_mse\tstd_mse\tmean_target_nll\tmean_path_length\n");
    let mut rows = String::from("method\tid\tseed\tmse\ttarget_nll\tpath_length\n");
    for r in &results {
        let a = &r.aggregate;
        let _ = writeln!(
            summary,
            "{}\t{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            r.label,
            exp.config.seed,
            a.n,
            a.mse.mean,
            a.mse.std,
            a.target_nll.mean,
            a.path_length.mean
        );
        for i in &r.instances {
            let _ = writeln!(
                rows,
                "{}\t{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}",
                r.label, i.id, i.seed, i.metrics.mse, i.metrics.target_nll, i.metrics.path_length
            );
        }
    }
    write_file(&dir.join("summary.tsv"), summary.as_bytes())?;
    write_file(&dir.join("instances.tsv"), rows.as_bytes())?;
    opts.say(summary.trim_end());
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub gradient: GradientSuiteReport,
    pub monte_carlo: OracleCoverageReport,
    pub fd_convergence_ratio: f64,
    pub passed: bool,
}

/// Runs the gradient and Monte-Carlo oracle suites. A failed suite is an
/// error after the report has been written.
pub fn run_verify(exp: &Experiment, opts: &RunOptions) -> CliResult<VerifyReport> {
    let v = &exp.config.verify;
    let seed = exp.config.seed;
    let gradient = gradient_suite(v.gradient_states, seed, v.gradient_tolerance)?;
    let monte_carlo = mc_oracle_suite(v.mc_triples, v.mc_samples, v.mc_required, seed)?;
    let ratio = fd_convergence_ratio(&[0.7, -1.2, 0.4], 1e-2)?;
    let passed = gradient.passed && monte_carlo.passed && (ratio - 4.0).abs() < 0.1;
    let report = VerifyReport {
        gradient,
        monte_carlo,
        fd_convergence_ratio: ratio,
        passed,
    };
    write_json(&opts.out.join("verify").join("report.json"), &report)?;
    opts.say(format!(
        "gradient: {}/{} states, max relative error {:.3e}\nmonte carlo: {}/{} covered (need {})\nfd convergence ratio {:.4}",
        report.gradient.n_passed,
        report.gradient.n_states,
        report.gradient.max_rel_error,
        report.monte_carlo.n_covered,
        report.monte_carlo.n_triples,
        report.monte_carlo.required,
        ratio
    ));
    if !passed {
        return Err(CliError::Verification(
            "one or more oracle suites failed".into(),
        ));
    }
    Ok(report)
}

/// Renders a trace (the configured one, or a fresh edit of instance 0).
/// Returns the written files.
pub fn run_plot(exp: &Experiment, base_dir: &Path, opts: &RunOptions) -> CliResult<Vec<PathBuf>> {
    let traj = match &exp.config.plot.trace {
        Some(p) => {
            let path = base_dir.join(p);
            let file = std::fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
            read_trace(std::io::BufReader::new(file))?
        }
        None => edit_first_instance(exp)?,
    };
    let dir = opts.out.join("plot");
    let mut written = Vec::new();
    match traj.source.layout() {
        Layout::Grid(_) => {
            let both = traj.source.values().iter().chain(traj.output.values());
            let (lo, hi) = both.fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for (name, z) in [("source.pgm", &traj.source), ("output.pgm", &traj.output)] {
                let path = dir.join(name);
                write_file(&path, &grid_pgm(z, lo, hi)?)?;
                written.push(path);
            }
        }
        Layout::Vector => {
            let path = dir.join("trajectory.svg");
            write_file(&path, trajectory_svg(&traj)?.as_bytes())?;
            written.push(path);
        }
    }
    for p in &written {
        opts.say(format!("wrote {}", p.display()));
    }
    Ok(written)
}
