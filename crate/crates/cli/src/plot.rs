//! SVG trajectory figures for 2-D latents and 16-bit PGM images for grids.

use std::fmt::Write as _;

use tweeze_core::{Latent, Layout, Trajectory};

use crate::error::{CliError, CliResult};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;

/// Renders the source point, the output point, the `z_mix` polyline and the
/// per-step `z_src` / `z_tar` markers. A path that never leaves the source
/// is drawn as a single point marker.
pub fn trajectory_svg(traj: &Trajectory) -> CliResult<String> {
    if traj.source.layout() != Layout::Vector || traj.source.dim() != 2 {
        return Err(CliError::Config(format!(
            "trajectory plots need 2-D vector latents, got {} values",
            traj.source.dim()
        )));
    }
    let pt = |v: &[f64]| (v[0], v[1]);
    let mut path = vec![pt(traj.source.values())];
    path.extend(traj.steps.iter().map(|s| pt(&s.z_mix_after)));
    let src: Vec<_> = traj.steps.iter().map(|s| pt(&s.z_src)).collect();
    let tar: Vec<_> = traj.steps.iter().map(|s| pt(&s.z_tar)).collect();

    let all = path.iter().chain(&src).chain(&tar);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    // y grows upwards in latent space, downwards in SVG
    let map = |(x, y): (f64, f64)| (SIZE / 2.0 + (x - cx) * scale, SIZE / 2.0 - (y - cy) * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (class, pts, color) in [("z_src", &src, "#1f77b4"), ("z_tar", &tar, "#d62728")] {
        for &p in pts.iter() {
            let (x, y) = map(p);
            let _ = writeln!(
                s,
                r#"<circle class="{class}" cx="{x:.4}" cy="{y:.4}" r="2.5" fill="{color}" fill-opacity="0.6"/>"#
            );
        }
    }
    let first = path[0];
    if path.iter().all(|&p| p == first) {
        let (x, y) = map(first);
        let _ = writeln!(
            s,
            r##"<circle class="z_mix_point" cx="{x:.4}" cy="{y:.4}" r="4" fill="#2ca02c"/>"##
        );
    } else {
        let pts: Vec<String> = path
            .iter()
            .map(|&p| {
                let (x, y) = map(p);
                format!("{x:.4},{y:.4}")
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline class="z_mix" points="{}" fill="none" stroke="#2ca02c" stroke-width="1.5"/>"##,
            pts.join(" ")
        );
    }
    let (sx, sy) = map(first);
    let _ = writeln!(
        s,
        r##"<circle class="source" cx="{sx:.4}" cy="{sy:.4}" r="6" fill="none" stroke="#000000" stroke-width="1.5"/>"##
    );
    let (ox, oy) = map(*path.last().unwrap());
    let _ = writeln!(
        s,
        r##"<rect class="output" x="{:.4}" y="{:.4}" width="10" height="10" fill="none" stroke="#ff7f0e" stroke-width="1.5"/>"##,
        ox - 5.0,
        oy - 5.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Binary 16-bit PGM, rows top to bottom, samples big-endian. `lo..hi` maps
/// linearly onto `0..65535`; a degenerate range maps everything to mid-grey.
pub fn grid_pgm(z: &Latent, lo: f64, hi: f64) -> CliResult<Vec<u8>> {
    let side = match z.layout() {
        Layout::Grid(g) => g,
        Layout::Vector => {
            return Err(CliError::Config(
                "PGM output needs a grid-layout latent".into(),
            ))
        }
    };
    let mut out = format!("P5\n{side} {side}\n65535\n").into_bytes();
    for &v in z.values() {
        let level = if hi > lo {
            ((v - lo) / (hi - lo) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            32768
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok(out)
}
