//! Plain SVG charts: loss curves from training logs and per-variant error
//! bars from ablation runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use viewshift_core::training::{parse_log_csv, LogRow};

use crate::ablate::{read_runs, RunRow};

pub const LOSS_SVG: &str = "loss.svg";
pub const ERRORS_SVG: &str = "errors.svg";

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, y_lo: f64, y_hi: f64, y_label: &str) {
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN / 2.0, H - MARGIN, MARGIN);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            y + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Loss against step, one polyline per labelled log.
pub fn loss_svg(logs: &[(String, Vec<LogRow>)]) -> String {
    let mut out = String::new();
    header(&mut out, "training loss");
    let rows = logs.iter().flat_map(|(_, r)| r.iter());
    let max_step = rows.clone().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    let hi = rows.clone().map(|r| r.loss).fold(0.0f64, f64::max).max(1e-12);
    axes(&mut out, 0.0, hi, "loss");
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">step (0 to {max_step})</text>"#,
        W / 2.0,
        H - 12.0
    );
    let sx = (W - 1.5 * MARGIN) / max_step;
    let sy = (H - 2.0 * MARGIN) / hi;
    for (i, (label, rows)) in logs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", MARGIN + r.step as f64 * sx, H - MARGIN - r.loss * sy))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, pts.join(" "));
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(out, r#"<text x="{}" y="{y}" fill="{color}" text-anchor="end">{}</text>"#, W - MARGIN, escape(label));
    }
    out.push_str("</svg>\n");
    out
}

/// Mean and population standard deviation of the present values.
fn mean_std(values: impl Iterator<Item = Option<f64>>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    Some((m, var.sqrt()))
}

/// Grouped bars of rotation and translation error per (variant, schedule)
/// with ±1 standard deviation over seeds.
pub fn errors_svg(runs: &[RunRow]) -> String {
    let mut groups: Vec<(String, Option<(f64, f64)>, Option<(f64, f64)>)> = Vec::new();
    let mut seen = Vec::new();
    for r in runs {
        let key = (r.variant, r.schedule);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let members = || runs.iter().filter(|x| (x.variant, x.schedule) == key);
        groups.push((
            format!("{} / {}", r.variant, r.schedule),
            mean_std(members().map(|x| x.rot_err)),
            mean_std(members().map(|x| x.trans_err)),
        ));
    }
    let mut out = String::new();
    header(&mut out, "camera error per run (mean ± std over seeds)");
    let hi = groups
        .iter()
        .flat_map(|(_, a, b)| [a, b])
        .flatten()
        .map(|(m, s)| m + s)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    axes(&mut out, 0.0, hi, "error");
    let slot = (W - 1.5 * MARGIN) / groups.len().max(1) as f64;
    let bar = slot * 0.35;
    let sy = (H - 2.0 * MARGIN) / hi;
    for (g, (label, rot, trans)) in groups.iter().enumerate() {
        let x = MARGIN + g as f64 * slot + slot * 0.15;
        for (k, (stat, color)) in [(rot, PALETTE[0]), (trans, PALETTE[1])].into_iter().enumerate() {
            let Some((m, s)) = stat else { continue };
            let bx = x + k as f64 * bar;
            let top = H - MARGIN - m * sy;
            let _ = writeln!(
                out,
                r#"<rect x="{bx:.2}" y="{top:.2}" width="{bar:.2}" height="{:.2}" fill="{color}"/>"#,
                m * sy
            );
            let cx = bx + bar / 2.0;
            let (y_lo, y_hi) = (H - MARGIN - (m - s).max(0.0) * sy, H - MARGIN - (m + s) * sy);
            let _ = writeln!(out, r#"<line x1="{cx:.2}" y1="{y_lo:.2}" x2="{cx:.2}" y2="{y_hi:.2}" stroke="black"/>"#);
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="9">{}</text>"#,
            x + bar,
            H - MARGIN + 14.0,
            escape(label)
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" fill="{}" text-anchor="end">rot_err (rad)</text>"#, W - MARGIN, MARGIN, PALETTE[0]);
    let _ = writeln!(out, r#"<text x="{}" y="{}" fill="{}" text-anchor="end">trans_err</text>"#, W - MARGIN, MARGIN + 14.0, PALETTE[1]);
    out.push_str("</svg>\n");
    out
}

/// Label of a log: the name of its run directory.
fn log_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn plot_files(logs: &[impl AsRef<Path>], runs: Option<&Path>, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if !logs.is_empty() {
        let mut parsed = Vec::new();
        for p in logs {
            let p = p.as_ref();
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let rows = parse_log_csv(&text).map_err(|e| anyhow::anyhow!("parsing {}: {e}", p.display()))?;
            parsed.push((log_label(p), rows));
        }
        let path = out.join(LOSS_SVG);
        fs::write(&path, loss_svg(&parsed)).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(r) = runs {
        let path = out.join(ERRORS_SVG);
        fs::write(&path, errors_svg(&read_runs(r)?)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
