//! CSV tables and static SVG charts for evaluation results.
//!
//! Every CSV uses the columns `system,split,metric,score,count` with an extra
//! `relpos` column for per-position tables. Scores are percentages.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy_model::EvalReport;

pub const RESULTS_HEADER: &str = "system,split,metric,score,count";
pub const RELPOS_HEADER: &str = "system,split,metric,score,count,relpos";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemEval {
    pub system: String,
    pub eval: EvalReport,
}

/// One point of a hyper-parameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub system: SystemEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    /// Used for file names and the chart axis, e.g. `alpha`.
    pub parameter: String,
    pub points: Vec<SweepPoint>,
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// `(split, score, count)` rows of one evaluation, skipping empty splits.
pub fn split_rows(eval: &EvalReport) -> Vec<(&'static str, f64, usize)> {
    let mut rows = Vec::new();
    if eval.is_partitioned() {
        if let Some(s) = eval.biased {
            rows.push(("biased", s, eval.biased_count));
        }
        if let Some(s) = eval.non_biased {
            rows.push(("non-biased", s, eval.non_biased_count));
        }
    } else if let Some(s) = eval.overall {
        rows.push(("all", s, eval.predictions.len()));
    }
    rows
}

pub fn results_csv(systems: &[SystemEval]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for s in systems {
        for (split, score, count) in split_rows(&s.eval) {
            let _ = writeln!(out, "{},{split},{},{},{count}", csv_field(&s.system), s.eval.metric.as_str(), pct(score));
        }
    }
    out
}

fn relpos_split(eval: &EvalReport, relpos: i64) -> &'static str {
    let flags: BTreeSet<Option<bool>> = eval
        .predictions
        .iter()
        .filter(|p| p.relpos == Some(relpos))
        .map(|p| p.biased)
        .collect();
    match flags.iter().next() {
        Some(Some(true)) if flags.len() == 1 => "biased",
        Some(Some(false)) if flags.len() == 1 => "non-biased",
        _ => "all",
    }
}

pub fn relpos_csv(systems: &[SystemEval]) -> String {
    let mut out = format!("{RELPOS_HEADER}\n");
    for s in systems {
        for row in &s.eval.by_relpos.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(&s.system),
                relpos_split(&s.eval, row.relpos),
                s.eval.metric.as_str(),
                pct(row.mean),
                row.count,
                row.relpos
            );
        }
    }
    out
}

/// Split rows followed by per-position rows under the `relpos` header; split
/// rows leave `relpos` empty.
pub fn combined_csv(systems: &[SystemEval]) -> String {
    let mut out = format!("{RELPOS_HEADER}\n");
    for line in results_csv(systems).lines().skip(1) {
        out.push_str(line);
        out.push_str(",\n");
    }
    out.extend(relpos_csv(systems).lines().skip(1).map(|l| format!("{l}\n")));
    out
}

pub fn sweep_csv(sweep: &Sweep) -> String {
    let systems: Vec<SystemEval> = sweep.points.iter().map(|p| p.system.clone()).collect();
    results_csv(&systems)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// SVG

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn plot_h() -> f64 {
    HEIGHT - TOP - BOTTOM
}

fn plot_w() -> f64 {
    WIDTH - LEFT - RIGHT
}

/// Maps a percentage in [0, 100] to a y pixel.
fn y_of(v: f64) -> f64 {
    TOP + plot_h() * (1.0 - v.clamp(0.0, 100.0) / 100.0)
}

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + plot_w() / 2.0,
        esc(title)
    );
    for tick in (0..=100).step_by(20) {
        let y = y_of(tick as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"##,
            LEFT + plot_w(),
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/><line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        TOP + plot_h(),
        TOP + plot_h(),
        LEFT + plot_w(),
        TOP + plot_h()
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w() / 2.0,
        HEIGHT - 10.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h() / 2.0,
        esc(y_label)
    );
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = WIDTH - RIGHT + 14.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            esc(name)
        );
    }
}

/// Grouped bars: one group per category, one bar per series. Values are
/// fractions in [0, 1]; `None` leaves a gap.
pub fn bar_chart_svg(title: &str, categories: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let mut s = frame(title, "split", "score (%)");
    let groups = categories.len().max(1) as f64;
    let group_w = plot_w() / groups;
    let bar_w = (group_w * 0.8) / series.len().max(1) as f64;
    for (g, cat) in categories.iter().enumerate() {
        let gx = LEFT + group_w * g as f64;
        for (k, (_, values)) in series.iter().enumerate() {
            if let Some(Some(v)) = values.get(g) {
                let x = gx + group_w * 0.1 + bar_w * k as f64;
                let y = y_of(100.0 * v);
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{bar_w:.1}" height="{:.1}" fill="{}"/>"#,
                    TOP + plot_h() - y,
                    PALETTE[k % PALETTE.len()]
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + group_w / 2.0,
            TOP + plot_h() + 16.0,
            esc(cat)
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// One polyline per series over numeric `xs` (drawn in ascending order).
/// Values are fractions in [0, 1]; `None` breaks the line.
pub fn line_chart_svg(title: &str, x_label: &str, xs: &[f64], series: &[(String, Vec<Option<f64>>)]) -> String {
    let mut s = frame(title, x_label, "score (%)");
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let (lo, hi) = match (order.first(), order.last()) {
        (Some(&a), Some(&b)) => (xs[a], xs[b]),
        _ => (0.0, 1.0),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x_of = |x: f64| {
        if hi > lo {
            LEFT + 10.0 + (plot_w() - 20.0) * (x - lo) / span
        } else {
            LEFT + plot_w() / 2.0
        }
    };
    for &i in &order {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x_of(xs[i]),
            TOP + plot_h() + 16.0,
            format_tick(xs[i])
        );
    }
    for (k, (_, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, s: &mut String| {
            if seg.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    seg.join(" ")
                );
            }
            seg.clear();
        };
        for &i in &order {
            match values.get(i).copied().flatten() {
                Some(v) => {
                    let (x, y) = (x_of(xs[i]), y_of(100.0 * v));
                    segment.push(format!("{x:.1},{y:.1}"));
                    let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
                }
                None => flush(&mut segment, &mut s),
            }
        }
        flush(&mut segment, &mut s);
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

fn format_tick(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        let t = format!("{x:.3}");
        t.trim_end_matches('0').to_string()
    }
}

/// Bar chart of per-split scores, one series per system.
pub fn splits_chart(systems: &[SystemEval]) -> String {
    let mut categories: Vec<String> = Vec::new();
    for s in systems {
        for (split, _, _) in split_rows(&s.eval) {
            if !categories.iter().any(|c| c == split) {
                categories.push(split.to_string());
            }
        }
    }
    let series: Vec<(String, Vec<Option<f64>>)> = systems
        .iter()
        .map(|s| {
            let rows = split_rows(&s.eval);
            let vals = categories
                .iter()
                .map(|c| rows.iter().find(|r| r.0 == c).map(|r| r.1))
                .collect();
            (s.system.clone(), vals)
        })
        .collect();
    bar_chart_svg("Score by split", &categories, &series)
}

/// Line chart of per-relative-position scores, one series per system.
pub fn relpos_chart(systems: &[SystemEval]) -> String {
    let positions: BTreeSet<i64> = systems
        .iter()
        .flat_map(|s| s.eval.by_relpos.rows.iter().map(|r| r.relpos))
        .collect();
    let xs: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    let series = systems
        .iter()
        .map(|s| {
            let vals = positions
                .iter()
                .map(|&p| s.eval.by_relpos.row(p).map(|r| r.mean))
                .collect();
            (s.system.clone(), vals)
        })
        .collect::<Vec<_>>();
    line_chart_svg("Score by relative position", "relative position", &xs, &series)
}

/// Line chart of a sweep, one series per split.
pub fn sweep_chart(sweep: &Sweep) -> String {
    let xs: Vec<f64> = sweep.points.iter().map(|p| p.value).collect();
    let mut splits: Vec<&'static str> = Vec::new();
    for p in &sweep.points {
        for (split, _, _) in split_rows(&p.system.eval) {
            if !splits.contains(&split) {
                splits.push(split);
            }
        }
    }
    let series = splits
        .iter()
        .map(|split| {
            let vals = sweep
                .points
                .iter()
                .map(|p| split_rows(&p.system.eval).iter().find(|r| r.0 == *split).map(|r| r.1))
                .collect();
            (split.to_string(), vals)
        })
        .collect::<Vec<_>>();
    line_chart_svg(&format!("Score by {}", sweep.parameter), &sweep.parameter, &xs, &series)
}

fn write(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `results.csv`, `relpos.csv`, `splits.svg`, `relpos.svg` and, per
/// sweep, `<parameter>.csv` and `<parameter>.svg` into `dir`.
pub fn emit_report(systems: &[SystemEval], sweeps: &[Sweep], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if systems.is_empty() && sweeps.is_empty() {
        return Err(Error::invalid("emit_report: nothing to report"));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if !systems.is_empty() {
        write(dir, "results.csv", &results_csv(systems), &mut written)?;
        write(dir, "relpos.csv", &relpos_csv(systems), &mut written)?;
        write(dir, "splits.svg", &splits_chart(systems), &mut written)?;
        write(dir, "relpos.svg", &relpos_chart(systems), &mut written)?;
    }
    for sw in sweeps {
        write(dir, &format!("{}.csv", sw.parameter), &sweep_csv(sw), &mut written)?;
        write(dir, &format!("{}.svg", sw.parameter), &sweep_chart(sw), &mut written)?;
    }
    Ok(written)
}
