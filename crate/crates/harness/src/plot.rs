//! Loss curves and accuracy-vs-flops scatter as SVG plus plain-text
//! fallbacks. Output is a pure function of the input rows, so re-emitting
//! from the same CSV files is byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::train::metrics_from_csv;

#[derive(Clone, Debug, PartialEq)]
pub struct LossSeries {
    pub label: String,
    pub points: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPoint {
    pub label: String,
    pub flops: f64,
    pub accuracy: f64,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const TEXT_COLS: usize = 64;
const TEXT_ROWS: usize = 14;

fn bounds(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = xs.clone().fold(f64::INFINITY, f64::min);
    let hi = xs.fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_frame(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64), body: &str) -> String {
    let mut s = String::new();
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN / 2.0);
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    let fmt = |v: f64| format!("{v:.4}");
    writeln!(s, r#"<text x="{x0}" y="{}" font-size="11">{}</text>"#, y0 + 16.0, fmt(x.0)).unwrap();
    writeln!(s, r#"<text x="{x1}" y="{}" font-size="11" text-anchor="end">{}</text>"#, y0 + 16.0, fmt(x.1)).unwrap();
    writeln!(s, r#"<text x="{}" y="{y0}" font-size="11" text-anchor="end">{}</text>"#, x0 - 4.0, fmt(y.0)).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#, x0 - 4.0, y1 + 10.0, fmt(y.1)).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, escape(xlabel)).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    )
    .unwrap();
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

fn to_px(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

pub fn loss_curve_svg(series: &LossSeries) -> String {
    let x = bounds(series.points.iter().map(|p| p.0 as f64));
    let y = bounds(series.points.iter().map(|p| p.1));
    let pts: Vec<String> = series
        .points
        .iter()
        .map(|&(st, l)| {
            format!(
                "{:.2},{:.2}",
                to_px(st as f64, x, MARGIN, W - MARGIN / 2.0),
                to_px(l, y, H - MARGIN, MARGIN / 2.0)
            )
        })
        .collect();
    let body = format!(r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, pts.join(" ")) + "\n";
    svg_frame(&format!("training loss: {}", series.label), "step", "loss", x, y, &body)
}

pub fn accuracy_vs_flops_svg(points: &[ScatterPoint]) -> String {
    let x = bounds(points.iter().map(|p| p.flops));
    let y = bounds(points.iter().map(|p| p.accuracy));
    let mut body = String::new();
    for p in points {
        let (px, py) = (
            to_px(p.flops, x, MARGIN, W - MARGIN / 2.0),
            to_px(p.accuracy, y, H - MARGIN, MARGIN / 2.0),
        );
        writeln!(body, r#"<circle cx="{px:.2}" cy="{py:.2}" r="5" fill="darkorange"/>"#).unwrap();
        writeln!(body, r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#, px + 7.0, py - 7.0, escape(&p.label)).unwrap();
    }
    svg_frame("exact match vs flops per example", "flops", "exact match", x, y, &body)
}

/// Character grid with one mark per column bucket, for terminals and logs.
fn text_chart(values: &[(f64, f64)], mark: char) -> Vec<String> {
    let x = bounds(values.iter().map(|v| v.0));
    let y = bounds(values.iter().map(|v| v.1));
    let mut grid = vec![vec![' '; TEXT_COLS]; TEXT_ROWS];
    for &(vx, vy) in values {
        let c = (((vx - x.0) / (x.1 - x.0)) * (TEXT_COLS - 1) as f64).round() as usize;
        let r = (((y.1 - vy) / (y.1 - y.0)) * (TEXT_ROWS - 1) as f64).round() as usize;
        grid[r.min(TEXT_ROWS - 1)][c.min(TEXT_COLS - 1)] = mark;
    }
    let mut lines = Vec::new();
    for (i, row) in grid.into_iter().enumerate() {
        let label = if i == 0 {
            format!("{:>10.4}", y.1)
        } else if i == TEXT_ROWS - 1 {
            format!("{:>10.4}", y.0)
        } else {
            " ".repeat(10)
        };
        lines.push(format!("{label} |{}", row.into_iter().collect::<String>().trim_end()));
    }
    lines.push(format!("{} +{}", " ".repeat(10), "-".repeat(TEXT_COLS)));
    lines.push(format!("{} {:<w$}{:>w2$}", " ".repeat(10), format!("{:.4}", x.0), format!("{:.4}", x.1), w = TEXT_COLS / 2, w2 = TEXT_COLS / 2));
    lines
}

pub fn loss_curves_text(series: &[LossSeries]) -> String {
    let mut s = String::new();
    for ser in series {
        writeln!(s, "== loss: {} ({} steps) ==", ser.label, ser.points.len()).unwrap();
        let vals: Vec<(f64, f64)> = ser.points.iter().map(|&(a, b)| (a as f64, b)).collect();
        for l in text_chart(&vals, '*') {
            writeln!(s, "{l}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn accuracy_vs_flops_text(points: &[ScatterPoint]) -> String {
    let mut s = String::from("== exact match vs flops ==\n");
    writeln!(s, "{:<24} {:>16} {:>12}", "label", "flops", "exact_match").unwrap();
    for p in points {
        writeln!(s, "{:<24} {:>16.0} {:>12.4}", p.label, p.flops, p.accuracy).unwrap();
    }
    s.push('\n');
    let vals: Vec<(f64, f64)> = points.iter().map(|p| (p.flops, p.accuracy)).collect();
    for l in text_chart(&vals, 'o') {
        writeln!(s, "{l}").unwrap();
    }
    s
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    written.push(path);
    Ok(())
}

/// Writes one `loss_<label>.svg` per series, `loss_curves.txt`, and, when
/// points are given, `accuracy_vs_flops.{svg,txt}`. Returns the files written.
pub fn emit_plots(out: &Path, series: &[LossSeries], points: &[ScatterPoint]) -> Result<Vec<PathBuf>> {
    if series.is_empty() && points.is_empty() {
        return Err(HarnessError::Config("nothing to plot: no run records".into()));
    }
    if let Some(s) = series.iter().find(|s| s.points.is_empty()) {
        return Err(HarnessError::Config(format!("run '{}' has no metric rows", s.label)));
    }
    std::fs::create_dir_all(out).map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
    let mut written = Vec::new();
    for s in series {
        write(out.join(format!("loss_{}.svg", file_safe(&s.label))), &loss_curve_svg(s), &mut written)?;
    }
    if !series.is_empty() {
        write(out.join("loss_curves.txt"), &loss_curves_text(series), &mut written)?;
    }
    if !points.is_empty() {
        write(out.join("accuracy_vs_flops.svg"), &accuracy_vs_flops_svg(points), &mut written)?;
        write(out.join("accuracy_vs_flops.txt"), &accuracy_vs_flops_text(points), &mut written)?;
    }
    Ok(written)
}

/// Reads scatter points from a `comparison.csv` written by the comparison runner.
pub fn scatter_from_comparison_csv(text: &str) -> Result<Vec<ScatterPoint>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| HarnessError::Config(format!("comparison.csv lacks column {name}")))
    };
    let (il, ifl, iem) = (col("label")?, col("flops")?, col("exact_match_mean")?);
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || HarnessError::Config(format!("malformed comparison row '{l}'"));
            let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
            Ok(ScatterPoint {
                label: f.get(il).ok_or_else(bad)?.to_string(),
                flops: num(ifl)?,
                accuracy: num(iem)?,
            })
        })
        .collect()
}

/// Collects every `metrics.csv` under `dir` (sorted by path) plus an optional
/// top-level `comparison.csv`, and renders them into `out`.
pub fn plot_directory(dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let mut series = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| HarnessError::Io(e.to_string()))?;
        if entry.file_name() != "metrics.csv" {
            continue;
        }
        let text = std::fs::read_to_string(entry.path()).map_err(|e| HarnessError::Io(format!("{}: {e}", entry.path().display())))?;
        let rows = metrics_from_csv(&text)?;
        let rel = entry.path().parent().and_then(|p| p.strip_prefix(dir).ok()).unwrap_or(Path::new(""));
        let label = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("_");
        series.push(LossSeries {
            label: if label.is_empty() { "run".into() } else { label },
            points: rows.iter().map(|r| (r.step, r.loss)).collect(),
        });
    }
    let cmp = dir.join("comparison.csv");
    let points = if cmp.exists() {
        let text = std::fs::read_to_string(&cmp).map_err(|e| HarnessError::Io(format!("{}: {e}", cmp.display())))?;
        scatter_from_comparison_csv(&text)?
    } else {
        Vec::new()
    };
    emit_plots(out, &series, &points)
}
