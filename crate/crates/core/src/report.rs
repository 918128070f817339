//! Self-contained SVG charts and CSV/JSON summaries built from a run
//! directory. Output depends only on the files read.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::experiment::{read_json, write_json, EvalSummary, ExperimentError, HeatmapRow, RunDir};
use crate::train::read_metrics_csv;

pub const SMOOTHING_WINDOW: usize = 5;

/// Trailing moving average; the first `window - 1` points average what is
/// available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 60.0;
const PAD_R: f64 = 170.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn axes(out: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64), xlabel: &str, ylabel: &str) {
    let (pw, ph) = (W - PAD_L - PAD_R, H - PAD_T - PAD_B);
    let _ = writeln!(
        out,
        r#"<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = PAD_L + f * pw;
        let y = PAD_T + ph - f * ph;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            PAD_T + ph + 16.0,
            x0 + f * (x1 - x0)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            PAD_L - 6.0,
            y + 4.0,
            y0 + f * (y1 - y0)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        PAD_L + pw / 2.0,
        H - 10.0,
        esc(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        PAD_T + ph / 2.0,
        PAD_T + ph / 2.0,
        esc(ylabel)
    );
}

fn legend(out: &mut String, names: &[(String, &str, bool)]) {
    for (i, (name, color, dashed)) in names.iter().enumerate() {
        let y = PAD_T + 10.0 + 16.0 * i as f64;
        let x = W - PAD_R + 10.0;
        let dash = if *dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"{dash}/>"#,
            x + 18.0
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 24.0, y + 4.0, esc(name));
    }
}

/// Line chart with one polyline per series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xb = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yb = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    axes(&mut out, xb, yb, xlabel, ylabel);
    let (pw, ph) = (W - PAD_L - PAD_R, H - PAD_T - PAD_B);
    let mut names = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let px = PAD_L + (x - xb.0) / (xb.1 - xb.0) * pw;
                let py = PAD_T + ph - (y - yb.0) / (yb.1 - yb.0) * ph;
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        names.push((s.name.clone(), color, s.dashed));
    }
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: `groups` are (series name, [(bucket, value)]).
pub fn bar_chart(title: &str, xlabel: &str, ylabel: &str, groups: &[(String, Vec<(String, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let mut buckets: Vec<String> = Vec::new();
    for (_, bars) in groups {
        for (b, _) in bars {
            if !buckets.contains(b) {
                buckets.push(b.clone());
            }
        }
    }
    let ymax = groups.iter().flat_map(|g| g.1.iter().map(|b| b.1)).fold(0.0f64, f64::max).max(1e-9);
    let (pw, ph) = (W - PAD_L - PAD_R, H - PAD_T - PAD_B);
    let _ = writeln!(
        out,
        r#"<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            PAD_L - 6.0,
            PAD_T + ph - f * ph + 4.0,
            f * ymax
        );
    }
    let slot = pw / buckets.len().max(1) as f64;
    let bw = slot * 0.8 / groups.len().max(1) as f64;
    for (bi, b) in buckets.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            PAD_L + slot * (bi as f64 + 0.5),
            PAD_T + ph + 16.0,
            esc(b)
        );
    }
    let mut names = Vec::new();
    for (gi, (name, bars)) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        for (b, v) in bars {
            let bi = buckets.iter().position(|x| x == b).expect("bucket collected");
            let x = PAD_L + slot * bi as f64 + slot * 0.1 + bw * gi as f64;
            let h = v / ymax * ph;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bw:.2}" height="{h:.2}" fill="{color}"/>"#,
                PAD_T + ph - h
            );
        }
        names.push((name.clone(), color, false));
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        PAD_L + pw / 2.0,
        H - 10.0,
        esc(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        PAD_T + ph / 2.0,
        PAD_T + ph / 2.0,
        esc(ylabel)
    );
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub seen_accuracy: f64,
    pub unseen_accuracy: f64,
    pub mean_first_error_distance: Option<f64>,
    pub n_evaluated: usize,
    pub truncation_count: usize,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| ExperimentError::Io { path: dir.into(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(|source| ExperimentError::Io { path: path.into(), source })
}

/// Builds every chart and summary under `report/`; returns the files written.
pub fn write_report(run: &RunDir) -> Result<Vec<PathBuf>, ExperimentError> {
    let out_dir = run.report_dir();
    fs::create_dir_all(&out_dir).map_err(|source| ExperimentError::Io { path: out_dir.clone(), source })?;
    let mut written = Vec::new();

    let mut acc_series = Vec::new();
    let mut reward_series = Vec::new();
    let mut heatmaps: BTreeMap<String, Vec<HeatmapRow>> = BTreeMap::new();
    for dir in sorted_entries(&run.root.join("runs"))? {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let curve_path = dir.join("acc_curve.json");
        if curve_path.exists() {
            let curve: Vec<(usize, f64)> = read_json(&curve_path)?;
            let ys: Vec<f64> = curve.iter().map(|c| c.1).collect();
            let smooth = moving_average(&ys, SMOOTHING_WINDOW);
            acc_series.push(Series {
                name: name.clone(),
                points: curve.iter().map(|c| (c.0 as f64, c.1)).collect(),
                dashed: true,
            });
            acc_series.push(Series {
                name: format!("{name} (ma{SMOOTHING_WINDOW})"),
                points: curve.iter().zip(smooth).map(|(c, s)| (c.0 as f64, s)).collect(),
                dashed: false,
            });
        }
        let metrics_path = dir.join("metrics.csv");
        if metrics_path.exists() {
            let rows = read_metrics_csv(&metrics_path)?;
            let neg: Vec<f64> = rows.iter().map(|r| r.mean_reward_neg).collect();
            let smooth = moving_average(&neg, SMOOTHING_WINDOW);
            if neg.iter().any(|&v| v != 0.0) {
                reward_series.push(Series {
                    name: format!("{name} neg"),
                    points: rows.iter().zip(smooth).map(|(r, s)| (r.step as f64, s)).collect(),
                    dashed: false,
                });
            }
        }
        let heat_path = dir.join("heatmap.json");
        if heat_path.exists() {
            let rows: Vec<HeatmapRow> = read_json(&heat_path)?;
            if !rows.is_empty() {
                heatmaps.insert(name.clone(), rows);
            }
        }
    }
    let p = out_dir.join("train_acc.svg");
    write_text(&p, &line_chart("Training-set accuracy", "optimizer step", "accuracy", &acc_series))?;
    written.push(p);
    let p = out_dir.join("reward_neg.svg");
    write_text(&p, &line_chart("Mean negative-sample token reward", "optimizer step", "reward", &reward_series))?;
    written.push(p);
    let p = out_dir.join("reward_heatmap.json");
    write_json(&p, &heatmaps)?;
    written.push(p);

    let mut rows = Vec::new();
    let mut hist_groups = Vec::new();
    for path in sorted_entries(&run.eval_dir())? {
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let s: EvalSummary = read_json(&path)?;
        let seen = crate::eval::summarize(
            s.report.decodes.iter().filter(|d| d.family == crate::synth::Family::ArithSeen).cloned().collect(),
        );
        hist_groups.push((s.name.clone(), seen.first_error_histogram.ratios()));
        rows.push(SummaryRow {
            name: s.name,
            seen_accuracy: s.seen_accuracy,
            unseen_accuracy: s.unseen_accuracy,
            mean_first_error_distance: s.mean_first_error_distance,
            n_evaluated: s.report.n_evaluated,
            truncation_count: s.report.truncation_count,
        });
    }
    let p = out_dir.join("first_error.svg");
    write_text(
        &p,
        &bar_chart("First error: steps before the answer", "steps from answer", "fraction of incorrect", &hist_groups),
    )?;
    written.push(p);
    let p = out_dir.join("summary.csv");
    let mut w =
        csv::Writer::from_path(&p).map_err(|e| ExperimentError::Format { path: p.clone(), msg: e.to_string() })?;
    for r in &rows {
        w.serialize(r).map_err(|e| ExperimentError::Format { path: p.clone(), msg: e.to_string() })?;
    }
    w.flush().map_err(|source| ExperimentError::Io { path: p.clone(), source })?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_window() {
        let m = moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 5);
        assert_eq!(m, vec![1.0, 1.5, 2.0, 2.5, 3.0, 4.0]);
        assert_eq!(moving_average(&[], 5), Vec::<f64>::new());
    }

    #[test]
    fn svg_is_well_formed_and_deterministic() {
        let s = vec![Series { name: "a<b".into(), points: vec![(0.0, 0.1), (10.0, 0.5)], dashed: false }];
        let a = line_chart("t", "x", "y", &s);
        assert_eq!(a, line_chart("t", "x", "y", &s));
        assert!(a.starts_with("<?xml") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("version=\"1.1\"") && a.contains("a&lt;b"));
        let b = bar_chart("h", "x", "y", &[("m".into(), vec![("1".into(), 0.5), ("2".into(), 0.25)])]);
        assert_eq!(b.matches("<rect").count(), 4);
    }

    #[test]
    fn empty_charts_render() {
        assert!(line_chart("t", "x", "y", &[]).contains("</svg>"));
        assert!(bar_chart("t", "x", "y", &[]).contains("</svg>"));
    }
}
