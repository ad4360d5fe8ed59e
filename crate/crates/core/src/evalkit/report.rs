//! CSV tables and standalone SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CorrelationMatrix, EvalError, MetricSeries, Result};

/// One cumulative accuracy profile.
#[derive(Debug, Clone, PartialEq)]
pub struct CapCurve {
    pub experiment: String,
    pub variable: String,
    /// `rmse` or `r`.
    pub metric: String,
    pub thresholds: Vec<f64>,
    pub percents: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRow {
    pub region: String,
    pub variable: String,
    pub rmse: f64,
    pub r: Option<f64>,
}

/// Everything [`emit_report`] renders.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub series: Vec<MetricSeries>,
    pub caps: Vec<CapCurve>,
    pub regions: Vec<RegionRow>,
    pub correlation: Option<CorrelationMatrix>,
    /// Free-form `key,value` lines for summary.csv.
    pub summary: Vec<(String, String)>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write(dir: &Path, name: &str, body: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    out.push(path);
    Ok(())
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Writes metrics.csv, cap.csv, regions.csv, summary.csv and one SVG per
/// chart into `out_dir`. Returns the written paths in order.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();

    let mut csv = String::from("experiment,variable,time_index,rmse,r\n");
    for s in &report.series {
        for r in &s.records {
            let _ = writeln!(csv, "{},{},{},{},{}", s.experiment, s.variable, r.time_index, r.rmse, opt(r.r));
        }
    }
    write(out_dir, "metrics.csv", &csv, &mut written)?;

    let mut csv = String::from("experiment,variable,metric,threshold,percent\n");
    for c in &report.caps {
        for (t, p) in c.thresholds.iter().zip(&c.percents) {
            let _ = writeln!(csv, "{},{},{},{},{}", c.experiment, c.variable, c.metric, t, p);
        }
    }
    write(out_dir, "cap.csv", &csv, &mut written)?;

    let mut csv = String::from("region,variable,rmse,r\n");
    for r in &report.regions {
        let _ = writeln!(csv, "{},{},{},{}", r.region, r.variable, r.rmse, opt(r.r));
    }
    write(out_dir, "regions.csv", &csv, &mut written)?;

    let mut csv = String::from("key,value\n");
    for (k, v) in &report.summary {
        let _ = writeln!(csv, "{k},{v}");
    }
    write(out_dir, "summary.csv", &csv, &mut written)?;

    // RMSE time series, one chart per variable.
    let mut variables: Vec<&str> = report.series.iter().map(|s| s.variable.as_str()).collect();
    variables.dedup();
    variables.sort_unstable();
    variables.dedup();
    for var in variables {
        let lines: Vec<Line> = report
            .series
            .iter()
            .filter(|s| s.variable == var && !s.is_empty())
            .map(|s| Line {
                name: s.experiment.clone(),
                xs: s.records.iter().map(|r| r.time_index as f64).collect(),
                ys: s.rmse_values(),
            })
            .collect();
        if !lines.is_empty() {
            let svg = line_chart(&format!("RMSE of {var}"), "time index", "RMSE", &lines);
            write(out_dir, &format!("rmse_{}.svg", slug(var)), &svg, &mut written)?;
        }
    }

    for c in report.caps.iter().filter(|c| !c.thresholds.is_empty()) {
        let line = Line {
            name: c.experiment.clone(),
            xs: c.thresholds.clone(),
            ys: c.percents.clone(),
        };
        let title = format!("CAP of {} {} ({})", c.variable, c.metric, c.experiment);
        let svg = line_chart(&title, c.metric.as_str(), "percent", &[line]);
        let name = format!("cap_{}_{}_{}.svg", slug(&c.experiment), slug(&c.variable), slug(&c.metric));
        write(out_dir, &name, &svg, &mut written)?;
    }

    if !report.regions.is_empty() {
        let mut rows: Vec<String> = report.regions.iter().map(|r| r.region.clone()).collect();
        rows.dedup();
        let mut cols: Vec<String> = report.regions.iter().map(|r| r.variable.clone()).collect();
        cols.sort();
        cols.dedup();
        let cells: Vec<Vec<Option<f64>>> = rows
            .iter()
            .map(|reg| {
                cols.iter()
                    .map(|var| {
                        report
                            .regions
                            .iter()
                            .find(|r| &r.region == reg && &r.variable == var)
                            .map(|r| r.rmse)
                    })
                    .collect()
            })
            .collect();
        let svg = heatmap("Regional RMSE", &rows, &cols, &cells);
        write(out_dir, "regions.svg", &svg, &mut written)?;
    }

    if let Some(m) = report.correlation.as_ref().filter(|m| !m.names.is_empty()) {
        let svg = heatmap("Correlation matrix", &m.names, &m.names, &m.values);
        write(out_dir, "correlation.svg", &svg, &mut written)?;
    }
    Ok(written)
}

struct Line {
    name: String,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn line_chart(title: &str, xlabel: &str, ylabel: &str, lines: &[Line]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let all_x = lines.iter().flat_map(|l| l.xs.iter().copied());
    let all_y = lines.iter().flat_map(|l| l.ys.iter().copied());
    let (x0, x1) = bounds(all_x);
    let (y0, y1) = bounds(all_y);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, w / 2.0, h - 15.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 15 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(ylabel)
    );
    for (v, y) in [(y0, h - m), (y1, m)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end" font-size="10">{v:.4}</text>"#, m - 4.0);
    }
    for (v, x) in [(x0, m), (x1, w - m)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-size="10">{v:.4}</text>"#, h - m + 14.0);
    }
    for (k, l) in lines.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = l.xs.iter().zip(&l.ys).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" data-name="{}" data-x="{}" data-values="{}" points="{}"/>"#,
            escape(&l.name),
            join(&l.xs),
            join(&l.ys),
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            w - m + 4.0,
            m + 14.0 * k as f64,
            escape(&l.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn heatmap(title: &str, rows: &[String], cols: &[String], cells: &[Vec<Option<f64>>]) -> String {
    let cell = 48.0;
    let (left, top) = (110.0, 70.0);
    let w = left + cell * cols.len() as f64 + 20.0;
    let h = top + cell * rows.len() as f64 + 20.0;
    let (lo, hi) = bounds(cells.iter().flatten().flatten().copied());
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            left + cell * (j as f64 + 0.5),
            top - 8.0,
            escape(c)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{}</text>"#, left - 6.0, y + cell / 2.0 + 3.0, escape(r));
        for (j, v) in cells[i].iter().enumerate() {
            let x = left + cell * j as f64;
            let (fill, label, raw) = match v {
                Some(v) => {
                    let t = (v - lo) / (hi - lo);
                    let shade = (255.0 - 200.0 * t).round() as u8;
                    (format!("rgb(255,{shade},{shade})"), format!("{v:.3}"), v.to_string())
                }
                None => ("#dddddd".to_string(), "n/a".to_string(), String::new()),
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white" data-value="{raw}"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" font-size="9">{label}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 3.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
