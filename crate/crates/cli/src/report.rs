use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: Option<f64>,
    pub pass: bool,
}

impl Check {
    /// Passes when value ≤ tolerance.
    pub fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance: Some(tolerance), pass: value <= tolerance }
    }

    pub fn predicate(name: impl Into<String>, value: f64, pass: bool) -> Self {
        Self { name: name.into(), value, tolerance: None, pass }
    }

    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Self::predicate(name, value, true)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub params: Value,
    pub results: Vec<Check>,
    pub timing: Timing,
}

impl Report {
    pub fn pass(&self) -> bool {
        self.results.iter().all(|c| c.pass)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)? + "\n";
        fs::write(dir.join(format!("{}.json", self.command)), json)?;
        let rows: Vec<Vec<String>> = self
            .results
            .iter()
            .map(|c| {
                vec![
                    c.name.clone(),
                    fmt17(c.value),
                    c.tolerance.map(fmt17).unwrap_or_default(),
                    c.pass.to_string(),
                ]
            })
            .collect();
        write_csv(&dir.join(format!("{}_results.csv", self.command)), &["name", "value", "tolerance", "pass"], &rows)
    }
}

/// 17 significant digits, round-trips every f64.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn float_rows(cols: &[&[f64]]) -> Vec<Vec<String>> {
    let len = cols.first().map_or(0, |c| c.len());
    (0..len).map(|i| cols.iter().map(|c| fmt17(c[i])).collect()).collect()
}

/// Reads the named float columns of a CSV with a header row.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == *n).with_context(|| format!("column {n} missing in {}", path.display())))
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for rec in r.records() {
        let rec = rec?;
        for (c, &i) in cols.iter_mut().zip(&idx) {
            c.push(rec.get(i).unwrap_or_default().trim().parse::<f64>()?);
        }
    }
    Ok(cols)
}

const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Overlay of (x, y) curves with a frame, end-point axis labels and a legend.
pub fn svg_plot(curves: &[(String, Vec<f64>, Vec<f64>)], xlabel: &str, ylabel: &str) -> String {
    let (w, h, m) = (720.0, 480.0, 60.0);
    let pts = curves.iter().flat_map(|(_, x, y)| x.iter().zip(y)).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (&x, &y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        (x0, x1) = (0.0, 1.0);
    }
    if !(y1 > y0) {
        (y0, y1) = (y0.min(0.0) - 1.0, y1.max(0.0) + 1.0);
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    let text = |s: &mut String, x: f64, y: f64, anchor: &str, t: &str| {
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="12" text-anchor="{anchor}">{t}</text>"#);
    };
    text(&mut s, m, h - m + 16.0, "middle", &format!("{x0:.3}"));
    text(&mut s, w - m, h - m + 16.0, "middle", &format!("{x1:.3}"));
    text(&mut s, m - 6.0, h - m + 4.0, "end", &format!("{y0:.3}"));
    text(&mut s, m - 6.0, m + 4.0, "end", &format!("{y1:.3}"));
    text(&mut s, w / 2.0, h - m / 3.0, "middle", xlabel);
    text(&mut s, m / 3.0, h / 2.0, "middle", ylabel);
    for (i, (label, x, y)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (&a, &b) in x.iter().zip(y) {
            if a.is_finite() && b.is_finite() {
                let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, sx(a), sy(b));
                pen_down = true;
            } else {
                pen_down = false;
            }
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end());
        let ly = m + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            w - m - 90.0,
            w - m - 70.0
        );
        text(&mut s, w - m - 64.0, ly + 4.0, "start", label);
    }
    s.push_str("</svg>\n");
    s
}
