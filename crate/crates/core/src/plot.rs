//! Static figure export: attention traces as CSV and SVG heatmaps, latency
//! histograms as SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::LatencyReport;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("io error on {path}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed trace: {0}")]
    Format(String),
}

fn write_file(path: &Path, text: &str) -> Result<(), PlotError> {
    fs::write(path, text).map_err(|source| PlotError::Io { path: path.display().to_string(), source })
}

/// Alignment weights for one utterance with 1-based boundaries per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub id: String,
    pub alpha: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
    pub gold: Vec<usize>,
}

impl AttentionTrace {
    pub fn frames(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), PlotError> {
        let t = self.frames();
        if self.alpha.iter().any(|r| r.len() != t) {
            return Err(PlotError::Format("ragged alignment rows".into()));
        }
        for (name, b) in [("predicted", &self.predicted), ("gold", &self.gold)] {
            if !b.is_empty() && b.len() != self.alpha.len() {
                return Err(PlotError::Format(format!("{} {name} boundaries for {} rows", b.len(), self.alpha.len())));
            }
            if b.iter().any(|&x| x == 0 || x > t) {
                return Err(PlotError::Format(format!("{name} boundary outside 1..={t}")));
            }
        }
        Ok(())
    }

    /// Header of frame indices, then one row per token.
    pub fn to_csv(&self) -> String {
        let mut s = (1..=self.frames()).map(|j| j.to_string()).collect::<Vec<_>>().join(",");
        s.push('\n');
        for row in &self.alpha {
            s.push_str(&row.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }

    /// Reads the matrix written by [`AttentionTrace::to_csv`]; boundaries
    /// are left empty.
    pub fn from_csv(id: &str, text: &str) -> Result<Self, PlotError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| PlotError::Format("empty file".into()))?;
        let t = header.split(',').count();
        let mut alpha = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PlotError::Format(format!("row {}: {e}", i + 1)))?;
            if row.len() != t {
                return Err(PlotError::Format(format!("row {} has {} columns, header {t}", i + 1, row.len())));
            }
            alpha.push(row);
        }
        Ok(AttentionTrace { id: id.to_string(), alpha, predicted: vec![], gold: vec![] })
    }

    pub fn to_svg(&self) -> String {
        heatmap_svg(self)
    }

    /// Writes `<stem>.csv`, `<stem>.svg` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<(), PlotError> {
        self.validate()?;
        write_file(&stem.with_extension("csv"), &self.to_csv())?;
        write_file(&stem.with_extension("svg"), &self.to_svg())?;
        let json = serde_json::to_string_pretty(self).expect("trace serializes");
        write_file(&stem.with_extension("json"), &json)
    }
}

const CELL: f64 = 18.0;
const MARGIN_L: f64 = 48.0;
const MARGIN_T: f64 = 36.0;

pub fn cell_center(row: usize, boundary: usize) -> (f64, f64) {
    (MARGIN_L + (boundary as f64 - 0.5) * CELL, MARGIN_T + (row as f64 + 0.5) * CELL)
}

fn shade(x: f64) -> String {
    let v = x.clamp(0.0, 1.0);
    // dark blue to yellow
    let r = (68.0 + v * (253.0 - 68.0)) as u8;
    let g = (1.0 + v * (231.0 - 1.0)) as u8;
    let b = (84.0 + v * (37.0 - 84.0)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn heatmap_svg(tr: &AttentionTrace) -> String {
    let (l, t) = (tr.alpha.len(), tr.frames());
    let w = MARGIN_L + t as f64 * CELL + 20.0;
    let h = MARGIN_T + l as f64 * CELL + 40.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(&tr.id));
    let _ = writeln!(s, r#"<text x="{MARGIN_L}" y="14">alignment {}</text>"#, escape(&tr.id));
    for (i, row) in tr.alpha.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                MARGIN_L + j as f64 * CELL,
                MARGIN_T + i as f64 * CELL,
                shade(a)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN_L - 4.0, MARGIN_T + (i as f64 + 0.7) * CELL, i + 1);
    }
    for j in (1..=t).filter(|j| t <= 20 || j % 5 == 0 || *j == 1) {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{j}</text>"#, MARGIN_L + (j as f64 - 0.5) * CELL, MARGIN_T - 4.0);
    }
    for (i, &b) in tr.gold.iter().enumerate() {
        let (x, y) = cell_center(i, b);
        let half = CELL / 2.0 - 1.5;
        let _ = writeln!(
            s,
            r##"<rect class="gold" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#e41a1c" stroke-width="2"/>"##,
            x - half,
            y - half,
            2.0 * half,
            2.0 * half
        );
    }
    for (i, &b) in tr.predicted.iter().enumerate() {
        let (x, y) = cell_center(i, b);
        let _ = writeln!(s, r##"<circle class="predicted" cx="{x}" cy="{y}" r="4" fill="#ffff33" stroke="black" stroke-width="0.5"/>"##);
    }
    let ly = MARGIN_T + l as f64 * CELL + 20.0;
    let _ = writeln!(s, r#"<text x="{MARGIN_L}" y="{ly}">encoder frame (columns), token (rows); dot = predicted, square = gold</text>"#);
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Counts per integer delta over `lo..=hi`.
pub fn histogram(deltas: &[i64], lo: i64, hi: i64) -> Vec<(i64, usize)> {
    let mut bins: Vec<(i64, usize)> = (lo..=hi).map(|d| (d, 0)).collect();
    for &d in deltas {
        if (lo..=hi).contains(&d) {
            bins[(d - lo) as usize].1 += 1;
        }
    }
    bins
}

/// One panel per report, shared delta axis, bars as token fractions, with
/// the median and 99th percentile marked.
pub fn latency_histogram_svg(reports: &[(String, LatencyReport)]) -> String {
    let pooled: Vec<Vec<i64>> = reports.iter().map(|(_, r)| r.pooled()).collect();
    let lo = pooled.iter().flatten().copied().min().unwrap_or(0).min(0);
    let hi = pooled.iter().flatten().copied().max().unwrap_or(0).max(1);
    let bins = (hi - lo + 1) as f64;
    let (pw, ph) = (480.0, 120.0);
    let bar = pw / bins;
    let (ml, mt, gap) = (48.0, 24.0, 44.0);
    let w = ml + pw + 20.0;
    let h = mt + reports.len() as f64 * (ph + gap) + 10.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<text x="{ml}" y="14">latency distribution (frames, predicted - gold)</text>"#);
    for (k, ((name, rep), deltas)) in reports.iter().zip(&pooled).enumerate() {
        let top = mt + k as f64 * (ph + gap);
        let base = top + ph;
        let counts = histogram(deltas, lo, hi);
        let n = deltas.len().max(1) as f64;
        let peak = counts.iter().map(|c| c.1).max().unwrap_or(1).max(1) as f64 / n;
        let _ = writeln!(s, r#"<g class="panel">"#);
        let _ = writeln!(
            s,
            r#"<text x="{ml}" y="{}">{} (median {}, p90 {}, p99 {})</text>"#,
            top - 4.0,
            escape(name),
            rep.median,
            rep.p90,
            rep.p99
        );
        for (d, c) in &counts {
            if *c == 0 {
                continue;
            }
            let bh = (*c as f64 / n) / peak * ph;
            let x = ml + (d - lo) as f64 * bar;
            let _ = writeln!(s, r##"<rect class="bar" x="{x}" y="{}" width="{}" height="{bh}" fill="#377eb8"/>"##, base - bh, (bar - 1.0).max(0.5));
        }
        for (q, color) in [(rep.median, "#4daf4a"), (rep.p99, "#e41a1c")] {
            let x = ml + (q - lo) as f64 * bar + bar / 2.0;
            let _ = writeln!(s, r#"<line x1="{x}" y1="{top}" x2="{x}" y2="{base}" stroke="{color}" stroke-dasharray="3,2"/>"#);
        }
        let _ = writeln!(s, r#"<line x1="{ml}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, ml + pw);
        let step = ((hi - lo) / 10).max(1);
        let mut d = lo;
        while d <= hi {
            let x = ml + (d - lo) as f64 * bar + bar / 2.0;
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{d}</text>"#, base + 12.0);
            d += step;
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_latency_histogram(path: &Path, reports: &[(String, LatencyReport)]) -> Result<(), PlotError> {
    write_file(path, &latency_histogram_svg(reports))
}
