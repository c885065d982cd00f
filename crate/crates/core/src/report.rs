//! Report emission: per-class CSV, ROC SVGs, summary tables and
//! attention heatmaps.

use std::fmt::Write as _;

use image::{GrayImage, Luma};

use crate::baselines::DeltaTable;
use crate::error::{Error, Result};
use crate::metrics::{ClassResult, EvalReport};

/// Decimal places for AUC values in emitted reports.
pub const AUC_DIGITS: usize = 6;

fn fmt_auc(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.AUC_DIGITS$}")).unwrap_or_default()
}

/// One row per class plus a mean row. Baseline delta columns are appended
/// when `deltas` is given; the table must come from the same report.
pub fn report_csv(report: &EvalReport, deltas: Option<&DeltaTable>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["class".to_string(), "auc".into(), "degenerate".into(), "positives".into(), "negatives".into()];
    if let Some(d) = deltas {
        header.extend(d.columns.iter().map(|c| format!("delta_{c}")));
    }
    w.write_record(&header)?;
    let delta_cells = |class: &str| -> Result<Vec<String>> {
        let Some(d) = deltas else { return Ok(Vec::new()) };
        let row = d
            .row(class)
            .ok_or_else(|| Error::invalid("report_csv", format!("delta table lacks {class:?}")))?;
        Ok(row.deltas.iter().map(|c| c.map(|f| f.to_string()).unwrap_or_default()).collect())
    };
    for c in &report.classes {
        let mut rec = vec![
            c.name.clone(),
            fmt_auc(c.auc),
            u8::from(c.auc.is_none()).to_string(),
            c.positives.to_string(),
            c.negatives.to_string(),
        ];
        rec.extend(delta_cells(&c.name)?);
        w.write_record(&rec)?;
    }
    let mean_name = deltas
        .and_then(|d| d.rows.last())
        .map(|r| r.class.clone())
        .unwrap_or_else(|| crate::baselines::MEAN_ROW.to_string());
    let mut rec = vec![
        mean_name.clone(),
        fmt_auc(Some(report.mean_auc)),
        report.degenerate.to_string(),
        String::new(),
        String::new(),
    ];
    rec.extend(delta_cells(&mean_name)?);
    w.write_record(&rec)?;
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// ROC curve as a standalone SVG; `None` for degenerate classes.
pub fn roc_svg(class: &ClassResult) -> Option<String> {
    let auc = class.auc?;
    let (size, pad) = (320.0, 40.0);
    let plot = size - 2.0 * pad;
    let xy = |(fpr, tpr): (f64, f64)| (pad + fpr * plot, size - pad - tpr * plot);
    let mut path = String::new();
    for (i, &p) in class.roc.iter().enumerate() {
        let (x, y) = xy(p);
        let _ = write!(path, "{}{x:.2},{y:.2}", if i == 0 { "M" } else { " L" });
    }
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{pad}" y="{pad}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{pad}" stroke="gray" stroke-dasharray="4 4"/>"#,
        size - pad,
        size - pad
    );
    let _ = writeln!(s, r#"<path d="{path}" fill="none" stroke="steelblue" stroke-width="2"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{} (AUC {auc:.4})</text>"#,
        size / 2.0,
        escape(&class.name)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">False positive rate</text>"#,
        size / 2.0,
        size - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">True positive rate</text>"#,
        size / 2.0,
        size / 2.0
    );
    s.push_str("</svg>\n");
    Some(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// File-name-safe form of a class name.
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// A small table rendered both as CSV and as aligned text.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl SummaryTable {
    pub fn new(headers: &[&str]) -> Self {
        SummaryTable {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.headers.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].chars().count())
                    .chain([self.headers[c].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        out.push_str(&rule.join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Min-max scaled grayscale rendering of an `h x w` map.
pub fn heatmap(values: &[f64], h: usize, w: usize) -> GrayImage {
    assert_eq!(values.len(), h * w, "map does not match {h}x{w}");
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize];
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        Luma([(t * 255.0).round() as u8])
    })
}
