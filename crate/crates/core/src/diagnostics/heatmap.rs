//! Attention maps as matrices, SVG and terminal text.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CELL: usize = 22;
const SHADES: &[u8] = b" .:-=+*#%@";

/// Row-stochastic attention matrix with labels. Rows are decoding steps (or
/// the single classifier query); columns are input tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub rows: Vec<Vec<f64>>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Gold columns per row, drawn as outlined cells.
    #[serde(default)]
    pub gold: Vec<Vec<usize>>,
}

impl HeatmapMatrix {
    /// Builds the matrix, checking that each row is a distribution over the
    /// labelled columns (to within 1e-6). Missing row labels default to the
    /// row index.
    pub fn new(rows: Vec<Vec<f64>>, col_labels: Vec<String>, row_labels: Option<Vec<String>>) -> Result<Self> {
        for (r, row) in rows.iter().enumerate() {
            if row.len() != col_labels.len() {
                return Err(Error::shape("heatmap", format!("row {r} has {} weights for {} labels", row.len(), col_labels.len())));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|w| !(0.0..=1.0 + 1e-12).contains(w)) {
                return Err(Error::InvalidInput(format!("row {r} is not a distribution (sums to {s})")));
            }
        }
        let row_labels = match row_labels {
            Some(l) if l.len() == rows.len() => l,
            Some(l) => {
                return Err(Error::shape("heatmap", format!("{} row labels for {} rows", l.len(), rows.len())));
            }
            None => (0..rows.len()).map(|i| i.to_string()).collect(),
        };
        Ok(HeatmapMatrix {
            rows,
            row_labels,
            col_labels,
            gold: Vec::new(),
        })
    }

    pub fn with_gold(mut self, gold: Vec<Vec<usize>>) -> Result<Self> {
        if gold.len() != self.rows.len() || gold.iter().flatten().any(|&c| c >= self.col_labels.len()) {
            return Err(Error::shape("heatmap", "gold overlay does not fit the matrix"));
        }
        self.gold = gold;
        Ok(self)
    }

    /// Column of the largest weight in each row (first on ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.rows.iter().map(|r| crate::models::argmax(r)).collect()
    }

    /// Gray level for a weight: 255 (white) at 0 down to 0 (black) at 1.
    pub fn gray(weight: f64) -> u8 {
        (255.0 * (1.0 - weight.clamp(0.0, 1.0))).round() as u8
    }

    pub fn to_svg(&self) -> String {
        let label_w = 8 * self.row_labels.iter().map(String::len).max().unwrap_or(1) + 8;
        let label_h = 8 * self.col_labels.iter().map(String::len).max().unwrap_or(1) + 8;
        let width = label_w + CELL * self.col_labels.len() + 4;
        let height = label_h + CELL * self.rows.len() + 4;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
        );
        for (j, l) in self.col_labels.iter().enumerate() {
            let x = label_w + j * CELL + CELL / 2;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{y}" transform="rotate(-90 {x} {y})">{}</text>"#,
                escape(l),
                y = label_h - 4
            );
        }
        for (i, row) in self.rows.iter().enumerate() {
            let y = label_h + i * CELL;
            let _ = writeln!(
                s,
                r#"<text x="2" y="{}" class="row-label">{}</text>"#,
                y + CELL / 2 + 4,
                escape(&self.row_labels[i])
            );
            for (j, &w) in row.iter().enumerate() {
                let g = Self::gray(w);
                let _ = writeln!(
                    s,
                    r#"<rect class="cell" x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})" data-weight="{w:.6}"/>"#,
                    label_w + j * CELL
                );
            }
        }
        for (i, cols) in self.gold.iter().enumerate() {
            for &j in cols {
                let _ = writeln!(
                    s,
                    r#"<rect class="gold" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="none" stroke="red" stroke-width="2" data-row="{i}" data-col="{j}"/>"#,
                    label_w + j * CELL,
                    label_h + i * CELL
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }

    /// One character per cell from a ten-step shade ramp; gold cells are
    /// bracketed.
    pub fn to_text(&self) -> String {
        let lw = self.row_labels.iter().map(String::len).max().unwrap_or(1);
        let widths: Vec<usize> = self.col_labels.iter().map(|l| l.chars().count().max(3)).collect();
        let mut s = format!("{:lw$} |", "");
        for (label, w) in self.col_labels.iter().zip(&widths) {
            let _ = write!(s, " {label:^w$}");
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "{:>lw$} |", self.row_labels[i]);
            for (j, (&wt, w)) in row.iter().zip(&widths).enumerate() {
                let idx = ((wt.clamp(0.0, 1.0) * (SHADES.len() - 1) as f64).round()) as usize;
                let c = SHADES[idx] as char;
                let gold = self.gold.get(i).is_some_and(|g| g.contains(&j));
                let cell = if gold { format!("[{c}]") } else { format!(" {c} ") };
                let _ = write!(s, " {cell:^w$}");
            }
            s.push('\n');
        }
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Fraction of rows whose argmax lies within `within` columns of one of
/// that row's gold columns. Rows without gold columns are skipped.
pub fn alignment_hit_rate(rows: &[Vec<f64>], gold: &[Vec<usize>], within: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (row, g) in rows.iter().zip(gold) {
        if g.is_empty() || row.is_empty() {
            continue;
        }
        total += 1;
        let a = crate::models::argmax(row);
        if g.iter().any(|&c| a.abs_diff(c) <= within) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
