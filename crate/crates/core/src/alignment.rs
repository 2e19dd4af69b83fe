//! Class × topic co-occurrence matrix and the per-class reading of it.
//!
//! A class whose documents land in one emergent topic is well defined; one
//! that splits across two topics overlaps with a neighbour; one spread thin
//! is vague; one with almost no documents has failed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::class_size_variance;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("class and topic maps disagree on documents: {0:?}")]
    KeyMismatch(Vec<String>),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("cannot render an empty matrix as svg")]
    EmptyMatrix,
    #[error("unknown export format {0:?}")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub run_id: String,
}

impl AlignmentMatrix {
    pub fn new(rows: Vec<String>, cols: Vec<String>, counts: Vec<Vec<u64>>, run_id: impl Into<String>) -> Self {
        assert_eq!(rows.len(), counts.len(), "one count row per class");
        assert!(counts.iter().all(|r| r.len() == cols.len()), "one count per topic");
        Self {
            rows,
            cols,
            counts,
            run_id: run_id.into(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.cols.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// Variance of class sizes; large values hint at an over-broad class.
    pub fn class_size_variance(&self) -> f64 {
        class_size_variance(&self.row_sums())
    }

    pub fn from_json(body: &str) -> Result<Self, AlignmentError> {
        Ok(serde_json::from_str(body)?)
    }
}

/// Counts co-assignments. `rows`/`cols` fix the label order; labels seen in
/// the maps but not declared are appended in sorted order.
pub fn build_alignment(
    class_assign: &BTreeMap<String, String>,
    topic_assign: &BTreeMap<String, String>,
    rows: &[String],
    cols: &[String],
    run_id: &str,
) -> Result<AlignmentMatrix, AlignmentError> {
    let mut mismatched: Vec<String> = class_assign
        .keys()
        .filter(|k| !topic_assign.contains_key(*k))
        .chain(topic_assign.keys().filter(|k| !class_assign.contains_key(*k)))
        .cloned()
        .collect();
    if !mismatched.is_empty() {
        mismatched.sort();
        return Err(AlignmentError::KeyMismatch(mismatched));
    }
    let extend = |declared: &[String], seen: &mut dyn Iterator<Item = &String>| {
        let mut labels = declared.to_vec();
        let mut extra: Vec<String> = seen.filter(|l| !labels.contains(l)).cloned().collect();
        extra.sort();
        extra.dedup();
        labels.extend(extra);
        labels
    };
    let rows = extend(rows, &mut class_assign.values());
    let cols = extend(cols, &mut topic_assign.values());
    let mut counts = vec![vec![0u64; cols.len()]; rows.len()];
    for (doc, class) in class_assign {
        let i = rows.iter().position(|r| r == class).expect("row declared");
        let j = cols.iter().position(|c| *c == topic_assign[doc]).expect("col declared");
        counts[i][j] += 1;
    }
    Ok(AlignmentMatrix::new(rows, cols, counts, run_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticThresholds {
    pub failed_share: f64,
    pub vague_purity: f64,
    pub validated_purity: f64,
}

impl Default for DiagnosticThresholds {
    fn default() -> Self {
        Self {
            failed_share: 0.02,
            vague_purity: 0.5,
            validated_purity: 0.8,
        }
    }
}

impl DiagnosticThresholds {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        let ok = self.failed_share > 0.0
            && self.failed_share < 1.0
            && self.vague_purity > 0.0
            && self.vague_purity <= self.validated_purity
            && self.validated_purity <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(AlignmentError::InvalidThresholds(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Validated,
    Overlapping,
    Vague,
    Failed,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Validated => "validated",
            Self::Overlapping => "overlapping",
            Self::Vague => "vague",
            Self::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDiagnostic {
    pub class_name: String,
    pub row_sum: u64,
    pub purity: f64,
    pub support_share: f64,
    pub verdict: Verdict,
}

pub fn diagnose(
    matrix: &AlignmentMatrix,
    thresholds: &DiagnosticThresholds,
) -> Result<Vec<ClassDiagnostic>, AlignmentError> {
    thresholds.validate()?;
    let total = matrix.total();
    Ok(matrix
        .rows
        .iter()
        .zip(&matrix.counts)
        .map(|(name, row)| {
            let row_sum: u64 = row.iter().sum();
            let purity = if row_sum == 0 {
                0.0
            } else {
                *row.iter().max().expect("row_sum > 0") as f64 / row_sum as f64
            };
            let support_share = if total == 0 { 0.0 } else { row_sum as f64 / total as f64 };
            let verdict = if support_share <= thresholds.failed_share {
                Verdict::Failed
            } else if purity < thresholds.vague_purity {
                Verdict::Vague
            } else if purity >= thresholds.validated_purity {
                Verdict::Validated
            } else {
                Verdict::Overlapping
            };
            ClassDiagnostic {
                class_name: name.clone(),
                row_sum,
                purity,
                support_share,
                verdict,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapFormat {
    Csv,
    Svg,
    Json,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = AlignmentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            "json" => Ok(Self::Json),
            other => Err(AlignmentError::UnknownFormat(other.into())),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn heatmap_csv(matrix: &AlignmentMatrix) -> String {
    let mut out = String::from("class");
    for c in &matrix.cols {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    out.push('\n');
    for (name, row) in matrix.rows.iter().zip(&matrix.counts) {
        out.push_str(&csv_field(name));
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Position of `v` on the min–max ramp; a flat matrix sits mid-scale.
pub fn intensity(v: u64, min: u64, max: u64) -> f64 {
    if max == min {
        0.5
    } else {
        (v - min) as f64 / (max - min) as f64
    }
}

/// Dark blue (low) to bright yellow (high).
fn ramp(t: f64) -> String {
    let lo = (68.0, 1.0, 84.0);
    let hi = (253.0, 231.0, 37.0);
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(lo.0, hi.0), mix(lo.1, hi.1), mix(lo.2, hi.2))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn heatmap_svg(matrix: &AlignmentMatrix) -> Result<String, AlignmentError> {
    if matrix.rows.is_empty() || matrix.cols.is_empty() {
        return Err(AlignmentError::EmptyMatrix);
    }
    const CELL: usize = 40;
    const LEFT: usize = 160;
    const TOP: usize = 120;
    let values = matrix.counts.iter().flatten();
    let min = *values.clone().min().expect("non-empty");
    let max = *values.max().expect("non-empty");
    let width = LEFT + CELL * matrix.cols.len();
    let height = TOP + CELL * matrix.rows.len();
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for (j, col) in matrix.cols.iter().enumerate() {
        let x = LEFT + j * CELL + CELL / 2;
        let _ = writeln!(
            out,
            "  <text x=\"{x}\" y=\"{}\" transform=\"rotate(-45 {x} {})\">{}</text>",
            TOP - 6,
            TOP - 6,
            xml_escape(col)
        );
    }
    for (i, (row, counts)) in matrix.rows.iter().zip(&matrix.counts).enumerate() {
        let y = TOP + i * CELL;
        let _ = writeln!(
            out,
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            LEFT - 6,
            y + CELL / 2 + 4,
            xml_escape(row)
        );
        for (j, &v) in counts.iter().enumerate() {
            let t = intensity(v, min, max);
            let _ = writeln!(
                out,
                "  <rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" data-count=\"{v}\" data-intensity=\"{t:.4}\"><title>{}: {}: {v}</title></rect>",
                LEFT + j * CELL,
                ramp(t),
                xml_escape(row),
                xml_escape(&matrix.cols[j]),
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn heatmap_json(matrix: &AlignmentMatrix) -> String {
    crate::store::canonical::to_pretty(matrix)
}

pub fn export_heatmap(matrix: &AlignmentMatrix, out: &Path, format: HeatmapFormat) -> Result<(), AlignmentError> {
    let body = match format {
        HeatmapFormat::Csv => heatmap_csv(matrix),
        HeatmapFormat::Svg => heatmap_svg(matrix)?,
        HeatmapFormat::Json => heatmap_json(matrix),
    };
    fs::write(out, body)?;
    Ok(())
}
