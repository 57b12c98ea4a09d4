//! Binary confusion matrix and the six reported metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rendered in place of a metric whose denominator is zero.
pub const UNDEFINED_MARK: &str = "—";

pub const METRIC_NAMES: [&str; 6] = ["ACC", "NPV", "PPV", "SEN", "SPE", "FOS"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    /// Tally `(true, predicted)` label pairs; labels equal to `positive` count as positive.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>, positive: usize) -> Result<Self> {
        let mut cm = Self::default();
        let mut seen = false;
        for (truth, pred) in pairs {
            seen = true;
            match (truth == positive, pred == positive) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fn_ += 1,
                (false, true) => cm.fp += 1,
                (false, false) => cm.tn += 1,
            }
        }
        if !seen {
            return Err(Error::InvalidArgument("confusion matrix of an empty prediction set".into()));
        }
        Ok(cm)
    }

    /// Predicted label is the argmax of each logit row (first index wins ties).
    pub fn from_logits(labels: &[usize], logits: &[f64], classes: usize, positive: usize) -> Result<Self> {
        if classes == 0 || logits.len() != labels.len() * classes {
            return Err(Error::InvalidArgument(format!(
                "{} logits for {} labels and {classes} classes",
                logits.len(),
                labels.len()
            )));
        }
        Self::from_pairs(
            labels.iter().zip(logits.chunks(classes)).map(|(&y, row)| (y, argmax(row))),
            positive,
        )
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same predictions seen with the other class as positive.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }

    pub fn report(&self) -> MetricReport {
        MetricReport::from_confusion(self)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Metrics as fractions in [0, 1]; `None` marks a zero denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: Option<f64>,
    pub npv: Option<f64>,
    pub ppv: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub fos: Option<f64>,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let ConfusionMatrix { tp, fp, tn, fn_ } = *cm;
        Self {
            acc: ratio(tp + tn, cm.total()),
            npv: ratio(tn, tn + fn_),
            ppv: ratio(tp, tp + fp),
            sen: ratio(tp, tp + fn_),
            spe: ratio(tn, tn + fp),
            fos: ratio(2 * tp, 2 * tp + fn_ + fp),
        }
    }

    /// Values in column order ACC, NPV, PPV, SEN, SPE, FOS.
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.acc, self.npv, self.ppv, self.sen, self.spe, self.fos]
    }

    /// Percentages rounded half-up to one decimal.
    pub fn percentages(&self) -> [Option<f64>; 6] {
        self.values().map(|v| v.map(percent_1dp))
    }

    pub fn formatted(&self) -> [String; 6] {
        self.percentages().map(|v| match v {
            Some(p) => format!("{p:.1}"),
            None => UNDEFINED_MARK.to_string(),
        })
    }
}

/// `x` in [0, 1] as a percentage rounded half-up to one decimal place.
///
/// The tiny offset absorbs representation error so that exact halves such as
/// 0.9125 (stored as 0.91249999...) still round up.
pub fn percent_1dp(x: f64) -> f64 {
    (x * 1000.0 + 0.5 + 1e-9).floor() / 10.0
}

/// One labeled row of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub report: MetricReport,
    pub note: Option<String>,
}

pub fn render_csv(label_header: &str, rows: &[ReportRow]) -> String {
    let mut out = format!("{label_header},{},note\n", METRIC_NAMES.join(","));
    for row in rows {
        let cells = row.report.percentages().map(|v| v.map(|p| format!("{p:.1}")).unwrap_or_default());
        out.push_str(&csv_field(&row.label));
        for c in cells {
            out.push(',');
            out.push_str(&c);
        }
        out.push(',');
        out.push_str(&csv_field(row.note.as_deref().unwrap_or("")));
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aligned text table; the best value of each column is wrapped in `**`.
pub fn render_table(label_header: &str, rows: &[ReportRow]) -> String {
    let mut best = [None::<f64>; 6];
    for row in rows {
        for (b, v) in best.iter_mut().zip(row.report.percentages()) {
            if let Some(v) = v {
                *b = Some(b.map_or(v, |cur: f64| cur.max(v)));
            }
        }
    }
    let mut cells: Vec<Vec<String>> = vec![std::iter::once(label_header.to_string())
        .chain(METRIC_NAMES.iter().map(|s| s.to_string()))
        .collect()];
    for row in rows {
        let mut line = vec![match &row.note {
            Some(n) => format!("{} ({n})", row.label),
            None => row.label.clone(),
        }];
        for ((p, text), b) in row.report.percentages().iter().zip(row.report.formatted()).zip(best) {
            line.push(match (p, b) {
                (Some(p), Some(b)) if *p == b => format!("**{text}**"),
                _ => text,
            });
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..7)
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in cells.iter().enumerate() {
        let mut line = format!("{:<w$}", r[0], w = widths[0]);
        for c in 1..7 {
            line.push_str(&format!("  {:>w$}", r[c], w = widths[c]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 12));
            out.push('\n');
        }
    }
    out
}
