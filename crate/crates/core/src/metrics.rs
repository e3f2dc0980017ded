//! Confusion matrices and the summary statistics of a results table:
//! accuracy, per-class sensitivity, balanced accuracy, mean sensitivity and
//! the spread of sensitivities across classes.
//!
//! Classes without support (no true samples) are excluded from every
//! average and from the standard deviation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::EmotionLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<EmotionLabel>,
    /// `counts[t][p]`: samples of true class `t` predicted as `p`.
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: &[EmotionLabel]) -> Self {
        let k = classes.len();
        Self {
            classes: classes.to_vec(),
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(classes: &[EmotionLabel], counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|row| row.len() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: counts.len(),
            });
        }
        Ok(Self {
            classes: classes.to_vec(),
            counts,
        })
    }

    pub fn classes(&self) -> &[EmotionLabel] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn index_of(&self, label: EmotionLabel) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::UnknownClass(label.to_string()))
    }

    pub fn record(&mut self, predicted: EmotionLabel, truth: EmotionLabel) -> Result<()> {
        let p = self.index_of(predicted)?;
        let t = self.index_of(truth)?;
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }
}

/// Tallies `(predicted, true)` pairs.
pub fn confusion(
    pairs: &[(EmotionLabel, EmotionLabel)],
    classes: &[EmotionLabel],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(classes);
    for &(p, t) in pairs {
        cm.record(p, t)?;
    }
    Ok(cm)
}

/// Recall of each supported class, in class-list order.
pub fn sensitivities(cm: &ConfusionMatrix) -> BTreeMap<EmotionLabel, f64> {
    supported_sensitivities(cm).into_iter().collect()
}

fn supported_sensitivities(cm: &ConfusionMatrix) -> Vec<(EmotionLabel, f64)> {
    cm.classes
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| {
            let n = cm.support(i);
            (n > 0).then(|| (c, cm.counts[i][i] as f64 / n as f64))
        })
        .collect()
}

pub fn excluded_classes(cm: &ConfusionMatrix) -> Vec<EmotionLabel> {
    cm.classes
        .iter()
        .enumerate()
        .filter(|&(i, _)| cm.support(i) == 0)
        .map(|(_, &c)| c)
        .collect()
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Undefined("accuracy of an empty confusion matrix"));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Unweighted mean of a list of per-class sensitivities.
pub fn mean_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Undefined("mean over zero classes"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation (`n - 1` denominator).
pub fn sample_sd(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Undefined("standard deviation needs two classes"));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok(0.0);
    }
    let mean = mean_of(values)?;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((ss / (values.len() - 1) as f64).sqrt())
}

fn sensitivity_values(cm: &ConfusionMatrix) -> Vec<f64> {
    supported_sensitivities(cm)
        .into_iter()
        .map(|(_, s)| s)
        .collect()
}

/// Mean sensitivity over supported classes, ignoring class imbalance.
pub fn mean_sensitivity(cm: &ConfusionMatrix) -> Result<f64> {
    mean_of(&sensitivity_values(cm)).map_err(|_| Error::Undefined("no class has support"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Every supported class counts equally.
    Uniform,
    /// Classes weighted by their share of samples; equals accuracy.
    Support,
}

pub fn weighted_sensitivity(cm: &ConfusionMatrix, mode: Weighting) -> Result<f64> {
    match mode {
        Weighting::Uniform => mean_sensitivity(cm),
        Weighting::Support => {
            let total = cm.total();
            if total == 0 {
                return Err(Error::Undefined("no class has support"));
            }
            // sum_c (n_c / N) * (tp_c / n_c) collapses to sum_c tp_c / N.
            let hits: u64 = (0..cm.classes.len())
                .filter(|&i| cm.support(i) > 0)
                .map(|i| cm.counts[i][i])
                .sum();
            Ok(hits as f64 / total as f64)
        }
    }
}

pub fn sensitivity_sd(cm: &ConfusionMatrix) -> Result<f64> {
    sample_sd(&sensitivity_values(cm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedSensitivity {
    pub uniform: f64,
    pub support: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class_sensitivity: BTreeMap<EmotionLabel, f64>,
    pub support: BTreeMap<EmotionLabel, u64>,
    pub mean_sensitivity: f64,
    pub weighted_sensitivity: WeightedSensitivity,
    /// `None` when fewer than two classes have support.
    pub sensitivity_sd: Option<f64>,
    pub excluded_classes: Vec<EmotionLabel>,
}

pub fn build_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let accuracy = accuracy(cm)?;
    let support = cm
        .classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, cm.support(i)))
        .collect();
    Ok(MetricsReport {
        accuracy,
        per_class_sensitivity: sensitivities(cm),
        support,
        mean_sensitivity: mean_sensitivity(cm)?,
        weighted_sensitivity: WeightedSensitivity {
            uniform: weighted_sensitivity(cm, Weighting::Uniform)?,
            support: weighted_sensitivity(cm, Weighting::Support)?,
        },
        sensitivity_sd: sensitivity_sd(cm).ok(),
        excluded_classes: excluded_classes(cm),
    })
}

/// Column order of the one-row CSV form: run name, accuracy, the eight class
/// sensitivities, balanced accuracy (uniform), mean sensitivity, SD, and the
/// support-weighted balanced accuracy last.
pub fn report_csv_header() -> Vec<String> {
    let mut h = vec!["run".to_string(), "acc".to_string()];
    h.extend(EmotionLabel::CLASSES.iter().map(|c| c.name().to_string()));
    h.extend(["bal_acc", "mean_sens", "sd", "bal_acc_support"].map(String::from));
    h
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_metric(v: f64) -> String {
    format!("{v}")
}

impl MetricsReport {
    /// CSV cells matching [`report_csv_header`]. Classes without support
    /// are written as `-`.
    pub fn csv_row(&self, run: &str) -> Vec<String> {
        let mut row = vec![run.to_string(), fmt_metric(self.accuracy)];
        for c in EmotionLabel::CLASSES {
            row.push(
                self.per_class_sensitivity
                    .get(&c)
                    .map_or_else(|| "-".to_string(), |&v| fmt_metric(v)),
            );
        }
        row.push(fmt_metric(self.weighted_sensitivity.uniform));
        row.push(fmt_metric(self.mean_sensitivity));
        row.push(self.sensitivity_sd.map_or_else(|| "-".into(), fmt_metric));
        row.push(fmt_metric(self.weighted_sensitivity.support));
        row
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::ReportFormat(format!("{}: {e}", path.display())))
    }

    pub fn save_csv(&self, run: &str, path: impl AsRef<Path>) -> Result<()> {
        write_table_csv(&[(run.to_string(), self.clone())], path)
    }
}

pub fn write_table_csv(rows: &[(String, MetricsReport)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(report_csv_header())?;
    for (run, report) in rows {
        w.write_record(report.csv_row(run))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One parsed row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub run: String,
    pub accuracy: f64,
    pub per_class_sensitivity: BTreeMap<EmotionLabel, f64>,
    pub balanced_accuracy: f64,
    pub mean_sensitivity: f64,
    pub sensitivity_sd: Option<f64>,
    pub balanced_accuracy_support: f64,
}

pub fn read_table_csv(path: impl AsRef<Path>) -> Result<Vec<TableRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != report_csv_header() {
        return Err(Error::ReportFormat(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::ReportFormat(format!("bad number {s:?}")))
    };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == "-" {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::ReportFormat(format!("row has {} cells", rec.len())));
        }
        let mut per_class = BTreeMap::new();
        for (i, c) in EmotionLabel::CLASSES.iter().enumerate() {
            if let Some(v) = opt(&rec[2 + i])? {
                per_class.insert(*c, v);
            }
        }
        rows.push(TableRow {
            run: rec[0].to_string(),
            accuracy: num(&rec[1])?,
            per_class_sensitivity: per_class,
            balanced_accuracy: num(&rec[10])?,
            mean_sensitivity: num(&rec[11])?,
            sensitivity_sd: opt(&rec[12])?,
            balanced_accuracy_support: num(&rec[13])?,
        });
    }
    Ok(rows)
}

/// Fixed-width text rendering of a results table.
pub fn render_table_text(rows: &[(String, MetricsReport)]) -> String {
    let header = report_csv_header();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(run, r)| {
            let mut cells = r.csv_row(run);
            // three decimals, as printed in result tables
            for c in cells.iter_mut().skip(1) {
                if let Ok(v) = c.parse::<f64>() {
                    *c = format!("{v:.3}");
                }
            }
            cells
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            body.iter()
                .map(|r| r[i].len())
                .chain(std::iter::once(header[i].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
