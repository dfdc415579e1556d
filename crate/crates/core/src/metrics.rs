//! Confusion counts, IoU and F1 scores, result tables and prediction export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, RasterImage};
use crate::error::{shape_err, Error, Result};

/// How classes with no pixels in either prediction or ground truth enter means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    #[default]
    Exclude,
    CountAsZero,
}

/// `C × C` confusion matrix indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    num_classes: usize,
    matrix: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            num_classes,
            matrix: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cell(&self, gt: usize, pred: usize) -> u64 {
        self.matrix[gt * self.num_classes + pred]
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err!("{} predictions for {} labels", pred.len(), gt.len()));
        }
        let c = self.num_classes;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v as usize >= c) {
            return Err(Error::InvalidArgument(format!("class {} out of range for {} classes", bad, c)));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.matrix[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn accumulate_map(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(shape_err!(
                "prediction {}×{} vs label {}×{}",
                pred.height,
                pred.width,
                gt.height,
                gt.width
            ));
        }
        self.accumulate(&pred.classes, &gt.classes)
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(shape_err!(
                "cannot merge counts over {} and {} classes",
                self.num_classes,
                other.num_classes
            ));
        }
        for (a, &b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().sum()
    }

    pub fn tp(&self, k: usize) -> u64 {
        self.cell(k, k)
    }

    pub fn fp(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|g| self.cell(g, k)).sum::<u64>() - self.tp(k)
    }

    pub fn fn_(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|p| self.cell(k, p)).sum::<u64>() - self.tp(k)
    }

    pub fn tn(&self, k: usize) -> u64 {
        self.total() - self.tp(k) - self.fp(k) - self.fn_(k)
    }

    /// Per-class IoU `tp / (tp + fp + fn)`.
    pub fn iou(&self, policy: UndefinedPolicy) -> Scores {
        let per_class = (0..self.num_classes)
            .map(|k| {
                let (tp, fp, fn_) = (self.tp(k), self.fp(k), self.fn_(k));
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        Scores::new(per_class, policy)
    }

    /// Per-class F1 `2PR / (P + R)`, zero when both are zero.
    pub fn f1(&self, policy: UndefinedPolicy) -> Scores {
        let per_class = (0..self.num_classes)
            .map(|k| {
                let (tp, fp, fn_) = (self.tp(k), self.fp(k), self.fn_(k));
                if tp + fp + fn_ == 0 {
                    return None;
                }
                if tp == 0 {
                    return Some(0.0);
                }
                let precision = tp as f64 / (tp + fp) as f64;
                let recall = tp as f64 / (tp + fn_) as f64;
                Some(2.0 * precision * recall / (precision + recall))
            })
            .collect();
        Scores::new(per_class, policy)
    }

    pub fn evaluate(&self, policy: UndefinedPolicy) -> EvalResult {
        EvalResult {
            iou: self.iou(policy),
            f1: self.f1(policy),
        }
    }
}

/// Per-class scores, `None` where undefined, and their mean under a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

impl Scores {
    fn new(per_class: Vec<Option<f64>>, policy: UndefinedPolicy) -> Self {
        let values: Vec<f64> = match policy {
            UndefinedPolicy::Exclude => per_class.iter().flatten().copied().collect(),
            UndefinedPolicy::CountAsZero => per_class.iter().map(|v| v.unwrap_or(0.0)).collect(),
        };
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        Scores { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou: Scores,
    pub f1: Scores,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Json,
}

/// Named rows of results sharing one class list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub classes: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub result: EvalResult,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl ResultTable {
    pub fn new(classes: Vec<String>) -> Self {
        ResultTable { classes, rows: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, result: EvalResult) -> Result<()> {
        if result.iou.per_class.len() != self.classes.len() || result.f1.per_class.len() != self.classes.len() {
            return Err(shape_err!("result row does not cover {} classes", self.classes.len()));
        }
        self.rows.push(TableRow {
            name: name.into(),
            result,
        });
        Ok(())
    }

    /// Per-class IoU/F1 column pairs followed by mIoU and mF, as percentages.
    pub fn emit(&self, format: TableFormat) -> Result<String> {
        match format {
            TableFormat::Json => serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string())),
            TableFormat::Text => Ok(self.emit_text()),
        }
    }

    fn emit_text(&self) -> String {
        let mut header = vec!["method".to_string()];
        for c in &self.classes {
            header.push(format!("{} IoU", c));
            header.push(format!("{} F1", c));
        }
        header.push("mIoU".into());
        header.push("mF".into());
        let mut cells = vec![header];
        for row in &self.rows {
            let mut line = vec![row.name.clone()];
            for k in 0..self.classes.len() {
                line.push(pct(row.result.iou.per_class[k]));
                line.push(pct(row.result.f1.per_class[k]));
            }
            line.push(pct(row.result.iou.mean));
            line.push(pct(row.result.f1.mean));
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|j| cells.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, &w))| {
                    if j == 0 {
                        format!("{:<w$}", cell, w = w)
                    } else {
                        format!("{:>w$}", cell, w = w)
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        }
        out
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Fixed six-color palette for colorized predictions; classes beyond it wrap.
pub const PALETTE: [[u8; 3]; 6] = [
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

pub fn colorize(label: &LabelMap) -> Result<RasterImage> {
    let pixels = label
        .classes
        .iter()
        .flat_map(|&c| PALETTE[c as usize % PALETTE.len()])
        .collect();
    RasterImage::new(label.height, label.width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts_from(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        // class 0 with the given counts against a filler class 1
        let mut c = ConfusionCounts::new(2);
        c.matrix[0] = tp;
        c.matrix[2] = fp;
        c.matrix[1] = fn_;
        c
    }

    #[test]
    fn formula_examples() {
        let c = counts_from(1, 1, 2);
        assert_eq!((c.tp(0), c.fp(0), c.fn_(0)), (1, 1, 2));
        assert_eq!(c.iou(UndefinedPolicy::Exclude).per_class[0], Some(0.25));
        let c = counts_from(2, 2, 2);
        assert_eq!(c.f1(UndefinedPolicy::Exclude).per_class[0], Some(0.5));
    }

    #[test]
    fn undefined_policy() {
        let mut c = ConfusionCounts::new(3);
        c.accumulate(&[0, 1, 1], &[0, 1, 1]).unwrap();
        let ex = c.iou(UndefinedPolicy::Exclude);
        assert_eq!(ex.per_class[2], None);
        assert_eq!(ex.mean, Some(1.0));
        let zero = c.iou(UndefinedPolicy::CountAsZero);
        assert!((zero.mean.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_single_class_table() {
        let mut c = ConfusionCounts::new(1);
        c.accumulate(&[0; 4], &[0; 4]).unwrap();
        let mut t = ResultTable::new(vec!["a".into()]);
        t.push("run", c.evaluate(UndefinedPolicy::Exclude)).unwrap();
        let text = t.emit(TableFormat::Text).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(row, ["run", "100.00", "100.00", "100.00", "100.00"]);
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let mut c = ConfusionCounts::new(2);
        assert!(c.accumulate(&[2], &[0]).is_err());
        assert!(c.accumulate(&[0, 1], &[0]).is_err());
    }
}
