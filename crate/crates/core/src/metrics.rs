//! Confusion-matrix evaluation: per-class IoU, mean IoU and pixel accuracy.
//!
//! Scores are pooled: a single confusion matrix is accumulated over every
//! test pixel and IoU is computed once from it, rather than per image.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::probmap::LabelMask;

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|k| self.get(k, k)).sum()
    }

    /// Adds every `(gt, pred)` pixel pair of one image.
    pub fn accumulate(&mut self, image_id: &str, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::invalid(format!(
                "{image_id}: prediction is {}x{} but ground truth is {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        let c = self.num_classes;
        gt.check_classes(c, &format!("{image_id} (ground truth)"))?;
        pred.check_classes(c, &format!("{image_id} (prediction)"))?;
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            self.counts[usize::from(g) * c + usize::from(p)] += 1;
        }
        Ok(())
    }

    /// Adds another matrix's counts into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::invalid(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the class never occurs in
    /// either ground truth or prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fp: u64 = (0..c).filter(|&g| g != k).map(|g| self.get(g, k)).sum();
                let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| self.get(k, p)).sum();
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyEvaluation);
        }
        Ok(self.trace() as f64 / total as f64)
    }

    pub fn report(&self) -> Result<EvalReport> {
        let per_class_iou = self.iou_per_class();
        Ok(EvalReport {
            num_classes: self.num_classes,
            evaluated_classes: per_class_iou.iter().flatten().count(),
            mean_iou: self.mean_iou()?,
            pixel_accuracy: self.pixel_accuracy()?,
            per_class_iou,
        })
    }
}

/// Field order is the JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub evaluated_classes: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    /// Aligned plain-text table in percent, two decimals.
    pub fn to_table(&self, class_names: Option<&[String]>) -> String {
        let name = |k: usize| match class_names {
            Some(names) => names[k].clone(),
            None => format!("class{k}"),
        };
        let mut rows: Vec<(String, String)> = (0..self.num_classes)
            .map(|k| {
                let value = self.per_class_iou[k]
                    .map(format_percent)
                    .unwrap_or_else(|| "-".to_string());
                (format!("IoU {}", name(k)), value)
            })
            .collect();
        rows.push(("Mean IoU".into(), format_percent(self.mean_iou)));
        rows.push(("Pixel accuracy".into(), format_percent(self.pixel_accuracy)));
        rows.push((
            "Evaluated classes".into(),
            format!("{}/{}", self.evaluated_classes, self.num_classes),
        ));

        let key_width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let value_width = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        let mut out = String::from("# dataset-pooled confusion matrix; values in percent\n");
        for (key, value) in rows {
            let _ = writeln!(out, "{key:<key_width$}  {value:>value_width$}");
        }
        out
    }
}

/// Formats a fraction as a percentage with two decimals, rounding half to even.
pub fn format_percent(fraction: f64) -> String {
    let hundredths = (fraction * 10_000.0).round_ties_even() as i64;
    let sign = if hundredths < 0 { "-" } else { "" };
    let abs = hundredths.unsigned_abs();
    format!("{sign}{}.{:02}", abs / 100, abs % 100)
}
