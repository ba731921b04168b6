//! Confusion-matrix accumulation and the segmentation scores derived from it.
//!
//! OA covers every class; mF1 and mIoU average over the foreground classes
//! only, skipping classes absent from both ground truth and prediction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// Rows are ground truth, columns are predictions.
    pub counts: Array2<u64>,
    pub foreground: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, foreground: Vec<usize>) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
            foreground,
        }
    }

    /// Foreground = every class except `background`.
    pub fn with_background(num_classes: usize, background: Option<usize>) -> Self {
        let fg = (0..num_classes).filter(|&c| Some(c) != background).collect();
        Self::new(num_classes, fg)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Adds one count per pixel at `[gt, pred]`. Pixels whose ground truth
    /// equals `ignore` are skipped. On a range error nothing is added.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize], ignore: Option<usize>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes();
        for (pixel, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if Some(g) == ignore {
                continue;
            }
            for value in [g, p] {
                if value >= k {
                    return Err(Error::Label {
                        pixel,
                        value,
                        num_classes: k,
                    });
                }
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) != ignore {
                self.counts[[g, p]] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.counts[[c, c]];
        let fp = self.counts.column(c).sum() - tp;
        let fn_ = self.counts.row(c).sum() - tp;
        (tp, fp, fn_)
    }

    /// `None` when the class never occurs in ground truth or prediction.
    pub fn class_f1(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let den = 2 * tp + fp + fn_;
        (den > 0).then(|| 2.0 * tp as f64 / den as f64)
    }

    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let den = tp + fp + fn_;
        (den > 0).then(|| tp as f64 / den as f64)
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.counts.diag().sum() as f64 / total as f64
    }

    fn foreground_mean(&self, f: impl Fn(usize) -> Option<f64>) -> f64 {
        let scores: Vec<f64> = self.foreground.iter().filter_map(|&c| f(c)).collect();
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }

    pub fn mean_f1(&self) -> f64 {
        self.foreground_mean(|c| self.class_f1(c))
    }

    pub fn mean_iou(&self) -> f64 {
        self.foreground_mean(|c| self.class_iou(c))
    }

    pub fn report(&self, class_names: &[String]) -> MetricsReport {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
        let per_class = (0..self.num_classes())
            .map(|c| ClassScores {
                id: c,
                name: name(c),
                f1: self.class_f1(c),
                iou: self.class_iou(c),
                gt_pixels: self.counts.row(c).sum(),
                pred_pixels: self.counts.column(c).sum(),
                foreground: self.foreground.contains(&c),
            })
            .collect();
        MetricsReport {
            oa: self.overall_accuracy(),
            mf1: self.mean_f1(),
            miou: self.mean_iou(),
            pixels: self.total(),
            per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub id: usize,
    pub name: String,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub gt_pixels: u64,
    pub pred_pixels: u64,
    pub foreground: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub mf1: f64,
    pub miou: f64,
    pub pixels: u64,
    pub per_class: Vec<ClassScores>,
}
