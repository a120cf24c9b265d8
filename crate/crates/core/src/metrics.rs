//! F-measure and mean IoU.
//!
//! Saliency runs binarize each map (adaptive `2 × mean` threshold unless a
//! fixed one is given), compute precision and recall per image, and average
//! them over the dataset. IoU always comes from one dataset-wide confusion
//! matrix, rows indexed by ground truth and columns by prediction.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::IGNORE_LABEL;
use crate::model::SegNet;
use crate::tensor::Tensor;

/// β² used for F-measure unless stated otherwise; weights precision over recall.
pub const DEFAULT_BETA2: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Task {
    #[default]
    Saliency,
    Multiclass(usize),
}

impl Task {
    /// Channels the network head must produce.
    pub fn out_channels(self) -> usize {
        match self {
            Task::Saliency => 1,
            Task::Multiclass(k) => k,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Task::Saliency => 2,
            Task::Multiclass(k) => k,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Saliency => f.write_str("saliency"),
            Task::Multiclass(k) => write!(f, "multiclass:{k}"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "saliency" {
            return Ok(Task::Saliency);
        }
        let k = s
            .strip_prefix("multiclass:")
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))?;
        if !(2..IGNORE_LABEL).contains(&k) {
            return Err(Error::Config(format!("class count {k} outside 2..255")));
        }
        Ok(Task::Multiclass(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ThresholdMode {
    /// `min(2 × mean(map), 1)` per image.
    #[default]
    Adaptive,
    Fixed(f64),
}

impl ThresholdMode {
    pub fn for_map(self, map: &[f64]) -> f64 {
        match self {
            ThresholdMode::Fixed(t) => t,
            ThresholdMode::Adaptive => {
                let mean = map.iter().sum::<f64>() / map.len().max(1) as f64;
                (2.0 * mean).clamp(0.0, 1.0)
            }
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::Adaptive => f.write_str("adaptive"),
            ThresholdMode::Fixed(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(ThresholdMode::Adaptive);
        }
        match s.parse::<f64>() {
            Ok(t) if (0.0..=1.0).contains(&t) => Ok(ThresholdMode::Fixed(t)),
            _ => Err(Error::Config(format!("threshold must be 'adaptive' or in [0,1], got {s:?}"))),
        }
    }
}

fn binary_value(v: f64) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::InvalidMask {
            value: v,
            task: "binary mask".into(),
        })
    }
}

/// Precision and recall of a binary prediction.
///
/// Empty prediction gives precision 0, empty ground truth gives recall 0,
/// except that an empty prediction of an empty ground truth scores `(1, 1)`.
pub fn precision_recall(pred: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            axis: "pixels",
            left: pred.len(),
            right: gt.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (binary_value(p)?, binary_value(g)?) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(precision_recall_from_counts(tp, fp, fn_))
}

pub(crate) fn precision_recall_from_counts(tp: u64, fp: u64, fn_: u64) -> (f64, f64) {
    if tp + fp == 0 && tp + fn_ == 0 {
        return (1.0, 1.0);
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

/// `(1 + β²)·P·R / (β²·P + R)`, or 0 when the denominator vanishes.
pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

/// Pixels at or above `threshold` become 1.
pub fn binarize(map: &Tensor, threshold: f64) -> Tensor {
    map.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// `K × K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Count class maps of equal length; ground-truth pixels equal to 255 are skipped.
    pub fn accumulate(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                axis: "pixels",
                left: pred.len(),
                right: gt.len(),
            });
        }
        let k = self.classes;
        let class = |v: f64, what: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < k {
                Ok(v as usize)
            } else {
                Err(Error::InvalidMask {
                    value: v,
                    task: format!("{what} of a {k}-class map"),
                })
            }
        };
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL as f64 {
                continue;
            }
            let (gi, pi) = (class(g, "ground truth")?, class(p, "prediction")?);
            self.counts[gi * k + pi] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                axis: "classes",
                left: self.classes,
                right: other.classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both ground truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let inter = self.get(c, c);
                let union = row + col - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over present classes; 0 when no class is present.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    pub images: usize,
    /// Mean per-image precision (saliency only).
    pub precision: Option<f64>,
    /// Mean per-image recall (saliency only).
    pub recall: Option<f64>,
    /// F-measure of the reported precision and recall.
    pub f_beta: Option<f64>,
    /// Mean of the per-image F-measures.
    pub mean_image_f_beta: Option<f64>,
    pub beta2: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub threshold: Option<ThresholdMode>,
}

impl MetricReport {
    /// IoU of the foreground class of a saliency run.
    pub fn foreground_iou(&self) -> Option<f64> {
        match self.task {
            Task::Saliency => self.per_class_iou.get(1).copied().flatten().or(Some(0.0)),
            Task::Multiclass(_) => None,
        }
    }

    /// `key=value` lines for scripts.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task={}", self.task);
        let _ = writeln!(s, "images={}", self.images);
        if let Some(t) = self.threshold {
            let _ = writeln!(s, "threshold={t}");
        }
        for (k, v) in [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f_beta", self.f_beta),
            ("mean_image_f_beta", self.mean_image_f_beta),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k}={v:.4}");
            }
        }
        let _ = writeln!(s, "beta2={}", self.beta2);
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "iou.{c}={v:.4}");
                }
                None => {
                    let _ = writeln!(s, "iou.{c}=absent");
                }
            }
        }
        let _ = writeln!(s, "mean_iou={:.4}", self.mean_iou);
        s
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {}", "task", self.task);
        let _ = writeln!(s, "{:<20} {}", "images", self.images);
        if let Some(t) = self.threshold {
            let _ = writeln!(s, "{:<20} {}", "threshold", t);
        }
        for (k, v) in [
            ("precision", self.precision),
            ("recall", self.recall),
            ("F-measure", self.f_beta),
            ("mean image F", self.mean_image_f_beta),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k:<20} {v:.4}");
            }
        }
        let _ = writeln!(s, "{:<20} {:.4}", "mean IoU", self.mean_iou);
        let _ = writeln!(s, "{:<8} {:>8}", "class", "IoU");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "{c:<8} {v:>8.4}");
                }
                None => {
                    let _ = writeln!(s, "{c:<8} {:>8}", "-");
                }
            }
        }
        s
    }
}

fn argmax_channels(pred: &Tensor, classes: usize, pixels: usize) -> Result<Vec<f64>> {
    if pred.len() != classes * pixels {
        return Err(Error::ChannelMismatch {
            expected: classes,
            got: pred.len() / pixels.max(1),
        });
    }
    let d = pred.data();
    Ok((0..pixels)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if d[c * pixels + p] > d[best * pixels + p] {
                    best = c;
                }
            }
            best as f64
        })
        .collect())
}

/// Score saved predictions against ground-truth masks.
///
/// Saliency predictions are single-channel maps in `[0, 1]`; multi-class
/// predictions are `K`-channel scores (logits or probabilities) per image.
pub fn evaluate_predictions(
    preds: &[Tensor],
    masks: &[Tensor],
    task: Task,
    threshold: ThresholdMode,
    beta2: f64,
) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            axis: "images",
            left: preds.len(),
            right: masks.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(task.classes());
    let n = preds.len() as f64;
    match task {
        Task::Saliency => {
            let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
            for (pred, gt) in preds.iter().zip(masks) {
                let t = threshold.for_map(pred.data());
                let bin = binarize(pred, t);
                let (p, r) = precision_recall(&bin, gt)?;
                p_sum += p;
                r_sum += r;
                f_sum += f_measure(p, r, beta2);
                cm.accumulate(bin.data(), gt.data())?;
            }
            let (p, r) = (p_sum / n, r_sum / n);
            Ok(MetricReport {
                task,
                images: preds.len(),
                precision: Some(p),
                recall: Some(r),
                f_beta: Some(f_measure(p, r, beta2)),
                mean_image_f_beta: Some(f_sum / n),
                beta2,
                per_class_iou: cm.per_class_iou(),
                mean_iou: cm.mean_iou(),
                threshold: Some(threshold),
            })
        }
        Task::Multiclass(k) => {
            for (pred, gt) in preds.iter().zip(masks) {
                let classes = argmax_channels(pred, k, gt.len())?;
                cm.accumulate(&classes, gt.data())?;
            }
            Ok(MetricReport {
                task,
                images: preds.len(),
                precision: None,
                recall: None,
                f_beta: None,
                mean_image_f_beta: None,
                beta2,
                per_class_iou: cm.per_class_iou(),
                mean_iou: cm.mean_iou(),
                threshold: None,
            })
        }
    }
}

/// Run `net` over every sample and score the predictions.
pub fn evaluate_dataset(
    net: &SegNet,
    samples: &[Sample],
    task: Task,
    threshold: ThresholdMode,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if net.out_channels() != task.out_channels() {
        return Err(Error::ChannelMismatch {
            expected: task.out_channels(),
            got: net.out_channels(),
        });
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        let x = Tensor::stack(&[&s.image])?;
        preds.push(net.predict_rgb(&x)?);
        masks.push(s.mask.clone());
    }
    evaluate_predictions(&preds, &masks, task, threshold, DEFAULT_BETA2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn precision_recall_cases() {
        let gt = mask(&[1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(precision_recall(&gt, &gt).unwrap(), (1.0, 1.0));
        let pred = mask(&[1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(precision_recall(&pred, &gt).unwrap(), (0.5, 1.0));
        let empty = mask(&[0.0; 5]);
        assert_eq!(precision_recall(&empty, &gt).unwrap(), (0.0, 0.0));
        assert_eq!(precision_recall(&empty, &empty).unwrap(), (1.0, 1.0));
        assert_eq!(precision_recall(&gt, &empty).unwrap(), (0.0, 0.0));
        assert!(precision_recall(&mask(&[0.5]), &mask(&[1.0])).is_err());
    }

    #[test]
    fn f_measure_values() {
        assert_eq!(f_measure(1.0, 1.0, DEFAULT_BETA2), 1.0);
        assert!((f_measure(0.5, 0.5, DEFAULT_BETA2) - 0.5).abs() < 1e-15);
        assert!((f_measure(0.8, 0.4, DEFAULT_BETA2) - 0.65).abs() < 1e-12);
        assert_eq!(f_measure(0.0, 0.0, DEFAULT_BETA2), 0.0);
    }

    #[test]
    fn binarize_cases() {
        let m = mask(&[0.2, 0.7]);
        assert_eq!(binarize(&m, 0.5).data(), &[0.0, 1.0]);
        assert_eq!(binarize(&m, 0.0).data(), &[1.0, 1.0]);
        assert_eq!(binarize(&m, 0.7 + 1e-12).data(), &[0.0, 0.0]);
    }

    #[test]
    fn iou_cases() {
        let gt = [0.0, 1.0, 1.0, 0.0];
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(1.0), Some(1.0)]);
        assert_eq!(cm.mean_iou(), 1.0);

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1.0, 0.0, 0.0, 1.0], &gt).unwrap();
        assert_eq!(cm.per_class_iou()[1], Some(0.0));

        // |GT| = 2k with k = 3, prediction covers half of it
        let gt = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let pred = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.per_class_iou()[1], Some(0.5));
    }

    #[test]
    fn absent_classes_leave_the_mean() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(1.0), Some(1.0), None]);
        assert_eq!(cm.mean_iou(), 1.0);
    }

    #[test]
    fn ignore_label_is_skipped() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1.0, 0.0], &[255.0, 0.0]).unwrap();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.per_class_iou(), vec![Some(1.0), None]);
        assert!(cm.accumulate(&[2.0], &[0.0]).is_err());
    }

    #[test]
    fn task_and_threshold_parsing() {
        assert_eq!("saliency".parse::<Task>().unwrap(), Task::Saliency);
        assert_eq!("multiclass:19".parse::<Task>().unwrap(), Task::Multiclass(19));
        assert!("multiclass:1".parse::<Task>().is_err());
        assert_eq!("adaptive".parse::<ThresholdMode>().unwrap(), ThresholdMode::Adaptive);
        assert_eq!("0.5".parse::<ThresholdMode>().unwrap(), ThresholdMode::Fixed(0.5));
        assert!("1.5".parse::<ThresholdMode>().is_err());
        assert_eq!(ThresholdMode::Adaptive.for_map(&[0.1, 0.3]), 0.4);
        assert_eq!(ThresholdMode::Adaptive.for_map(&[0.9, 0.9]), 1.0);
    }

    #[test]
    fn report_fields_are_consistent() {
        let preds = [mask(&[0.9, 0.8, 0.1, 0.0]), mask(&[0.2, 0.9, 0.9, 0.0])];
        let gts = [mask(&[1.0, 1.0, 0.0, 0.0]), mask(&[0.0, 1.0, 0.0, 0.0])];
        let r = evaluate_predictions(&preds, &gts, Task::Saliency, ThresholdMode::Fixed(0.5), 0.3).unwrap();
        let f = f_measure(r.precision.unwrap(), r.recall.unwrap(), 0.3);
        assert!((r.f_beta.unwrap() - f).abs() <= 1e-12);
        assert!(r.to_kv().contains("f_beta="));
    }
}
