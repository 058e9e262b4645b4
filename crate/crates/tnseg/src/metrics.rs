//! Evaluation metrics over FOV-masked pixels: AUC, AUPR, F1, sensitivity,
//! specificity, accuracy.
//!
//! AUC uses the rank-sum (Mann-Whitney) formulation with ties counted as
//! one half. AUPR integrates the precision-recall curve step-wise
//! (right-continuous), not trapezoidally. Binary metrics threshold at
//! `score >= threshold`.

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Which binary metrics hit a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DegenerateFlags {
    pub f1: bool,
    pub se: bool,
    pub sp: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BinaryMetrics {
    pub f1: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub flags: DegenerateFlags,
}

/// All six metrics for one image, plus enough to recompute them.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub auc: f64,
    pub aupr: f64,
    pub f1: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub threshold: f64,
    pub n_pos: u64,
    pub n_neg: u64,
    pub confusion: Confusion,
    pub flags: DegenerateFlags,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "image,auc,aupr,f1,se,sp,acc"
    }

    pub fn csv_row(&self, image: &str) -> String {
        format!(
            "{image},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.auc, self.aupr, self.f1, self.se, self.sp, self.acc
        )
    }

    /// Field-wise mean over per-image reports.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut mean = reports[0].clone();
        mean.auc = sum(|r| r.auc);
        mean.aupr = sum(|r| r.aupr);
        mean.f1 = sum(|r| r.f1);
        mean.se = sum(|r| r.se);
        mean.sp = sum(|r| r.sp);
        mean.acc = sum(|r| r.acc);
        Some(mean)
    }
}

/// Pulls the masked-in (score, label) pairs out of image-shaped tensors.
pub fn masked_pairs(
    prob_map: &Tensor,
    label: &Tensor,
    mask: &Tensor,
) -> Result<(Vec<f64>, Vec<bool>)> {
    same_shape("metrics label", prob_map.shape(), label.shape())?;
    same_shape("metrics mask", prob_map.shape(), mask.shape())?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for ((&s, &y), &m) in prob_map.data().iter().zip(label.data()).zip(mask.data()) {
        match m {
            0.0 => continue,
            1.0 => {
                if y != 0.0 && y != 1.0 {
                    return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
                }
                scores.push(s);
                labels.push(y == 1.0);
            }
            _ => return Err(Error::InvalidArgument("mask must be 0 or 1".into())),
        }
    }
    Ok((scores, labels))
}

/// Thresholded confusion counts; requires both classes in the masked set.
pub fn confusion(
    prob_map: &Tensor,
    label: &Tensor,
    mask: &Tensor,
    threshold: f64,
) -> Result<Confusion> {
    let (scores, labels) = masked_pairs(prob_map, label, mask)?;
    confusion_counts(&scores, &labels, threshold)
}

pub fn confusion_counts(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::SingleClass);
    }
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// SE, SP, ACC, F1 from confusion counts. A zero denominator reports the
/// metric as 0 and raises its flag.
pub fn binary_metrics(c: &Confusion) -> BinaryMetrics {
    let mut flags = DegenerateFlags::default();
    let ratio = |num: u64, den: u64, flag: &mut bool| {
        if den == 0 {
            *flag = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let se = ratio(c.tp, c.tp + c.fn_, &mut flags.se);
    let sp = ratio(c.tn, c.tn + c.fp, &mut flags.sp);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, &mut flags.f1);
    let acc = (c.tp + c.tn) as f64 / c.total() as f64;
    BinaryMetrics { f1, se, sp, acc, flags }
}

/// Area under the ROC curve, rank-sum formulation with half-credit ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups (1-based).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Area under the precision-recall curve by step-wise interpolation:
/// `sum (R_i - R_{i-1}) * P_i` over distinct-score thresholds, descending.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut area = 0.0;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut recall_prev = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j;
    }
    Ok(area)
}

/// All six metrics of one image over its FOV mask.
pub fn evaluate(
    prob_map: &Tensor,
    label: &Tensor,
    mask: &Tensor,
    threshold: f64,
) -> Result<MetricsReport> {
    let (scores, labels) = masked_pairs(prob_map, label, mask)?;
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    let c = confusion_counts(&scores, &labels, threshold)?;
    let b = binary_metrics(&c);
    Ok(MetricsReport {
        auc: auc(&scores, &labels)?,
        aupr: aupr(&scores, &labels)?,
        f1: b.f1,
        se: b.se,
        sp: b.sp,
        acc: b.acc,
        threshold,
        n_pos,
        n_neg,
        confusion: c,
        flags: b.flags,
    })
}
