//! Split conformal prediction over classifier softmax outputs.
//!
//! The nonconformity score is `1 - p[y]`. Calibration takes the
//! `ceil((l + 1)(1 - alpha))`-th smallest calibration score as the threshold;
//! a prediction set keeps every label whose score does not exceed it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

#[derive(Debug, Error, PartialEq)]
pub enum ConformalError {
    #[error("calibration scores are empty")]
    EmptyCalibration,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("k = {k} outside [1, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("{sets} prediction sets but {labels} labels")]
    LengthMismatch { sets: usize, labels: usize },
    #[error("no prediction sets to evaluate")]
    Empty,
}

/// Nonconformity score of `label`.
pub fn score(probs: &[f64], label: Label) -> f64 {
    1.0 - probs[label]
}

/// Calibrated threshold `q_hat`. An infinite `q_hat` means the calibration
/// set is too small for the requested `alpha` and every set is the full
/// label space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalThreshold {
    pub q_hat: f64,
    pub alpha: f64,
    /// Number of calibration scores.
    pub l: usize,
}

impl ConformalThreshold {
    pub fn is_infinite(&self) -> bool {
        self.q_hat.is_infinite()
    }

    /// `q_hat` with the infinite sentinel mapped to `None`.
    pub fn finite_q_hat(&self) -> Option<f64> {
        (!self.is_infinite()).then_some(self.q_hat)
    }
}

/// 1-based rank `ceil((l + 1)(1 - alpha))` of the calibration order statistic.
///
/// Products that are integers in exact arithmetic (`5 * 0.8`) may land one
/// ulp above the integer in floating point, so a 1e-9 slack is subtracted
/// before rounding up.
pub fn quantile_rank(l: usize, alpha: f64) -> usize {
    let raw = ((l as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil();
    (raw.max(1.0)) as usize
}

pub fn calibrate(cal_scores: &[f64], alpha: f64) -> Result<ConformalThreshold, ConformalError> {
    if cal_scores.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    let l = cal_scores.len();
    let rank = quantile_rank(l, alpha);
    let q_hat = if rank > l {
        f64::INFINITY
    } else {
        let mut sorted = cal_scores.to_vec();
        let (_, kth, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
        *kth
    };
    Ok(ConformalThreshold { q_hat, alpha, l })
}

/// Where a prediction set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetSource {
    Conformal,
    TopK(usize),
    Full,
}

/// Nonempty, strictly ascending set of labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    labels: Vec<Label>,
    pub source: SetSource,
    /// The conformal rule produced no label and the argmax was substituted.
    pub forced: bool,
}

impl PredictionSet {
    /// Builds a set from arbitrary labels; duplicates are removed.
    ///
    /// # Panics
    /// If `labels` is empty.
    pub fn new(mut labels: Vec<Label>, source: SetSource) -> Self {
        assert!(!labels.is_empty(), "prediction sets are nonempty");
        labels.sort_unstable();
        labels.dedup();
        Self {
            labels,
            source,
            forced: false,
        }
    }

    pub fn full(n: usize) -> Self {
        Self::new((0..n).collect(), SetSource::Full)
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, label: Label) -> bool {
        self.labels.binary_search(&label).is_ok()
    }

    /// Position of `label` inside the set.
    pub fn position(&self, label: Label) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn is_singleton(&self) -> bool {
        self.labels.len() == 1
    }

    /// Label of highest probability inside the set; ties go to the lower label.
    pub fn argmax_within(&self, probs: &[f64]) -> Label {
        let mut best = self.labels[0];
        for &y in &self.labels[1..] {
            if probs[y] > probs[best] {
                best = y;
            }
        }
        best
    }
}

/// Label of highest probability; ties go to the lower label.
pub fn argmax(probs: &[f64]) -> Label {
    let mut best = 0;
    for (y, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = y;
        }
    }
    best
}

/// Conformal set `{y : 1 - p[y] <= q_hat}`, or the argmax singleton when no
/// label qualifies.
pub fn predict_set(probs: &[f64], threshold: &ConformalThreshold) -> PredictionSet {
    let labels: Vec<Label> = (0..probs.len())
        .filter(|&y| score(probs, y) <= threshold.q_hat)
        .collect();
    if labels.is_empty() {
        let mut set = PredictionSet::new(vec![argmax(probs)], SetSource::Conformal);
        set.forced = true;
        set
    } else {
        PredictionSet::new(labels, SetSource::Conformal)
    }
}

/// The `k` most probable labels, probability ties broken toward the lower label.
pub fn topk_set(probs: &[f64], k: usize) -> Result<PredictionSet, ConformalError> {
    let n = probs.len();
    if k == 0 || k > n {
        return Err(ConformalError::KOutOfRange { k, n });
    }
    let mut order: Vec<Label> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(PredictionSet::new(order, SetSource::TopK(k)))
}

/// Empirical coverage and set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub marginal_coverage: f64,
    /// `None` for classes absent from the evaluated labels.
    pub per_class_coverage: Vec<Option<f64>>,
    pub mean_set_size: f64,
    pub count: usize,
}

pub fn coverage(
    sets: &[PredictionSet],
    true_labels: &[Label],
    n: usize,
) -> Result<CoverageReport, ConformalError> {
    if sets.len() != true_labels.len() {
        return Err(ConformalError::LengthMismatch {
            sets: sets.len(),
            labels: true_labels.len(),
        });
    }
    let mut acc = CoverageAccumulator::new(n);
    for (set, &y) in sets.iter().zip(true_labels) {
        acc.add(set, y);
    }
    acc.report().ok_or(ConformalError::Empty)
}

/// Streaming form of [`coverage`], used when sets are not kept around.
#[derive(Debug, Clone)]
pub struct CoverageAccumulator {
    covered: Vec<u64>,
    seen: Vec<u64>,
    size_total: u64,
    count: u64,
}

impl CoverageAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            covered: vec![0; n],
            seen: vec![0; n],
            size_total: 0,
            count: 0,
        }
    }

    pub fn add(&mut self, set: &PredictionSet, y: Label) {
        self.seen[y] += 1;
        if set.contains(y) {
            self.covered[y] += 1;
        }
        self.size_total += set.len() as u64;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.covered.iter_mut().zip(&other.covered) {
            *a += b;
        }
        for (a, b) in self.seen.iter_mut().zip(&other.seen) {
            *a += b;
        }
        self.size_total += other.size_total;
        self.count += other.count;
    }

    pub fn report(&self) -> Option<CoverageReport> {
        if self.count == 0 {
            return None;
        }
        let covered: u64 = self.covered.iter().sum();
        Some(CoverageReport {
            marginal_coverage: covered as f64 / self.count as f64,
            per_class_coverage: self
                .covered
                .iter()
                .zip(&self.seen)
                .map(|(&c, &s)| (s > 0).then(|| c as f64 / s as f64))
                .collect(),
            mean_set_size: self.size_total as f64 / self.count as f64,
            count: self.count as usize,
        })
    }
}
