//! Monte Carlo diagnostics for the accuracy lower bounds of the combined
//! system.
//!
//! The first bound states that the probability of answering correctly with
//! the true label inside the set is at least the probability that the
//! product of the experts' odds at the true label exceeds one, times the
//! set's coverage level `1 - alpha`. The second compares, on instances where
//! set-restricted odds exceed full-space odds by more than one, the event
//! that full-space odds beat the classifier's own odds against the event
//! that restricted odds exceed one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experts::ConfusionMatrix;
use crate::selection::{odds, RestrictedSuccessMatrix};
use crate::Label;

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("no traces to aggregate")]
    EmptyTrace,
    #[error("no record satisfies the epsilon > 1 assumption")]
    EmptyAfterFilter,
}

/// Inputs of the first bound for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Record {
    pub correct: bool,
    pub covered: bool,
    /// Product over all experts of the restricted odds at the true label;
    /// `None` when the true label is outside the set.
    pub odds_product: Option<f64>,
}

/// Product of the clamped odds `R[y][p_i] / (1 - R[y][p_i])` over experts,
/// or `None` when `y` is not in the set.
pub fn restricted_odds_product(
    y: Label,
    restricted: &[RestrictedSuccessMatrix],
    preds: &[Label],
) -> Option<f64> {
    restricted
        .iter()
        .zip(preds)
        .map(|(r, &p)| r.get(y, p).map(odds))
        .product()
}

/// Product of the clamped full-space odds `C[y][p_i] / (1 - C[y][p_i])`.
pub fn full_odds_product(y: Label, matrices: &[&ConfusionMatrix], preds: &[Label]) -> f64 {
    matrices
        .iter()
        .zip(preds)
        .map(|(c, &p)| odds(c.get(y, p)))
        .product()
}

pub fn lemma1_record(
    prediction: Label,
    y: Label,
    restricted: &[RestrictedSuccessMatrix],
    preds: &[Label],
) -> Lemma1Record {
    let odds_product = restricted_odds_product(y, restricted, preds);
    Lemma1Record {
        correct: prediction == y,
        covered: odds_product.is_some(),
        odds_product,
    }
}

/// Both sides of the first bound with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    /// Mean of `1{prediction = y and y in set}`.
    pub lhs: f64,
    /// `(1 - alpha) * P[odds product > 1 | y in set]`.
    pub rhs: f64,
    pub se_lhs: f64,
    pub se_rhs: f64,
    pub n_samples: usize,
    pub n_covered: usize,
}

impl BoundEstimate {
    /// `rhs <= lhs + 2 (SE(lhs) + SE(rhs))`.
    pub fn holds(&self) -> bool {
        self.rhs <= self.lhs + 2.0 * (self.se_lhs + self.se_rhs)
    }
}

fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

pub fn lemma1_estimate(records: &[Lemma1Record], alpha: f64) -> Result<BoundEstimate, BoundsError> {
    if records.is_empty() {
        return Err(BoundsError::EmptyTrace);
    }
    let n = records.len();
    let hits = records.iter().filter(|r| r.correct && r.covered).count();
    let covered: Vec<f64> = records.iter().filter_map(|r| r.odds_product).collect();
    let above = covered.iter().filter(|&&v| v > 1.0).count();
    let lhs = hits as f64 / n as f64;
    let q = if covered.is_empty() {
        0.0
    } else {
        above as f64 / covered.len() as f64
    };
    Ok(BoundEstimate {
        lhs,
        rhs: q * (1.0 - alpha),
        se_lhs: binomial_se(lhs, n),
        se_rhs: (1.0 - alpha) * binomial_se(q, covered.len()),
        n_samples: n,
        n_covered: covered.len(),
    })
}

/// Inputs of the second bound for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Record {
    /// Restricted odds product minus full-space odds product.
    pub epsilon: f64,
    /// Full-space odds product exceeds `(1 - f_y) / f_y`.
    pub event_full: bool,
    /// Restricted odds product exceeds one.
    pub event_conf: bool,
    pub assumption_met: bool,
}

/// Record for an instance with true label `y`, classifier probability
/// `f_y`, and expert answers `preds`; `None` when `y` is outside the set.
pub fn lemma2_record(
    y: Label,
    f_y: f64,
    matrices: &[&ConfusionMatrix],
    restricted: &[RestrictedSuccessMatrix],
    preds: &[Label],
) -> Option<Lemma2Record> {
    let conf = restricted_odds_product(y, restricted, preds)?;
    let full = full_odds_product(y, matrices, preds);
    let epsilon = conf - full;
    Some(Lemma2Record {
        epsilon,
        event_full: full > (1.0 - f_y) / f_y,
        event_conf: conf > 1.0,
        assumption_met: epsilon > 1.0,
    })
}

/// Event frequencies over the records meeting `epsilon > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Summary {
    pub n_records: usize,
    pub n_qualifying: usize,
    pub freq_full: f64,
    pub freq_conf: f64,
    /// `freq_conf - freq_full`.
    pub difference: f64,
    /// Standard error of the difference.
    pub se: f64,
}

impl Lemma2Summary {
    /// `freq_full <= freq_conf + 2 SE`.
    pub fn holds(&self) -> bool {
        self.freq_full <= self.freq_conf + 2.0 * self.se
    }
}

pub fn lemma2_compare(records: &[Lemma2Record]) -> Result<Lemma2Summary, BoundsError> {
    let qualifying: Vec<&Lemma2Record> = records.iter().filter(|r| r.assumption_met).collect();
    if qualifying.is_empty() {
        return Err(BoundsError::EmptyAfterFilter);
    }
    let q = qualifying.len();
    let freq_full = qualifying.iter().filter(|r| r.event_full).count() as f64 / q as f64;
    let freq_conf = qualifying.iter().filter(|r| r.event_conf).count() as f64 / q as f64;
    let se = (binomial_se(freq_full, q).powi(2) + binomial_se(freq_conf, q).powi(2)).sqrt();
    Ok(Lemma2Summary {
        n_records: records.len(),
        n_qualifying: q,
        freq_full,
        freq_conf,
        difference: freq_conf - freq_full,
        se,
    })
}

/// Bound diagnostics attached to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsDiagnostics {
    pub alpha: f64,
    pub lemma1: BoundEstimate,
    pub lemma1_holds: bool,
    pub lemma2: Option<Lemma2Summary>,
    pub lemma2_holds: Option<bool>,
}

impl BoundsDiagnostics {
    pub fn from_records(
        lemma1: &[Lemma1Record],
        lemma2: &[Lemma2Record],
        alpha: f64,
    ) -> Result<Self, BoundsError> {
        let l1 = lemma1_estimate(lemma1, alpha)?;
        let l2 = lemma2_compare(lemma2).ok();
        Ok(Self {
            alpha,
            lemma1: l1,
            lemma1_holds: l1.holds(),
            lemma2_holds: l2.map(|s| s.holds()),
            lemma2: l2,
        })
    }
}
