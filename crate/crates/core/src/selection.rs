//! Per-instance selection of experts from a prediction set.
//!
//! For every expert, its confusion matrix restricted to the labels of the
//! prediction set gives `R[y][p]`, the probability that the true label is
//! `y` given that the expert answered `p` (columns normalised over the set).
//! The greedy rule turns `R` into odds `R / (1 - R)`, picks the pseudo-label
//! with the largest product of odds above one, and keeps exactly the experts
//! whose odds at that pseudo-label exceed one.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::PredictionSet;
use crate::experts::{ConfusionMatrix, ExpertPool};
use crate::Label;

/// Clamp applied to restricted probabilities before forming odds.
pub const ODDS_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("prediction set is empty")]
    EmptySet,
    #[error("estimation set is empty")]
    EmptyEstimationSet,
    #[error("search cap zeta must be at least 1")]
    InvalidZeta,
    #[error("unknown subset policy {0:?}")]
    UnknownPolicy(String),
}

/// Odds `v / (1 - v)` of a probability clamped to `[eps, 1 - eps]`.
pub fn odds(v: f64) -> f64 {
    let v = v.clamp(ODDS_EPSILON, 1.0 - ODDS_EPSILON);
    v / (1.0 - v)
}

/// Confusion matrix renormalised over the labels of a prediction set.
///
/// Rows are the set's labels (by position), columns the full label space.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedSuccessMatrix {
    set: Vec<Label>,
    n: usize,
    values: Vec<f64>,
}

impl RestrictedSuccessMatrix {
    /// Entry for the `k`-th label of the set and answer `p`.
    pub fn at(&self, k: usize, p: Label) -> f64 {
        self.values[k * self.n + p]
    }

    /// Entry for set label `y`, or `None` when `y` is not in the set.
    pub fn get(&self, y: Label, p: Label) -> Option<f64> {
        self.set.binary_search(&y).ok().map(|k| self.at(k, p))
    }

    pub fn set_labels(&self) -> &[Label] {
        &self.set
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }
}

/// Builds `R[y][p] = C[y][p] / sum_{y' in set} C[y'][p]`; a column with no
/// mass over the set becomes uniform.
pub fn restricted_matrix(
    matrix: &ConfusionMatrix,
    set: &PredictionSet,
) -> Result<RestrictedSuccessMatrix, SelectionError> {
    let labels = set.labels();
    if labels.is_empty() {
        return Err(SelectionError::EmptySet);
    }
    let n = matrix.num_classes();
    let c = labels.len();
    let mut values = vec![0.0; c * n];
    for p in 0..n {
        let denom: f64 = labels.iter().map(|&y| matrix.get(y, p)).sum();
        for (k, &y) in labels.iter().enumerate() {
            values[k * n + p] = if denom > 0.0 {
                matrix.get(y, p) / denom
            } else {
                1.0 / c as f64
            };
        }
    }
    Ok(RestrictedSuccessMatrix {
        set: labels.to_vec(),
        n,
        values,
    })
}

/// Outcome of the greedy rule for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Pseudo-label `y*`, always a member of the set.
    pub pseudo_label: Label,
    /// Position of the pseudo-label inside the set.
    pub pseudo_position: usize,
    /// Selected experts in ascending order.
    pub selected: Vec<usize>,
    /// Odds per expert and set position; `None` for experts whose initial
    /// answer fell outside the set.
    pub odds: Vec<Option<Vec<f64>>>,
    /// Product of qualifying odds per set position.
    pub scores: Vec<f64>,
    /// No expert qualified.
    pub fallback_used: bool,
}

/// Greedy expert selection. See [`greedy_select_counted`] for an
/// instrumented variant.
pub fn greedy_select(
    set: &PredictionSet,
    restricted: &[RestrictedSuccessMatrix],
    initial_preds: &[Label],
) -> SelectionResult {
    greedy_select_counted(set, restricted, initial_preds, &mut 0)
}

/// [`greedy_select`] that adds the number of elementary steps performed to `ops`.
pub fn greedy_select_counted(
    set: &PredictionSet,
    restricted: &[RestrictedSuccessMatrix],
    initial_preds: &[Label],
    ops: &mut u64,
) -> SelectionResult {
    assert_eq!(
        restricted.len(),
        initial_preds.len(),
        "one matrix per expert"
    );
    let c = set.len();

    let odds_table: Vec<Option<Vec<f64>>> = restricted
        .iter()
        .zip(initial_preds)
        .map(|(r, &p)| {
            *ops += 1;
            set.contains(p).then(|| {
                (0..c)
                    .map(|k| {
                        *ops += 1;
                        odds(r.at(k, p))
                    })
                    .collect()
            })
        })
        .collect();

    let scores: Vec<f64> = (0..c)
        .map(|k| {
            let mut s = 1.0;
            for row in odds_table.iter().flatten() {
                *ops += 1;
                if row[k] > 1.0 {
                    s *= row[k];
                }
            }
            s
        })
        .collect();

    let mut best = 0;
    for k in 1..c {
        *ops += 1;
        if scores[k] > scores[best] {
            best = k;
        }
    }

    let selected: Vec<usize> = odds_table
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            *ops += 1;
            row.as_ref().filter(|r| r[best] > 1.0).map(|_| i)
        })
        .collect();

    SelectionResult {
        pseudo_label: set.labels()[best],
        pseudo_position: best,
        fallback_used: selected.is_empty(),
        selected,
        odds: odds_table,
        scores,
    }
}

/// How the experts answering an instance are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SubsetPolicy {
    /// Greedy selection on the conformal set.
    GreedyConformal,
    /// Greedy selection on the top-`k` set; experts answer from that set.
    GreedyTopK(usize),
    /// Every expert answers from the conformal set.
    AllHumans,
    /// A uniform random subset of average size `tau`. `None` matches the
    /// run's mean greedy subset size.
    Random(Option<f64>),
    /// The expert with the largest diagonal mass, answering from the conformal set.
    SingleBest,
    /// Classifier argmax, no experts.
    ModelOnly,
    /// Majority of every expert's unconstrained answer, no classifier.
    ExpertTeam,
}

impl SubsetPolicy {
    /// Whether the experts' answers are confined to a prediction set.
    pub fn is_set_constrained(&self) -> bool {
        !matches!(self, Self::ModelOnly | Self::ExpertTeam)
    }
}

impl fmt::Display for SubsetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GreedyConformal => write!(f, "greedy_conformal"),
            Self::GreedyTopK(k) => write!(f, "greedy_topk:{k}"),
            Self::AllHumans => write!(f, "all_humans"),
            Self::Random(None) => write!(f, "random"),
            Self::Random(Some(tau)) => write!(f, "random:{tau}"),
            Self::SingleBest => write!(f, "single_best"),
            Self::ModelOnly => write!(f, "model_only"),
            Self::ExpertTeam => write!(f, "expert_team"),
        }
    }
}

impl FromStr for SubsetPolicy {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SelectionError::UnknownPolicy(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((name, arg)) => (name, Some(arg)),
            None => (s, None),
        };
        Ok(match (name, arg) {
            ("greedy_conformal", None) => Self::GreedyConformal,
            ("greedy_topk", Some(k)) => {
                let k: usize = k.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Self::GreedyTopK(k)
            }
            ("all_humans", None) => Self::AllHumans,
            ("random", None) => Self::Random(None),
            ("random", Some(t)) => {
                let tau: f64 = t.parse().map_err(|_| bad())?;
                if tau.is_nan() || tau < 1.0 || tau.is_infinite() {
                    return Err(bad());
                }
                Self::Random(Some(tau))
            }
            ("single_best", None) => Self::SingleBest,
            ("model_only", None) => Self::ModelOnly,
            ("expert_team", None) => Self::ExpertTeam,
            _ => return Err(bad()),
        })
    }
}

impl TryFrom<String> for SubsetPolicy {
    type Error = SelectionError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SubsetPolicy> for String {
    fn from(p: SubsetPolicy) -> Self {
        p.to_string()
    }
}

/// Uniform random subset of size `floor(tau)` or `ceil(tau)`, the latter
/// with probability `frac(tau)`; `tau` is clamped to `[1, h]`.
pub fn random_subset<R: Rng + ?Sized>(h: usize, tau: f64, rng: &mut R) -> Vec<usize> {
    let tau = tau.clamp(1.0, h as f64);
    let base = tau.floor();
    let frac = tau - base;
    let mut size = base as usize;
    if frac > 0.0 && rng.random::<f64>() < frac {
        size += 1;
    }
    let mut chosen = index::sample(rng, h, size.min(h)).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Subset chosen by a non-greedy policy.
///
/// Greedy policies go through [`greedy_select`]; `ModelOnly` selects no one.
pub fn baseline_subset<R: Rng + ?Sized>(
    policy: SubsetPolicy,
    pool: &ExpertPool,
    rng: &mut R,
) -> Vec<usize> {
    let h = pool.len();
    match policy {
        SubsetPolicy::AllHumans | SubsetPolicy::ExpertTeam => (0..h).collect(),
        SubsetPolicy::Random(tau) => random_subset(h, tau.unwrap_or(1.0), rng),
        SubsetPolicy::SingleBest => vec![pool.best_expert()],
        SubsetPolicy::ModelOnly | SubsetPolicy::GreedyConformal | SubsetPolicy::GreedyTopK(_) => {
            Vec::new()
        }
    }
}

/// Suggested maximum team size and the estimates behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalTeamSize {
    pub m_hat: usize,
    /// Success of the conformal framework with `m` experts, `m = 1..=zeta`.
    pub phi_alpha: Vec<f64>,
    /// Success of the unaided `m`-expert team.
    pub phi_experts: Vec<f64>,
    /// No team size satisfied the constraint and `m_hat` fell back to 1.
    pub warning: bool,
}

/// Largest-success team size whose framework success is at least the team's
/// own: scanning `m` upward, accept `m` when `phi_alpha[m] >= max(t, phi_experts[m])`
/// and raise `t` to `phi_alpha[m]`. Later ties win.
pub fn choose_team_size(phi_alpha: &[f64], phi_experts: &[f64]) -> OptimalTeamSize {
    let mut t: f64 = 0.0;
    let mut m_hat = None;
    for (m, (&a, &e)) in phi_alpha.iter().zip(phi_experts).enumerate() {
        if a >= t.max(e) {
            t = a;
            m_hat = Some(m + 1);
        }
    }
    OptimalTeamSize {
        m_hat: m_hat.unwrap_or(1),
        phi_alpha: phi_alpha.to_vec(),
        phi_experts: phi_experts.to_vec(),
        warning: m_hat.is_none(),
    }
}

/// Evaluates `(phi_alpha(m), phi_experts(m))` for `m = 1..=zeta` through
/// `evaluate` and applies [`choose_team_size`].
pub fn estimate_optimal_m<E>(
    zeta: usize,
    mut evaluate: impl FnMut(usize) -> Result<(f64, f64), E>,
) -> Result<OptimalTeamSize, E>
where
    E: From<SelectionError>,
{
    if zeta == 0 {
        return Err(SelectionError::InvalidZeta.into());
    }
    let mut phi_alpha = Vec::with_capacity(zeta);
    let mut phi_experts = Vec::with_capacity(zeta);
    for m in 1..=zeta {
        let (a, e) = evaluate(m)?;
        phi_alpha.push(a);
        phi_experts.push(e);
    }
    let result = choose_team_size(&phi_alpha, &phi_experts);
    if result.warning {
        log::warn!("no team size up to {zeta} beats the unaided expert team; using 1");
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::SetSource;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example_matrix() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(vec![
            vec![0.8, 0.1, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.3, 0.3, 0.4],
        ])
        .unwrap()
    }

    fn set(labels: &[Label]) -> PredictionSet {
        PredictionSet::new(labels.to_vec(), SetSource::Conformal)
    }

    #[test]
    fn restricted_matrix_example() {
        let r = restricted_matrix(&example_matrix(), &set(&[0, 1])).unwrap();
        // column 0: 0.8 / (0.8 + 0.2), 0.2 / 1.0
        assert!((r.at(0, 0) - 0.8).abs() < 1e-12);
        assert!((r.at(1, 0) - 0.2).abs() < 1e-12);
        // column 1: 0.1 / 0.8, 0.7 / 0.8
        assert!((r.at(0, 1) - 0.125).abs() < 1e-12);
        assert!((r.at(1, 1) - 0.875).abs() < 1e-12);
        assert_eq!(r.get(2, 0), None);
    }

    #[test]
    fn restricted_matrix_identity_cases() {
        let c = example_matrix();
        let r = restricted_matrix(&c, &set(&[1])).unwrap();
        for p in 0..3 {
            assert_eq!(r.at(0, p), 1.0);
        }
        let r = restricted_matrix(&c, &PredictionSet::full(3)).unwrap();
        for p in 0..3 {
            let col: f64 = (0..3).map(|y| c.get(y, p)).sum();
            for y in 0..3 {
                assert!((r.at(y, p) - c.get(y, p) / col).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_mass_column_is_uniform() {
        let c = ConfusionMatrix::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let r = restricted_matrix(&c, &set(&[0, 1])).unwrap();
        assert_eq!((r.at(0, 2), r.at(1, 2)), (0.5, 0.5));
    }

    #[test]
    fn greedy_example_two_identical_experts() {
        let s = set(&[0, 1]);
        let r = restricted_matrix(&example_matrix(), &s).unwrap();
        let res = greedy_select(&s, &[r.clone(), r], &[0, 0]);
        let f = res.odds[0].as_ref().unwrap();
        assert!((f[0] - 4.0).abs() < 1e-9);
        // answers p = 0, so k = 1 reads R[1][0] = 0.2
        assert!((f[1] - 0.25).abs() < 1e-9);
        assert!((res.scores[0] - 16.0).abs() < 1e-9);
        assert_eq!(res.scores[1], 1.0);
        assert_eq!(res.pseudo_label, 0);
        assert_eq!(res.selected, vec![0, 1]);
        assert!(!res.fallback_used);
    }

    #[test]
    fn greedy_filters_answers_outside_the_set() {
        let s = set(&[0, 1]);
        let r = restricted_matrix(&example_matrix(), &s).unwrap();
        let res = greedy_select(&s, &[r], &[2]);
        assert!(res.fallback_used);
        assert!(res.selected.is_empty());
        assert_eq!(res.odds, vec![None]);
    }

    #[test]
    fn greedy_singleton_selects_all_survivors() {
        let s = set(&[2]);
        let r = restricted_matrix(&example_matrix(), &s).unwrap();
        let res = greedy_select(&s, &[r.clone(), r.clone(), r], &[2, 0, 2]);
        assert_eq!(res.pseudo_label, 2);
        assert_eq!(res.selected, vec![0, 2]);
        assert!(res.odds[0].as_ref().unwrap()[0] > 1e11);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [
            SubsetPolicy::GreedyConformal,
            SubsetPolicy::GreedyTopK(3),
            SubsetPolicy::AllHumans,
            SubsetPolicy::Random(None),
            SubsetPolicy::Random(Some(2.5)),
            SubsetPolicy::SingleBest,
            SubsetPolicy::ModelOnly,
            SubsetPolicy::ExpertTeam,
        ] {
            assert_eq!(p.to_string().parse::<SubsetPolicy>().unwrap(), p);
        }
        assert!("greedy_topk:0".parse::<SubsetPolicy>().is_err());
        assert!("random:0.5".parse::<SubsetPolicy>().is_err());
        assert!("oracle".parse::<SubsetPolicy>().is_err());
    }

    #[test]
    fn baseline_examples() {
        let pool = ExpertPool::homogeneous(&ConfusionMatrix::symmetric(3, 0.8), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            baseline_subset(SubsetPolicy::AllHumans, &pool, &mut rng),
            vec![0, 1, 2, 3, 4]
        );
        for _ in 0..100 {
            let s = baseline_subset(SubsetPolicy::Random(Some(2.0)), &pool, &mut rng);
            assert_eq!(s.len(), 2);
            assert!(s[0] < s[1] && s[1] < 5);
        }
        let draws = 10_000;
        let total: usize = (0..draws)
            .map(|_| baseline_subset(SubsetPolicy::Random(Some(2.5)), &pool, &mut rng).len())
            .sum();
        let mean = total as f64 / draws as f64;
        assert!((2.45..=2.55).contains(&mean), "{mean}");
    }

    #[test]
    fn team_size_examples() {
        let r = choose_team_size(&[0.96, 0.97, 0.98], &[0.95, 0.95, 0.95]);
        assert_eq!((r.m_hat, r.warning), (3, false));
        let r = choose_team_size(&[0.96, 0.97, 0.96], &[0.95, 0.95, 0.97]);
        assert_eq!((r.m_hat, r.warning), (2, false));
        let r = choose_team_size(&[0.90, 0.91], &[0.95, 0.96]);
        assert_eq!((r.m_hat, r.warning), (1, true));
        let r = choose_team_size(&[0.97, 0.97], &[0.9, 0.9]);
        assert_eq!(r.m_hat, 2);
    }

    #[test]
    fn estimate_optimal_m_drives_the_rule() {
        let phi = [(0.96, 0.95), (0.97, 0.95), (0.96, 0.97)];
        let r = estimate_optimal_m::<SelectionError>(3, |m| Ok(phi[m - 1])).unwrap();
        assert_eq!(r.m_hat, 2);
        assert_eq!(
            estimate_optimal_m::<SelectionError>(0, |_| Ok((0.0, 0.0))),
            Err(SelectionError::InvalidZeta)
        );
    }

    fn random_case(
        rng: &mut ChaCha8Rng,
        h: usize,
        n: usize,
        c: usize,
    ) -> (PredictionSet, Vec<RestrictedSuccessMatrix>, Vec<Label>) {
        let labels = index::sample(rng, n, c).into_vec();
        let s = set(&labels);
        let matrices: Vec<_> = (0..h)
            .map(|_| {
                let rows = (0..n)
                    .map(|_| {
                        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
                        let sum: f64 = raw.iter().sum();
                        raw.into_iter().map(|v| v / sum).collect()
                    })
                    .collect();
                restricted_matrix(&ConfusionMatrix::from_rows(rows).unwrap(), &s).unwrap()
            })
            .collect();
        let preds = (0..h).map(|_| rng.random_range(0..n)).collect();
        (s, matrices, preds)
    }

    proptest! {
        #[test]
        fn selection_is_permutation_invariant(seed: u64, h in 1usize..8, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, r, p) = random_case(&mut rng, h, 6, c);
            let base = greedy_select(&s, &r, &p);
            let perm = index::sample(&mut rng, h, h).into_vec();
            let r2: Vec<_> = perm.iter().map(|&i| r[i].clone()).collect();
            let p2: Vec<_> = perm.iter().map(|&i| p[i]).collect();
            let other = greedy_select(&s, &r2, &p2);
            let mut mapped: Vec<usize> = other.selected.iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(mapped, base.selected);
            prop_assert_eq!(other.pseudo_label, base.pseudo_label);
        }

        #[test]
        fn selected_experts_satisfy_the_filter(seed: u64, h in 1usize..8, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, r, p) = random_case(&mut rng, h, 7, c);
            let res = greedy_select(&s, &r, &p);
            for i in 0..h {
                let qualifies = s.contains(p[i]) && odds(r[i].at(res.pseudo_position, p[i])) > 1.0;
                prop_assert_eq!(res.selected.contains(&i), qualifies);
            }
            for k in 0..c {
                prop_assert!(res.scores[res.pseudo_position] >= res.scores[k]);
            }
        }

        #[test]
        fn restricted_columns_sum_to_one(seed: u64, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, r, _) = random_case(&mut rng, 1, 6, c);
            for p in 0..6 {
                let sum: f64 = (0..c).map(|k| r[0].at(k, p)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!((0..c).all(|k| (0.0..=1.0).contains(&r[0].at(k, p))));
            }
        }

        #[test]
        fn row_rescaling_does_not_change_decisions(seed: u64, h in 1usize..6, c in 2usize..5, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let labels = index::sample(&mut rng, n, c).into_vec();
            let s = set(&labels);
            let raw: Vec<Vec<Vec<f64>>> = (0..h).map(|_| (0..n).map(|_| (0..n).map(|_| rng.random::<f64>() + 0.01).collect()).collect()).collect();
            let build = |factor: f64| -> Vec<RestrictedSuccessMatrix> {
                raw.iter().map(|rows| {
                    let rows = rows.iter().map(|row| {
                        let scaled: Vec<f64> = row.iter().map(|v| v * factor).collect();
                        let sum: f64 = scaled.iter().sum();
                        scaled.into_iter().map(|v| v / sum).collect()
                    }).collect();
                    restricted_matrix(&ConfusionMatrix::from_rows(rows).unwrap(), &s).unwrap()
                }).collect()
            };
            let preds: Vec<Label> = (0..h).map(|_| rng.random_range(0..n)).collect();
            let a = greedy_select(&s, &build(1.0), &preds);
            let b = greedy_select(&s, &build(scale), &preds);
            prop_assert_eq!(a.pseudo_label, b.pseudo_label);
            prop_assert_eq!(a.selected, b.selected);
        }
    }
}
