//! Combination of expert answers and the end-to-end per-instance pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{self, ConformalError, ConformalThreshold, PredictionSet};
use crate::experts::{self, EmpiricalDistribution, ExpertPool, SimulatorMode};
use crate::rng::{self, Purpose};
use crate::selection::{self, SelectionError, SelectionResult, SubsetPolicy};
use crate::Label;

#[derive(Debug, Error, PartialEq)]
pub enum CombineError {
    #[error("no predictions to combine")]
    EmptyPredictions,
    #[error("random policy needs a resolved subset size")]
    UnresolvedTau,
    #[error("empirical simulation needs annotations for instance {0:?}")]
    MissingDistribution(String),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

/// Which source produced the system's answer when no expert did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    None,
    PseudoLabel,
    ModelArgmax,
}

/// The system's answer for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedPrediction {
    pub label: Label,
    /// Experts whose answers were combined.
    pub contributors: Vec<usize>,
    pub tie_broken: bool,
    pub fallback: Fallback,
}

/// A rule merging expert answers into one label.
pub trait CombinationRule: Sync {
    fn combine(
        &self,
        preds: &[Label],
        probs: Option<&[f64]>,
    ) -> Result<CombinedPrediction, CombineError>;
}

/// Most frequent answer; ties go to the tied label with the largest
/// classifier probability, then to the lowest label.
#[derive(Debug, Clone, Copy, Default)]
pub struct Majority;

impl CombinationRule for Majority {
    fn combine(
        &self,
        preds: &[Label],
        probs: Option<&[f64]>,
    ) -> Result<CombinedPrediction, CombineError> {
        majority(preds, probs)
    }
}

pub fn majority(
    preds: &[Label],
    probs: Option<&[f64]>,
) -> Result<CombinedPrediction, CombineError> {
    let max_label = *preds.iter().max().ok_or(CombineError::EmptyPredictions)?;
    let mut counts = vec![0usize; max_label + 1];
    for &p in preds {
        counts[p] += 1;
    }
    let top = *counts.iter().max().expect("nonempty");
    let tied: Vec<Label> = (0..counts.len()).filter(|&y| counts[y] == top).collect();
    let weight = |y: Label| probs.and_then(|p| p.get(y)).copied().unwrap_or(0.0);
    let mut label = tied[0];
    for &y in &tied[1..] {
        if weight(y) > weight(label) {
            label = y;
        }
    }
    Ok(CombinedPrediction {
        label,
        contributors: Vec::new(),
        tie_broken: tied.len() > 1,
        fallback: Fallback::None,
    })
}

/// One test instance as seen by the pipeline.
#[derive(Debug, Clone, Copy)]
pub struct Instance<'a> {
    /// Stable position of the instance; part of every random stream's seed.
    pub index: usize,
    pub id: &'a str,
    pub probs: &'a [f64],
    pub true_label: Label,
    pub psi: Option<&'a EmpiricalDistribution>,
}

/// Everything calibrated or estimated before test time.
#[derive(Clone, Copy)]
pub struct SystemState<'a> {
    pub threshold: &'a ConformalThreshold,
    pub pool: &'a ExpertPool,
    pub mode: SimulatorMode,
    /// What a greedy policy answers when no expert qualifies.
    pub greedy_fallback: Fallback,
    pub rule: &'a dyn CombinationRule,
    pub run_seed: u64,
}

/// Per-instance record of one method's decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrace {
    pub method: String,
    pub instance_id: String,
    pub true_label: Label,
    pub set: Vec<Label>,
    pub set_forced: bool,
    pub initial_preds: Vec<Label>,
    pub selection: Option<SelectionResult>,
    pub selected: Vec<usize>,
    pub final_preds: Vec<Label>,
    pub prediction: Label,
    pub tie_broken: bool,
    pub fallback: Fallback,
}

impl InstanceTrace {
    pub fn correct(&self) -> bool {
        self.prediction == self.true_label
    }

    pub fn covered(&self) -> bool {
        self.set.binary_search(&self.true_label).is_ok()
    }
}

/// Conformal set and initial expert answers of an instance, shared by all
/// methods evaluated on it.
pub struct InstanceContext<'a> {
    pub instance: Instance<'a>,
    pub state: SystemState<'a>,
    pub conformal_set: PredictionSet,
    pub initial_preds: Vec<Label>,
}

impl<'a> InstanceContext<'a> {
    pub fn new(instance: Instance<'a>, state: SystemState<'a>) -> Result<Self, CombineError> {
        if state.mode == SimulatorMode::Empirical && instance.psi.is_none() {
            return Err(CombineError::MissingDistribution(instance.id.to_string()));
        }
        let conformal_set = conformal::predict_set(instance.probs, state.threshold);
        let initial_preds = (0..state.pool.len())
            .map(|i| {
                let mut rng = rng::stream(
                    state.run_seed,
                    Purpose::Initial,
                    &[i as u64, instance.index as u64],
                );
                experts::initial_prediction(
                    state.mode,
                    state.pool.matrix(i),
                    instance.true_label,
                    instance.psi,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            instance,
            state,
            conformal_set,
            initial_preds,
        })
    }

    /// In-set answer of expert `i`. Depends only on the expert, the
    /// instance, the set and the run seed.
    pub fn final_prediction(&self, i: usize, set: &PredictionSet) -> Label {
        let mut rng = rng::stream(
            self.state.run_seed,
            Purpose::Final,
            &[i as u64, self.instance.index as u64],
        );
        let matrix = self.state.pool.matrix(i);
        match self.state.mode {
            SimulatorMode::Oracle => {
                experts::final_prediction_oracle(matrix, self.instance.true_label, set, &mut rng)
            }
            SimulatorMode::Empirical => {
                experts::final_from_initial(matrix, self.initial_preds[i], set, &mut rng)
            }
        }
    }

    /// Greedy selection on `set`.
    pub fn greedy(&self, set: &PredictionSet) -> Result<SelectionResult, CombineError> {
        let restricted = self
            .state
            .pool
            .experts()
            .iter()
            .map(|e| selection::restricted_matrix(&e.matrix, set))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(selection::greedy_select(
            set,
            &restricted,
            &self.initial_preds,
        ))
    }

    /// Runs `method` on the instance.
    pub fn predict(&self, method: SubsetPolicy) -> Result<InstanceTrace, CombineError> {
        let probs = self.instance.probs;
        let n = probs.len();
        let pool = self.state.pool;
        let mut selection_result = None;

        let (set, selected): (PredictionSet, Vec<usize>) = match method {
            SubsetPolicy::GreedyConformal | SubsetPolicy::GreedyTopK(_) => {
                let set = match method {
                    SubsetPolicy::GreedyTopK(k) => conformal::topk_set(probs, k)?,
                    _ => self.conformal_set.clone(),
                };
                let res = self.greedy(&set)?;
                let selected = res.selected.clone();
                selection_result = Some(res);
                (set, selected)
            }
            SubsetPolicy::Random(None) => return Err(CombineError::UnresolvedTau),
            SubsetPolicy::AllHumans | SubsetPolicy::SingleBest | SubsetPolicy::Random(Some(_)) => {
                let mut rng = rng::stream(
                    self.state.run_seed,
                    Purpose::Subset,
                    &[self.instance.index as u64],
                );
                (
                    self.conformal_set.clone(),
                    selection::baseline_subset(method, pool, &mut rng),
                )
            }
            SubsetPolicy::ModelOnly => (self.conformal_set.clone(), Vec::new()),
            SubsetPolicy::ExpertTeam => (PredictionSet::full(n), (0..pool.len()).collect()),
        };

        let final_preds: Vec<Label> = match method {
            SubsetPolicy::ExpertTeam => self.initial_preds.clone(),
            SubsetPolicy::ModelOnly => Vec::new(),
            _ => selected
                .iter()
                .map(|&i| self.final_prediction(i, &set))
                .collect(),
        };

        let combined = match method {
            SubsetPolicy::ModelOnly => CombinedPrediction {
                label: conformal::argmax(probs),
                contributors: Vec::new(),
                tie_broken: false,
                fallback: Fallback::ModelArgmax,
            },
            SubsetPolicy::ExpertTeam => {
                let mut c = self.state.rule.combine(&final_preds, None)?;
                c.contributors = selected.clone();
                c
            }
            _ if final_preds.is_empty() => {
                let fallback = match (&selection_result, self.state.greedy_fallback) {
                    (Some(_), Fallback::PseudoLabel) => Fallback::PseudoLabel,
                    _ => Fallback::ModelArgmax,
                };
                let label = match (&selection_result, fallback) {
                    (Some(res), Fallback::PseudoLabel) => res.pseudo_label,
                    _ => set.argmax_within(probs),
                };
                CombinedPrediction {
                    label,
                    contributors: Vec::new(),
                    tie_broken: false,
                    fallback,
                }
            }
            _ => {
                let mut c = self.state.rule.combine(&final_preds, Some(probs))?;
                c.contributors = selected.clone();
                c
            }
        };

        Ok(InstanceTrace {
            method: method.to_string(),
            instance_id: self.instance.id.to_string(),
            true_label: self.instance.true_label,
            set: set.labels().to_vec(),
            set_forced: set.forced,
            initial_preds: self.initial_preds.clone(),
            selection: selection_result,
            selected,
            final_preds,
            prediction: combined.label,
            tie_broken: combined.tie_broken,
            fallback: combined.fallback,
        })
    }
}

/// Full pipeline for a single instance and method.
pub fn system_predict(
    instance: Instance<'_>,
    method: SubsetPolicy,
    state: SystemState<'_>,
) -> Result<(CombinedPrediction, InstanceTrace), CombineError> {
    let trace = InstanceContext::new(instance, state)?.predict(method)?;
    let combined = CombinedPrediction {
        label: trace.prediction,
        contributors: trace.selected.clone(),
        tie_broken: trace.tie_broken,
        fallback: trace.fallback,
    };
    Ok((combined, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::ConfusionMatrix;
    use proptest::prelude::*;

    #[test]
    fn majority_examples() {
        let r = majority(&[0, 0, 2], None).unwrap();
        assert_eq!((r.label, r.tie_broken), (0, false));
        let r = majority(&[0, 1], Some(&[0.6, 0.3, 0.1])).unwrap();
        assert_eq!((r.label, r.tie_broken), (0, true));
        let r = majority(&[0, 1], Some(&[0.2, 0.7, 0.1])).unwrap();
        assert_eq!(r.label, 1);
        let r = majority(&[2, 1], None).unwrap();
        assert_eq!(r.label, 1);
        assert_eq!(majority(&[1], None).unwrap().label, 1);
        assert_eq!(majority(&[], None), Err(CombineError::EmptyPredictions));
    }

    fn state<'a>(threshold: &'a ConformalThreshold, pool: &'a ExpertPool) -> SystemState<'a> {
        SystemState {
            threshold,
            pool,
            mode: SimulatorMode::Oracle,
            greedy_fallback: Fallback::ModelArgmax,
            rule: &Majority,
            run_seed: 17,
        }
    }

    fn instance(probs: &[f64], y: Label) -> Instance<'_> {
        Instance {
            index: 3,
            id: "x",
            probs,
            true_label: y,
            psi: None,
        }
    }

    const ALL_METHODS: [SubsetPolicy; 7] = [
        SubsetPolicy::GreedyConformal,
        SubsetPolicy::GreedyTopK(1),
        SubsetPolicy::AllHumans,
        SubsetPolicy::Random(Some(1.5)),
        SubsetPolicy::SingleBest,
        SubsetPolicy::ModelOnly,
        SubsetPolicy::ExpertTeam,
    ];

    #[test]
    fn singleton_set_forces_the_answer() {
        let t = ConformalThreshold {
            q_hat: 0.5,
            alpha: 0.1,
            l: 10,
        };
        let pool = ExpertPool::homogeneous(&ConfusionMatrix::symmetric(3, 0.4), 4).unwrap();
        let probs = [0.1, 0.2, 0.7];
        for y in 0..3 {
            for m in ALL_METHODS.iter().filter(|m| m.is_set_constrained()) {
                let (c, trace) = system_predict(instance(&probs, y), *m, state(&t, &pool)).unwrap();
                assert_eq!(trace.set, vec![2]);
                assert_eq!(c.label, 2, "{m}");
            }
        }
    }

    #[test]
    fn model_only_uses_argmax() {
        let t = ConformalThreshold {
            q_hat: 0.95,
            alpha: 0.1,
            l: 10,
        };
        let pool = ExpertPool::homogeneous(&ConfusionMatrix::symmetric(3, 0.9), 2).unwrap();
        let (c, _) = system_predict(
            instance(&[0.1, 0.8, 0.1], 0),
            SubsetPolicy::ModelOnly,
            state(&t, &pool),
        )
        .unwrap();
        assert_eq!(c.label, 1);
        assert_eq!(c.fallback, Fallback::ModelArgmax);
    }

    #[test]
    fn perfect_experts_are_unanimous() {
        let t = ConformalThreshold {
            q_hat: 0.95,
            alpha: 0.1,
            l: 10,
        };
        let pool = ExpertPool::homogeneous(&ConfusionMatrix::symmetric(4, 1.0), 3).unwrap();
        let probs = [0.4, 0.3, 0.2, 0.1];
        for y in 0..4 {
            let (c, trace) = system_predict(
                instance(&probs, y),
                SubsetPolicy::GreedyConformal,
                state(&t, &pool),
            )
            .unwrap();
            assert_eq!(trace.selected, vec![0, 1, 2]);
            assert_eq!(trace.selection.unwrap().pseudo_label, y);
            assert_eq!(c.label, y);
            assert_eq!(c.fallback, Fallback::None);
        }
    }

    #[test]
    fn greedy_falls_back_to_set_argmax() {
        // Answers outside the set leave no qualifying expert.
        let t = ConformalThreshold {
            q_hat: 0.75,
            alpha: 0.1,
            l: 10,
        };
        let pool = ExpertPool::homogeneous(&ConfusionMatrix::symmetric(4, 1.0), 2).unwrap();
        let probs = [0.3, 0.5, 0.1, 0.1];
        let (c, trace) = system_predict(
            instance(&probs, 3),
            SubsetPolicy::GreedyConformal,
            state(&t, &pool),
        )
        .unwrap();
        assert_eq!(trace.set, vec![0, 1]);
        assert!(trace.selection.unwrap().fallback_used);
        assert_eq!(c.label, 1);
        assert_eq!(c.fallback, Fallback::ModelArgmax);

        let mut st = state(&t, &pool);
        st.greedy_fallback = Fallback::PseudoLabel;
        let (c, _) =
            system_predict(instance(&probs, 3), SubsetPolicy::GreedyConformal, st).unwrap();
        assert_eq!((c.label, c.fallback), (0, Fallback::PseudoLabel));
    }

    #[test]
    fn random_needs_a_size() {
        let t = ConformalThreshold {
            q_hat: 0.75,
            alpha: 0.1,
            l: 10,
        };
        let pool = ExpertPool::homogeneous(&ConfusionMatrix::symmetric(4, 1.0), 2).unwrap();
        let err = system_predict(
            instance(&[0.3, 0.5, 0.1, 0.1], 0),
            SubsetPolicy::Random(None),
            state(&t, &pool),
        )
        .unwrap_err();
        assert_eq!(err, CombineError::UnresolvedTau);
    }

    proptest! {
        #[test]
        fn majority_is_permutation_invariant(preds in prop::collection::vec(0usize..5, 1..12), seed: u64) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let probs = [0.1, 0.3, 0.2, 0.25, 0.15];
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(majority(&preds, Some(&probs)).unwrap(), majority(&shuffled, Some(&probs)).unwrap());
        }

        #[test]
        fn constrained_predictions_stay_in_set(
            raw in prop::collection::vec(0.01f64..1.0, 5),
            q in 0.0f64..1.0,
            y in 0usize..5,
            diag in 0.2f64..1.0,
            idx in 0usize..1000,
        ) {
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let t = ConformalThreshold { q_hat: q, alpha: 0.1, l: 10 };
            let pool = ExpertPool::homogeneous(&ConfusionMatrix::symmetric(5, diag), 3).unwrap();
            let inst = Instance { index: idx, id: "p", probs: &probs, true_label: y, psi: None };
            let ctx = InstanceContext::new(inst, state(&t, &pool)).unwrap();
            for m in [SubsetPolicy::GreedyConformal, SubsetPolicy::GreedyTopK(2), SubsetPolicy::AllHumans, SubsetPolicy::Random(Some(2.0)), SubsetPolicy::SingleBest] {
                let trace = ctx.predict(m).unwrap();
                prop_assert!(trace.set.contains(&trace.prediction));
            }
        }
    }
}
