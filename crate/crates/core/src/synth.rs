//! Seeded synthetic classifiers, expert pools and annotation tables.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::bounds::{self, Lemma1Record, Lemma2Record};
use crate::combine::{CombineError, Fallback, Instance, InstanceContext, Majority, SystemState};
use crate::conformal::{self, ConformalError};
use crate::data::{Annotation, AnnotationTable, ClassifierOutputs, DataError, Record};
use crate::experts::{self, ConfusionMatrix, ExpertError, ExpertPool, SimulatorMode};
use crate::rng::{self, Purpose};
use crate::selection::{self, SubsetPolicy};
use crate::Label;

/// Softmax of i.i.d. `N(0, logit_scale^2)` logits. Larger scales give
/// sharper, more accurate classifiers.
pub fn random_probs<R: Rng + ?Sized>(n: usize, logit_scale: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, logit_scale).expect("finite scale");
    let logits: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// One instance whose label is drawn from its own probability vector, so
/// the classifier is calibrated by construction.
pub fn random_instance<R: Rng + ?Sized>(
    n: usize,
    logit_scale: f64,
    rng: &mut R,
) -> (Vec<f64>, Label) {
    let probs = random_probs(n, logit_scale, rng);
    let y = experts::sample_weighted(&probs, rng).expect("positive mass");
    (probs, y)
}

/// `count` synthetic instances with ids `x0, x1, ...`.
pub fn classifier_outputs(
    n: usize,
    count: usize,
    logit_scale: f64,
    seed: u64,
) -> Result<ClassifierOutputs, DataError> {
    let mut rng = rng::stream(seed, Purpose::Synthetic, &[0]);
    let records = (0..count)
        .map(|i| {
            let (probs, true_label) = random_instance(n, logit_scale, &mut rng);
            Record {
                id: format!("x{i}"),
                true_label,
                probs,
            }
        })
        .collect();
    ClassifierOutputs::new(n, records)
}

/// `per_instance` annotations for every instance; annotator `j` answers
/// from the row of expert `j mod h` at the true label.
pub fn annotations(
    outputs: &ClassifierOutputs,
    pool: &ExpertPool,
    per_instance: usize,
    seed: u64,
) -> Result<AnnotationTable, DataError> {
    let mut rng = rng::stream(seed, Purpose::Synthetic, &[1]);
    let mut rows = Vec::with_capacity(outputs.len() * per_instance);
    for (instance, record) in outputs.records().iter().enumerate() {
        for j in 0..per_instance {
            let row = pool.matrix(j % pool.len()).row(record.true_label);
            rows.push(Annotation {
                instance,
                expert_id: format!("a{j}"),
                label: experts::sample_weighted(row, &mut rng).expect("stochastic row"),
            });
        }
    }
    AnnotationTable::new(rows, outputs)
}

/// Diagonal `diag`, remaining mass spread evenly.
pub fn strong_expert(n: usize, diag: f64) -> ConfusionMatrix {
    ConfusionMatrix::symmetric(n, diag)
}

/// Diagonal `diag`, `lure` on the favourite wrong label `w`, the rest spread
/// evenly. Row `w` puts its lure mass on `w + 1`.
pub fn adversarial_expert(n: usize, diag: f64, lure: f64, w: Label) -> ConfusionMatrix {
    let rest = (1.0 - diag - lure) / (n - 2) as f64;
    let rows = (0..n)
        .map(|y| {
            let target = if y == w { (w + 1) % n } else { w };
            (0..n)
                .map(|p| {
                    if p == y {
                        diag
                    } else if p == target {
                        lure
                    } else {
                        rest
                    }
                })
                .collect()
        })
        .collect();
    ConfusionMatrix::from_rows(rows).expect("stochastic by construction")
}

/// `strong` experts with diagonal 0.90 followed by `adversarial` experts with
/// diagonal 0.15 and 0.75 on label 0.
pub fn mixed_pool(n: usize, strong: usize, adversarial: usize) -> Result<ExpertPool, ExpertError> {
    let mut matrices = vec![strong_expert(n, 0.90); strong];
    matrices.extend(std::iter::repeat_n(
        adversarial_expert(n, 0.15, 0.75, 0),
        adversarial,
    ));
    ExpertPool::from_matrices(matrices)
}

/// Random diagonal-dominant matrix: each diagonal is uniform in
/// `[lo, hi)`, off-diagonal mass is a flat Dirichlet share of the rest.
pub fn random_expert<R: Rng + ?Sized>(n: usize, lo: f64, hi: f64, rng: &mut R) -> ConfusionMatrix {
    let gamma = Gamma::new(1.0, 1.0).expect("valid shape");
    let rows = (0..n)
        .map(|y| {
            let diag = rng.random_range(lo..hi);
            let draws: Vec<f64> = (0..n - 1).map(|_| gamma.sample(rng) + 1e-12).collect();
            let sum: f64 = draws.iter().sum();
            let mut it = draws.into_iter();
            (0..n)
                .map(|p| {
                    if p == y {
                        diag
                    } else {
                        (1.0 - diag) * it.next().expect("n - 1 draws") / sum
                    }
                })
                .collect()
        })
        .collect();
    ConfusionMatrix::from_rows(rows).expect("stochastic by construction")
}

/// A randomized setting for checking the accuracy bounds.
#[derive(Debug, Clone)]
pub struct BoundScenario {
    pub n: usize,
    pub alpha: f64,
    pub logit_scale: f64,
    pub pool: ExpertPool,
}

impl BoundScenario {
    /// `n` in `3..=10`, `h` in `1..=7`, expert diagonals in `[0.6, 0.95)`,
    /// `alpha` in `[0.02, 0.2)`.
    pub fn random(seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Synthetic, &[2]);
        let n = rng.random_range(3..=10);
        let h = rng.random_range(1..=7);
        let matrices = (0..h)
            .map(|_| random_expert(n, 0.6, 0.95, &mut rng))
            .collect();
        Self {
            n,
            alpha: rng.random_range(0.02..0.2),
            logit_scale: rng.random_range(1.0..3.0),
            pool: ExpertPool::from_matrices(matrices).expect("h >= 1"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Combine(#[from] CombineError),
}

/// Records both bounds' inputs on `samples` test instances where every
/// expert answers from the conformal set. The samples are split into
/// `calibrations` batches, each calibrated on its own `cal_size` fresh
/// instances, so estimates average over calibration draws as the coverage
/// guarantee does.
pub fn simulate_bounds(
    scenario: &BoundScenario,
    cal_size: usize,
    samples: usize,
    calibrations: usize,
    seed: u64,
) -> Result<(Vec<Lemma1Record>, Vec<Lemma2Record>), SynthError> {
    let calibrations = calibrations.clamp(1, samples.max(1));
    let mut l1 = Vec::with_capacity(samples);
    let mut l2 = Vec::new();
    let mut index = 0;
    for batch in 0..calibrations {
        let mut rng = rng::stream(seed, Purpose::Synthetic, &[3, batch as u64]);
        let scores: Vec<f64> = (0..cal_size)
            .map(|_| {
                let (probs, y) = random_instance(scenario.n, scenario.logit_scale, &mut rng);
                conformal::score(&probs, y)
            })
            .collect();
        let threshold = conformal::calibrate(&scores, scenario.alpha)?;
        let state = SystemState {
            threshold: &threshold,
            pool: &scenario.pool,
            mode: SimulatorMode::Oracle,
            greedy_fallback: Fallback::ModelArgmax,
            rule: &Majority,
            run_seed: rng::mix(&[seed, 4]),
        };
        let size = samples / calibrations + usize::from(batch < samples % calibrations);
        for _ in 0..size {
            let (probs, y) = random_instance(scenario.n, scenario.logit_scale, &mut rng);
            let instance = Instance {
                index,
                id: "",
                probs: &probs,
                true_label: y,
                psi: None,
            };
            index += 1;
            let ctx = InstanceContext::new(instance, state)?;
            let (a, b) = instance_bound_records(&ctx)?;
            l1.push(a);
            l2.extend(b);
        }
    }
    Ok((l1, l2))
}

/// Inputs of both bounds for one instance, with every expert answering from
/// the conformal set.
pub fn instance_bound_records(
    ctx: &InstanceContext<'_>,
) -> Result<(Lemma1Record, Option<Lemma2Record>), CombineError> {
    let trace = ctx.predict(SubsetPolicy::AllHumans)?;
    let pool = ctx.state.pool;
    let restricted = pool
        .experts()
        .iter()
        .map(|e| selection::restricted_matrix(&e.matrix, &ctx.conformal_set))
        .collect::<Result<Vec<_>, _>>()?;
    let y = ctx.instance.true_label;
    let l1 = bounds::lemma1_record(trace.prediction, y, &restricted, &trace.final_preds);
    let matrices: Vec<&ConfusionMatrix> = pool.experts().iter().map(|e| &e.matrix).collect();
    let l2 = bounds::lemma2_record(
        y,
        ctx.instance.probs[y],
        &matrices,
        &restricted,
        &ctx.initial_preds,
    );
    Ok((l1, l2))
}
