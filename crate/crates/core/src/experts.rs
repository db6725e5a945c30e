//! Expert models: confusion matrices estimated from annotations, empirical
//! answer distributions, and the two simulators for expert answers.
//!
//! Confusion matrices use the row-as-true-label convention everywhere:
//! `C[y][p]` is the probability that the expert answers `p` when the truth is `y`.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::PredictionSet;
use crate::data::{AnnotationTable, ClassifierOutputs};
use crate::Label;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("no annotations available for the requested instances")]
    NoAnnotations,
    #[error("invalid confusion matrix: {0}")]
    InvalidMatrix(String),
    #[error("expert pool needs at least one expert")]
    EmptyPool,
    #[error("confusion matrix csv: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-stochastic `n x n` confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    values: Vec<f64>,
    /// Additive smoothing used during estimation.
    pub smoothing: f64,
}

impl ConfusionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ExpertError> {
        let n = rows.len();
        if n < 2 {
            return Err(ExpertError::InvalidMatrix(format!("n = {n} < 2")));
        }
        let mut values = Vec::with_capacity(n * n);
        for (y, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(ExpertError::InvalidMatrix(format!(
                    "row {y} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(ExpertError::InvalidMatrix(format!(
                    "row {y} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ExpertError::InvalidMatrix(format!("row {y} sums to {sum}")));
            }
            values.extend(row);
        }
        Ok(Self {
            n,
            values,
            smoothing: 0.0,
        })
    }

    /// Matrix with `diag` on the diagonal and the rest spread evenly.
    pub fn symmetric(n: usize, diag: f64) -> Self {
        let off = (1.0 - diag) / (n as f64 - 1.0);
        let rows = (0..n)
            .map(|y| (0..n).map(|p| if p == y { diag } else { off }).collect())
            .collect();
        Self::from_rows(rows).expect("symmetric matrix is stochastic")
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, y: Label, p: Label) -> f64 {
        self.values[y * self.n + p]
    }

    pub fn row(&self, y: Label) -> &[f64] {
        &self.values[y * self.n..(y + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n)
    }

    /// Mean diagonal mass, the expert's accuracy under uniform classes.
    pub fn mean_accuracy(&self) -> f64 {
        (0..self.n).map(|y| self.get(y, y)).sum::<f64>() / self.n as f64
    }

    /// Writes `n,<n>` followed by `row,col,value` triples.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), ExpertError> {
        writeln!(w, "n,{}", self.n)?;
        writeln!(w, "row,col,value")?;
        for y in 0..self.n {
            for p in 0..self.n {
                writeln!(w, "{y},{p},{}", self.get(y, p))?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, ExpertError> {
        let mut lines = r.lines();
        let mut next = || -> Result<Option<String>, ExpertError> { Ok(lines.next().transpose()?) };
        let first = next()?.ok_or_else(|| ExpertError::Parse("empty input".into()))?;
        let n: usize = first
            .trim()
            .strip_prefix("n,")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| ExpertError::Parse(format!("expected `n,<size>`, got {first:?}")))?;
        match next()? {
            Some(h) if h.trim() == "row,col,value" => {}
            other => {
                return Err(ExpertError::Parse(format!(
                    "expected `row,col,value` header, got {other:?}"
                )))
            }
        }
        let mut rows = vec![vec![f64::NAN; n]; n];
        while let Some(line) = next()? {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.trim().split(',').collect();
            let bad = || ExpertError::Parse(format!("bad triple {line:?}"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let y: usize = parts[0].parse().map_err(|_| bad())?;
            let p: usize = parts[1].parse().map_err(|_| bad())?;
            let v: f64 = parts[2].parse().map_err(|_| bad())?;
            if y >= n || p >= n {
                return Err(bad());
            }
            rows[y][p] = v;
        }
        if rows.iter().flatten().any(|v| v.is_nan()) {
            return Err(ExpertError::Parse("missing entries".into()));
        }
        Self::from_rows(rows)
    }
}

/// Add-`lambda` maximum-likelihood estimate from every annotation on `ids`.
///
/// A row whose true label never occurs and `lambda = 0` falls back to uniform.
pub fn estimate_confusion(
    table: &AnnotationTable,
    outputs: &ClassifierOutputs,
    ids: &[usize],
    lambda: f64,
) -> Result<ConfusionMatrix, ExpertError> {
    let n = outputs.num_classes();
    let mut counts = vec![0u64; n * n];
    let mut total = 0u64;
    for &id in ids {
        if let Some(h) = table.counts(id) {
            let y = outputs.get(id).true_label;
            for (p, &c) in h.iter().enumerate() {
                counts[y * n + p] += u64::from(c);
                total += u64::from(c);
            }
        }
    }
    if total == 0 {
        return Err(ExpertError::NoAnnotations);
    }
    let mut values = Vec::with_capacity(n * n);
    for row in counts.chunks(n) {
        let row_total: u64 = row.iter().sum();
        let denom = row_total as f64 + lambda * n as f64;
        if denom > 0.0 {
            values.extend(row.iter().map(|&c| (c as f64 + lambda) / denom));
        } else {
            values.extend(std::iter::repeat_n(1.0 / n as f64, n));
        }
    }
    Ok(ConfusionMatrix {
        n,
        values,
        smoothing: lambda,
    })
}

/// Normalized answer histogram `Psi` of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution(pub Vec<f64>);

impl EmpiricalDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

pub fn empirical_distribution(
    table: &AnnotationTable,
    instance: usize,
) -> Result<EmpiricalDistribution, ExpertError> {
    let counts = table.counts(instance).ok_or(ExpertError::NoAnnotations)?;
    normalize_counts(counts)
}

pub fn normalize_counts(counts: &[u32]) -> Result<EmpiricalDistribution, ExpertError> {
    let total: u32 = counts.iter().sum();
    if total == 0 {
        return Err(ExpertError::NoAnnotations);
    }
    Ok(EmpiricalDistribution(
        counts
            .iter()
            .map(|&c| f64::from(c) / f64::from(total))
            .collect(),
    ))
}

/// An expert and its confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub id: String,
    pub matrix: ConfusionMatrix,
}

/// The `h` experts available for an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPool {
    experts: Vec<Expert>,
}

impl ExpertPool {
    pub fn new(experts: Vec<Expert>) -> Result<Self, ExpertError> {
        let first = experts.first().ok_or(ExpertError::EmptyPool)?;
        let n = first.matrix.num_classes();
        if experts.iter().any(|e| e.matrix.num_classes() != n) {
            return Err(ExpertError::InvalidMatrix(
                "experts disagree on the number of classes".into(),
            ));
        }
        Ok(Self { experts })
    }

    pub fn from_matrices(matrices: Vec<ConfusionMatrix>) -> Result<Self, ExpertError> {
        Self::new(
            matrices
                .into_iter()
                .enumerate()
                .map(|(i, matrix)| Expert {
                    id: format!("expert{i}"),
                    matrix,
                })
                .collect(),
        )
    }

    /// `h` experts sharing one matrix.
    pub fn homogeneous(base: &ConfusionMatrix, h: usize) -> Result<Self, ExpertError> {
        Self::from_matrices(vec![base.clone(); h])
    }

    /// `h` experts whose rows are Dirichlet draws centred on `base` with
    /// total concentration `concentration`.
    pub fn jittered<R: Rng>(
        base: &ConfusionMatrix,
        h: usize,
        concentration: f64,
        rng: &mut R,
    ) -> Result<Self, ExpertError> {
        if concentration.is_nan() || concentration <= 0.0 {
            return Err(ExpertError::InvalidMatrix(format!(
                "jitter concentration must be positive, got {concentration}"
            )));
        }
        let n = base.num_classes();
        let mut matrices = Vec::with_capacity(h);
        for _ in 0..h {
            let mut values = Vec::with_capacity(n * n);
            for row in base.rows() {
                let draws: Vec<f64> = row
                    .iter()
                    .map(|&p| {
                        let shape = concentration * p;
                        if shape > 0.0 {
                            Gamma::new(shape, 1.0).expect("positive shape").sample(rng)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let sum: f64 = draws.iter().sum();
                if sum > 0.0 {
                    values.extend(draws.iter().map(|d| d / sum));
                } else {
                    values.extend_from_slice(row);
                }
            }
            matrices.push(ConfusionMatrix {
                n,
                values,
                smoothing: base.smoothing,
            });
        }
        Self::from_matrices(matrices)
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.experts[0].matrix.num_classes()
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn matrix(&self, i: usize) -> &ConfusionMatrix {
        &self.experts[i].matrix
    }

    /// Pool restricted to the first `m` experts.
    pub fn truncated(&self, m: usize) -> Self {
        Self {
            experts: self.experts[..m.min(self.experts.len())].to_vec(),
        }
    }

    /// Expert with the largest mean diagonal mass; ties go to the lower index.
    pub fn best_expert(&self) -> usize {
        let mut best = 0;
        for i in 1..self.experts.len() {
            if self.matrix(i).mean_accuracy() > self.matrix(best).mean_accuracy() {
                best = i;
            }
        }
        best
    }
}

/// How expert answers are simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorMode {
    /// Answers drawn from the expert's confusion row of the true label.
    #[default]
    Oracle,
    /// Initial answers drawn from the instance's real answer histogram; the
    /// confusion row of that answer then weights the labels of the set.
    Empirical,
}

/// Index drawn proportionally to `weights`, or `None` when all weights are zero.
pub fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    WeightedIndex::new(weights).ok().map(|d| d.sample(rng))
}

/// Initial answer over the full label space.
pub fn initial_prediction<R: Rng + ?Sized>(
    mode: SimulatorMode,
    matrix: &ConfusionMatrix,
    y: Label,
    psi: Option<&EmpiricalDistribution>,
    rng: &mut R,
) -> Label {
    let weights = match (mode, psi) {
        (SimulatorMode::Empirical, Some(psi)) => psi.probs(),
        _ => matrix.row(y),
    };
    sample_weighted(weights, rng).unwrap_or_else(|| rng.random_range(0..weights.len()))
}

fn sample_within_set<R: Rng + ?Sized>(row: &[f64], set: &PredictionSet, rng: &mut R) -> Label {
    let weights: Vec<f64> = set.labels().iter().map(|&p| row[p]).collect();
    let k = sample_weighted(&weights, rng).unwrap_or_else(|| rng.random_range(0..set.len()));
    set.labels()[k]
}

/// Final in-set answer: row `y` restricted to the set and renormalized.
pub fn final_prediction_oracle<R: Rng + ?Sized>(
    matrix: &ConfusionMatrix,
    y: Label,
    set: &PredictionSet,
    rng: &mut R,
) -> Label {
    sample_within_set(matrix.row(y), set, rng)
}

/// Final in-set answer given an already drawn initial answer `kappa`.
pub fn final_from_initial<R: Rng + ?Sized>(
    matrix: &ConfusionMatrix,
    kappa: Label,
    set: &PredictionSet,
    rng: &mut R,
) -> Label {
    sample_within_set(matrix.row(kappa), set, rng)
}

/// Two-stage empirical answer: `kappa ~ psi`, then row `kappa` restricted to the set.
pub fn final_prediction_empirical<R: Rng + ?Sized>(
    psi: &EmpiricalDistribution,
    matrix: &ConfusionMatrix,
    set: &PredictionSet,
    rng: &mut R,
) -> Label {
    let kappa =
        sample_weighted(psi.probs(), rng).unwrap_or_else(|| rng.random_range(0..psi.probs().len()));
    final_from_initial(matrix, kappa, set, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::SetSource;
    use crate::data::{read_annotations, read_probs};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DRAWS: usize = 100_000;

    fn frequencies(n: usize, mut draw: impl FnMut() -> Label) -> Vec<f64> {
        let mut counts = vec![0usize; n];
        for _ in 0..DRAWS {
            counts[draw()] += 1;
        }
        counts.iter().map(|&c| c as f64 / DRAWS as f64).collect()
    }

    fn assert_matches(freq: &[f64], expected: &[f64]) {
        for (f, p) in freq.iter().zip(expected) {
            let tol = 3.0 * (p * (1.0 - p) / DRAWS as f64).sqrt() + 1e-12;
            assert!((f - p).abs() <= tol, "freq {freq:?} vs {expected:?}");
        }
    }

    fn two_class_fixture() -> (ClassifierOutputs, AnnotationTable) {
        let out = read_probs(
            "instance_id,true_label,p0,p1\na,0,0.6,0.4\nb,0,0.7,0.3\nc,0,0.8,0.2\n".as_bytes(),
        )
        .unwrap();
        let ann = read_annotations(
            "instance_id,expert_id,label\na,e1,0\nb,e2,0\nc,e1,1\n".as_bytes(),
            &out,
        )
        .unwrap();
        (out, ann)
    }

    #[test]
    fn confusion_mle() {
        let (out, ann) = two_class_fixture();
        let ids = [0, 1, 2];
        let c = estimate_confusion(&ann, &out, &ids, 0.0).unwrap();
        assert!((c.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.row(1), &[0.5, 0.5]);

        let c = estimate_confusion(&ann, &out, &ids, 1.0).unwrap();
        assert!((c.get(0, 0) - 3.0 / 5.0).abs() < 1e-15);
        assert!((c.get(0, 1) - 2.0 / 5.0).abs() < 1e-15);
        assert_eq!(c.smoothing, 1.0);

        assert!(matches!(
            estimate_confusion(&ann, &out, &[], 1.0),
            Err(ExpertError::NoAnnotations)
        ));
    }

    #[test]
    fn empirical_distribution_examples() {
        assert_eq!(
            normalize_counts(&[1, 0, 2]).unwrap().0,
            vec![1.0 / 3.0, 0.0, 2.0 / 3.0]
        );
        assert_eq!(normalize_counts(&[5, 0, 0]).unwrap().0, vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            normalize_counts(&[0, 0, 0]),
            Err(ExpertError::NoAnnotations)
        ));
        let (_, ann) = two_class_fixture();
        assert_eq!(empirical_distribution(&ann, 2).unwrap().0, vec![0.0, 1.0]);
    }

    #[test]
    fn degenerate_initial_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = ConfusionMatrix::symmetric(3, 1.0);
        for _ in 0..100 {
            assert_eq!(
                initial_prediction(SimulatorMode::Oracle, &c, 2, None, &mut rng),
                2
            );
        }
        let psi = EmpiricalDistribution(vec![0.0, 1.0, 0.0]);
        for _ in 0..100 {
            assert_eq!(
                initial_prediction(SimulatorMode::Empirical, &c, 2, Some(&psi), &mut rng),
                1
            );
        }
    }

    #[test]
    fn oracle_initial_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = ConfusionMatrix::symmetric(2, 0.5);
        let f = frequencies(2, || {
            initial_prediction(SimulatorMode::Oracle, &c, 0, None, &mut rng)
        });
        assert!((0.49..=0.51).contains(&f[0]), "{f:?}");
    }

    #[test]
    fn oracle_final_is_renormalized_row() {
        let c = ConfusionMatrix::from_rows(vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.3, 0.3, 0.4],
        ])
        .unwrap();
        let set = PredictionSet::new(vec![0, 2], SetSource::Conformal);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = frequencies(3, || final_prediction_oracle(&c, 0, &set, &mut rng));
        assert_matches(&f, &[6.0 / 7.0, 0.0, 1.0 / 7.0]);

        let single = PredictionSet::new(vec![1], SetSource::Conformal);
        for _ in 0..50 {
            assert_eq!(final_prediction_oracle(&c, 0, &single, &mut rng), 1);
        }
    }

    #[test]
    fn zero_mass_falls_back_to_uniform() {
        let c = ConfusionMatrix::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let set = PredictionSet::new(vec![1, 2], SetSource::Conformal);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = frequencies(3, || final_prediction_oracle(&c, 0, &set, &mut rng));
        assert_matches(&f, &[0.0, 0.5, 0.5]);
        let psi = EmpiricalDistribution(vec![1.0, 0.0, 0.0]);
        let f = frequencies(3, || final_prediction_empirical(&psi, &c, &set, &mut rng));
        assert_matches(&f, &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn empirical_final_weights_by_kappa_row() {
        let c = ConfusionMatrix::from_rows(vec![
            vec![0.5, 0.25, 0.25],
            vec![0.2, 0.7, 0.1],
            vec![0.3, 0.3, 0.4],
        ])
        .unwrap();
        let psi = EmpiricalDistribution(vec![0.0, 1.0, 0.0]);
        let set = PredictionSet::new(vec![0, 2], SetSource::Conformal);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = frequencies(3, || final_prediction_empirical(&psi, &c, &set, &mut rng));
        assert_matches(&f, &[2.0 / 3.0, 0.0, 1.0 / 3.0]);

        let full = PredictionSet::full(3);
        let f = frequencies(3, || final_prediction_empirical(&psi, &c, &full, &mut rng));
        assert_matches(&f, c.row(1));
    }

    #[test]
    fn csv_round_trip() {
        let c = ConfusionMatrix::from_rows(vec![vec![0.75, 0.25], vec![0.1, 0.9]]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("n,2\nrow,col,value\n0,0,0.75\n"));
        assert_eq!(ConfusionMatrix::read_csv(buf.as_slice()).unwrap(), c);
        assert!(ConfusionMatrix::read_csv("n,2\nrow,col,value\n0,0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn jitter_keeps_rows_stochastic() {
        let base = ConfusionMatrix::symmetric(4, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pool = ExpertPool::jittered(&base, 5, 50.0, &mut rng).unwrap();
        assert_eq!(pool.len(), 5);
        for e in pool.experts() {
            for row in e.matrix.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert_ne!(pool.matrix(0), pool.matrix(1));
    }

    #[test]
    fn best_expert_uses_diagonal_mass() {
        let pool = ExpertPool::from_matrices(vec![
            ConfusionMatrix::symmetric(3, 0.6),
            ConfusionMatrix::symmetric(3, 0.9),
            ConfusionMatrix::symmetric(3, 0.9),
        ])
        .unwrap();
        assert_eq!(pool.best_expert(), 1);
        assert!(ExpertPool::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn estimation_is_order_invariant_and_positive(
            rows in prop::collection::vec((0usize..6, 0usize..3), 1..60),
            seed: u64,
            lambda in 0.1f64..3.0,
        ) {
            use rand::seq::SliceRandom;
            let out = read_probs(
                "instance_id,true_label,p0,p1,p2\nx0,0,0.4,0.3,0.3\nx1,1,0.4,0.3,0.3\nx2,2,0.4,0.3,0.3\nx3,0,0.4,0.3,0.3\nx4,1,0.4,0.3,0.3\nx5,2,0.4,0.3,0.3\n"
                    .as_bytes(),
            ).unwrap();
            let ann: Vec<_> = rows.iter().enumerate().map(|(k, &(i, l))| crate::data::Annotation {
                instance: i, expert_id: format!("e{k}"), label: l,
            }).collect();
            let mut shuffled = ann.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let ids: Vec<usize> = (0..6).collect();
            let a = estimate_confusion(&AnnotationTable::new(ann, &out).unwrap(), &out, &ids, lambda).unwrap();
            let b = estimate_confusion(&AnnotationTable::new(shuffled, &out).unwrap(), &out, &ids, lambda).unwrap();
            prop_assert_eq!(&a, &b);
            for row in a.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn final_predictions_stay_in_set(
            set in prop::collection::btree_set(0usize..5, 1..5),
            y in 0usize..5,
            seed: u64,
        ) {
            let c = ConfusionMatrix::symmetric(5, 0.8);
            let set = PredictionSet::new(set.into_iter().collect(), SetSource::Conformal);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi = EmpiricalDistribution(vec![0.2; 5]);
            prop_assert!(set.contains(final_prediction_oracle(&c, y, &set, &mut rng)));
            prop_assert!(set.contains(final_prediction_empirical(&psi, &c, &set, &mut rng)));
        }
    }
}
