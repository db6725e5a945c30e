//! Input generators shared by the benchmarks.

use conformal_crew::conformal::{PredictionSet, SetSource};
use conformal_crew::experts::ExpertPool;
use conformal_crew::rng::{self, Purpose};
use conformal_crew::selection::{self, RestrictedSuccessMatrix};
use conformal_crew::synth;
use conformal_crew::Label;
use rand::Rng;

/// A greedy-selection input with `h` experts and a set of size `c` over
/// `n` labels.
pub struct SelectionCase {
    pub set: PredictionSet,
    pub restricted: Vec<RestrictedSuccessMatrix>,
    pub initial: Vec<Label>,
}

pub fn selection_case(n: usize, h: usize, c: usize, seed: u64) -> SelectionCase {
    let mut rng = rng::stream(seed, Purpose::Synthetic, &[n as u64, h as u64, c as u64]);
    let matrices = (0..h)
        .map(|_| synth::random_expert(n, 0.5, 0.95, &mut rng))
        .collect();
    let pool = ExpertPool::from_matrices(matrices).expect("h >= 1");
    let labels = rand::seq::index::sample(&mut rng, n, c).into_vec();
    let set = PredictionSet::new(labels, SetSource::Conformal);
    let restricted = pool
        .experts()
        .iter()
        .map(|e| selection::restricted_matrix(&e.matrix, &set).expect("nonempty set"))
        .collect();
    let initial = (0..h)
        .map(|_| set.labels()[rng.random_range(0..c)])
        .collect();
    SelectionCase {
        set,
        restricted,
        initial,
    }
}
