//! Human-AI multiclass classification with conformal prediction sets and
//! per-instance selection of simulated human experts.
//!
//! A pretrained classifier's probability outputs are calibrated into split
//! conformal prediction sets. For every instance a greedy rule picks the
//! subset of experts whose initial predictions make them informative given
//! the set, the selected experts re-answer from inside the set, and their
//! answers are merged by majority vote.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: CSV ingestion of classifier outputs and annotations, seeded splits.
//! - [`conformal`]: scores, calibration, prediction sets, coverage metrics.
//! - [`experts`]: confusion-matrix estimation and expert simulation.
//! - [`selection`]: restricted success matrices, greedy subset selection, baselines.
//! - [`combine`]: majority combination and the per-instance pipeline.
//! - [`bounds`]: Monte Carlo diagnostics for the accuracy lower bounds.
//! - [`harness`]: experiment configuration, multi-run orchestration, reports.
//! - [`synth`]: synthetic datasets and expert pools for tests and demos.

pub mod bounds;
pub mod combine;
pub mod conformal;
pub mod data;
pub mod experts;
pub mod harness;
pub mod rng;
pub mod selection;
pub mod synth;

pub use combine::{majority, system_predict, CombinedPrediction, Fallback, InstanceTrace};
pub use conformal::{
    calibrate, coverage, predict_set, score, topk_set, ConformalThreshold, CoverageReport,
    PredictionSet, SetSource,
};
pub use data::{
    parse_annotations, parse_probs, split_dataset, AnnotationTable, ClassifierOutputs, Split,
    SplitFractions,
};
pub use experts::{ConfusionMatrix, EmpiricalDistribution, ExpertPool, SimulatorMode};
pub use harness::{run_experiment, sweep, ExperimentConfig, Report};
pub use selection::{
    greedy_select, restricted_matrix, OptimalTeamSize, RestrictedSuccessMatrix, SelectionResult,
    SubsetPolicy,
};

/// Index of a class label in `0..n`.
pub type Label = usize;
