//! Multi-run experiment orchestration, sweeps and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{BoundsDiagnostics, BoundsError, Lemma1Record, Lemma2Record};
use crate::combine::{
    CombineError, Fallback, Instance, InstanceContext, InstanceTrace, Majority, SystemState,
};
use crate::conformal::{
    self, ConformalError, ConformalThreshold, CoverageAccumulator, CoverageReport, PredictionSet,
    SetSource,
};
use crate::data::{self, AnnotationTable, ClassifierOutputs, DataError, Split, SplitFractions};
use crate::experts::{self, EmpiricalDistribution, ExpertError, ExpertPool, SimulatorMode};
use crate::rng::{self, Purpose};
use crate::selection::{self, OptimalTeamSize, SelectionError, SubsetPolicy};
use crate::synth;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Experts(#[from] ExpertError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Whether the error stems from the configuration rather than the data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Json(_) | Self::Selection(SelectionError::UnknownPolicy(_))
        ) || matches!(
            self,
            Self::Data(DataError::InvalidFractions(..))
                | Self::Conformal(ConformalError::InvalidAlpha(_))
        )
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Calibration-size keyed tolerance schedules.
pub fn alpha_preset(name: &str) -> Option<&'static [(usize, f64)]> {
    match name {
        "imagenet16h" => Some(&[(180, 0.011), (240, 0.0083), (300, 0.0066), (360, 0.0055)]),
        "cifar10h" => Some(&[
            (1000, 0.001),
            (1500, 0.0007),
            (2000, 0.0005),
            (2500, 0.0004),
            (3000, 0.0003),
        ]),
        _ => None,
    }
}

/// Preset entry whose calibration size is nearest `l`; ties go to the
/// smaller size.
pub fn preset_alpha(table: &[(usize, f64)], l: usize) -> f64 {
    table
        .iter()
        .min_by_key(|(size, _)| (size.abs_diff(l), *size))
        .map(|&(_, a)| a)
        .expect("nonempty preset")
}

/// Split by fractions (`calibration`, `estimation`, `test`) or by absolute
/// sizes (`calibration_size`, `estimation_size`, optional `test_size`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
}

impl SplitSpec {
    pub fn fractions(cal: f64, est: f64, test: f64) -> Self {
        Self {
            calibration: Some(cal),
            estimation: Some(est),
            test: Some(test),
            ..Self::default()
        }
    }

    pub fn sizes(cal: usize, est: usize, test: Option<usize>) -> Self {
        Self {
            calibration_size: Some(cal),
            estimation_size: Some(est),
            test_size: test,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        match (self.fraction_triple(), self.calibration_size, self.estimation_size) {
            (Some(f), None, None) if self.test_size.is_none() => {
                SplitFractions::new(f.0, f.1, f.2)?;
                Ok(())
            }
            (None, Some(_), Some(_)) => Ok(()),
            _ => Err(config_err(
                "split needs either calibration/estimation/test fractions or calibration_size/estimation_size",
            )),
        }
    }

    fn fraction_triple(&self) -> Option<(f64, f64, f64)> {
        match (self.calibration, self.estimation, self.test) {
            (Some(c), Some(e), Some(t)) => Some((c, e, t)),
            (None, None, None) => None,
            _ => Some((f64::NAN, f64::NAN, f64::NAN)),
        }
    }

    pub fn apply(&self, ids: &[usize], seed: u64) -> Result<Split, DataError> {
        match self.fraction_triple() {
            Some((c, e, t)) => data::split_dataset(ids, SplitFractions::new(c, e, t)?, seed),
            None => data::split_by_sizes(
                ids,
                self.calibration_size.unwrap_or(0),
                self.estimation_size.unwrap_or(0),
                self.test_size,
                seed,
            ),
        }
    }
}

fn default_smoothing() -> f64 {
    1.0
}

/// Experiment knobs, read from a JSON object with these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_preset: Option<String>,
    pub h: usize,
    pub runs: usize,
    pub master_seed: u64,
    pub split: SplitSpec,
    pub methods: Vec<SubsetPolicy>,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub simulator: SimulatorMode,
    /// Dirichlet concentration for per-expert perturbation of the estimated
    /// matrix; `None` shares one matrix across experts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<usize>,
    /// Extra `greedy_topk:k` methods.
    #[serde(default)]
    pub k_values: Vec<usize>,
    /// Reuse one split for every run instead of redrawing it.
    #[serde(default)]
    pub fixed_split: bool,
    /// Accepted and echoed; has no effect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Thread count; never echoed in reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedy_fallback: Option<Fallback>,
    #[serde(default)]
    pub compute_bounds: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let config: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 {
            return Err(config_err("runs must be at least 1"));
        }
        if self.h == 0 {
            return Err(config_err("h must be at least 1"));
        }
        match (self.alpha, &self.alpha_preset) {
            (Some(a), None) if a > 0.0 && a < 1.0 => {}
            (Some(a), None) => {
                return Err(config_err(format!("alpha must lie in (0, 1), got {a}")))
            }
            (None, Some(name)) if alpha_preset(name).is_some() => {}
            (None, Some(name)) => return Err(config_err(format!("unknown alpha preset {name:?}"))),
            _ => return Err(config_err("set exactly one of alpha and alpha_preset")),
        }
        self.split.validate()?;
        if self.smoothing.is_nan() || self.smoothing < 0.0 {
            return Err(config_err("smoothing must be non-negative"));
        }
        if let Some(j) = self.jitter {
            if j.is_nan() || j <= 0.0 {
                return Err(config_err("jitter must be positive"));
            }
        }
        if self.zeta == Some(0) {
            return Err(SelectionError::InvalidZeta.into());
        }
        if self.workers == Some(0) {
            return Err(config_err("workers must be at least 1"));
        }
        if self.k_values.contains(&0) {
            return Err(config_err("k values must be at least 1"));
        }
        for m in &self.methods {
            if *m == SubsetPolicy::GreedyTopK(0) {
                return Err(config_err("greedy_topk needs k >= 1"));
            }
        }
        Ok(())
    }

    /// Configured methods followed by one top-k method per `k_values` entry,
    /// without duplicates.
    pub fn effective_methods(&self) -> Vec<SubsetPolicy> {
        let mut out: Vec<SubsetPolicy> = Vec::new();
        let extra = self.k_values.iter().map(|&k| SubsetPolicy::GreedyTopK(k));
        for m in self.methods.iter().copied().chain(extra) {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }

    /// Tolerance for a calibration set of size `l`.
    pub fn resolve_alpha(&self, l: usize) -> f64 {
        match (self.alpha, &self.alpha_preset) {
            (Some(a), _) => a,
            (None, Some(name)) => preset_alpha(alpha_preset(name).expect("validated"), l),
            (None, None) => unreachable!("validated"),
        }
    }

    fn echo(&self) -> Self {
        Self {
            workers: None,
            ..self.clone()
        }
    }
}

/// Per-run metrics of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    /// Fraction of test instances answered correctly.
    pub success: f64,
    /// Fraction answered correctly among those whose conformal set holds
    /// the true label.
    pub conditional_success: Option<f64>,
    pub subset_size: f64,
    pub set_size: f64,
    pub coverage: f64,
    pub fallback_rate: f64,
    /// Resolved average subset size of a random policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

/// Aggregate over runs of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub success_mean: f64,
    pub success_std: f64,
    pub conditional_success_mean: Option<f64>,
    pub subset_size_mean: f64,
    pub subset_size_std: f64,
    pub set_size_mean: f64,
    pub fallback_rate: f64,
    /// Pooled over every run's test instances.
    pub coverage: CoverageReport,
    pub runs: Vec<RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub config: ExperimentConfig,
    /// Swept parameter value, if the report belongs to a sweep.
    pub x_value: Option<f64>,
    pub alpha: f64,
    pub calibration_size: usize,
    pub estimation_size: usize,
    pub test_size: usize,
    pub methods: Vec<MethodSummary>,
    pub bounds: Option<BoundsDiagnostics>,
}

impl Report {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything fixed before test time in one run.
pub struct RunSetup {
    pub run: usize,
    pub seed: u64,
    pub split: Split,
    pub alpha: f64,
    pub threshold: ConformalThreshold,
    pub pool: ExpertPool,
}

/// Per-instance traces of one run, grouped by method in configuration order.
#[derive(Debug, Clone)]
pub struct RunTraces {
    pub run: usize,
    pub methods: Vec<(SubsetPolicy, Vec<InstanceTrace>)>,
}

/// Traces of every method on one instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InspectReport {
    pub run: usize,
    pub instance_id: String,
    pub role: String,
    pub alpha: f64,
    pub q_hat: Option<f64>,
    pub traces: Vec<InstanceTrace>,
}

struct Evaluation {
    /// Whether each instance's conformal set holds its true label.
    covered: Vec<bool>,
    methods: Vec<(SubsetPolicy, Vec<InstanceTrace>, Option<f64>)>,
}

struct RunOutcome {
    metrics: Vec<RunMetrics>,
    coverage: Vec<CoverageAccumulator>,
    lemma1: Vec<Lemma1Record>,
    lemma2: Vec<Lemma2Record>,
    traces: Option<RunTraces>,
    alpha: f64,
    sizes: (usize, usize, usize),
}

/// A configured experiment over one dataset.
pub struct Experiment<'a> {
    config: ExperimentConfig,
    outputs: &'a ClassifierOutputs,
    annotations: Option<&'a AnnotationTable>,
    pool: Option<&'a ExpertPool>,
    workers: usize,
}

impl<'a> Experiment<'a> {
    pub fn new(
        config: ExperimentConfig,
        outputs: &'a ClassifierOutputs,
        annotations: Option<&'a AnnotationTable>,
    ) -> Result<Self, HarnessError> {
        config.validate()?;
        let workers = config.workers.unwrap_or(1);
        Ok(Self {
            config,
            outputs,
            annotations,
            pool: None,
            workers,
        })
    }

    /// Uses `pool` truncated to `h` experts instead of estimating one.
    pub fn with_pool(mut self, pool: &'a ExpertPool) -> Result<Self, HarnessError> {
        if pool.len() < self.config.h {
            return Err(config_err(format!(
                "h = {} exceeds the supplied pool of {}",
                self.config.h,
                pool.len()
            )));
        }
        if pool.num_classes() != self.outputs.num_classes() {
            return Err(config_err(
                "pool and classifier disagree on the number of classes",
            ));
        }
        self.pool = Some(pool);
        Ok(self)
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn candidate_ids(&self) -> Result<Vec<usize>, HarnessError> {
        if self.config.simulator == SimulatorMode::Empirical {
            let table = self
                .annotations
                .ok_or_else(|| config_err("the empirical simulator needs annotations"))?;
            Ok(table.annotated_instances().collect())
        } else {
            Ok((0..self.outputs.len()).collect())
        }
    }

    /// Split, calibration and expert pool of run `run`.
    pub fn setup(&self, run: usize) -> Result<RunSetup, HarnessError> {
        let seed = rng::run_seed(self.config.master_seed, run as u64);
        let ids = self.candidate_ids()?;
        let split_seed = if self.config.fixed_split {
            rng::mix(&[self.config.master_seed, Purpose::Split as u64])
        } else {
            seed
        };
        let split = self
            .config
            .split
            .apply(&ids, split_seed)
            .map_err(|e| match e {
                DataError::DegenerateSplit { .. } => HarnessError::InsufficientData(e.to_string()),
                e => e.into(),
            })?;
        let alpha = self.config.resolve_alpha(split.calibration_size());
        let scores: Vec<f64> = split
            .cal
            .iter()
            .map(|&i| {
                let r = self.outputs.get(i);
                conformal::score(&r.probs, r.true_label)
            })
            .collect();
        let threshold = conformal::calibrate(&scores, alpha)?;
        let pool = match self.pool {
            Some(p) => p.truncated(self.config.h),
            None => {
                let table = self
                    .annotations
                    .ok_or_else(|| config_err("estimating experts needs annotations"))?;
                let base = experts::estimate_confusion(
                    table,
                    self.outputs,
                    &split.cal_and_est(),
                    self.config.smoothing,
                )?;
                match self.config.jitter {
                    Some(c) => {
                        let mut rng = rng::stream(seed, Purpose::Jitter, &[]);
                        ExpertPool::jittered(&base, self.config.h, c, &mut rng)?
                    }
                    None => ExpertPool::homogeneous(&base, self.config.h)?,
                }
            }
        };
        Ok(RunSetup {
            run,
            seed,
            split,
            alpha,
            threshold,
            pool,
        })
    }

    fn psi(&self, ids: &[usize]) -> Result<BTreeMap<usize, EmpiricalDistribution>, HarnessError> {
        let mut out = BTreeMap::new();
        if self.config.simulator == SimulatorMode::Empirical {
            let table = self
                .annotations
                .ok_or_else(|| config_err("the empirical simulator needs annotations"))?;
            for &i in ids {
                out.insert(i, experts::empirical_distribution(table, i)?);
            }
        }
        Ok(out)
    }

    fn state<'s>(&self, setup: &'s RunSetup, pool: &'s ExpertPool) -> SystemState<'s> {
        SystemState {
            threshold: &setup.threshold,
            pool,
            mode: self.config.simulator,
            greedy_fallback: self.config.greedy_fallback.unwrap_or(Fallback::ModelArgmax),
            rule: &Majority,
            run_seed: setup.seed,
        }
    }

    fn instance<'s>(
        &'s self,
        i: usize,
        psi: &'s BTreeMap<usize, EmpiricalDistribution>,
    ) -> Instance<'s> {
        let r = self.outputs.get(i);
        Instance {
            index: i,
            id: &r.id,
            probs: &r.probs,
            true_label: r.true_label,
            psi: psi.get(&i),
        }
    }

    /// Traces of every method on the instances `ids` under `setup`.
    fn evaluate(
        &self,
        setup: &RunSetup,
        pool: &ExpertPool,
        ids: &[usize],
        methods: &[SubsetPolicy],
    ) -> Result<Evaluation, HarnessError> {
        let psi = self.psi(ids)?;
        let state = self.state(setup, pool);
        let contexts = ids
            .iter()
            .map(|&i| InstanceContext::new(self.instance(i, &psi), state))
            .collect::<Result<Vec<_>, _>>()?;

        let needs_tau = methods.contains(&SubsetPolicy::Random(None));
        let tau = if needs_tau {
            let mut total = 0usize;
            for ctx in &contexts {
                total += ctx.greedy(&ctx.conformal_set)?.selected.len();
            }
            Some(total as f64 / contexts.len().max(1) as f64)
        } else {
            None
        };

        let mut out = Vec::with_capacity(methods.len());
        for &method in methods {
            let (resolved, tau_used) = match method {
                SubsetPolicy::Random(None) => (SubsetPolicy::Random(tau), tau),
                SubsetPolicy::Random(Some(t)) => (method, Some(t)),
                _ => (method, None),
            };
            let traces = contexts
                .iter()
                .map(|ctx| {
                    let mut t = ctx.predict(resolved)?;
                    t.method = method.to_string();
                    Ok(t)
                })
                .collect::<Result<Vec<_>, CombineError>>()?;
            out.push((method, traces, tau_used));
        }
        let covered = contexts
            .iter()
            .map(|ctx| ctx.conformal_set.contains(ctx.instance.true_label))
            .collect();
        Ok(Evaluation {
            covered,
            methods: out,
        })
    }

    fn run_one(&self, run: usize, keep_traces: bool) -> Result<RunOutcome, HarnessError> {
        let setup = self.setup(run)?;
        let methods = self.config.effective_methods();
        let n = self.outputs.num_classes();
        let ids = &setup.split.test;
        let evaluated = self.evaluate(&setup, &setup.pool, ids, &methods)?;

        let mut metrics = Vec::with_capacity(evaluated.methods.len());
        let mut coverage = Vec::with_capacity(evaluated.methods.len());
        for (_, traces, tau) in &evaluated.methods {
            let count = traces.len() as f64;
            let mut acc = CoverageAccumulator::new(n);
            let (mut correct, mut covered, mut correct_covered) = (0usize, 0usize, 0usize);
            let (mut subset, mut set, mut fallbacks) = (0usize, 0usize, 0usize);
            for (t, &conf_covered) in traces.iter().zip(&evaluated.covered) {
                correct += usize::from(t.correct());
                if conf_covered {
                    covered += 1;
                    correct_covered += usize::from(t.correct());
                }
                subset += t.selected.len();
                set += t.set.len();
                fallbacks += usize::from(t.fallback != Fallback::None);
                acc.add(
                    &PredictionSet::new(t.set.clone(), SetSource::Conformal),
                    t.true_label,
                );
            }
            let report = acc.report().expect("nonempty test split");
            metrics.push(RunMetrics {
                run,
                seed: setup.seed,
                success: correct as f64 / count,
                conditional_success: (covered > 0).then(|| correct_covered as f64 / covered as f64),
                subset_size: subset as f64 / count,
                set_size: set as f64 / count,
                coverage: report.marginal_coverage,
                fallback_rate: fallbacks as f64 / count,
                tau: *tau,
            });
            coverage.push(acc);
        }

        let (mut lemma1, mut lemma2) = (Vec::new(), Vec::new());
        if self.config.compute_bounds {
            let psi = self.psi(ids)?;
            let state = self.state(&setup, &setup.pool);
            for &i in ids {
                let ctx = InstanceContext::new(self.instance(i, &psi), state)?;
                let (a, b) = synth::instance_bound_records(&ctx)?;
                lemma1.push(a);
                lemma2.extend(b);
            }
        }

        let traces = keep_traces.then(|| RunTraces {
            run,
            methods: evaluated
                .methods
                .into_iter()
                .map(|(m, t, _)| (m, t))
                .collect(),
        });
        Ok(RunOutcome {
            metrics,
            coverage,
            lemma1,
            lemma2,
            traces,
            alpha: setup.alpha,
            sizes: (
                setup.split.cal.len(),
                setup.split.est.len(),
                setup.split.test.len(),
            ),
        })
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool, HarnessError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| config_err(e.to_string()))
    }

    fn run_all(&self, keep_traces: bool) -> Result<Vec<RunOutcome>, HarnessError> {
        let runs = self.config.runs;
        self.thread_pool()?.install(|| {
            (0..runs)
                .into_par_iter()
                .map(|r| self.run_one(r, keep_traces))
                .collect()
        })
    }

    pub fn run(&self) -> Result<Report, HarnessError> {
        let outcomes = self.run_all(false)?;
        self.aggregate(outcomes)
    }

    /// Report together with every run's per-instance traces.
    pub fn run_with_traces(&self) -> Result<(Report, Vec<RunTraces>), HarnessError> {
        let mut outcomes = self.run_all(true)?;
        let traces = outcomes
            .iter_mut()
            .map(|o| o.traces.take().expect("kept"))
            .collect();
        Ok((self.aggregate(outcomes)?, traces))
    }

    fn aggregate(&self, outcomes: Vec<RunOutcome>) -> Result<Report, HarnessError> {
        let methods = self.config.effective_methods();
        let n = self.outputs.num_classes();
        let mut summaries = Vec::with_capacity(methods.len());
        for (k, method) in methods.iter().enumerate() {
            let runs: Vec<RunMetrics> = outcomes.iter().map(|o| o.metrics[k].clone()).collect();
            let mut pooled = CoverageAccumulator::new(n);
            for o in &outcomes {
                pooled.merge(&o.coverage[k]);
            }
            let success: Vec<f64> = runs.iter().map(|r| r.success).collect();
            let subset: Vec<f64> = runs.iter().map(|r| r.subset_size).collect();
            let conditional: Vec<f64> = runs.iter().filter_map(|r| r.conditional_success).collect();
            let (success_mean, success_std) = mean_std(&success);
            let (subset_size_mean, subset_size_std) = mean_std(&subset);
            summaries.push(MethodSummary {
                method: method.to_string(),
                success_mean,
                success_std,
                conditional_success_mean: (!conditional.is_empty())
                    .then(|| mean_std(&conditional).0),
                subset_size_mean,
                subset_size_std,
                set_size_mean: mean_std(&runs.iter().map(|r| r.set_size).collect::<Vec<_>>()).0,
                fallback_rate: mean_std(&runs.iter().map(|r| r.fallback_rate).collect::<Vec<_>>())
                    .0,
                coverage: pooled.report().expect("nonempty test split"),
                runs,
            });
        }
        let first = &outcomes[0];
        let bounds = if self.config.compute_bounds {
            let l1: Vec<Lemma1Record> = outcomes.iter().flat_map(|o| o.lemma1.clone()).collect();
            let l2: Vec<Lemma2Record> = outcomes.iter().flat_map(|o| o.lemma2.clone()).collect();
            Some(BoundsDiagnostics::from_records(&l1, &l2, first.alpha)?)
        } else {
            None
        };
        Ok(Report {
            version: VERSION.to_string(),
            config: self.config.echo(),
            x_value: None,
            alpha: first.alpha,
            calibration_size: first.sizes.0,
            estimation_size: first.sizes.1,
            test_size: first.sizes.2,
            methods: summaries,
            bounds,
        })
    }

    /// Suggested team size from run 0: for `m = 1..=zeta`, greedy success
    /// with the first `m` experts against their unaided majority, both on
    /// the estimation split.
    pub fn find_m(&self) -> Result<OptimalTeamSize, HarnessError> {
        let zeta = self.config.zeta.unwrap_or(self.config.h);
        let setup = self.setup(0)?;
        if zeta > setup.pool.len() {
            return Err(config_err(format!(
                "zeta = {zeta} exceeds the pool of {}",
                setup.pool.len()
            )));
        }
        let methods = [SubsetPolicy::GreedyConformal, SubsetPolicy::ExpertTeam];
        selection::estimate_optimal_m(zeta, |m| {
            let pool = setup.pool.truncated(m);
            let evaluated = self.evaluate(&setup, &pool, &setup.split.est, &methods)?;
            let rate = |traces: &[InstanceTrace]| {
                traces.iter().filter(|t| t.correct()).count() as f64 / traces.len() as f64
            };
            Ok::<_, HarnessError>((rate(&evaluated.methods[0].1), rate(&evaluated.methods[1].1)))
        })
    }

    /// Every method's trace on instance `id` in run `run`.
    pub fn inspect(&self, id: &str, run: usize) -> Result<InspectReport, HarnessError> {
        let i = self
            .outputs
            .position(id)
            .ok_or_else(|| HarnessError::InsufficientData(format!("unknown instance {id:?}")))?;
        let setup = self.setup(run)?;
        let role = if setup.split.cal.contains(&i) {
            "calibration"
        } else if setup.split.est.contains(&i) {
            "estimation"
        } else if setup.split.test.contains(&i) {
            "test"
        } else {
            "unused"
        };
        let methods = self.config.effective_methods();
        let traces = self
            .evaluate(&setup, &setup.pool, &[i], &methods)?
            .methods
            .into_iter()
            .flat_map(|(_, t, _)| t)
            .collect();
        Ok(InspectReport {
            run,
            instance_id: id.to_string(),
            role: role.to_string(),
            alpha: setup.alpha,
            q_hat: setup.threshold.finite_q_hat(),
            traces,
        })
    }
}

pub fn run_experiment(
    config: &ExperimentConfig,
    outputs: &ClassifierOutputs,
    annotations: Option<&AnnotationTable>,
) -> Result<Report, HarnessError> {
    Experiment::new(config.clone(), outputs, annotations)?.run()
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    CalibrationFraction,
    K,
    H,
    Alpha,
}

impl FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "calibration_fraction" => Ok(Self::CalibrationFraction),
            "k" => Ok(Self::K),
            "h" => Ok(Self::H),
            "alpha" => Ok(Self::Alpha),
            _ => Err(config_err(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

fn as_count(v: f64, what: &str) -> Result<usize, HarnessError> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(config_err(format!(
            "{what} must be a positive integer, got {v}"
        )))
    }
}

/// `config` with `param` set to `value`. A calibration fraction `f` gives
/// estimation the same fraction and test the rest.
pub fn sweep_point(
    config: &ExperimentConfig,
    param: SweepParam,
    value: f64,
) -> Result<ExperimentConfig, HarnessError> {
    let mut c = config.clone();
    match param {
        SweepParam::CalibrationFraction => {
            c.split = SplitSpec::fractions(value, value, 1.0 - 2.0 * value);
        }
        SweepParam::K => {
            let k = as_count(value, "k")?;
            c.k_values.clear();
            let mut replaced = false;
            for m in &mut c.methods {
                if let SubsetPolicy::GreedyTopK(_) = m {
                    *m = SubsetPolicy::GreedyTopK(k);
                    replaced = true;
                }
            }
            if !replaced {
                c.methods.push(SubsetPolicy::GreedyTopK(k));
            }
        }
        SweepParam::H => c.h = as_count(value, "h")?,
        SweepParam::Alpha => {
            c.alpha = Some(value);
            c.alpha_preset = None;
        }
    }
    c.validate()?;
    Ok(c)
}

/// One report per value, each tagged with its `x_value`.
pub fn sweep(
    config: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    outputs: &ClassifierOutputs,
    annotations: Option<&AnnotationTable>,
    pool: Option<&ExpertPool>,
) -> Result<Vec<Report>, HarnessError> {
    values
        .iter()
        .map(|&v| {
            let point = sweep_point(config, param, v)?;
            let mut exp = Experiment::new(point, outputs, annotations)?;
            if let Some(p) = pool {
                exp = exp.with_pool(p)?;
            }
            let mut report = exp.run()?;
            report.x_value = Some(v);
            Ok(report)
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per method and run.
pub fn write_results_csv<W: Write>(reports: &[Report], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "method",
        "x_value",
        "run",
        "seed",
        "success",
        "conditional_success",
        "subset_size",
        "set_size",
        "coverage",
        "fallback_rate",
        "tau",
    ])?;
    for report in reports {
        for m in &report.methods {
            for r in &m.runs {
                out.write_record([
                    m.method.clone(),
                    fmt_opt(report.x_value),
                    r.run.to_string(),
                    r.seed.to_string(),
                    r.success.to_string(),
                    fmt_opt(r.conditional_success),
                    r.subset_size.to_string(),
                    r.set_size.to_string(),
                    r.coverage.to_string(),
                    r.fallback_rate.to_string(),
                    fmt_opt(r.tau),
                ])?;
            }
        }
    }
    out.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

/// One row per method and swept value.
pub fn write_plotdata_csv<W: Write>(reports: &[Report], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "x_value", "mean", "stddev"])?;
    for report in reports {
        for m in &report.methods {
            out.write_record([
                m.method.clone(),
                fmt_opt(report.x_value),
                m.success_mean.to_string(),
                m.success_std.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))
}

fn emit(reports: &[Report], summary: Vec<u8>, out_dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_file(out_dir, "summary.json", &summary)?;
    let mut results = Vec::new();
    write_results_csv(reports, &mut results)?;
    write_file(out_dir, "results.csv", &results)?;
    let mut plot = Vec::new();
    write_plotdata_csv(reports, &mut plot)?;
    write_file(out_dir, "plotdata.csv", &plot)
}

/// Writes `summary.json`, `results.csv` and `plotdata.csv` into `out_dir`.
pub fn emit_report(report: &Report, out_dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    let mut summary = serde_json::to_vec_pretty(report)?;
    summary.push(b'\n');
    emit(std::slice::from_ref(report), summary, out_dir.as_ref())
}

/// Like [`emit_report`] with a JSON array of reports as the summary.
pub fn emit_sweep(reports: &[Report], out_dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    let mut summary = serde_json::to_vec_pretty(reports)?;
    summary.push(b'\n');
    emit(reports, summary, out_dir.as_ref())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<Report, HarnessError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
