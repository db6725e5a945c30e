use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conformal_crew::data::{self, AnnotationTable, ClassifierOutputs, DataError};
use conformal_crew::experts::{ConfusionMatrix, ExpertPool};
use conformal_crew::harness::{self, Experiment, ExperimentConfig, HarnessError, SweepParam};
use conformal_crew::synth;

#[derive(Parser)]
#[command(
    name = "conformal-crew",
    version,
    about = "Conformal prediction sets with greedy expert selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method and write summary.json, results.csv and plotdata.csv.
    Run(Common),
    /// Run once per value of a parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// calibration_fraction, k, h or alpha
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Dump every method's decision trace for one instance.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instance: String,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Estimate the largest useful team size.
    FindM(Common),
    /// Monte Carlo diagnostics of the accuracy lower bounds.
    Bounds(Common),
    /// Write a synthetic probability file and annotation file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 1200)]
        instances: usize,
        /// Standard deviation of the classifier's logits.
        #[arg(long, default_value_t = 2.0)]
        logit_scale: f64,
        /// Diagonal of the annotators' shared confusion matrix.
        #[arg(long, default_value_t = 0.8)]
        accuracy: f64,
        #[arg(long, default_value_t = 5)]
        annotators: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    probs: PathBuf,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

enum Failure {
    Config(String),
    Data(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

struct Loaded {
    config: ExperimentConfig,
    outputs: ClassifierOutputs,
    annotations: Option<AnnotationTable>,
}

impl Common {
    fn load(&self) -> Result<Loaded, Failure> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.master_seed = seed;
        }
        if let Some(w) = self.workers {
            if w == 0 {
                return Err(Failure::Config("--workers must be at least 1".into()));
            }
            config.workers = Some(w);
        }
        let outputs = data::parse_probs(&self.probs)?;
        let annotations = match &self.annotations {
            Some(p) => Some(data::parse_annotations(p, &outputs)?),
            None => None,
        };
        log::info!(
            "loaded {} instances over {} classes{}",
            outputs.len(),
            outputs.num_classes(),
            if annotations.is_some() {
                " with annotations"
            } else {
                ""
            }
        );
        Ok(Loaded {
            config,
            outputs,
            annotations,
        })
    }
}

impl Loaded {
    fn experiment(&self) -> Result<Experiment<'_>, Failure> {
        Ok(Experiment::new(
            self.config.clone(),
            &self.outputs,
            self.annotations.as_ref(),
        )?)
    }
}

fn write_json<T: serde::Serialize>(
    value: &T,
    out: Option<&Path>,
    name: &str,
) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    text.push('\n');
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn require_out(common: &Common) -> Result<&Path, Failure> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Config("--out is required".into()))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(common) => {
            let out = require_out(&common)?;
            let loaded = common.load()?;
            let report = loaded.experiment()?.run()?;
            harness::emit_report(&report, out)?;
            for m in &report.methods {
                println!(
                    "{:<20} {:.4} ± {:.4}",
                    m.method, m.success_mean, m.success_std
                );
            }
        }
        Command::Sweep {
            common,
            param,
            values,
        } => {
            let out = require_out(&common)?;
            let param: SweepParam = param.parse()?;
            let loaded = common.load()?;
            let reports = harness::sweep(
                &loaded.config,
                param,
                &values,
                &loaded.outputs,
                loaded.annotations.as_ref(),
                None,
            )?;
            harness::emit_sweep(&reports, out)?;
        }
        Command::Inspect {
            common,
            instance,
            run,
        } => {
            let loaded = common.load()?;
            let report = loaded.experiment()?.inspect(&instance, run)?;
            write_json(&report, common.out.as_deref(), "inspect.json")?;
        }
        Command::FindM(common) => {
            let loaded = common.load()?;
            let result = loaded.experiment()?.find_m()?;
            if result.warning {
                log::warn!("no team size beat the unaided experts; suggesting 1");
            }
            write_json(&result, common.out.as_deref(), "find_m.json")?;
        }
        Command::Bounds(common) => {
            let mut loaded = common.load()?;
            loaded.config.compute_bounds = true;
            let report = loaded.experiment()?.run()?;
            write_json(&report.bounds, common.out.as_deref(), "bounds.json")?;
        }
        Command::Synth {
            out,
            classes,
            instances,
            logit_scale,
            accuracy,
            annotators,
            seed,
        } => {
            if classes < 2 || instances == 0 || annotators == 0 || !(0.0..=1.0).contains(&accuracy)
            {
                return Err(Failure::Config("invalid synthetic data parameters".into()));
            }
            let outputs = synth::classifier_outputs(classes, instances, logit_scale, seed)?;
            let pool = ExpertPool::homogeneous(&ConfusionMatrix::symmetric(classes, accuracy), 1)
                .map_err(|e| Failure::Config(e.to_string()))?;
            let table = synth::annotations(&outputs, &pool, annotators, seed)?;
            fs::create_dir_all(&out)
                .map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
            let create = |name: &str| {
                let path = out.join(name);
                fs::File::create(&path)
                    .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
            };
            outputs.write_csv(create("probs.csv")?)?;
            table.write_csv(&outputs, create("annotations.csv")?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONFORMAL_CREW_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("data error: {msg}");
            ExitCode::from(3)
        }
    }
}
