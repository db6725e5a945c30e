//! Ingestion of classifier outputs and expert annotations, and seeded
//! calibration/estimation/test splits.
//!
//! Both inputs are CSV files with a fixed header:
//!
//! ```text
//! instance_id,true_label,p0,p1,...,p{n-1}
//! instance_id,expert_id,label
//! ```
//!
//! Files whose name ends in `.gz` are transparently gunzipped.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};
use crate::Label;

/// Tolerance on the sum of a probability row.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { line: u64, value: f64 },
    #[error("line {line}: duplicate instance id {id:?}")]
    DuplicateId { line: u64, id: String },
    #[error("line {line}: probabilities sum to {sum}, not 1")]
    NonStochasticRow { line: u64, sum: f64 },
    #[error("line {line}: instance {id:?} is not present in the classifier outputs")]
    UnknownInstance { line: u64, id: String },
    #[error("line {line}: label {label} outside [0, {n})")]
    LabelOutOfRange { line: u64, label: usize, n: usize },
    #[error("degenerate split: sizes ({cal}, {est}, {test}) of {total} ids")]
    DegenerateSplit {
        cal: usize,
        est: usize,
        test: usize,
        total: usize,
    },
    #[error("invalid split fractions ({0}, {1}, {2})")]
    InvalidFractions(f64, f64, f64),
}

/// One classifier output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub true_label: Label,
    pub probs: Vec<f64>,
}

/// Softmax outputs of the pretrained classifier plus ground truth, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutputs {
    n: usize,
    records: Vec<Record>,
    index: HashMap<String, usize>,
}

impl ClassifierOutputs {
    /// Builds a validated table. Line numbers in errors are 1-based record
    /// positions offset by the header.
    pub fn new(n: usize, records: Vec<Record>) -> Result<Self, DataError> {
        if n < 2 {
            return Err(DataError::BadHeader(format!(
                "need at least 2 classes, got {n}"
            )));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (pos, rec) in records.iter().enumerate() {
            let line = pos as u64 + 2;
            validate_record(rec, n, line)?;
            if index.insert(rec.id.clone(), pos).is_some() {
                return Err(DataError::DuplicateId {
                    line,
                    id: rec.id.clone(),
                });
            }
        }
        Ok(Self { n, records, index })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn get(&self, idx: usize) -> &Record {
        &self.records[idx]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Writes the table in the canonical CSV layout. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["instance_id".to_string(), "true_label".to_string()];
        header.extend((0..self.n).map(|j| format!("p{j}")));
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![rec.id.clone(), rec.true_label.to_string()];
            row.extend(rec.probs.iter().map(|p| p.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

fn validate_record(rec: &Record, n: usize, line: u64) -> Result<(), DataError> {
    if rec.probs.len() != n {
        return Err(DataError::MalformedRow {
            line,
            reason: format!("expected {n} probabilities, got {}", rec.probs.len()),
        });
    }
    if rec.true_label >= n {
        return Err(DataError::LabelOutOfRange {
            line,
            label: rec.true_label,
            n,
        });
    }
    for &p in &rec.probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(DataError::ProbabilityOutOfRange { line, value: p });
        }
    }
    let sum: f64 = rec.probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(DataError::NonStochasticRow { line, sum });
    }
    Ok(())
}

fn open(path: &Path) -> Result<Box<dyn Read>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn record_line(rec: &csv::StringRecord, fallback: u64) -> u64 {
    rec.position().map_or(fallback, |p| p.line())
}

/// Reads a probability table from `path`.
pub fn parse_probs(path: impl AsRef<Path>) -> Result<ClassifierOutputs, DataError> {
    read_probs(open(path.as_ref())?)
}

/// Reads a probability table; `n` is inferred from the `p*` header columns.
pub fn read_probs<R: Read>(reader: R) -> Result<ClassifierOutputs, DataError> {
    let mut rdr = csv_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 4 || &header[0] != "instance_id" || &header[1] != "true_label" {
        return Err(DataError::BadHeader(format!(
            "expected instance_id,true_label,p0,p1,...; got {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("p{j}") {
            return Err(DataError::BadHeader(format!(
                "column {} should be p{j}, got {name:?}",
                j + 2
            )));
        }
    }
    let n = header.len() - 2;
    let mut records = Vec::new();
    let mut index = HashMap::new();
    for (pos, row) in rdr.records().enumerate() {
        let row = row?;
        let line = record_line(&row, pos as u64 + 2);
        if row.len() != n + 2 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected {} columns, got {}", n + 2, row.len()),
            });
        }
        let id = row[0].to_string();
        let true_label = row[1]
            .parse::<usize>()
            .map_err(|e| DataError::MalformedRow {
                line,
                reason: format!("true_label {:?}: {e}", &row[1]),
            })?;
        let probs = row
            .iter()
            .skip(2)
            .map(|s| {
                s.parse::<f64>().map_err(|e| DataError::MalformedRow {
                    line,
                    reason: format!("probability {s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let rec = Record {
            id,
            true_label,
            probs,
        };
        validate_record(&rec, n, line)?;
        if index.insert(rec.id.clone(), records.len()).is_some() {
            return Err(DataError::DuplicateId { line, id: rec.id });
        }
        records.push(rec);
    }
    Ok(ClassifierOutputs { n, records, index })
}

/// One expert answer on one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    /// Position of the instance in [`ClassifierOutputs`].
    pub instance: usize,
    pub expert_id: String,
    pub label: Label,
}

/// Validated annotation rows with per-instance label counts `H(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTable {
    n: usize,
    rows: Vec<Annotation>,
    counts: BTreeMap<usize, Vec<u32>>,
}

impl AnnotationTable {
    pub fn new(rows: Vec<Annotation>, outputs: &ClassifierOutputs) -> Result<Self, DataError> {
        let n = outputs.num_classes();
        let mut counts: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (pos, row) in rows.iter().enumerate() {
            let line = pos as u64 + 2;
            if row.instance >= outputs.len() {
                return Err(DataError::UnknownInstance {
                    line,
                    id: format!("#{}", row.instance),
                });
            }
            if row.label >= n {
                return Err(DataError::LabelOutOfRange {
                    line,
                    label: row.label,
                    n,
                });
            }
            counts.entry(row.instance).or_insert_with(|| vec![0; n])[row.label] += 1;
        }
        Ok(Self { n, rows, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[Annotation] {
        &self.rows
    }

    /// Label counts `H(x)` of an instance, if it has any annotations.
    pub fn counts(&self, instance: usize) -> Option<&[u32]> {
        self.counts.get(&instance).map(Vec::as_slice)
    }

    pub fn is_annotated(&self, instance: usize) -> bool {
        self.counts.contains_key(&instance)
    }

    /// Annotated instance positions in ascending order.
    pub fn annotated_instances(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts.keys().copied()
    }

    pub fn write_csv<W: Write>(
        &self,
        outputs: &ClassifierOutputs,
        writer: W,
    ) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["instance_id", "expert_id", "label"])?;
        for row in &self.rows {
            w.write_record([
                outputs.get(row.instance).id.as_str(),
                row.expert_id.as_str(),
                &row.label.to_string(),
            ])?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Reads an annotation table from `path`, resolving ids against `outputs`.
pub fn parse_annotations(
    path: impl AsRef<Path>,
    outputs: &ClassifierOutputs,
) -> Result<AnnotationTable, DataError> {
    read_annotations(open(path.as_ref())?, outputs)
}

pub fn read_annotations<R: Read>(
    reader: R,
    outputs: &ClassifierOutputs,
) -> Result<AnnotationTable, DataError> {
    let mut rdr = csv_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["instance_id", "expert_id", "label"] {
        return Err(DataError::BadHeader(format!(
            "expected instance_id,expert_id,label; got {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let n = outputs.num_classes();
    let mut rows = Vec::new();
    for (pos, row) in rdr.records().enumerate() {
        let row = row?;
        let line = record_line(&row, pos as u64 + 2);
        if row.len() != 3 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected 3 columns, got {}", row.len()),
            });
        }
        let instance = outputs
            .position(&row[0])
            .ok_or_else(|| DataError::UnknownInstance {
                line,
                id: row[0].to_string(),
            })?;
        let label = row[2]
            .parse::<usize>()
            .map_err(|e| DataError::MalformedRow {
                line,
                reason: format!("label {:?}: {e}", &row[2]),
            })?;
        if label >= n {
            return Err(DataError::LabelOutOfRange { line, label, n });
        }
        rows.push(Annotation {
            instance,
            expert_id: row[1].to_string(),
            label,
        });
    }
    AnnotationTable::new(rows, outputs)
}

/// Fractions of the id list assigned to calibration, estimation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub cal: f64,
    pub est: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(cal: f64, est: f64, test: f64) -> Result<Self, DataError> {
        let ok = [cal, est, test].iter().all(|f| *f > 0.0 && *f < 1.0)
            && (cal + est + test - 1.0).abs() <= 1e-9;
        if ok {
            Ok(Self { cal, est, test })
        } else {
            Err(DataError::InvalidFractions(cal, est, test))
        }
    }
}

/// Disjoint calibration / estimation / test instance positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub cal: Vec<usize>,
    pub est: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Calibration size `l`.
    pub fn calibration_size(&self) -> usize {
        self.cal.len()
    }

    /// Calibration and estimation ids together, the data used for
    /// confusion-matrix estimation.
    pub fn cal_and_est(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.cal.iter().chain(&self.est).copied().collect();
        ids.sort_unstable();
        ids
    }
}

// floor(f * total) with slack for products such as 0.29 * 100 that land a
// rounding error below an integer.
fn floor_share(fraction: f64, total: usize) -> usize {
    (fraction * total as f64 + 1e-9).floor() as usize
}

/// Seeded shuffle followed by a contiguous partition. Calibration and
/// estimation get `floor(fraction * N)` ids; the remainder goes to test.
pub fn split_dataset(
    ids: &[usize],
    fractions: SplitFractions,
    seed: u64,
) -> Result<Split, DataError> {
    let total = ids.len();
    let cal = floor_share(fractions.cal, total);
    let est = floor_share(fractions.est, total);
    split_by_sizes(ids, cal, est, None, seed)
}

/// Like [`split_dataset`] with absolute sizes. `test = None` takes every
/// remaining id.
pub fn split_by_sizes(
    ids: &[usize],
    cal: usize,
    est: usize,
    test: Option<usize>,
    seed: u64,
) -> Result<Split, DataError> {
    let total = ids.len();
    let rest = total.saturating_sub(cal + est);
    let test = test.unwrap_or(rest);
    if cal == 0 || est == 0 || test == 0 || cal + est + test > total {
        return Err(DataError::DegenerateSplit {
            cal,
            est,
            test,
            total,
        });
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, Purpose::Split, &[]));
    let mut it = shuffled.into_iter();
    let cal_ids = it.by_ref().take(cal).collect();
    let est_ids = it.by_ref().take(est).collect();
    let test_ids = it.take(test).collect();
    Ok(Split {
        cal: cal_ids,
        est: est_ids,
        test: test_ids,
    })
}
