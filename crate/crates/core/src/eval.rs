//! Accuracy over a grid of test environments, and batch/model-size sweeps.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envgen::EnvDataset;
use crate::error::{Error, Result};
use crate::methods::{init_for, train_plain, BatchSize, Method, MethodConfig};
use crate::model::{HeadMode, HeadSelector, PredictorParams};

/// How logits are formed at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// The single shared (or frozen scalar) head.
    Shared,
    /// Mean of the per-environment logits.
    EnsembleMeanLogit,
    /// Logit of the averaged per-environment head.
    ConsensusHead,
}

impl InferenceMode {
    pub fn for_method(method: Method) -> Self {
        match method.inference() {
            HeadSelector::EnsembleMean => InferenceMode::EnsembleMeanLogit,
            HeadSelector::Consensus => InferenceMode::ConsensusHead,
            _ => InferenceMode::Shared,
        }
    }

    fn selector(self, mode: HeadMode) -> Result<HeadSelector> {
        let sel = match (self, mode) {
            (InferenceMode::Shared, HeadMode::Shared | HeadMode::ScalarFrozen) => HeadSelector::Default,
            (InferenceMode::EnsembleMeanLogit, HeadMode::PerEnv) => HeadSelector::EnsembleMean,
            (InferenceMode::ConsensusHead, HeadMode::PerEnv) => HeadSelector::Consensus,
            _ => return Err(Error::HeadModeMismatch(format!("inference {self:?} is not valid for {mode:?} heads"))),
        };
        Ok(sel)
    }
}

/// Fraction of `labels` matched by `logit > 0`; a logit of exactly zero predicts class 0.
pub fn accuracy_from_logits(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidConfig("accuracy of an empty dataset".into()));
    }
    let hits = logits.iter().zip(labels).filter(|(&l, &y)| u8::from(l > 0.0) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(params: &PredictorParams, dataset: &EnvDataset, mode: InferenceMode) -> Result<f64> {
    let sel = mode.selector(params.head_mode())?;
    accuracy_from_logits(&params.logits(sel, &dataset.features)?, &dataset.labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub betas: Vec<f64>,
    pub acc_per_beta: Vec<f64>,
    pub avg_acc: f64,
    pub acc_gap: f64,
    pub method: String,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    /// Derives average and gap from per-β accuracies.
    pub fn new(betas: Vec<f64>, acc_per_beta: Vec<f64>) -> Result<Self> {
        if betas.len() != acc_per_beta.len() {
            return Err(Error::LengthMismatch(format!("{} betas for {} accuracies", betas.len(), acc_per_beta.len())));
        }
        if betas.is_empty() {
            return Err(Error::NoEnvironments);
        }
        let avg_acc = acc_per_beta.iter().sum::<f64>() / acc_per_beta.len() as f64;
        let max = acc_per_beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = acc_per_beta.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            betas,
            acc_per_beta,
            avg_acc,
            acc_gap: max - min,
            method: String::new(),
            seed: 0,
            config_digest: String::new(),
        })
    }

    pub fn labeled(mut self, method: impl Into<String>, seed: u64, config_digest: impl Into<String>) -> Self {
        self.method = method.into();
        self.seed = seed;
        self.config_digest = config_digest.into();
        self
    }
}

/// Accuracy on every grid environment, evaluated in parallel and reported in grid order.
pub fn evaluate_grid(params: &PredictorParams, grid: &[EnvDataset], mode: InferenceMode) -> Result<EvalReport> {
    let accs = grid.par_iter().map(|d| accuracy(params, d, mode)).collect::<Result<Vec<_>>>()?;
    EvalReport::new(grid.iter().map(|d| d.spec.beta).collect(), accs)
}

/// Model shape and run identity shared by the points of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSetup {
    pub hidden_dim: usize,
    pub depth: usize,
    pub seed: u64,
    pub config_digest: String,
}

fn train_and_evaluate(
    config: &MethodConfig,
    hidden_dim: usize,
    setup: &SweepSetup,
    envs: &[EnvDataset],
    grid: &[EnvDataset],
) -> Result<EvalReport> {
    let input_dim = envs.first().ok_or(Error::NoEnvironments)?.feature_dim();
    let params = init_for(config.method, input_dim, hidden_dim, setup.depth, envs.len(), setup.seed)?;
    let out = train_plain(config, params, envs, setup.seed)?;
    let report = evaluate_grid(&out.params, grid, InferenceMode::for_method(config.method))?;
    Ok(report.labeled(config.method.name(), setup.seed, setup.config_digest.clone()))
}

/// One train-and-evaluate per batch size, everything else fixed.
pub fn batch_size_sweep(
    config: &MethodConfig,
    batch_sizes: &[BatchSize],
    setup: &SweepSetup,
    envs: &[EnvDataset],
    grid: &[EnvDataset],
) -> Result<Vec<EvalReport>> {
    if batch_sizes.is_empty() {
        return Err(Error::InvalidConfig("batch-size sweep needs at least one size".into()));
    }
    batch_sizes
        .iter()
        .map(|&b| {
            let c = MethodConfig { batch_size: b, ..config.clone() };
            train_and_evaluate(&c, setup.hidden_dim, setup, envs, grid)
        })
        .collect()
}

/// One train-and-evaluate per hidden width, everything else fixed.
pub fn model_size_sweep(
    config: &MethodConfig,
    hidden_dims: &[usize],
    setup: &SweepSetup,
    envs: &[EnvDataset],
    grid: &[EnvDataset],
) -> Result<Vec<EvalReport>> {
    if hidden_dims.is_empty() {
        return Err(Error::InvalidConfig("model-size sweep needs at least one width".into()));
    }
    hidden_dims.iter().map(|&d| train_and_evaluate(config, d, setup, envs, grid)).collect()
}

#[derive(Serialize, Deserialize)]
struct AccuracyRow {
    method: String,
    seed: u64,
    beta: f64,
    accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct SummaryRow {
    method: String,
    seed: u64,
    avg_acc: f64,
    acc_gap: f64,
}

/// `method,seed,beta,accuracy`, one row per grid environment.
pub fn write_accuracy_csv(reports: &[EvalReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for (&beta, &accuracy) in r.betas.iter().zip(&r.acc_per_beta) {
            w.serialize(AccuracyRow { method: r.method.clone(), seed: r.seed, beta, accuracy })?;
        }
    }
    if reports.is_empty() {
        w.write_record(["method", "seed", "beta", "accuracy"])?;
    }
    w.flush()?;
    Ok(())
}

/// `method,seed,avg_acc,acc_gap`, one row per report.
pub fn write_summary_csv(reports: &[EvalReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(SummaryRow { method: r.method.clone(), seed: r.seed, avg_acc: r.avg_acc, acc_gap: r.acc_gap })?;
    }
    if reports.is_empty() {
        w.write_record(["method", "seed", "avg_acc", "acc_gap"])?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds reports from an accuracy CSV, grouped by `(method, seed)` in order of appearance.
pub fn read_accuracy_csv(input: impl Read) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_reader(input);
    let mut order: Vec<(String, u64)> = Vec::new();
    let mut rows: BTreeMap<(String, u64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in r.deserialize::<AccuracyRow>() {
        let row = row?;
        let key = (row.method, row.seed);
        let entry = rows.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), Vec::new())
        });
        entry.0.push(row.beta);
        entry.1.push(row.accuracy);
    }
    order
        .into_iter()
        .map(|key| {
            let (betas, accs) = rows.remove(&key).expect("key recorded on insert");
            Ok(EvalReport::new(betas, accs)?.labeled(key.0, key.1, ""))
        })
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
