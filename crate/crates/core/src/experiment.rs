//! Declarative experiments: config files, multi-seed runs, comparisons and sweeps.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envgen::{
    check_seed_disjoint, default_beta_grid, make_test_grid, make_training_envs, DataSource, EnvDataset, Resampling,
    Source,
};
use crate::error::{Error, Result};
use crate::eval::{
    batch_size_sweep, evaluate_grid, mean_std, model_size_sweep, read_accuracy_csv, write_accuracy_csv,
    write_summary_csv, EvalReport, InferenceMode, SweepSetup,
};
use crate::methods::{train, write_diagnostics_jsonl, BatchSize, MethodConfig};
use crate::model::{self, save_checkpoint, CheckpointMeta, HeadMode};
use crate::optim::OptimizerConfig;

/// Replaces the trial list with this single seed when set.
pub const SEED_ENV_VAR: &str = "IRMKIT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainEnv {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestGrid {
    pub alpha: f64,
    pub betas: Vec<f64>,
    pub n_per_env: usize,
}

impl Default for TestGrid {
    fn default() -> Self {
        Self { alpha: 0.25, betas: default_beta_grid(), n_per_env: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    #[serde(default = "default_n_per_env")]
    pub n_per_env: usize,
    pub train: Vec<TrainEnv>,
    #[serde(default)]
    pub resampling: Resampling,
    #[serde(default)]
    pub test: TestGrid,
}

fn default_n_per_env() -> usize {
    50_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    /// Defaults to the method's own layout.
    pub head_mode: Option<HeadMode>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_dim: 390, depth: 2, head_mode: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Defaults to the method's own inference rule.
    pub inference: Option<InferenceMode>,
}

/// Values visited by `sweep`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub batch_sizes: Vec<BatchSize>,
    pub hidden_dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default = "default_trials")]
    pub trials: Vec<u64>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub method: MethodConfig,
    /// Optimizer for the method; alternative to `method.optimizer`.
    #[serde(default)]
    pub optim: Option<OptimizerConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_trials() -> Vec<u64> {
    (0..10).collect()
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the extension is `.json`.
    pub fn from_str_with(text: &str, json: bool) -> Result<Self> {
        let cfg: Self = if json { serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))? } else { toml::from_str(text)? };
        cfg.resolved()
    }

    /// Reads and validates a config file, applying the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e == "json");
        let mut cfg = Self::from_str_with(&text, json)?;
        if let Ok(s) = std::env::var(SEED_ENV_VAR) {
            let seed = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV_VAR}={s:?} is not an unsigned integer")))?;
            cfg.trials = vec![seed];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Folds `optim` into the method config.
    fn resolved(mut self) -> Result<Self> {
        if let Some(o) = self.optim.take() {
            if self.method.optimizer != MethodConfig::default().optimizer {
                return Err(Error::InvalidConfig("set the optimizer in [optim] or [method.optimizer], not both".into()));
            }
            self.method.optimizer = o;
        }
        Ok(self)
    }

    pub fn head_mode(&self) -> HeadMode {
        self.model.head_mode.unwrap_or(self.method.method.head_mode())
    }

    pub fn inference(&self) -> InferenceMode {
        self.eval.inference.unwrap_or(InferenceMode::for_method(self.method.method))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.method.validate()?;
        let m = self.method.method;
        let mode = self.head_mode();
        if !m.accepts(mode) {
            return Err(Error::HeadModeMismatch(format!("{} cannot run with {mode:?} heads", m.name())));
        }
        let sel_ok = matches!(
            (self.inference(), mode),
            (InferenceMode::Shared, HeadMode::Shared | HeadMode::ScalarFrozen)
                | (InferenceMode::EnsembleMeanLogit | InferenceMode::ConsensusHead, HeadMode::PerEnv)
        );
        if !sel_ok {
            return Err(Error::HeadModeMismatch(format!("inference {:?} with {mode:?} heads", self.inference())));
        }
        if self.trials.is_empty() {
            return bad("at least one trial seed is required".into());
        }
        let mut seen = self.trials.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.trials.len() {
            return bad("trial seeds must be distinct".into());
        }
        if self.data.train.is_empty() {
            return Err(Error::NoEnvironments);
        }
        for e in &self.data.train {
            if !(0.0..0.5).contains(&e.alpha) || !(0.0..=1.0).contains(&e.beta) {
                return bad(format!("training environment α={} β={} out of range", e.alpha, e.beta));
            }
        }
        if self.data.n_per_env == 0 || self.data.test.n_per_env == 0 {
            return bad("environments need at least one sample".into());
        }
        if let BatchSize::Fixed(b) = self.method.batch_size {
            if b > self.data.n_per_env {
                return Err(Error::InvalidBatch { batch_size: b, n: self.data.n_per_env });
            }
        }
        let t = &self.data.test;
        if t.betas.is_empty() {
            return Err(Error::NoEnvironments);
        }
        if !(0.0..0.5).contains(&t.alpha) || t.betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return bad("test grid α or β out of range".into());
        }
        if t.betas.windows(2).any(|w| w[0] >= w[1]) {
            return bad("test betas must be strictly increasing".into());
        }
        if self.model.hidden_dim == 0 || self.model.depth == 0 {
            return bad("hidden_dim and depth must be positive".into());
        }
        if let DataSource::SyntheticTwoBit { feature_dim, .. } = self.data.source {
            if feature_dim == 0 || !feature_dim.is_multiple_of(2) {
                return Err(Error::InvalidDim(feature_dim));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every field except `output_dir`.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        digest_json(&v)
    }
}

/// SHA-256 hex of `value` serialized with sorted keys.
pub fn digest_json(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("JSON values serialize");
    hex::encode(Sha256::digest(&bytes))
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    config: &'a ExperimentConfig,
    config_digest: &'a str,
    git_describe: String,
    version: &'static str,
    status: &'a str,
    completed_trials: Vec<u64>,
}

fn write_manifest(cfg: &ExperimentConfig, digest: &str, status: &str, done: &[EvalReport]) -> Result<()> {
    let m = Manifest {
        name: &cfg.name,
        config: cfg,
        config_digest: digest,
        git_describe: git_describe(),
        version: env!("CARGO_PKG_VERSION"),
        status,
        completed_trials: done.iter().map(|r| r.seed).collect(),
    };
    let f = File::create(cfg.output_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &m)?;
    Ok(())
}

fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    write_accuracy_csv(reports, BufWriter::new(File::create(dir.join("accuracy.csv"))?))?;
    write_summary_csv(reports, BufWriter::new(File::create(dir.join("summary.csv"))?))
}

/// Training environments and test grid of one trial.
pub fn trial_data(cfg: &ExperimentConfig, source: &Source, seed: u64) -> Result<(Vec<EnvDataset>, Vec<EnvDataset>)> {
    let d = &cfg.data;
    let ab: Vec<(f64, f64)> = d.train.iter().map(|e| (e.alpha, e.beta)).collect();
    let envs = make_training_envs(&ab, d.n_per_env, seed, source, &d.resampling)?;
    let grid = make_test_grid(d.test.alpha, &d.test.betas, d.test.n_per_env, seed, source)?;
    check_seed_disjoint(&envs, &grid)?;
    Ok((envs, grid))
}

/// One trial: data, training with streamed diagnostics, grid evaluation and checkpoint.
pub fn run_trial(cfg: &ExperimentConfig, source: &Source, seed: u64, digest: &str) -> Result<EvalReport> {
    let (envs, grid) = trial_data(cfg, source, seed)?;
    let params = model::init(
        source.feature_dim(),
        cfg.model.hidden_dim,
        cfg.model.depth,
        cfg.head_mode(),
        envs.len(),
        seed,
    )?;
    let dir = &cfg.output_dir;
    let mut diag = BufWriter::new(File::create(dir.join(format!("diagnostics_seed{seed}.jsonl")))?);
    let out = train(&cfg.method, params, &envs, seed, |d, _| write_diagnostics_jsonl(std::slice::from_ref(d), &mut diag));
    diag.flush()?;
    let out = out?;
    save_checkpoint(&out.params, &CheckpointMeta { seed, step: out.steps }, dir, &format!("checkpoint_seed{seed}"))?;
    Ok(evaluate_grid(&out.params, &grid, cfg.inference())?.labeled(cfg.method.method.name(), seed, digest))
}

/// Runs every trial, rewriting the CSVs after each so finished trials survive a later failure.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let digest = cfg.digest();
    let source = Source::from_descriptor(&cfg.data.source)?;
    let mut reports = Vec::with_capacity(cfg.trials.len());
    write_manifest(cfg, &digest, "running", &reports)?;
    for &seed in &cfg.trials {
        match run_trial(cfg, &source, seed, &digest) {
            Ok(r) => {
                reports.push(r);
                write_reports(dir, &reports)?;
            }
            Err(e) => {
                write_reports(dir, &reports)?;
                write_manifest(cfg, &digest, "failed", &reports)?;
                return Err(Error::TrialFailed { seed, source: Box::new(e) });
            }
        }
    }
    write_manifest(cfg, &digest, "complete", &reports)?;
    Ok(reports)
}

/// Per-method aggregate over trials.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub trials: usize,
    pub avg_acc: (f64, f64),
    pub acc_gap: (f64, f64),
    /// Mean accuracy at each β of [`Comparison::betas`]; `None` where no trial covers it.
    pub acc_per_beta: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// Union of all grids, ascending.
    pub betas: Vec<f64>,
    pub rows: Vec<CompareRow>,
    pub warnings: Vec<String>,
}

fn accuracy_csv_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("accuracy.csv")
    } else {
        p.to_path_buf()
    }
}

/// Aggregates reports by method (in order of first appearance).
pub fn compare_reports(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("nothing to compare".into()));
    }
    let mut betas: Vec<f64> = reports.iter().flat_map(|r| r.betas.iter().copied()).collect();
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    let mut warnings = Vec::new();
    if reports.iter().any(|r| r.betas != reports[0].betas) {
        warnings.push(format!("test grids differ across reports; using the union of {} betas", betas.len()));
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let rows = methods
        .into_iter()
        .map(|m| {
            let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.method == m).collect();
            let avgs: Vec<f64> = rs.iter().map(|r| r.avg_acc).collect();
            let gaps: Vec<f64> = rs.iter().map(|r| r.acc_gap).collect();
            let acc_per_beta = betas
                .iter()
                .map(|b| {
                    let v: Vec<f64> = rs
                        .iter()
                        .filter_map(|r| r.betas.iter().position(|x| x == b).map(|i| r.acc_per_beta[i]))
                        .collect();
                    (!v.is_empty()).then(|| mean_std(&v).0)
                })
                .collect();
            CompareRow { method: m.to_string(), trials: rs.len(), avg_acc: mean_std(&avgs), acc_gap: mean_std(&gaps), acc_per_beta }
        })
        .collect();
    Ok(Comparison { betas, rows, warnings })
}

/// Reads accuracy CSVs (or run directories holding one) and aggregates them.
pub fn compare(paths: &[PathBuf]) -> Result<Comparison> {
    let mut reports = Vec::new();
    for p in paths {
        reports.extend(read_accuracy_csv(File::open(accuracy_csv_path(p))?)?);
    }
    compare_reports(&reports)
}

impl Comparison {
    /// Fixed-width table with accuracies in percent.
    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<w$}  {:>6}  {:>15}  {:>15}\n", "method", "trials", "avg acc (%)", "acc gap (%)");
        for r in &self.rows {
            let pm = |(m, sd): (f64, f64)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd);
            s += &format!("{:<w$}  {:>6}  {:>15}  {:>15}\n", r.method, r.trials, pm(r.avg_acc), pm(r.acc_gap));
        }
        s
    }

    /// `method,trials,avg_acc_mean,avg_acc_std,acc_gap_mean,acc_gap_std,acc@β…`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["method", "trials", "avg_acc_mean", "avg_acc_std", "acc_gap_mean", "acc_gap_std"].map(String::from).to_vec();
        header.extend(self.betas.iter().map(|b| format!("acc@{b}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.method.clone(),
                r.trials.to_string(),
                r.avg_acc.0.to_string(),
                r.avg_acc.1.to_string(),
                r.acc_gap.0.to_string(),
                r.acc_gap.1.to_string(),
            ];
            rec.extend(r.acc_per_beta.iter().map(|a| a.map_or(String::new(), |v| v.to_string())));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    BatchSize,
    HiddenDim,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_size" => Ok(SweepParam::BatchSize),
            "hidden_dim" => Ok(SweepParam::HiddenDim),
            _ => Err(Error::InvalidConfig(format!("unknown sweep parameter {s:?}; use batch_size or hidden_dim"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::BatchSize => "batch_size",
            SweepParam::HiddenDim => "hidden_dim",
        }
    }
}

/// One sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub report: EvalReport,
}

/// Sweeps `param` over the values in `[sweep]` for every trial seed and writes
/// `sweep_summary.csv` and `sweep_accuracy.csv`.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let values: Vec<String> = match param {
        SweepParam::BatchSize => cfg.sweep.batch_sizes.iter().map(ToString::to_string).collect(),
        SweepParam::HiddenDim => cfg.sweep.hidden_dims.iter().map(ToString::to_string).collect(),
    };
    if values.is_empty() {
        return Err(Error::InvalidConfig(format!("[sweep] lists no values for {}", param.name())));
    }
    if param == SweepParam::BatchSize && cfg.model.head_mode.is_some_and(|m| m != cfg.method.method.head_mode()) {
        return Err(Error::InvalidConfig("sweeps use the method's own head layout".into()));
    }
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let digest = cfg.digest();
    let source = Source::from_descriptor(&cfg.data.source)?;
    let mut points = Vec::new();
    for &seed in &cfg.trials {
        let (envs, grid) = trial_data(cfg, &source, seed)?;
        let setup = SweepSetup { hidden_dim: cfg.model.hidden_dim, depth: cfg.model.depth, seed, config_digest: digest.clone() };
        let reports = match param {
            SweepParam::BatchSize => batch_size_sweep(&cfg.method, &cfg.sweep.batch_sizes, &setup, &envs, &grid),
            SweepParam::HiddenDim => model_size_sweep(&cfg.method, &cfg.sweep.hidden_dims, &setup, &envs, &grid),
        }
        .map_err(|e| Error::TrialFailed { seed, source: Box::new(e) })?;
        points.extend(values.iter().cloned().zip(reports).map(|(value, report)| SweepPoint { value, report }));
    }
    write_sweep(dir, param, &points)?;
    Ok(points)
}

fn write_sweep(dir: &Path, param: SweepParam, points: &[SweepPoint]) -> Result<()> {
    let mut s = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("sweep_summary.csv"))?));
    s.write_record(["param", "value", "method", "seed", "avg_acc", "acc_gap"])?;
    let mut a = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("sweep_accuracy.csv"))?));
    a.write_record(["param", "value", "method", "seed", "beta", "accuracy"])?;
    for p in points {
        let r = &p.report;
        let head = [param.name().to_string(), p.value.clone(), r.method.clone(), r.seed.to_string()];
        s.write_record(head.iter().cloned().chain([r.avg_acc.to_string(), r.acc_gap.to_string()]))?;
        for (b, acc) in r.betas.iter().zip(&r.acc_per_beta) {
            a.write_record(head.iter().cloned().chain([b.to_string(), acc.to_string()]))?;
        }
    }
    s.flush()?;
    a.flush()?;
    Ok(())
}

/// Process exit status for an error: 2 for configuration problems, 3 for divergence, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_divergence() {
        3
    } else if e.is_config() {
        2
    } else {
        1
    }
}
