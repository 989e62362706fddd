//! Invariance objectives and their training loops.

mod bloc;
mod game;
mod objective;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::envgen::{batches, Batch, Batches, EnvDataset};
use crate::error::{Error, Result};
use crate::model::{self, HeadMode, HeadSelector, PredictorParams};
use crate::optim::{Optimizer, OptimizerConfig};

pub use bloc::{
    bloc_irm_step, bloc_upper_objective, bloc_variant_step, record_bloc, record_bloc_with, BlocGraph, BlocVariant,
};
pub use game::irm_game_step;
pub use objective::{
    objective, objective_erm, objective_fishr, objective_irmv0, objective_irmv1, objective_rex, objective_with,
    penalized_objective, Estimator, ObjectiveOptions, ObjectiveParts, ObjectiveReport, ObjectiveSpec, Penalty, Reduce,
    Slice,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Irmv1,
    Irmv0,
    Rex,
    Fishr,
    IrmGame,
    Bloc,
    BlocV1,
    BlocRex,
    BlocFishr,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Erm,
        Method::Irmv1,
        Method::Irmv0,
        Method::Rex,
        Method::Fishr,
        Method::IrmGame,
        Method::Bloc,
        Method::BlocV1,
        Method::BlocRex,
        Method::BlocFishr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Irmv1 => "irmv1",
            Method::Irmv0 => "irmv0",
            Method::Rex => "rex",
            Method::Fishr => "fishr",
            Method::IrmGame => "irm_game",
            Method::Bloc => "bloc",
            Method::BlocV1 => "bloc_v1",
            Method::BlocRex => "bloc_rex",
            Method::BlocFishr => "bloc_fishr",
        }
    }

    pub fn head_mode(self) -> HeadMode {
        match self {
            Method::Irmv1 => HeadMode::ScalarFrozen,
            Method::Erm | Method::Irmv0 | Method::Rex | Method::Fishr => HeadMode::Shared,
            _ => HeadMode::PerEnv,
        }
    }

    /// Whether `mode` is an acceptable head layout for this method.
    pub fn accepts(self, mode: HeadMode) -> bool {
        match self {
            Method::Erm | Method::Rex => mode != HeadMode::PerEnv,
            _ => mode == self.head_mode(),
        }
    }

    pub fn bloc_variant(self) -> Option<BlocVariant> {
        match self {
            Method::Bloc => Some(BlocVariant::Stationarity),
            Method::BlocV1 => Some(BlocVariant::V1),
            Method::BlocRex => Some(BlocVariant::Rex),
            Method::BlocFishr => Some(BlocVariant::Fishr),
            _ => None,
        }
    }

    /// Head used at test time.
    pub fn inference(self) -> HeadSelector {
        match self {
            Method::IrmGame => HeadSelector::EnsembleMean,
            m if m.bloc_variant().is_some() => HeadSelector::Consensus,
            _ => HeadSelector::Default,
        }
    }
}

/// Per-environment batch size: a row count, or `"full"` for the whole environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BatchSize {
    Fixed(usize),
    Full,
}

impl BatchSize {
    /// Rows per batch for an environment of `n` samples.
    pub fn rows(self, n: usize) -> usize {
        match self {
            BatchSize::Fixed(b) => b,
            BatchSize::Full => n,
        }
    }
}

impl std::fmt::Display for BatchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchSize::Fixed(b) => write!(f, "{b}"),
            BatchSize::Full => f.write_str("full"),
        }
    }
}

impl std::str::FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(BatchSize::Full);
        }
        s.parse()
            .map(BatchSize::Fixed)
            .map_err(|_| Error::InvalidConfig(format!("batch size must be a positive integer or \"full\", got {s:?}")))
    }
}

impl Serialize for BatchSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Fixed(b) => s.serialize_u64(*b as u64),
            BatchSize::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Rows(usize),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Rows(b) => Ok(BatchSize::Fixed(b)),
            Repr::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    pub gamma: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Lower-level gradient steps per BLOC iteration.
    #[serde(alias = "K")]
    pub k: usize,
    pub lower_lr: f64,
    pub batch_size: BatchSize,
    pub optimizer: OptimizerConfig,
    /// Divide the penalized loss by γ when γ > 1.
    pub normalize_loss: bool,
    /// Estimator of squared-gradient stationarity penalties on a minibatch.
    pub penalty_estimator: Estimator,
    /// Fishr variance over all trainable gradients instead of the head only.
    pub fishr_full_theta: bool,
    /// Head update order for IRM-Game; defaults to environment order.
    pub game_order: Option<Vec<usize>>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Erm,
            gamma: 1e6,
            warmup_epochs: 50,
            total_epochs: 200,
            k: 1,
            lower_lr: 2e-3,
            batch_size: BatchSize::Fixed(1024),
            optimizer: OptimizerConfig::adam(2e-3),
            normalize_loss: true,
            penalty_estimator: Estimator::Squared,
            fishr_full_theta: false,
            game_order: None,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if self.warmup_epochs > self.total_epochs {
            return bad(format!("warmup_epochs {} exceeds total_epochs {}", self.warmup_epochs, self.total_epochs));
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.lower_lr >= 0.0 && self.lower_lr.is_finite()) {
            return bad(format!("lower_lr must be finite and >= 0, got {}", self.lower_lr));
        }
        if self.batch_size == BatchSize::Fixed(0) {
            return bad("batch_size must be positive".into());
        }
        self.optimizer.validate()
    }

    pub fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            normalize: self.normalize_loss,
            estimator: self.penalty_estimator,
            fishr_full_theta: self.fishr_full_theta,
        }
    }

    /// γ in force during `epoch`: zero through warm-up, then the configured value.
    pub fn gamma_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else {
            self.gamma
        }
    }
}

/// Per-step training signals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub per_env_risk: Vec<f64>,
    /// `‖∇_w ℓ_e‖²`, at `w*` for BLOC methods.
    pub per_env_stationarity: Vec<f64>,
    /// Penalty before weighting by γ.
    pub penalty_value: f64,
    /// Largest pairwise distance between per-environment heads after the step.
    pub consensus_drift: f64,
}

impl StepDiagnostics {
    pub fn is_finite(&self) -> bool {
        self.per_env_risk.iter().chain(&self.per_env_stationarity).all(|v| v.is_finite())
            && self.penalty_value.is_finite()
            && self.consensus_drift.is_finite()
    }

    pub fn mean_stationarity(&self) -> f64 {
        self.per_env_stationarity.iter().sum::<f64>() / self.per_env_stationarity.len().max(1) as f64
    }
}

/// One JSON-lines record: step means over the epoch, drift as the maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub gamma: f64,
    pub per_env_risk: Vec<f64>,
    pub per_env_stationarity: Vec<f64>,
    pub penalty: f64,
    pub consensus_drift: f64,
}

impl EpochDiagnostics {
    fn from_steps(epoch: usize, gamma: f64, steps: &[StepDiagnostics]) -> Self {
        let n = steps.len().max(1) as f64;
        let n_envs = steps.first().map_or(0, |s| s.per_env_risk.len());
        let mean_col = |f: &dyn Fn(&StepDiagnostics) -> &[f64]| -> Vec<f64> {
            (0..n_envs).map(|e| steps.iter().map(|s| f(s)[e]).sum::<f64>() / n).collect()
        };
        Self {
            epoch,
            gamma,
            per_env_risk: mean_col(&|s| &s.per_env_risk),
            per_env_stationarity: mean_col(&|s| &s.per_env_stationarity),
            penalty: steps.iter().map(|s| s.penalty_value).sum::<f64>() / n,
            consensus_drift: steps.iter().map(|s| s.consensus_drift).fold(0.0, f64::max),
        }
    }

    pub fn mean_stationarity(&self) -> f64 {
        self.per_env_stationarity.iter().sum::<f64>() / self.per_env_stationarity.len().max(1) as f64
    }
}

pub fn write_diagnostics_jsonl(history: &[EpochDiagnostics], mut out: impl Write) -> Result<()> {
    for d in history {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PredictorParams,
    pub history: Vec<EpochDiagnostics>,
    pub steps: u64,
}

/// Initial parameters laid out for `method`.
pub fn init_for(
    method: Method,
    input_dim: usize,
    hidden_dim: usize,
    depth: usize,
    n_envs: usize,
    seed: u64,
) -> Result<PredictorParams> {
    model::init(input_dim, hidden_dim, depth, method.head_mode(), n_envs, seed)
}

/// Shuffle seed of environment `env` in `epoch`.
pub fn shuffle_seed(seed: u64, epoch: usize, env: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 20) ^ env as u64
}

/// One step of a single-level method through `optimizer`.
pub fn single_level_step(
    config: &MethodConfig,
    params: &mut PredictorParams,
    batches: &[Batch],
    optimizer: &mut Optimizer,
    gamma: f64,
) -> Result<StepDiagnostics> {
    let n_theta = params.theta_tensors().len();
    let mut flat = params.theta_tensors();
    flat.extend(params.head_tensors(0)?);
    let template = params.clone();
    let report = optimizer.minimize_step(&mut flat, |ts| {
        let mut p = template.clone();
        p.set_theta_tensors(ts[..n_theta].to_vec())?;
        p.set_head_tensors(0, ts[n_theta..].to_vec())?;
        let r = objective_with(config.method, &p, batches, gamma, config.objective_options())?;
        Ok((r.grads, r.diagnostics))
    })?;
    let head = flat.split_off(n_theta);
    params.set_theta_tensors(flat)?;
    params.set_head_tensors(0, head)?;
    Ok(report)
}

enum Optimizers {
    Single(Optimizer),
    Game { heads: Vec<Optimizer>, theta: Optimizer, order: Vec<usize> },
    Bloc(Optimizer, BlocVariant),
}

/// Trains `params` on `envs`.
///
/// γ is zero through warm-up and then switches to its configured value. Each
/// epoch runs as many steps as the environment with the most batches; shorter
/// environments start a new pass. `hook` sees every epoch's diagnostics.
pub fn train<H>(
    config: &MethodConfig,
    mut params: PredictorParams,
    envs: &[EnvDataset],
    seed: u64,
    mut hook: H,
) -> Result<TrainOutcome>
where
    H: FnMut(&EpochDiagnostics, &PredictorParams) -> Result<()>,
{
    config.validate()?;
    if envs.is_empty() {
        return Err(Error::NoEnvironments);
    }
    let method = config.method;
    if !method.accepts(params.head_mode()) {
        return Err(Error::HeadModeMismatch(format!(
            "{} cannot run with {:?} heads",
            method.name(),
            params.head_mode()
        )));
    }
    if params.head_mode() == HeadMode::PerEnv && params.n_heads() != envs.len() {
        return Err(Error::BadEnvIndex { index: envs.len(), count: params.n_heads() });
    }
    let batch_for = |e: &EnvDataset| config.batch_size.rows(e.len());
    let lr_batch = batch_for(&envs[0]);
    let mut opts = match method {
        Method::IrmGame => Optimizers::Game {
            heads: (0..envs.len()).map(|_| Optimizer::new(&config.optimizer, lr_batch)).collect::<Result<_>>()?,
            theta: Optimizer::new(&config.optimizer, lr_batch)?,
            order: config.game_order.clone().unwrap_or_else(|| (0..envs.len()).collect()),
        },
        m => match m.bloc_variant() {
            Some(v) => Optimizers::Bloc(Optimizer::new(&config.optimizer, lr_batch)?, v),
            None => Optimizers::Single(Optimizer::new(&config.optimizer, lr_batch)?),
        },
    };

    let mut history = Vec::with_capacity(config.total_epochs);
    let mut step: u64 = 0;
    for epoch in 0..config.total_epochs {
        let gamma = config.gamma_at(epoch);
        let mut iters: Vec<Batches<'_>> = envs
            .iter()
            .enumerate()
            .map(|(e, d)| batches(d, batch_for(d), shuffle_seed(seed, epoch, e)))
            .collect::<Result<_>>()?;
        let n_steps = iters.iter().map(|b| b.len()).max().unwrap_or(0);
        let mut steps = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let mut batch = Vec::with_capacity(envs.len());
            for (e, it) in iters.iter_mut().enumerate() {
                let b = match it.next() {
                    Some(b) => b,
                    None => {
                        *it = batches(&envs[e], batch_for(&envs[e]), shuffle_seed(seed, epoch, e))?;
                        it.next().ok_or(Error::NoEnvironments)?
                    }
                };
                batch.push(b);
            }
            let res = match &mut opts {
                Optimizers::Single(o) => single_level_step(config, &mut params, &batch, o, gamma),
                Optimizers::Game { heads, theta, order } => irm_game_step(&mut params, &batch, heads, theta, order),
                Optimizers::Bloc(o, v) => bloc_variant_step(
                    &mut params,
                    &batch,
                    o,
                    gamma,
                    config.k,
                    config.lower_lr,
                    *v,
                    config.objective_options(),
                ),
            };
            let diag = match res {
                Err(Error::FiniteViolation { .. }) => return Err(Error::Divergence { step, epoch }),
                other => other?,
            };
            let params_finite = params.theta.iter().all(|l| l.weight.is_finite() && l.bias.is_finite());
            if !diag.is_finite() || !params_finite {
                return Err(Error::Divergence { step, epoch });
            }
            steps.push(diag);
            step += 1;
        }
        let record = EpochDiagnostics::from_steps(epoch, gamma, &steps);
        hook(&record, &params)?;
        history.push(record);
    }
    Ok(TrainOutcome { params, history, steps: step })
}

/// Trains without an epoch hook.
pub fn train_plain(
    config: &MethodConfig,
    params: PredictorParams,
    envs: &[EnvDataset],
    seed: u64,
) -> Result<TrainOutcome> {
    train(config, params, envs, seed, |_, _| Ok(()))
}
