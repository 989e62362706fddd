use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::envgen::Batch;
use crate::error::{Error, Result};
use crate::model::{bce, BoundHeads, BoundParams, HeadMode, PredictorParams};

use super::{Method, StepDiagnostics};

/// Invariance penalty added to the pooled risk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Penalty {
    None,
    /// `Σ_e ‖∂ℓ_e/∂w‖²`.
    Stationarity,
    /// Population variance of the risks.
    RiskVariance,
    /// `(1/N) Σ_e ‖g_e − ḡ‖²` with `g_e = ∂ℓ_e/∂w`.
    GradVariance,
}

/// How per-environment risks are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// Estimator of quadratic penalties on a finite batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Plug-in estimate on the whole batch, e.g. `‖∇ℓ_e‖²`.
    #[default]
    Squared,
    /// Each square replaced by the product of its two half-batch estimates, e.g.
    /// `⟨∇ℓ_e^a, ∇ℓ_e^b⟩`; removes the sampling-noise bias of the plug-in form.
    SplitBatch,
}

/// Which rows of an environment's batch a risk is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slice {
    Full,
    /// First (`0`) or second (`1`) half; the first takes the extra row.
    Half(usize),
}

/// Shape of a penalized objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub gamma: f64,
    pub penalty: Penalty,
    pub reduce: Reduce,
    pub estimator: Estimator,
    /// Divide the total by `γ` when `γ > 1`.
    pub normalize: bool,
}

impl ObjectiveSpec {
    pub fn new(gamma: f64, penalty: Penalty, reduce: Reduce) -> Self {
        Self { gamma, penalty, reduce, estimator: Estimator::Squared, normalize: false }
    }

    /// Whether risks are recorded on batch halves.
    pub fn splits(&self) -> bool {
        self.estimator == Estimator::SplitBatch && self.penalty != Penalty::None && self.gamma != 0.0
    }
}

/// Pieces of a recorded objective.
#[derive(Clone, Debug)]
pub struct ObjectiveParts {
    pub total: Var,
    pub risks: Vec<Var>,
    /// Penalty before weighting by γ.
    pub penalty: Var,
    /// `‖∂ℓ_e/∂w‖²` per environment, with `w` the stationarity probe.
    pub stationarity: Vec<f64>,
}

/// Records `reduce_e ℓ_e + γ·penalty`.
///
/// `risk(tape, e, slice)` records the mean risk of environment `e` on `slice` and
/// returns it with its sample count. Gradient penalties differentiate with respect
/// to `penalty_wrt`; the stationarity diagnostic uses `stationarity_wrt`. Either
/// may name intermediate nodes.
pub fn penalized_objective<R>(
    tape: &mut Tape,
    n_envs: usize,
    spec: &ObjectiveSpec,
    penalty_wrt: &[Var],
    stationarity_wrt: &[Var],
    mut risk: R,
) -> Result<ObjectiveParts>
where
    R: FnMut(&mut Tape, usize, Slice) -> Result<(Var, f64)>,
{
    if n_envs == 0 {
        return Err(Error::NoEnvironments);
    }
    let graph = spec.gamma != 0.0;
    let split = spec.splits();

    let mut risks = Vec::with_capacity(n_envs);
    let mut halves = Vec::with_capacity(if split { n_envs } else { 0 });
    for e in 0..n_envs {
        if split {
            let (ra, na) = risk(tape, e, Slice::Half(0))?;
            let (rb, nb) = risk(tape, e, Slice::Half(1))?;
            let wa = tape.scale_const(ra, na / (na + nb))?;
            let wb = tape.scale_const(rb, nb / (na + nb))?;
            risks.push(tape.add(wa, wb)?);
            halves.push((ra, rb));
        } else {
            risks.push(risk(tape, e, Slice::Full)?.0);
        }
    }

    let needs_grads = matches!(spec.penalty, Penalty::Stationarity | Penalty::GradVariance);
    let shared_probe = !split && penalty_wrt == stationarity_wrt;
    let grads_of = |tape: &mut Tape, r: Var| -> Result<Vec<Var>> {
        if graph {
            tape.grad_graph(r, penalty_wrt)
        } else {
            let plain = tape.grad(r, penalty_wrt)?;
            plain.into_iter().map(|t| tape.constant(t)).collect()
        }
    };

    // With the split estimator each environment carries two gradient sets, one per half.
    let mut env_grads: Vec<(Vec<Var>, Vec<Var>)> = Vec::with_capacity(n_envs);
    let mut stationarity = Vec::with_capacity(n_envs);
    let mut stat_vars = Vec::with_capacity(n_envs);
    for (e, &r) in risks.iter().enumerate() {
        if needs_grads {
            let (ga, gb) = if split {
                let (ra, rb) = halves[e];
                (grads_of(tape, ra)?, grads_of(tape, rb)?)
            } else {
                let g = grads_of(tape, r)?;
                (g.clone(), g)
            };
            let s = inner(tape, &ga, &gb)?;
            if shared_probe {
                stationarity.push(tape.scalar(s));
            }
            stat_vars.push(s);
            env_grads.push((ga, gb));
        }
        if !(needs_grads && shared_probe) {
            let gs = tape.grad(r, stationarity_wrt)?;
            stationarity.push(gs.iter().map(Tensor::norm_sq).sum());
        }
    }

    let pen = match spec.penalty {
        Penalty::None => tape.constant(Tensor::scalar(0.0))?,
        Penalty::Stationarity => tape.add_all(&stat_vars)?,
        Penalty::RiskVariance => {
            let (ra, rb): (Vec<Var>, Vec<Var>) =
                if split { halves.iter().copied().unzip() } else { (risks.clone(), risks.clone()) };
            let da = centered(tape, &ra)?;
            let db = centered(tape, &rb)?;
            let prods = da.iter().zip(&db).map(|(&x, &y)| tape.mul(x, y)).collect::<Result<Vec<_>>>()?;
            tape.mean_all(&prods)?
        }
        Penalty::GradVariance => {
            let n_params = penalty_wrt.len();
            let mut terms = Vec::with_capacity(n_params);
            for i in 0..n_params {
                let ca: Vec<Var> = env_grads.iter().map(|g| g.0[i]).collect();
                let cb: Vec<Var> = env_grads.iter().map(|g| g.1[i]).collect();
                let da = centered(tape, &ca)?;
                let db = if split { centered(tape, &cb)? } else { da.clone() };
                terms.push(inner(tape, &da, &db)?);
            }
            let s = tape.add_all(&terms)?;
            tape.scale_const(s, 1.0 / n_envs as f64)?
        }
    };

    let pooled = match spec.reduce {
        Reduce::Sum => tape.add_all(&risks)?,
        Reduce::Mean => tape.mean_all(&risks)?,
    };
    let total = if spec.gamma == 0.0 || spec.penalty == Penalty::None {
        pooled
    } else {
        let weighted = tape.scale_const(pen, spec.gamma)?;
        let t = tape.add(pooled, weighted)?;
        if spec.normalize && spec.gamma > 1.0 {
            tape.scale_const(t, 1.0 / spec.gamma)?
        } else {
            t
        }
    };
    Ok(ObjectiveParts { total, risks, penalty: pen, stationarity })
}

/// `Σ_i sum(a_i ⊙ b_i)`; the squared norm when `a` and `b` coincide.
fn inner(tape: &mut Tape, a: &[Var], b: &[Var]) -> Result<Var> {
    let terms = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| if x == y { tape.norm_sq(x) } else { tape.mul(x, y).and_then(|m| tape.sum(m)) })
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

fn centered(tape: &mut Tape, xs: &[Var]) -> Result<Vec<Var>> {
    let m = tape.mean_all(xs)?;
    xs.iter().map(|&x| tape.sub(x, m)).collect()
}

/// Value, gradients and diagnostics of one objective evaluation.
#[derive(Clone, Debug)]
pub struct ObjectiveReport {
    pub value: f64,
    /// Gradients of the trainable tensors, θ first and then the shared head.
    pub grads: Vec<Tensor>,
    pub diagnostics: StepDiagnostics,
}

fn expect_mode(method: Method, params: &PredictorParams, allowed: &[HeadMode]) -> Result<()> {
    let mode = params.head_mode();
    if allowed.contains(&mode) {
        Ok(())
    } else {
        Err(Error::HeadModeMismatch(format!("{} cannot run with {mode:?} heads", method.name())))
    }
}

pub(crate) fn single_level_spec(method: Method) -> Result<(Penalty, Reduce, &'static [HeadMode])> {
    const BOTH: &[HeadMode] = &[HeadMode::Shared, HeadMode::ScalarFrozen];
    Ok(match method {
        Method::Erm => (Penalty::None, Reduce::Sum, BOTH),
        Method::Irmv1 => (Penalty::Stationarity, Reduce::Sum, &[HeadMode::ScalarFrozen]),
        Method::Irmv0 => (Penalty::Stationarity, Reduce::Sum, &[HeadMode::Shared]),
        Method::Rex => (Penalty::RiskVariance, Reduce::Mean, BOTH),
        Method::Fishr => (Penalty::GradVariance, Reduce::Mean, &[HeadMode::Shared]),
        other => {
            return Err(Error::InvalidConfig(format!("{} is not a single-level objective", other.name())))
        }
    })
}

/// Knobs shared by every objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveOptions {
    /// Divide the total by `γ` when `γ > 1`.
    pub normalize: bool,
    pub estimator: Estimator,
    /// Fishr variance over all trainable gradients instead of the head only.
    pub fishr_full_theta: bool,
}

/// Halves of every batch, when the split estimator needs them.
pub(crate) fn split_batches(batches: &[Batch], spec: &ObjectiveSpec) -> Result<Vec<(Batch, Batch)>> {
    if !spec.splits() {
        return Ok(Vec::new());
    }
    batches
        .iter()
        .map(|b| b.halves().ok_or(Error::InvalidBatch { batch_size: b.len(), n: b.len() }))
        .collect()
}

pub(crate) fn pick<'a>(batches: &'a [Batch], halves: &'a [(Batch, Batch)], e: usize, slice: Slice) -> &'a Batch {
    match slice {
        Slice::Full => &batches[e],
        Slice::Half(0) => &halves[e].0,
        Slice::Half(_) => &halves[e].1,
    }
}

/// Records a single-level objective on `tape` with `bound` parameters.
pub(crate) fn record_single_level(
    tape: &mut Tape,
    bound: &BoundParams,
    method: Method,
    batches: &[Batch],
    gamma: f64,
    opts: ObjectiveOptions,
) -> Result<(ObjectiveParts, Vec<Var>)> {
    let (penalty, reduce, _) = single_level_spec(method)?;
    let spec = ObjectiveSpec { gamma, penalty, reduce, estimator: opts.estimator, normalize: opts.normalize };
    let (probe, trainable) = match &bound.heads {
        BoundHeads::Shared(h) => {
            let mut t = bound.theta_vars();
            t.extend(h.vars());
            (h.vars().to_vec(), t)
        }
        BoundHeads::ScalarFrozen { scale, .. } => (vec![*scale], bound.theta_vars()),
        BoundHeads::PerEnv(_) => return Err(Error::HeadModeMismatch("per-environment heads".into())),
    };
    let penalty_wrt =
        if opts.fishr_full_theta && method == Method::Fishr { trainable.clone() } else { probe.clone() };
    let halves = split_batches(batches, &spec)?;
    let risk = |tape: &mut Tape, e: usize, slice: Slice| -> Result<(Var, f64)> {
        let b = pick(batches, &halves, e, slice);
        let x = tape.constant(b.features.clone())?;
        let z = bound.features(tape, x)?;
        let logit = match &bound.heads {
            BoundHeads::Shared(h) => h.apply(tape, z)?,
            BoundHeads::ScalarFrozen { output, scale } => {
                let o = output.apply(tape, z)?;
                tape.scale(*scale, o)?
            }
            BoundHeads::PerEnv(_) => unreachable!(),
        };
        Ok((bce(tape, logit, &b.labels)?, b.len() as f64))
    };
    let parts = penalized_objective(tape, batches.len(), &spec, &penalty_wrt, &probe, risk)?;
    Ok((parts, trainable))
}

/// Evaluates a single-level objective (ERM, IRMv1, IRMv0, REx or Fishr) and its
/// gradient with respect to every trainable tensor.
pub fn objective(method: Method, params: &PredictorParams, batches: &[Batch], gamma: f64) -> Result<ObjectiveReport> {
    objective_with(method, params, batches, gamma, ObjectiveOptions::default())
}

/// [`objective`] with explicit options.
pub fn objective_with(
    method: Method,
    params: &PredictorParams,
    batches: &[Batch],
    gamma: f64,
    opts: ObjectiveOptions,
) -> Result<ObjectiveReport> {
    let (_, _, modes) = single_level_spec(method)?;
    expect_mode(method, params, modes)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let (parts, trainable) = record_single_level(&mut tape, &bound, method, batches, gamma, opts)?;
    let value = tape.scalar(parts.total);
    let diagnostics = StepDiagnostics {
        per_env_risk: parts.risks.iter().map(|&r| tape.scalar(r)).collect(),
        per_env_stationarity: parts.stationarity.clone(),
        penalty_value: tape.scalar(parts.penalty),
        consensus_drift: 0.0,
    };
    let grads = tape.grad(parts.total, &trainable)?;
    Ok(ObjectiveReport { value, grads, diagnostics })
}

/// `Σ_e ℓ_e`.
pub fn objective_erm(params: &PredictorParams, batches: &[Batch]) -> Result<f64> {
    Ok(objective(Method::Erm, params, batches, 0.0)?.value)
}

/// `Σ_e [ℓ_e + γ (∂ℓ_e/∂s |_{s=1})²]` with the frozen scalar head `s`.
pub fn objective_irmv1(params: &PredictorParams, batches: &[Batch], gamma: f64) -> Result<f64> {
    Ok(objective(Method::Irmv1, params, batches, gamma)?.value)
}

/// `Σ_e [ℓ_e + γ ‖∂ℓ_e/∂w‖²]` with a trainable shared head `w`.
pub fn objective_irmv0(params: &PredictorParams, batches: &[Batch], gamma: f64) -> Result<f64> {
    Ok(objective(Method::Irmv0, params, batches, gamma)?.value)
}

/// Mean risk plus `γ` times the population variance of the risks.
pub fn objective_rex(params: &PredictorParams, batches: &[Batch], gamma: f64) -> Result<f64> {
    Ok(objective(Method::Rex, params, batches, gamma)?.value)
}

/// Mean risk plus `γ` times the spread of the head gradients across environments.
pub fn objective_fishr(params: &PredictorParams, batches: &[Batch], gamma: f64) -> Result<f64> {
    Ok(objective(Method::Fishr, params, batches, gamma)?.value)
}
