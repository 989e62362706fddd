use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::envgen::Batch;
use crate::error::{Error, Result};
use crate::model::{bce, head_logit, BoundHeads, BoundParams, PredictorParams};
use crate::optim::Optimizer;

use super::objective::{
    penalized_objective, pick, split_batches, ObjectiveOptions, ObjectiveParts, ObjectiveSpec, Penalty, Reduce, Slice,
};
use super::StepDiagnostics;

/// Upper-level penalty evaluated at the consensus head `w*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlocVariant {
    /// `Σ_e ‖∇_w ℓ_e(w*∘θ)‖²`.
    Stationarity,
    /// `Σ_e (∂ℓ_e((s·w*)∘θ)/∂s |_{s=1})²`.
    V1,
    /// Population variance of `ℓ_e(w*∘θ)`.
    Rex,
    /// Spread of `∇_w ℓ_e(w*∘θ)` across environments.
    Fishr,
}

impl BlocVariant {
    fn penalty(self) -> Penalty {
        match self {
            BlocVariant::Stationarity | BlocVariant::V1 => Penalty::Stationarity,
            BlocVariant::Rex => Penalty::RiskVariance,
            BlocVariant::Fishr => Penalty::GradVariance,
        }
    }
}

/// Recorded BLOC upper objective.
pub struct BlocGraph {
    pub parts: ObjectiveParts,
    /// Consensus head, a function of θ through the lower level.
    pub w_star: Vec<Var>,
}

/// Lower level, projection and upper objective for arbitrary per-environment risks.
///
/// `risk(tape, e, head, slice)` records environment `e`'s mean risk under `head`
/// and returns it with its sample count. Each head in `heads` takes `k` gradient
/// steps of size `lower_lr` on its own risk; the steps stay on the tape so
/// gradients flow through them. The results are averaged into `w*`, and the upper
/// objective is `Σ_e ℓ_e(w*) + γ·penalty(w*)`.
#[allow(clippy::too_many_arguments)]
pub fn record_bloc_with<R>(
    tape: &mut Tape,
    heads: &[Vec<Var>],
    k: usize,
    lower_lr: f64,
    variant: BlocVariant,
    gamma: f64,
    opts: ObjectiveOptions,
    mut risk: R,
) -> Result<BlocGraph>
where
    R: FnMut(&mut Tape, usize, &[Var], Slice) -> Result<(Var, f64)>,
{
    if k == 0 {
        return Err(Error::InvalidConfig("BLOC needs at least one lower-level step".into()));
    }
    if heads.is_empty() {
        return Err(Error::NoEnvironments);
    }
    let mut lowered = Vec::with_capacity(heads.len());
    for (e, h) in heads.iter().enumerate() {
        let mut w = h.clone();
        for _ in 0..k {
            let (l, _) = risk(tape, e, &w, Slice::Full)?;
            let g = tape.grad_graph(l, &w)?;
            for (wi, gi) in w.iter_mut().zip(g) {
                let step = tape.scale_const(gi, lower_lr)?;
                *wi = tape.sub(*wi, step)?;
            }
        }
        lowered.push(w);
    }
    let w_star = (0..heads[0].len())
        .map(|i| {
            let col: Vec<Var> = lowered.iter().map(|w| w[i]).collect();
            tape.mean_all(&col)
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = match variant {
        BlocVariant::V1 => Some(tape.leaf(Tensor::scalar(1.0))?),
        _ => None,
    };
    let penalty = variant.penalty();
    let spec = ObjectiveSpec { gamma, penalty, reduce: Reduce::Sum, estimator: opts.estimator, normalize: opts.normalize };
    let upper_head = match scale {
        Some(s) => w_star.iter().map(|&w| tape.scale(s, w)).collect::<Result<Vec<_>>>()?,
        None => w_star.clone(),
    };
    let penalty_wrt: Vec<Var> = match scale {
        Some(s) => vec![s],
        None => w_star.clone(),
    };
    let parts = penalized_objective(tape, heads.len(), &spec, &penalty_wrt, &w_star, |tape, e, slice| {
        risk(tape, e, &upper_head, slice)
    })?;
    Ok(BlocGraph { parts, w_star })
}

/// [`record_bloc_with`] for the model's per-environment linear heads on cross-entropy risk.
#[allow(clippy::too_many_arguments)]
pub fn record_bloc(
    tape: &mut Tape,
    bound: &BoundParams,
    batches: &[Batch],
    gamma: f64,
    k: usize,
    lower_lr: f64,
    variant: BlocVariant,
    opts: ObjectiveOptions,
) -> Result<BlocGraph> {
    let BoundHeads::PerEnv(heads) = &bound.heads else {
        return Err(Error::HeadModeMismatch("BLOC needs per-environment heads".into()));
    };
    if heads.len() != batches.len() {
        return Err(Error::BadEnvIndex { index: batches.len(), count: heads.len() });
    }
    let spec = ObjectiveSpec { gamma, penalty: variant.penalty(), reduce: Reduce::Sum, estimator: opts.estimator, normalize: opts.normalize };
    let halves = split_batches(batches, &spec)?;
    let mut zs: Vec<[Option<Var>; 3]> = vec![[None; 3]; batches.len()];
    let head_vars: Vec<Vec<Var>> = heads.iter().map(|h| h.vars().to_vec()).collect();
    record_bloc_with(tape, &head_vars, k, lower_lr, variant, gamma, opts, |tape, e, head, slice| {
        let slot = match slice {
            Slice::Full => 0,
            Slice::Half(i) => 1 + i.min(1),
        };
        let b = pick(batches, &halves, e, slice);
        let z = match zs[e][slot] {
            Some(z) => z,
            None => {
                let x = tape.constant(b.features.clone())?;
                let z = bound.features(tape, x)?;
                zs[e][slot] = Some(z);
                z
            }
        };
        let logit = head_logit(tape, z, head)?;
        Ok((bce(tape, logit, &b.labels)?, b.len() as f64))
    })
}

/// Upper objective value and its hypergradient with respect to θ.
pub fn bloc_upper_objective(
    params: &PredictorParams,
    batches: &[Batch],
    gamma: f64,
    k: usize,
    lower_lr: f64,
    variant: BlocVariant,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let g = record_bloc(&mut tape, &bound, batches, gamma, k, lower_lr, variant, ObjectiveOptions::default())?;
    let theta = bound.theta_vars();
    let grads = tape.grad(g.parts.total, &theta)?;
    Ok((tape.scalar(g.parts.total), grads))
}

struct Evaluated {
    w_star: Vec<Tensor>,
    diag: StepDiagnostics,
}

/// One BLOC iteration: lower-level head updates, consensus projection (every
/// head set to `w*`), then an optimizer step on θ against the upper objective.
#[allow(clippy::too_many_arguments)]
pub fn bloc_variant_step(
    params: &mut PredictorParams,
    batches: &[Batch],
    optimizer: &mut Optimizer,
    gamma: f64,
    k: usize,
    lower_lr: f64,
    variant: BlocVariant,
    opts: ObjectiveOptions,
) -> Result<StepDiagnostics> {
    let n_heads = params.n_heads();
    let template = params.clone();
    let mut theta = params.theta_tensors();
    let ev = optimizer.minimize_step(&mut theta, |th| {
        let mut p = template.clone();
        p.set_theta_tensors(th.to_vec())?;
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape)?;
        let g = record_bloc(&mut tape, &bound, batches, gamma, k, lower_lr, variant, opts)?;
        let diag = StepDiagnostics {
            per_env_risk: g.parts.risks.iter().map(|&r| tape.scalar(r)).collect(),
            per_env_stationarity: g.parts.stationarity.clone(),
            penalty_value: tape.scalar(g.parts.penalty),
            consensus_drift: 0.0,
        };
        let w_star = g.w_star.iter().map(|&v| tape.value(v).clone()).collect();
        let grads = tape.grad(g.parts.total, &bound.theta_vars())?;
        Ok((grads, Evaluated { w_star, diag }))
    })?;
    params.set_theta_tensors(theta)?;
    for e in 0..n_heads {
        params.set_head_tensors(e, ev.w_star.clone())?;
    }
    let mut diag = ev.diag;
    diag.consensus_drift = params.consensus_drift();
    Ok(diag)
}

/// [`bloc_variant_step`] with the stationarity penalty.
#[allow(clippy::too_many_arguments)]
pub fn bloc_irm_step(
    params: &mut PredictorParams,
    batches: &[Batch],
    optimizer: &mut Optimizer,
    gamma: f64,
    k: usize,
    lower_lr: f64,
    opts: ObjectiveOptions,
) -> Result<StepDiagnostics> {
    bloc_variant_step(params, batches, optimizer, gamma, k, lower_lr, BlocVariant::Stationarity, opts)
}
