use crate::diff::{Tape, Tensor, Var};
use crate::envgen::Batch;
use crate::error::{Error, Result};
use crate::model::{bce, head_logit, BoundHeads, PredictorParams};
use crate::optim::Optimizer;

use super::StepDiagnostics;

/// Ensemble-logit risks `ℓ_e(mean_j w^(j) ∘ θ)` for every environment.
fn ensemble_risks(tape: &mut Tape, heads: &[[Var; 2]], zs: &[Var], batches: &[Batch]) -> Result<Vec<Var>> {
    zs.iter()
        .zip(batches)
        .map(|(&z, b)| {
            let logits = heads.iter().map(|h| head_logit(tape, z, h)).collect::<Result<Vec<_>>>()?;
            let mean = tape.mean_all(&logits)?;
            bce(tape, mean, &b.labels)
        })
        .collect()
}

struct Recorded {
    tape: Tape,
    risks: Vec<Var>,
    heads: Vec<[Var; 2]>,
    theta: Vec<Var>,
}

fn record(params: &PredictorParams, batches: &[Batch]) -> Result<Recorded> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let BoundHeads::PerEnv(hs) = &bound.heads else {
        return Err(Error::HeadModeMismatch("IRM-Game needs per-environment heads".into()));
    };
    if hs.len() != batches.len() {
        return Err(Error::BadEnvIndex { index: batches.len(), count: hs.len() });
    }
    let heads: Vec<[Var; 2]> = hs.iter().map(|h| h.vars()).collect();
    let zs = batches
        .iter()
        .map(|b| {
            let x = tape.constant(b.features.clone())?;
            bound.features(&mut tape, x)
        })
        .collect::<Result<Vec<_>>>()?;
    let risks = ensemble_risks(&mut tape, &heads, &zs, batches)?;
    Ok(Recorded { tape, risks, heads, theta: bound.theta_vars() })
}

/// One round of the ensemble game.
///
/// Every head `w^(e)` takes one step on its own environment's ensemble-logit
/// risk, all computed from the same snapshot and applied in `order`; then θ
/// takes one step on `Σ_e ℓ_e` under the updated heads.
pub fn irm_game_step(
    params: &mut PredictorParams,
    batches: &[Batch],
    head_optimizers: &mut [Optimizer],
    theta_optimizer: &mut Optimizer,
    order: &[usize],
) -> Result<StepDiagnostics> {
    let mut rec = record(params, batches)?;
    let n = rec.heads.len();
    if head_optimizers.len() != n {
        return Err(Error::BadEnvIndex { index: head_optimizers.len(), count: n });
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(Error::InvalidConfig(format!("game order {order:?} is not a permutation of 0..{n}")));
    }
    let per_env_risk: Vec<f64> = rec.risks.iter().map(|&r| rec.tape.scalar(r)).collect();
    let mut head_grads = Vec::with_capacity(n);
    for e in 0..n {
        head_grads.push(rec.tape.grad(rec.risks[e], &rec.heads[e])?);
    }
    let per_env_stationarity = head_grads.iter().map(|g| g.iter().map(Tensor::norm_sq).sum()).collect();

    for &e in order {
        let mut h = params.head_tensors(e)?;
        head_optimizers[e].step(&mut h, &head_grads[e])?;
        params.set_head_tensors(e, h)?;
    }

    let template = params.clone();
    let mut theta = params.theta_tensors();
    theta_optimizer.minimize_step(&mut theta, |th| {
        let mut p = template.clone();
        p.set_theta_tensors(th.to_vec())?;
        let mut r = record(&p, batches)?;
        let total = r.tape.add_all(&r.risks)?;
        Ok((r.tape.grad(total, &r.theta)?, ()))
    })?;
    params.set_theta_tensors(theta)?;

    Ok(StepDiagnostics {
        per_env_risk,
        per_env_stationarity,
        penalty_value: 0.0,
        consensus_drift: params.consensus_drift(),
    })
}
