//! SGD, Adam and the large-batch wrappers LSGD, LALR and SAM.
//!
//! Parameters are flat lists of tensors. LALR treats each tensor (every weight
//! matrix and every bias vector) as its own layer.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Lsgd,
    Lalr,
    Sam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub lsgd_reference_batch: usize,
    pub lsgd_warmup_steps: u64,
    pub lalr_clamp: (f64, f64),
    /// Use `‖θ‖²` and `‖u‖²` in the LALR rule instead of plain norms.
    pub lalr_squared_norm: bool,
    pub sam_rho: f64,
    /// Inner optimizer of LSGD, LALR and SAM; plain SGD when absent.
    pub wrapped: Option<Box<OptimizerConfig>>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            base_lr: 2e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            lsgd_reference_batch: 1024,
            lsgd_warmup_steps: 0,
            lalr_clamp: (0.0, 1.0),
            lalr_squared_norm: false,
            sam_rho: 1e-3,
            wrapped: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, base_lr: lr, ..Self::default() }
    }

    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, base_lr: lr, ..Self::default() }
    }

    /// `kind` wrapping `inner`, with the wrapper's learning rate taken from `inner`.
    pub fn wrapping(kind: OptimizerKind, inner: OptimizerConfig) -> Self {
        Self { kind, base_lr: inner.base_lr, wrapped: Some(Box::new(inner)), ..Self::default() }
    }

    fn inner(&self) -> OptimizerConfig {
        self.wrapped.as_deref().cloned().unwrap_or_else(|| OptimizerConfig::sgd(self.base_lr))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        let (cl, cu) = self.lalr_clamp;
        if !(0.0 <= cl && cl <= cu) {
            return bad(format!("lalr_clamp needs 0 <= c_l <= c_u, got ({cl}, {cu})"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        match self.kind {
            OptimizerKind::Sgd | OptimizerKind::Adam => {
                if self.wrapped.is_some() {
                    return bad(format!("{:?} does not wrap another optimizer", self.kind));
                }
            }
            OptimizerKind::Lsgd | OptimizerKind::Lalr => {
                if self.kind == OptimizerKind::Lsgd && self.lsgd_reference_batch == 0 {
                    return bad("lsgd_reference_batch must be positive".into());
                }
                let inner = self.inner();
                if !matches!(inner.kind, OptimizerKind::Sgd | OptimizerKind::Adam) {
                    return bad(format!("{:?} must wrap sgd or adam", self.kind));
                }
                inner.validate()?;
            }
            OptimizerKind::Sam => {
                if self.sam_rho <= 0.0 {
                    return bad(format!("sam_rho must be positive, got {}", self.sam_rho));
                }
                let inner = self.inner();
                if inner.kind == OptimizerKind::Sam {
                    return bad("sam cannot wrap sam".into());
                }
                inner.validate()?;
            }
        }
        Ok(())
    }
}

fn check_lengths(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err(format!("{} params vs {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(shape_err(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_lengths(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Advances the moments and returns the bias-corrected direction `m̂/(√v̂+ε)`.
    fn direction(&mut self, grads: &[Tensor], betas: (f64, f64), eps: f64) -> Result<Vec<Tensor>> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        check_lengths(&self.m, grads)?;
        let (b1, b2) = betas;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut out = Vec::with_capacity(grads.len());
        for ((m, v), g) in self.m.iter_mut().zip(&mut self.v).zip(grads) {
            let mut u = g.clone();
            for (((mi, vi), gi), ui) in
                m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()).zip(u.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *ui = (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            out.push(u);
        }
        Ok(out)
    }
}

pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    check_lengths(params, grads)?;
    let u = state.direction(grads, betas, eps)?;
    sgd_step(params, &u, lr)
}

/// Linear scaling with warm-up: `base_lr` ramps to `base_lr·batch/reference`
/// over `lsgd_warmup_steps`, then stays there.
pub fn lsgd_schedule(step: u64, batch_size: usize, config: &OptimizerConfig) -> f64 {
    let base = config.base_lr;
    let target = base * batch_size as f64 / config.lsgd_reference_batch as f64;
    let w = config.lsgd_warmup_steps;
    if w == 0 || step >= w {
        target
    } else {
        base + (target - base) * step as f64 / w as f64
    }
}

/// `τ(v) = min(max(v, c_l), c_u)`.
pub fn lalr_trust(v: f64, clamp: (f64, f64)) -> f64 {
    v.max(clamp.0).min(clamp.1)
}

/// Layerwise step `θ_i ← θ_i − τ(‖θ_i‖)·lr·u_i/‖u_i‖`; layers with `u_i = 0` are
/// left untouched. Returns the norm of each applied step.
pub fn lalr_step(params: &mut [Tensor], updates: &[Tensor], lr: f64, clamp: (f64, f64), squared: bool) -> Result<Vec<f64>> {
    check_lengths(params, updates)?;
    let mut norms = Vec::with_capacity(params.len());
    for (p, u) in params.iter_mut().zip(updates) {
        let (pn, un) = if squared { (p.norm_sq(), u.norm_sq()) } else { (p.norm(), u.norm()) };
        if un == 0.0 {
            norms.push(0.0);
            continue;
        }
        let scale = lalr_trust(pn, clamp) * lr / un;
        for (x, d) in p.data_mut().iter_mut().zip(u.data()) {
            *x -= scale * d;
        }
        norms.push(scale * u.norm());
    }
    Ok(norms)
}

/// Stateful optimizer built from an [`OptimizerConfig`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    batch_size: usize,
    step: u64,
    adam: AdamState,
    inner: Option<Box<Optimizer>>,
}

impl Optimizer {
    /// `batch_size` feeds the LSGD linear-scaling rule.
    pub fn new(config: &OptimizerConfig, batch_size: usize) -> Result<Self> {
        config.validate()?;
        let inner = match config.kind {
            OptimizerKind::Sgd | OptimizerKind::Adam => None,
            _ => Some(Box::new(Optimizer::new(&config.inner(), batch_size)?)),
        };
        Ok(Self { config: config.clone(), batch_size, step: 0, adam: AdamState::default(), inner })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        match self.config.kind {
            OptimizerKind::Lsgd => lsgd_schedule(self.step, self.batch_size, &self.config),
            OptimizerKind::Sam => self.inner.as_ref().map_or(self.config.base_lr, |i| i.current_lr()),
            _ => self.config.base_lr,
        }
    }

    fn direction(&mut self, grads: &[Tensor]) -> Result<Vec<Tensor>> {
        match self.config.kind {
            OptimizerKind::Adam => self.adam.direction(grads, self.config.adam_betas, self.config.adam_eps),
            _ => Ok(grads.to_vec()),
        }
    }

    /// Applies `grads` at the current parameters (no SAM perturbation).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_lengths(params, grads)?;
        let lr = self.current_lr();
        match self.config.kind {
            OptimizerKind::Sgd | OptimizerKind::Adam => {
                let u = self.direction(grads)?;
                sgd_step(params, &u, lr)?;
            }
            OptimizerKind::Lsgd => {
                let inner = self.inner.as_mut().expect("validated");
                let u = inner.direction(grads)?;
                inner.step += 1;
                sgd_step(params, &u, lr)?;
            }
            OptimizerKind::Lalr => {
                let inner = self.inner.as_mut().expect("validated");
                let u = inner.direction(grads)?;
                inner.step += 1;
                lalr_step(params, &u, lr, self.config.lalr_clamp, self.config.lalr_squared_norm)?;
            }
            OptimizerKind::Sam => self.inner.as_mut().expect("validated").step(params, grads)?,
        }
        self.step += 1;
        Ok(())
    }

    /// One update driven by `grad_fn(params) -> (grads, aux)`. For SAM the
    /// gradient is re-evaluated at `θ + ρ·g/‖g‖` and applied at `θ`. Returns the
    /// `aux` of the evaluation at the unperturbed parameters.
    pub fn minimize_step<T, F>(&mut self, params: &mut [Tensor], mut grad_fn: F) -> Result<T>
    where
        F: FnMut(&[Tensor]) -> Result<(Vec<Tensor>, T)>,
    {
        let (grads, aux) = grad_fn(params)?;
        check_lengths(params, &grads)?;
        if self.config.kind != OptimizerKind::Sam {
            self.step(params, &grads)?;
            return Ok(aux);
        }
        let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        let rho = self.config.sam_rho;
        let used = if rho == 0.0 || norm < 1e-12 {
            grads
        } else {
            let k = rho / norm;
            let shifted: Vec<Tensor> =
                params.iter().zip(&grads).map(|(p, g)| p.zip_map(g, |x, d| x + k * d)).collect::<Result<_>>()?;
            grad_fn(&shifted)?.0
        };
        self.step(params, &used)?;
        Ok(aux)
    }
}
