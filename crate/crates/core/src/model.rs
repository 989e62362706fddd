//! MLP feature extractor `φ_θ` with pluggable binary classifier heads.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{matmul, Tape, Tensor, Var};
use crate::envgen::Batch;
use crate::error::{shape_err, Error, Result};

/// Affine layer `x ↦ x·W + b` with `W: in×out`, `b: [out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<LinearVars> {
        Ok(LinearVars { weight: tape.leaf(self.weight.clone())?, bias: tape.leaf(self.bias.clone())? })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight, false, false)?;
        let m = self.out_dim();
        for row in y.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(y)
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    /// Elementwise mean of same-shaped layers.
    pub fn average(layers: &[Linear]) -> Result<Linear> {
        let first = layers.first().ok_or(Error::NoEnvironments)?;
        let n = layers.len() as f64;
        let mut w = Tensor::zeros(first.weight.shape());
        let mut b = Tensor::zeros(first.bias.shape());
        for l in layers {
            w = w.zip_map(&l.weight, |a, x| a + x)?;
            b = b.zip_map(&l.bias, |a, x| a + x)?;
        }
        Ok(Linear { weight: w.map(|v| v / n), bias: b.map(|v| v / n) })
    }
}

/// Tape handles of a bound [`Linear`].
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One trainable linear head `w` on top of `φ_θ`.
    Shared,
    /// Head fixed at the scalar `1.0`; the last θ layer outputs the logit.
    ScalarFrozen,
    /// One head per training environment.
    PerEnv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Heads {
    Shared(Linear),
    ScalarFrozen,
    PerEnv(Vec<Linear>),
}

impl Heads {
    pub fn mode(&self) -> HeadMode {
        match self {
            Heads::Shared(_) => HeadMode::Shared,
            Heads::ScalarFrozen => HeadMode::ScalarFrozen,
            Heads::PerEnv(_) => HeadMode::PerEnv,
        }
    }
}

/// Which head produces the logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSelector {
    /// The shared head, or the frozen scalar.
    Default,
    /// Head of one environment (per-environment mode).
    Env(usize),
    /// Mean of the per-environment logits.
    EnsembleMean,
    /// Logit of the averaged head.
    Consensus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    /// Hidden layers of `φ_θ`, plus the output layer in scalar-frozen mode.
    pub theta: Vec<Linear>,
    pub heads: Heads,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

pub fn init(
    input_dim: usize,
    hidden_dim: usize,
    depth: usize,
    head_mode: HeadMode,
    n_envs: usize,
    seed: u64,
) -> Result<PredictorParams> {
    if input_dim == 0 || hidden_dim == 0 || depth == 0 {
        return Err(Error::InvalidConfig(format!(
            "input_dim {input_dim}, hidden_dim {hidden_dim} and depth {depth} must be positive"
        )));
    }
    if head_mode == HeadMode::PerEnv && n_envs == 0 {
        return Err(Error::NoEnvironments);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(depth + 1);
    let mut fan_in = input_dim;
    for _ in 0..depth {
        theta.push(Linear::uniform(&mut rng, fan_in, hidden_dim));
        fan_in = hidden_dim;
    }
    let head = Linear::uniform(&mut rng, hidden_dim, 1);
    let heads = match head_mode {
        HeadMode::Shared => Heads::Shared(head),
        HeadMode::ScalarFrozen => {
            theta.push(head);
            Heads::ScalarFrozen
        }
        HeadMode::PerEnv => Heads::PerEnv(vec![head; n_envs]),
    };
    Ok(PredictorParams { theta, heads, input_dim, hidden_dim })
}

impl PredictorParams {
    pub fn head_mode(&self) -> HeadMode {
        self.heads.mode()
    }

    /// Number of hidden (relu) layers.
    pub fn depth(&self) -> usize {
        match self.heads {
            Heads::ScalarFrozen => self.theta.len() - 1,
            _ => self.theta.len(),
        }
    }

    pub fn n_heads(&self) -> usize {
        match &self.heads {
            Heads::PerEnv(h) => h.len(),
            _ => 1,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim {
            return Err(shape_err(format!("input has {d} features, model expects {}", self.input_dim)));
        }
        Ok(())
    }

    /// `φ_θ(x)`, `n × hidden_dim`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut z = x.clone();
        for layer in &self.theta[..self.depth()] {
            z = layer.apply(&z)?.map(|v| if v > 0.0 { v } else { 0.0 });
        }
        Ok(z)
    }

    /// Per-sample logits.
    pub fn logits(&self, selector: HeadSelector, x: &Tensor) -> Result<Vec<f64>> {
        let z = self.features(x)?;
        let out = match (&self.heads, selector) {
            (Heads::ScalarFrozen, HeadSelector::Default) => self.theta[self.depth()].apply(&z)?,
            (Heads::Shared(h), HeadSelector::Default) => h.apply(&z)?,
            (Heads::PerEnv(hs), HeadSelector::Env(e)) => {
                hs.get(e).ok_or(Error::BadEnvIndex { index: e, count: hs.len() })?.apply(&z)?
            }
            (Heads::PerEnv(hs), HeadSelector::EnsembleMean) => {
                let n = hs.len() as f64;
                let mut acc = vec![0.0; z.shape()[0]];
                for h in hs {
                    for (a, v) in acc.iter_mut().zip(h.apply(&z)?.data()) {
                        *a += v;
                    }
                }
                return Ok(acc.into_iter().map(|v| v / n).collect());
            }
            (Heads::PerEnv(hs), HeadSelector::Consensus) => Linear::average(hs)?.apply(&z)?,
            (heads, sel) => {
                return Err(Error::HeadModeMismatch(format!(
                    "selector {sel:?} is not valid for {:?} heads",
                    heads.mode()
                )))
            }
        };
        Ok(out.into_data())
    }

    /// Mean binary cross-entropy on `batch`.
    pub fn env_risk(&self, selector: HeadSelector, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.constant(batch.features.clone())?;
        let z = bound.features(&mut tape, x)?;
        let logit = match (&bound.heads, selector) {
            (BoundHeads::Shared(h), HeadSelector::Default) => h.apply(&mut tape, z)?,
            (BoundHeads::ScalarFrozen { scale, output }, HeadSelector::Default) => {
                let o = output.apply(&mut tape, z)?;
                tape.scale(*scale, o)?
            }
            (BoundHeads::PerEnv(hs), HeadSelector::Env(e)) => {
                hs.get(e).ok_or(Error::BadEnvIndex { index: e, count: hs.len() })?.apply(&mut tape, z)?
            }
            _ => {
                let logits = self.logits(selector, &batch.features)?;
                let l = tape.constant(Tensor::vector(logits))?;
                let r = tape.bce_with_logits(l, batch.labels.clone())?;
                return Ok(tape.scalar(r));
            }
        };
        let r = tape.bce_with_logits(logit, batch.labels.clone())?;
        Ok(tape.scalar(r))
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let depth = self.depth();
        let hidden = self.theta[..depth].iter().map(|l| l.bind(tape)).collect::<Result<Vec<_>>>()?;
        let heads = match &self.heads {
            Heads::Shared(h) => BoundHeads::Shared(h.bind(tape)?),
            Heads::ScalarFrozen => BoundHeads::ScalarFrozen {
                output: self.theta[depth].bind(tape)?,
                scale: tape.leaf(Tensor::scalar(1.0))?,
            },
            Heads::PerEnv(hs) => BoundHeads::PerEnv(hs.iter().map(|h| h.bind(tape)).collect::<Result<_>>()?),
        };
        Ok(BoundParams { hidden, heads })
    }

    /// θ tensors in layer order (weight, bias, weight, bias, …).
    pub fn theta_tensors(&self) -> Vec<Tensor> {
        self.theta.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
    }

    pub fn set_theta_tensors(&mut self, ts: Vec<Tensor>) -> Result<()> {
        set_layers(&mut self.theta, ts)
    }

    /// Tensors of one head: the shared head, or head `e` in per-environment mode.
    pub fn head_tensors(&self, e: usize) -> Result<Vec<Tensor>> {
        match &self.heads {
            Heads::Shared(h) => Ok(vec![h.weight.clone(), h.bias.clone()]),
            Heads::PerEnv(hs) => {
                let h = hs.get(e).ok_or(Error::BadEnvIndex { index: e, count: hs.len() })?;
                Ok(vec![h.weight.clone(), h.bias.clone()])
            }
            Heads::ScalarFrozen => Ok(vec![]),
        }
    }

    pub fn set_head_tensors(&mut self, e: usize, ts: Vec<Tensor>) -> Result<()> {
        match &mut self.heads {
            Heads::Shared(h) => set_layers(std::slice::from_mut(h), ts),
            Heads::PerEnv(hs) => {
                let count = hs.len();
                let h = hs.get_mut(e).ok_or(Error::BadEnvIndex { index: e, count })?;
                set_layers(std::slice::from_mut(h), ts)
            }
            Heads::ScalarFrozen => Ok(()),
        }
    }

    /// Largest Euclidean distance between any two per-environment heads; 0 otherwise.
    pub fn consensus_drift(&self) -> f64 {
        let Heads::PerEnv(hs) = &self.heads else { return 0.0 };
        let mut worst: f64 = 0.0;
        for i in 0..hs.len() {
            for j in i + 1..hs.len() {
                let dw = hs[i].weight.distance(&hs[j].weight).unwrap_or(f64::INFINITY);
                let db = hs[i].bias.distance(&hs[j].bias).unwrap_or(f64::INFINITY);
                worst = worst.max((dw * dw + db * db).sqrt());
            }
        }
        worst
    }

    pub fn n_parameters(&self) -> usize {
        let layers = self.theta.iter().chain(match &self.heads {
            Heads::Shared(h) => std::slice::from_ref(h),
            Heads::PerEnv(hs) => hs.as_slice(),
            Heads::ScalarFrozen => &[],
        });
        layers.map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.theta.iter().enumerate() {
            out.push((format!("theta.{i}.weight"), &l.weight));
            out.push((format!("theta.{i}.bias"), &l.bias));
        }
        match &self.heads {
            Heads::Shared(h) => {
                out.push(("head.weight".into(), &h.weight));
                out.push(("head.bias".into(), &h.bias));
            }
            Heads::PerEnv(hs) => {
                for (e, h) in hs.iter().enumerate() {
                    out.push((format!("head.{e}.weight"), &h.weight));
                    out.push((format!("head.{e}.bias"), &h.bias));
                }
            }
            Heads::ScalarFrozen => {}
        }
        out
    }
}

fn set_layers(layers: &mut [Linear], ts: Vec<Tensor>) -> Result<()> {
    if ts.len() != 2 * layers.len() {
        return Err(shape_err(format!("expected {} tensors, got {}", 2 * layers.len(), ts.len())));
    }
    let mut it = ts.into_iter();
    for l in layers.iter_mut() {
        let (w, b) = (it.next().unwrap(), it.next().unwrap());
        if w.shape() != l.weight.shape() || b.shape() != l.bias.shape() {
            return Err(shape_err(format!(
                "layer shapes {:?}/{:?} vs {:?}/{:?}",
                w.shape(),
                b.shape(),
                l.weight.shape(),
                l.bias.shape()
            )));
        }
        l.weight = w;
        l.bias = b;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum BoundHeads {
    Shared(LinearVars),
    /// The output layer of θ and the literal scalar multiplier `1.0`.
    ScalarFrozen { output: LinearVars, scale: Var },
    PerEnv(Vec<LinearVars>),
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub hidden: Vec<LinearVars>,
    pub heads: BoundHeads,
}

impl BoundParams {
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut z = x;
        for l in &self.hidden {
            let y = l.apply(tape, z)?;
            z = tape.relu(y)?;
        }
        Ok(z)
    }

    /// θ leaves in the order of [`PredictorParams::theta_tensors`].
    pub fn theta_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.hidden.iter().flat_map(|l| l.vars()).collect();
        if let BoundHeads::ScalarFrozen { output, .. } = &self.heads {
            v.extend(output.vars());
        }
        v
    }
}

/// Linear head applied to features; `head` is `[weight, bias]`.
pub fn head_logit(tape: &mut Tape, z: Var, head: &[Var]) -> Result<Var> {
    match head {
        [w, b] => {
            let y = tape.matmul(z, *w)?;
            tape.add_row(y, *b)
        }
        _ => Err(shape_err(format!("a head is [weight, bias], got {} vars", head.len()))),
    }
}

/// Mean BCE of labels against `logit`.
pub fn bce(tape: &mut Tape, logit: Var, labels: &Arc<Vec<f64>>) -> Result<Var> {
    tape.bce_with_logits(logit, labels.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    head_mode: HeadMode,
    input_dim: usize,
    hidden_dim: usize,
    depth: usize,
    n_heads: usize,
    seed: u64,
    step: u64,
    blob: String,
    tensors: Vec<TensorEntry>,
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f64 blob).
pub fn save_checkpoint(params: &PredictorParams, meta: &CheckpointMeta, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: blob.len() / 8 });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_name = format!("{stem}.bin");
    let manifest = Manifest {
        head_mode: params.head_mode(),
        input_dim: params.input_dim,
        hidden_dim: params.hidden_dim,
        depth: params.depth(),
        n_heads: params.n_heads(),
        seed: meta.seed,
        step: meta.step,
        blob: blob_name.clone(),
        tensors,
    };
    fs::write(dir.join(&blob_name), blob)?;
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(PredictorParams, CheckpointMeta)> {
    let m: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let raw = fs::read(dir.join(&m.blob))?;
    let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut params = init(m.input_dim, m.hidden_dim, m.depth, m.head_mode, m.n_heads, 0)?;
    let expected = params.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect::<Vec<_>>();
    if expected.len() != m.tensors.len() {
        return Err(Error::LengthMismatch(format!("{} tensors in manifest, {} expected", m.tensors.len(), expected.len())));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in m.tensors.iter().zip(&expected) {
        let len: usize = entry.shape.iter().product();
        if &entry.name != name || &entry.shape != shape || entry.offset + len > values.len() {
            return Err(Error::LengthMismatch(format!("checkpoint tensor {} does not match the model", entry.name)));
        }
        loaded.push(Tensor::new(entry.shape.clone(), values[entry.offset..entry.offset + len].to_vec())?);
    }
    let n_theta = 2 * params.theta.len();
    let heads = loaded.split_off(n_theta);
    params.set_theta_tensors(loaded)?;
    for (e, pair) in heads.chunks(2).enumerate() {
        params.set_head_tensors(e, pair.to_vec())?;
    }
    Ok((params, CheckpointMeta { seed: m.seed, step: m.step }))
}
