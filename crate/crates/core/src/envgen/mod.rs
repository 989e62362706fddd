//! Two-bit spurious-correlation environments.
//!
//! Each sample carries an invariant group bit `g`, a label `y = g ⊕ Bern(α)`
//! and a spurious bit `c = y ⊕ Bern(β)`. The spurious bit is flipped against
//! the *noisy* label, so a predictor that reads only `c` scores `1 − β`, while
//! one that reads only `g` scores `1 − α` in every environment.

mod idx;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub use idx::{IdxDigits, IMAGES_MAGIC, LABELS_MAGIC};

/// Seed of the fixed ±1 template patterns used by the synthetic source.
pub const TEMPLATE_SEED: u64 = 0x7e3d_1a2b;

/// Test-grid seeds start this far above the base seed; training seeds are `seed + index`.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;

pub const DEFAULT_NOISE_STD: f64 = 0.1;

/// Where the features of an environment come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    SyntheticTwoBit { feature_dim: usize, noise_std: f64 },
    ColorizedIdx { images: PathBuf, labels: PathBuf, #[serde(default)] grayscale: bool },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::SyntheticTwoBit { feature_dim: 2, noise_std: DEFAULT_NOISE_STD }
    }
}

/// Optional rejection-sampling weights. Uniform weights keep every draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resampling {
    pub group: [f64; 2],
    pub color: [f64; 2],
    /// Per-digit weights, IDX source only.
    pub digit: Option<[f64; 10]>,
}

impl Default for Resampling {
    fn default() -> Self {
        Self { group: [1.0, 1.0], color: [1.0, 1.0], digit: None }
    }
}

impl Resampling {
    fn is_uniform(&self) -> bool {
        self.group[0] == self.group[1]
            && self.color[0] == self.color[1]
            && self.digit.is_none_or(|d| d.iter().all(|&w| w == d[0]))
    }

    fn validate(&self) -> Result<()> {
        let all = self.group.iter().chain(&self.color).chain(self.digit.iter().flatten());
        for &w in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!("resampling weight {w} must be finite and >= 0")));
            }
        }
        if self.group.iter().all(|&w| w == 0.0) || self.color.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig("resampling weights are all zero".into()));
        }
        Ok(())
    }

    fn accept_prob(&self, g: u8, c: u8, digit: Option<u8>) -> f64 {
        let norm = |w: &[f64], i: usize| w[i] / w.iter().cloned().fold(0.0, f64::max);
        let mut p = norm(&self.group, g as usize) * norm(&self.color, c as usize);
        if let (Some(dw), Some(d)) = (&self.digit, digit) {
            p *= norm(dw, d as usize);
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    /// Label-noise probability, in `[0, 0.5)`.
    pub alpha: f64,
    /// Probability that the spurious bit disagrees with the noisy label, in `[0, 1]`.
    pub beta: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub source: DataSource,
    #[serde(default)]
    pub resampling: Resampling,
}

impl EnvironmentSpec {
    pub fn synthetic(alpha: f64, beta: f64, n_samples: usize, seed: u64) -> Self {
        Self { alpha, beta, n_samples, seed, source: DataSource::default(), resampling: Resampling::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 0.5)", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        self.resampling.validate()
    }
}

/// Realized samples of one environment. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvDataset {
    /// `n × d`.
    pub features: Tensor,
    pub labels: Vec<u8>,
    pub spec: EnvironmentSpec,
    pub invariant_bits: Vec<u8>,
    pub spurious_bits: Vec<u8>,
}

/// Which half of the feature vector a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    Invariant,
    Spurious,
}

fn bit(rng: &mut ChaCha8Rng, p: f64) -> u8 {
    (rng.random::<f64>() < p) as u8
}

/// Fixed ±1 patterns for the invariant and spurious halves.
pub fn templates(feature_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = feature_dim / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
    let mut draw = || (0..half).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect::<Vec<_>>();
    let inv = draw();
    let spu = draw();
    (inv, spu)
}

/// Synthetic two-bit environment: `x = [±t_inv(g), ±t_spu(c)] + N(0, noise_std²)`.
pub fn generate_two_bit(spec: &EnvironmentSpec, feature_dim: usize, noise_std: f64) -> Result<EnvDataset> {
    if feature_dim == 0 || !feature_dim.is_multiple_of(2) {
        return Err(Error::InvalidDim(feature_dim));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise_std {noise_std} must be >= 0")));
    }
    spec.validate()?;
    let (t_inv, t_spu) = templates(feature_dim);
    let half = feature_dim / 2;
    let n = spec.n_samples;
    let uniform = spec.resampling.is_uniform();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut features = Vec::with_capacity(n * feature_dim);
    let (mut labels, mut inv_bits, mut spu_bits) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    while labels.len() < n {
        let g = bit(&mut rng, 0.5);
        let y = g ^ bit(&mut rng, spec.alpha);
        let c = y ^ bit(&mut rng, spec.beta);
        if !uniform && rng.random::<f64>() >= spec.resampling.accept_prob(g, c, None) {
            continue;
        }
        let sg = if g == 1 { 1.0 } else { -1.0 };
        let sc = if c == 1 { 1.0 } else { -1.0 };
        for &t in t_inv.iter().take(half) {
            let eps: f64 = rng.sample(StandardNormal);
            features.push(sg * t + noise_std * eps);
        }
        for &t in t_spu.iter().take(half) {
            let eps: f64 = rng.sample(StandardNormal);
            features.push(sc * t + noise_std * eps);
        }
        labels.push(y);
        inv_bits.push(g);
        spu_bits.push(c);
    }
    Ok(EnvDataset {
        features: Tensor::matrix(n, feature_dim, features)?,
        labels,
        spec: spec.clone(),
        invariant_bits: inv_bits,
        spurious_bits: spu_bits,
    })
}

/// Colored-digit environment from an IDX pair: group bit `digit >= 5`, and the
/// spurious bit picks which of two channels holds the image (the other is zero).
/// With `grayscale` both channels hold the image.
pub fn load_idx_colorized(images_path: &Path, labels_path: &Path, spec: &EnvironmentSpec) -> Result<EnvDataset> {
    let digits = IdxDigits::load(images_path, labels_path)?;
    let grayscale = matches!(spec.source, DataSource::ColorizedIdx { grayscale: true, .. });
    colorize(&digits, spec, grayscale)
}

/// Colorizes already-parsed digits; see [`load_idx_colorized`].
pub fn colorize(digits: &IdxDigits, spec: &EnvironmentSpec, grayscale: bool) -> Result<EnvDataset> {
    spec.validate()?;
    let n = spec.n_samples;
    let px = digits.rows * digits.cols;
    let d = 2 * px;
    let uniform = spec.resampling.is_uniform();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut features = Vec::with_capacity(n * d);
    let (mut labels, mut inv_bits, mut spu_bits) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..digits.len() {
        if labels.len() == n {
            break;
        }
        let digit = digits.digits[i];
        let g = (digit >= 5) as u8;
        let y = g ^ bit(&mut rng, spec.alpha);
        let c = y ^ bit(&mut rng, spec.beta);
        if !uniform && rng.random::<f64>() >= spec.resampling.accept_prob(g, c, Some(digit)) {
            continue;
        }
        let img = digits.image(i).iter().map(|&p| p as f64 / 255.0);
        let start = features.len();
        features.resize(start + d, 0.0);
        let (ch0, ch1) = features[start..].split_at_mut(px);
        for (k, v) in img.enumerate() {
            if grayscale || c == 0 {
                ch0[k] = v;
            }
            if grayscale || c == 1 {
                ch1[k] = v;
            }
        }
        labels.push(y);
        inv_bits.push(g);
        spu_bits.push(c);
    }
    if labels.len() < n {
        return Err(Error::LengthMismatch(format!(
            "requested {n} samples but only {} available from {} images",
            labels.len(),
            digits.len()
        )));
    }
    Ok(EnvDataset {
        features: Tensor::matrix(n, d, features)?,
        labels,
        spec: spec.clone(),
        invariant_bits: inv_bits,
        spurious_bits: spu_bits,
    })
}

/// Feature source shared by all environments of one experiment.
#[derive(Clone, Debug)]
pub enum Source {
    Synthetic { feature_dim: usize, noise_std: f64 },
    Idx { digits: Arc<IdxDigits>, images: PathBuf, labels: PathBuf, grayscale: bool },
}

impl Source {
    pub fn from_descriptor(desc: &DataSource) -> Result<Self> {
        Ok(match desc {
            DataSource::SyntheticTwoBit { feature_dim, noise_std } => {
                Source::Synthetic { feature_dim: *feature_dim, noise_std: *noise_std }
            }
            DataSource::ColorizedIdx { images, labels, grayscale } => Source::Idx {
                digits: Arc::new(IdxDigits::load(images, labels)?),
                images: images.clone(),
                labels: labels.clone(),
                grayscale: *grayscale,
            },
        })
    }

    pub fn descriptor(&self) -> DataSource {
        match self {
            Source::Synthetic { feature_dim, noise_std } => {
                DataSource::SyntheticTwoBit { feature_dim: *feature_dim, noise_std: *noise_std }
            }
            Source::Idx { images, labels, grayscale, .. } => {
                DataSource::ColorizedIdx { images: images.clone(), labels: labels.clone(), grayscale: *grayscale }
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Source::Synthetic { feature_dim, .. } => *feature_dim,
            Source::Idx { digits, .. } => 2 * digits.rows * digits.cols,
        }
    }

    pub fn generate(&self, alpha: f64, beta: f64, n: usize, seed: u64, resampling: &Resampling) -> Result<EnvDataset> {
        let spec = EnvironmentSpec {
            alpha,
            beta,
            n_samples: n,
            seed,
            source: self.descriptor(),
            resampling: resampling.clone(),
        };
        match self {
            Source::Synthetic { feature_dim, noise_std } => generate_two_bit(&spec, *feature_dim, *noise_std),
            Source::Idx { digits, grayscale, .. } => colorize(digits, &spec, *grayscale),
        }
    }
}

/// One dataset per `(α, β)` pair; environment `i` is seeded with `seed + i`.
pub fn make_training_envs(
    alphas_betas: &[(f64, f64)],
    n_per_env: usize,
    seed: u64,
    source: &Source,
    resampling: &Resampling,
) -> Result<Vec<EnvDataset>> {
    if alphas_betas.is_empty() {
        return Err(Error::NoEnvironments);
    }
    alphas_betas
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| source.generate(a, b, n_per_env, seed.wrapping_add(i as u64), resampling))
        .collect()
}

/// Fresh test environments, seeded with `seed + TEST_SEED_OFFSET + i`.
pub fn make_test_grid(
    alpha: f64,
    betas: &[f64],
    n_per_env: usize,
    seed: u64,
    source: &Source,
) -> Result<Vec<EnvDataset>> {
    if betas.is_empty() {
        return Err(Error::NoEnvironments);
    }
    if betas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("test betas must be strictly increasing".into()));
    }
    let base = seed.wrapping_add(TEST_SEED_OFFSET);
    betas
        .iter()
        .enumerate()
        .map(|(i, &b)| source.generate(alpha, b, n_per_env, base.wrapping_add(i as u64), &Resampling::default()))
        .collect()
}

/// `{0.05, 0.10, …, 0.95}`.
pub fn default_beta_grid() -> Vec<f64> {
    (1..=19).map(|i| (5 * i) as f64 / 100.0).collect()
}

/// Fails if any test environment reuses a training seed.
pub fn check_seed_disjoint(train: &[EnvDataset], test: &[EnvDataset]) -> Result<()> {
    for t in test {
        if train.iter().any(|e| e.spec.seed == t.spec.seed) {
            return Err(Error::SeedCollision(t.spec.seed));
        }
    }
    Ok(())
}

/// A minibatch with labels as 0/1 floats.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Arc<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Leading and trailing halves (the first takes the odd row); `None` below two rows.
    pub fn halves(&self) -> Option<(Batch, Batch)> {
        let n = self.len();
        if n < 2 {
            return None;
        }
        let cut = n.div_ceil(2);
        let (a, b): (Vec<usize>, Vec<usize>) = ((0..cut).collect(), (cut..n).collect());
        let part = |idx: &[usize]| Batch {
            features: self.features.gather_rows(idx).expect("batch features are a matrix"),
            labels: Arc::new(idx.iter().map(|&i| self.labels[i]).collect()),
        };
        Some((part(&a), part(&b)))
    }
}

/// Iterator over the batches of one epoch.
pub struct Batches<'a> {
    data: &'a EnvDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let features = self.data.features.gather_rows(idx).expect("dataset features are a matrix");
        let labels = idx.iter().map(|&i| self.data.labels[i] as f64).collect();
        Some(Batch { features, labels: Arc::new(labels) })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Shuffled batches for one epoch. The permutation depends only on `epoch_seed`;
/// the last short batch is kept.
pub fn batches(dataset: &EnvDataset, batch_size: usize, epoch_seed: u64) -> Result<Batches<'_>> {
    let n = dataset.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidBatch { batch_size, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(Batches { data: dataset, order, batch_size, pos: 0 })
}

const DUMP_MAGIC: &[u8; 4] = b"ENVD";

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    shape: Vec<usize>,
    spec: EnvironmentSpec,
}

impl EnvDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Whole dataset as one batch.
    pub fn full_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: Arc::new(self.labels.iter().map(|&y| y as f64).collect()),
        }
    }

    /// Empirical `P(c ≠ y)`.
    pub fn disagreement_rate(&self) -> f64 {
        let k = self.spurious_bits.iter().zip(&self.labels).filter(|(c, y)| c != y).count();
        k as f64 / self.len() as f64
    }

    /// Empirical `P(y ≠ g)`.
    pub fn label_noise_rate(&self) -> f64 {
        let k = self.invariant_bits.iter().zip(&self.labels).filter(|(g, y)| g != y).count();
        k as f64 / self.len() as f64
    }

    /// Fixed linear probe reading one half of the features.
    ///
    /// Synthetic source: projection onto that half's template. IDX source: the
    /// invariant probe is unavailable (it would need a digit classifier); the
    /// spurious probe compares the two channel intensities.
    pub fn probe_logits(&self, half: Half) -> Result<Vec<f64>> {
        let d = self.feature_dim();
        let h = d / 2;
        let rows = self.features.data().chunks(d);
        match (&self.spec.source, half) {
            (DataSource::SyntheticTwoBit { .. }, _) => {
                let (t_inv, t_spu) = templates(d);
                let (t, off) = match half {
                    Half::Invariant => (t_inv, 0),
                    Half::Spurious => (t_spu, h),
                };
                Ok(rows.map(|r| r[off..off + h].iter().zip(&t).map(|(x, t)| x * t).sum()).collect())
            }
            (DataSource::ColorizedIdx { .. }, Half::Spurious) => {
                Ok(rows.map(|r| r[h..].iter().sum::<f64>() - r[..h].iter().sum::<f64>()).collect())
            }
            (DataSource::ColorizedIdx { .. }, Half::Invariant) => {
                Err(Error::InvalidConfig("invariant probe needs the synthetic source".into()))
            }
        }
    }

    /// Caches the dataset: `ENVD`, u32 LE header length, JSON header, then LE f64
    /// features followed by labels, invariant bits and spurious bits as bytes.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&DumpHeader { shape: self.features.shape().to_vec(), spec: self.spec.clone() })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for v in self.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.labels)?;
        w.write_all(&self.invariant_bits)?;
        w.write_all(&self.spurious_bits)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(bad("not an environment dump"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: DumpHeader = serde_json::from_slice(&header)?;
        let (n, d) = match header.shape.as_slice() {
            [n, d] => (*n, *d),
            _ => return Err(bad("feature shape must be 2-d")),
        };
        let mut raw = vec![0u8; n * d * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut bits = vec![0u8; 3 * n];
        r.read_exact(&mut bits)?;
        let spurious_bits = bits.split_off(2 * n);
        let invariant_bits = bits.split_off(n);
        Ok(Self {
            features: Tensor::matrix(n, d, data)?,
            labels: bits,
            spec: header.spec,
            invariant_bits,
            spurious_bits,
        })
    }
}
