#![allow(dead_code)]

use std::sync::Arc;

use irmkit::diff::{Tape, Tensor, Var};
use irmkit::envgen::templates;
use irmkit::model::{self, HeadMode, Heads, Linear, PredictorParams};
use irmkit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type GraphFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Name, graph, input shapes and sampling range.
pub type Case = (&'static str, GraphFn, Vec<Vec<usize>>, (f64, f64));

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights, so every output
/// element contributes to the checked gradient.
pub fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = t.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0))?;
    let m = t.mul(x, c)?;
    t.sum(m)
}

/// One case per primitive: graph, input shapes and sampling range.
pub fn primitive_cases() -> Vec<Case> {
    let labels = Arc::new(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
    let targets = Arc::new(
        Tensor::matrix(3, 4, vec![1., 0., 0., 0., 0., 0., 1., 0., 0.25, 0.25, 0.25, 0.25]).unwrap(),
    );
    let mut cases: Vec<Case> = vec![
        ("matmul", Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, 1) }), vec![vec![3, 4], vec![4, 2]], (-2.0, 2.0)),
        ("matmul_tn", Box::new(|t, v| { let y = t.matmul_t(v[0], v[1], true, false)?; weighted_sum(t, y, 2) }), vec![vec![4, 3], vec![4, 2]], (-2.0, 2.0)),
        ("matmul_nt", Box::new(|t, v| { let y = t.matmul_t(v[0], v[1], false, true)?; weighted_sum(t, y, 3) }), vec![vec![3, 4], vec![2, 4]], (-2.0, 2.0)),
        ("matmul_tt", Box::new(|t, v| { let y = t.matmul_t(v[0], v[1], true, true)?; weighted_sum(t, y, 4) }), vec![vec![4, 3], vec![2, 4]], (-2.0, 2.0)),
        ("add", Box::new(|t, v| { let y = t.add(v[0], v[1])?; let y = t.square(y)?; weighted_sum(t, y, 5) }), vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0)),
        ("sub", Box::new(|t, v| { let y = t.sub(v[0], v[1])?; let y = t.square(y)?; weighted_sum(t, y, 6) }), vec![vec![2, 3], vec![2, 3]], (-2.0, 2.0)),
        ("mul", Box::new(|t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, 7) }), vec![vec![5], vec![5]], (-2.0, 2.0)),
        ("neg", Box::new(|t, v| { let y = t.neg(v[0])?; let y = t.square(y)?; weighted_sum(t, y, 8) }), vec![vec![4]], (-2.0, 2.0)),
        ("add_row", Box::new(|t, v| { let y = t.add_row(v[0], v[1])?; let y = t.square(y)?; weighted_sum(t, y, 9) }), vec![vec![3, 2], vec![2]], (-2.0, 2.0)),
        ("sum_rows", Box::new(|t, v| { let y = t.sum_rows(v[0])?; let y = t.square(y)?; weighted_sum(t, y, 10) }), vec![vec![3, 2]], (-2.0, 2.0)),
        ("tile_rows", Box::new(|t, v| { let y = t.tile_rows(v[0], 3)?; let y = t.square(y)?; weighted_sum(t, y, 11) }), vec![vec![4]], (-2.0, 2.0)),
        ("row_sum", Box::new(|t, v| { let y = t.row_sum(v[0])?; let y = t.square(y)?; weighted_sum(t, y, 12) }), vec![vec![3, 4]], (-2.0, 2.0)),
        ("tile_cols", Box::new(|t, v| { let y = t.tile_cols(v[0], 3)?; let y = t.square(y)?; weighted_sum(t, y, 13) }), vec![vec![4, 1]], (-2.0, 2.0)),
        ("scale", Box::new(|t, v| { let y = t.scale(v[0], v[1])?; let y = t.square(y)?; weighted_sum(t, y, 14) }), vec![vec![], vec![2, 2]], (-2.0, 2.0)),
        ("scale_const", Box::new(|t, v| { let y = t.scale_const(v[0], -1.7)?; let y = t.square(y)?; weighted_sum(t, y, 15) }), vec![vec![3]], (-2.0, 2.0)),
        ("add_const", Box::new(|t, v| { let y = t.add_const(v[0], 0.3)?; let y = t.square(y)?; weighted_sum(t, y, 16) }), vec![vec![3]], (-2.0, 2.0)),
        ("expand", Box::new(|t, v| { let y = t.expand(v[0], &[2, 3])?; let y = t.square(y)?; weighted_sum(t, y, 17) }), vec![vec![1]], (-2.0, 2.0)),
        ("reshape", Box::new(|t, v| { let y = t.reshape(v[0], &[3, 2])?; let y = t.square(y)?; weighted_sum(t, y, 18) }), vec![vec![2, 3]], (-2.0, 2.0)),
        ("relu", Box::new(|t, v| { let y = t.relu(v[0])?; let y = t.square(y)?; weighted_sum(t, y, 19) }), vec![vec![6]], (-2.0, 2.0)),
        ("sigmoid", Box::new(|t, v| { let y = t.sigmoid(v[0])?; weighted_sum(t, y, 20) }), vec![vec![5]], (-3.0, 3.0)),
        ("log", Box::new(|t, v| { let y = t.log(v[0])?; weighted_sum(t, y, 21) }), vec![vec![5]], (0.5, 3.0)),
        ("exp", Box::new(|t, v| { let y = t.exp(v[0])?; weighted_sum(t, y, 22) }), vec![vec![5]], (-2.0, 2.0)),
        ("recip", Box::new(|t, v| { let y = t.recip(v[0])?; weighted_sum(t, y, 23) }), vec![vec![5]], (0.5, 3.0)),
        ("square", Box::new(|t, v| { let y = t.square(v[0])?; weighted_sum(t, y, 24) }), vec![vec![5]], (-2.0, 2.0)),
        ("sum", Box::new(|t, v| { let y = t.square(v[0])?; t.sum(y) }), vec![vec![2, 2]], (-2.0, 2.0)),
        ("mean", Box::new(|t, v| { let y = t.exp(v[0])?; t.mean(y) }), vec![vec![2, 2]], (-2.0, 2.0)),
        ("norm_sq", Box::new(|t, v| { let y = t.norm_sq(v[0])?; t.square(y) }), vec![vec![4]], (-1.0, 1.0)),
        ("softmax", Box::new(|t, v| { let y = t.softmax(v[0])?; weighted_sum(t, y, 25) }), vec![vec![3, 4]], (-2.0, 2.0)),
    ];
    cases.push((
        "bce_with_logits",
        Box::new(move |t, v| t.bce_with_logits(v[0], labels.clone())),
        vec![vec![5, 1]],
        (-3.0, 3.0),
    ));
    cases.push((
        "softmax_cross_entropy",
        Box::new(move |t, v| t.softmax_cross_entropy(v[0], targets.clone())),
        vec![vec![3, 4]],
        (-2.0, 2.0),
    ));
    cases
}

/// Avoids relu's kink by pushing samples away from 0.
pub fn sample_inputs(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>], range: (f64, f64)) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            rand_tensor(rng, s, range.0, range.1).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        })
        .collect()
}


/// Moves every parameter off the initial zero biases so relu inputs avoid the kink.
pub fn jitter(p: &mut PredictorParams, seed: u64) {
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.6
    };
    let mut bump = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v += next());
    for l in &mut p.theta {
        bump(&mut l.weight);
        bump(&mut l.bias);
    }
    match &mut p.heads {
        Heads::Shared(h) => {
            bump(&mut h.weight);
            bump(&mut h.bias);
        }
        Heads::PerEnv(hs) => {
            for h in hs {
                bump(&mut h.weight);
                bump(&mut h.bias);
            }
        }
        Heads::ScalarFrozen => {}
    }
}


/// Depth-1 net whose logit is the projection of one feature half onto its template.
pub fn probe_net(spurious: bool) -> PredictorParams {
    let (t_inv, t_spu) = templates(2);
    let t = if spurious { t_spu[0] } else { t_inv[0] };
    let row = if spurious { 1 } else { 0 };
    let mut w = vec![0.0; 4];
    w[row * 2] = t;
    w[row * 2 + 1] = -t;
    let mut p = model::init(2, 2, 1, HeadMode::Shared, 1, 0).unwrap();
    p.theta[0] = Linear { weight: Tensor::matrix(2, 2, w).unwrap(), bias: Tensor::zeros(&[2]) };
    p.heads = Heads::Shared(Linear { weight: Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap(), bias: Tensor::zeros(&[1]) });
    p
}

/// P(c = g) by enumerating the label-noise and bias flips.
pub fn spurious_agreement_by_cells(alpha: f64, beta: f64) -> f64 {
    let mut p = 0.0;
    for noise in [0u8, 1] {
        for bias in [0u8, 1] {
            let w = if noise == 1 { alpha } else { 1.0 - alpha } * if bias == 1 { beta } else { 1.0 - beta };
            if noise ^ bias == 0 {
                p += w;
            }
        }
    }
    p
}

