use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central finite-difference gradient of `graph_fn` with respect to every input element.
pub fn numeric_grad<F>(graph_fn: F, inputs: &[Tensor], epsilon: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = xs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = graph_fn(&mut tape, &leaves)?;
        Ok(tape.scalar(out))
    };
    let mut xs = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..xs.len() {
        let mut g = Tensor::zeros(xs[k].shape());
        for j in 0..xs[k].len() {
            let orig = xs[k].data()[j];
            xs[k].data_mut()[j] = orig + epsilon;
            let plus = eval(&xs)?;
            xs[k].data_mut()[j] = orig - epsilon;
            let minus = eval(&xs)?;
            xs[k].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * epsilon);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest elementwise relative error between reverse-mode gradients and central
/// differences, with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// Kinks (relu at exactly 0) are not handled specially; callers should avoid them.
pub fn finite_diff_check<F>(graph_fn: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = graph_fn(&mut tape, &leaves)?;
    let analytic = tape.grad(out, &leaves)?;
    let numeric = numeric_grad(&graph_fn, inputs, epsilon)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a.data().iter().zip(n.data()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    Ok(worst)
}
