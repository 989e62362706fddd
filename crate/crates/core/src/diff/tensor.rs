use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Dense row-major f64 array.
///
/// A `Tensor` is a plain value. Recording on a [`Tape`](super::Tape) yields a
/// [`Var`](super::Var) handle that plays the role of the node id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` of a 2-d tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "elementwise op on shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Euclidean distance between two same-shaped tensors.
    pub fn distance(&self, other: &Tensor) -> Result<f64> {
        Ok(self.zip_map(other, |a, b| a - b)?.norm())
    }

    /// Rows `indices` of a matrix, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (_, cols) = self.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        Ok(Self { shape: vec![indices.len(), cols], data })
    }
}

/// `op(a) · op(b)` where `op` optionally transposes a matrix.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, m) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    match (ta, tb) {
        (false, false) => {
            for i in 0..n {
                let row = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let av = ad[i * ac + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * bc..(p + 1) * bc];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            // a is k×n
            for p in 0..k {
                let brow = &bd[p * bc..(p + 1) * bc];
                for i in 0..n {
                    let av = ad[p * ac + i];
                    if av == 0.0 {
                        continue;
                    }
                    let row = &mut out[i * m..(i + 1) * m];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // b is m×k
            for i in 0..n {
                let arow = &ad[i * ac..(i + 1) * ac];
                for j in 0..m {
                    let brow = &bd[j * bc..(j + 1) * bc];
                    out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        (true, true) => {
            for i in 0..n {
                for j in 0..m {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += ad[p * ac + i] * bd[j * bc + p];
                    }
                    out[i * m + j] = s;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (ar, ac) = a.dims2().unwrap();
        let (br, bc) = b.dims2().unwrap();
        let at = |i: usize, j: usize| if ta { a.data()[j * ac + i] } else { a.data()[i * ac + j] };
        let bt = |i: usize, j: usize| if tb { b.data()[j * bc + i] } else { b.data()[i * bc + j] };
        let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
        let m = if tb { br } else { bc };
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
            }
        }
        Tensor::matrix(n, m, out).unwrap()
    }

    #[test]
    fn matmul_all_transpose_flags_agree_with_naive() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![0.3, 1.0, -1.0, 2.0, 5.0, 0.0]).unwrap();
        let c = Tensor::matrix(2, 3, vec![2.0, 1.0, 0.0, -1.0, 1.5, 0.25]).unwrap();
        for (x, y, ta, tb) in [(&a, &b, false, false), (&a, &c, true, false), (&a, &c, false, true), (&b, &c, true, true)] {
            let got = matmul(x, y, ta, tb).unwrap();
            let want = naive(x, y, ta, tb);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_product_is_enforced() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::scalar(3.0).shape(), &[] as &[usize]);
        assert!(matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]), false, false).is_err());
    }
}
