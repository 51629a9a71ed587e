//! Dense row-major tensors.
//!
//! Rank 0 (scalars), rank 1 (vectors) and rank 2 (matrices) cover everything
//! the three networks need; batches are looped outside.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/product mismatch: {:?} vs {} values",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.rank() {
            2 => self.shape[0],
            1 => 1,
            r => panic!("rows() on rank-{r} tensor"),
        }
    }

    /// Columns of a rank-2 (or rank-1) tensor.
    pub fn cols(&self) -> usize {
        match self.rank() {
            2 => self.shape[1],
            1 => self.shape[0],
            r => panic!("cols() on rank-{r} tensor"),
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    /// Rows `lo..hi` as a new tensor.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor<F> {
        let c = self.cols();
        Tensor::matrix(hi - lo, c, self.data[lo * c..hi * c].to_vec())
    }

    /// Vertical concatenation; both operands must share a column count.
    pub fn vcat(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.cols(), other.cols(), "vcat column mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::matrix(self.rows() + other.rows(), self.cols(), data)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::from_f64(x.to_f64_())).collect(),
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// C = A · B. The k-inner loop order keeps per-element accumulation in
/// ascending-k order (bitwise identical to a naive dot product) while the
/// innermost j loop stays contiguous.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul inner dimension mismatch: {ka} vs {kb}");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bkj;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// C = A · Bᵀ (rows of B are dotted against rows of A).
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, ka) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul_nt inner dimension mismatch: {ka} vs {kb}");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::matrix(m, n, out)
}

/// C = Aᵀ · B, used by backward passes.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (ka, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul_tn inner dimension mismatch: {ka} vs {kb}");
    let mut out = vec![F::zero(); m * n];
    for k in 0..ka {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o = *o + aki * bkj;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::matrix(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect());
        let b = Tensor::matrix(5, 4, (0..20).map(|i| (i as f64).sin()).collect());
        let c1 = matmul_nt(&a, &b);
        // transpose b by hand and compare
        let mut bt = Tensor::zeros(&[4, 5]);
        for i in 0..5 {
            for j in 0..4 {
                bt.set(j, i, b.at(i, j));
            }
        }
        let c2 = matmul(&a, &bt);
        assert!(c1.max_abs_diff(&c2) < 1e-12);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }
}
