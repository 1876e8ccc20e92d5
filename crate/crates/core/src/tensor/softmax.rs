use std::ops::Deref;

use super::Matrix;
use crate::error::{Error, Result};

/// Row-stochastic matrix: non-negative entries, every row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix(Matrix);

impl StochasticMatrix {
    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

impl Deref for StochasticMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Row-wise softmax with max subtraction. `-inf` logits get exactly zero mass.
pub fn softmax_rows(logits: &Matrix) -> Result<StochasticMatrix> {
    if logits.cols() == 0 {
        return Err(Error::Shape("softmax over zero columns".into()));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        softmax_into(logits.row(i), out.row_mut(i)).map_err(|e| match e {
            Error::FullyMaskedRow(_) => Error::FullyMaskedRow(i),
            other => other,
        })?;
    }
    Ok(StochasticMatrix(out))
}

/// Softmax of a single logit vector written into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        if l.is_nan() || l == f64::INFINITY {
            return Err(Error::Domain(format!("logit {l} is not allowed")));
        }
        max = max.max(l);
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::FullyMaskedRow(0));
    }
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}
