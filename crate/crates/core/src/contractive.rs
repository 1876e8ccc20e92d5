//! Contractive L2 attention and inversion of residual maps `x + f(x)` by
//! fixed-point iteration.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::{mha_forward, MhaParams};
use crate::bounds::bound_inf;
use crate::error::{Error, Result};
use crate::jacobian::{mha_jacobian, JacobianBlocks};
use crate::tensor::Matrix;

/// Tied L2 attention divided by its ∞-norm bound and scaled by `c`, so its
/// Lipschitz constant is at most `c < 1`.
///
/// The bound depends on `N`, so an instance only accepts inputs with the
/// sequence length it was built for.
#[derive(Debug, Clone)]
pub struct ContractiveMha {
    params: MhaParams,
    c: f64,
    cached_bound: f64,
    n: usize,
}

impl ContractiveMha {
    pub fn new(params: MhaParams, c: f64, n: usize) -> Result<Self> {
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::Domain(format!("contraction factor must lie in (0, 1), got {c}")));
        }
        let cached_bound = bound_inf(&params, n)?.value;
        Ok(Self { params, c, cached_bound, n })
    }

    pub fn params(&self) -> &MhaParams {
        &self.params
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn cached_bound(&self) -> f64 {
        self.cached_bound
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn check_n(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.n {
            return Err(Error::Shape(format!(
                "contractive map was built for N = {} but got N = {}",
                self.n,
                x.rows()
            )));
        }
        Ok(())
    }

    /// `c · F(X) / bound`. A zero bound means all-zero weights and a zero map.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_n(x)?;
        let y = mha_forward(x, &self.params, None)?;
        Ok(if self.cached_bound == 0.0 { Matrix::zeros(y.rows(), y.cols()) } else { y.scale(self.c / self.cached_bound) })
    }

    pub fn jacobian(&self, x: &Matrix) -> Result<JacobianBlocks> {
        self.check_n(x)?;
        let j = mha_jacobian(x, &self.params, None)?;
        Ok(if self.cached_bound == 0.0 { j.scale(0.0) } else { j.scale(self.c / self.cached_bound) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub x: Matrix,
    pub iterations: usize,
    /// `‖y − x − f(x)‖_∞` at exit.
    pub residual: f64,
    pub converged: bool,
}

/// Largest absolute entry, the ∞-norm of the flattened matrix.
pub fn max_norm(m: &Matrix) -> f64 {
    m.max_abs()
}

/// `X + f(X)`.
pub fn residual_forward<F>(x: &Matrix, f: F) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    let fx = f(x)?;
    if fx.shape() != x.shape() {
        return Err(Error::Shape(format!("residual map changes shape {:?} -> {:?}", x.shape(), fx.shape())));
    }
    Ok(x.add(&fx))
}

/// Solves `y = x + f(x)` by `x^{k+1} = y − f(x^k)` from `x⁰ = y`, stopping once
/// successive iterates differ by at most `tol` in the ∞-norm.
pub fn residual_inverse<F>(y: &Matrix, f: F, tol: f64, max_iter: usize) -> Result<InversionResult>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    residual_inverse_from(y, y.clone(), f, tol, max_iter)
}

/// [`residual_inverse`] from an arbitrary start.
pub fn residual_inverse_from<F>(y: &Matrix, x0: Matrix, f: F, tol: f64, max_iter: usize) -> Result<InversionResult>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be > 0, got {tol}")));
    }
    if x0.shape() != y.shape() {
        return Err(Error::Shape("start point and target differ in shape".into()));
    }
    let mut x = x0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let next = y.sub(&f(&x)?);
        let step = max_norm(&next.sub(&x));
        x = next;
        iterations += 1;
        if step <= tol {
            converged = true;
            break;
        }
    }
    let residual = max_norm(&y.sub(&residual_forward(&x, &f)?));
    Ok(InversionResult { x, iterations, residual, converged })
}

/// `‖X − x^k‖_∞` for `k = 1..=iters` when inverting `Y = X + c·f(X)`.
pub fn reconstruction_errors<F>(x: &Matrix, f: F, c: f64, iters: usize) -> Result<Vec<f64>>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    let g = |z: &Matrix| Ok(f(z)?.scale(c));
    let y = residual_forward(x, g)?;
    let mut xk = y.clone();
    let mut errors = Vec::with_capacity(iters);
    for _ in 0..iters {
        xk = y.sub(&g(&xk)?);
        errors.push(max_norm(&x.sub(&xk)));
    }
    Ok(errors)
}

/// Maximum over the batch of the reconstruction error after each of
/// `1..=iters` fixed-point iterations.
pub fn error_curve<F>(batch: &[Matrix], f: F, c: f64, iters: usize) -> Result<Vec<f64>>
where
    F: Fn(&Matrix) -> Result<Matrix> + Sync,
{
    if batch.is_empty() {
        return Err(Error::Domain("batch must be nonempty".into()));
    }
    if iters == 0 {
        return Err(Error::Domain("need at least one iteration".into()));
    }
    let curves = batch.par_iter().map(|x| reconstruction_errors(x, &f, c, iters)).collect::<Result<Vec<_>>>()?;
    Ok((0..iters).map(|k| curves.iter().map(|e| e[k]).fold(0.0, f64::max)).collect())
}

/// Reconstruction error after exactly `iters` iterations, maximized over the batch.
pub fn max_reconstruction_error<F>(batch: &[Matrix], f: F, c: f64, iters: usize) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<Matrix> + Sync,
{
    Ok(*error_curve(batch, f, c, iters)?.last().expect("iters >= 1"))
}

/// Inputs with one row exactly zero and the rest uniform on `[−u, u]`.
pub fn adversarial_batch<R: Rng + ?Sized>(batch: usize, n: usize, d: usize, u: f64, rng: &mut R) -> Vec<Matrix> {
    (0..batch)
        .map(|_| {
            let mut x = Matrix::random_uniform(n, d, -u, u, rng);
            let zero = rng.random_range(0..n);
            x.row_mut(zero).fill(0.0);
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::jacobian::jacobian_norm;
    use crate::tensor::NormKind;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_map(x: &Matrix) -> Result<Matrix> {
        Ok(Matrix::zeros(x.rows(), x.cols()))
    }

    fn contractive(c: f64, n: usize, seed: u64) -> ContractiveMha {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContractiveMha::new(MhaParams::random(AttentionKind::L2, true, 4, 2, &mut rng).unwrap(), c, n).unwrap()
    }

    #[test]
    fn construction_checks() {
        let p = MhaParams::identity(AttentionKind::L2, 2, 1).unwrap();
        assert!(ContractiveMha::new(p.clone(), 1.0, 4).is_err());
        assert!(ContractiveMha::new(p.clone(), 0.0, 4).is_err());
        let dp = MhaParams::identity(AttentionKind::DotProduct, 2, 1).unwrap();
        assert!(ContractiveMha::new(dp, 0.5, 4).is_err());
        let cm = ContractiveMha::new(p, 0.5, 4).unwrap();
        assert!(cm.forward(&Matrix::zeros(5, 2)).is_err());
    }

    #[test]
    fn forward_is_scaled_attention() {
        let cm = contractive(0.7, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::random_uniform(5, 4, -2.0, 2.0, &mut rng);
        let expected = mha_forward(&x, cm.params(), None).unwrap().scale(0.7 / cm.cached_bound());
        assert_eq!(cm.forward(&x).unwrap(), expected);

        let zero = MhaParams::identity(AttentionKind::L2, 2, 1).unwrap().with_wo(Matrix::zeros(2, 2)).unwrap();
        let cz = ContractiveMha::new(zero, 0.5, 3).unwrap();
        assert_eq!(cz.forward(&Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn jacobian_is_contractive() {
        let cm = contractive(0.9, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let c: f64 = rng.random_range(0.0..10.0);
            let x = Matrix::random_uniform(6, 4, -c, c, &mut rng);
            assert!(jacobian_norm(&cm.jacobian(&x).unwrap(), NormKind::Inf).unwrap().0 <= 0.9);
        }
    }

    #[test]
    fn zero_map_inverts_in_one_step() {
        let y = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        assert_eq!(residual_forward(&y, zero_map).unwrap(), y);
        let r = residual_inverse(&y, zero_map, 1e-12, 10).unwrap();
        assert_eq!((r.iterations, r.residual, r.converged), (1, 0.0, true));
        assert_eq!(r.x, y);
    }

    #[test]
    fn linear_half_map() {
        let y = Matrix::from_rows(&[[3.0, -1.5], [0.75, 6.0]]);
        let half = |x: &Matrix| Ok(x.scale(0.5));
        let r = residual_inverse(&y, half, 1e-13, 200).unwrap();
        assert!(r.converged);
        assert!(r.x.sub(&y.scale(1.0 / 1.5)).max_abs() < 1e-12);
        assert!(r.residual < 1e-12);

        // the error halves each step from ‖y − x*‖ = ‖x*‖/2
        let x_true = y.scale(1.0 / 1.5);
        let errs = reconstruction_errors(&x_true, |x: &Matrix| Ok(x.clone()), 0.5, 10).unwrap();
        for (k, e) in errs.iter().enumerate() {
            let expected = 0.5f64.powi(k as i32 + 2) * x_true.max_abs();
            assert_abs_diff_eq!(*e, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn max_iter_exhaustion_reports_not_converged() {
        let y = Matrix::from_rows(&[[1.0]]);
        let r = residual_inverse(&y, |x: &Matrix| Ok(x.scale(0.99)), 1e-14, 3).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!(r.residual > 0.0);
        assert!(residual_inverse(&y, zero_map, 0.0, 3).is_err());
    }

    #[test]
    fn contractive_inversion_converges_geometrically() {
        let cm = contractive(0.9, 5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::random_uniform(5, 4, -3.0, 3.0, &mut rng);
        let f = |z: &Matrix| cm.forward(z);
        let y = residual_forward(&x, f).unwrap();
        let r = residual_inverse(&y, f, 1e-10, 1000).unwrap();
        assert!(r.converged && r.residual <= 1e-9);
        assert!(r.x.sub(&x).max_abs() < 1e-8);

        let initial = cm.forward(&y).unwrap().sub(&cm.forward(&x).unwrap()).max_abs();
        let errs = reconstruction_errors(&x, |z: &Matrix| mha_forward(z, cm.params(), None), 0.9 / cm.cached_bound(), 40).unwrap();
        for (k, e) in errs.iter().enumerate() {
            assert!(*e <= 0.9f64.powi(k as i32) * initial / (1.0 - 0.9) + 1e-15);
        }
        let from_zero = residual_inverse_from(&y, Matrix::zeros(5, 4), f, 1e-10, 1000).unwrap();
        assert!(from_zero.x.sub(&r.x).max_abs() < 1e-9);
    }

    #[test]
    fn adversarial_batch_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = adversarial_batch(10, 6, 3, 10.0, &mut rng);
        assert_eq!(batch.len(), 10);
        for x in &batch {
            assert_eq!(x.shape(), (6, 3));
            assert_eq!((0..6).filter(|&i| x.row(i).iter().all(|v| *v == 0.0)).count(), 1);
            assert!(x.max_abs() <= 10.0);
        }
    }

    #[test]
    fn zero_map_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = adversarial_batch(4, 3, 2, 5.0, &mut rng);
        assert_eq!(max_reconstruction_error(&batch, zero_map, 0.9, 1).unwrap(), 0.0);
        assert!(max_reconstruction_error(&batch, zero_map, 0.9, 0).is_err());
        assert!(max_reconstruction_error(&[], zero_map, 0.9, 1).is_err());
    }
}
