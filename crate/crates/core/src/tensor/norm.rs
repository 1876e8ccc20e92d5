//! Induced operator norms.
//!
//! `‖W‖_∞` is the maximum absolute row sum and is computed exactly. `‖W‖_2`
//! is the largest singular value; [`power_iteration`] gives the cheap
//! underestimate used in practice, [`spectral_norm_oracle`] the exact value via
//! a cyclic Jacobi eigenvalue sweep on `WᵀW`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm2};
use super::Matrix;
use crate::error::{Error, Result};

/// Choice of vector p-norm for operator norms and Lipschitz bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormKind::Two => write!(f, "2"),
            NormKind::Inf => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" => Ok(NormKind::Two),
            "inf" | "Inf" | "infinity" => Ok(NormKind::Inf),
            other => Err(Error::Domain(format!("unknown norm {other:?}, expected 2 or inf"))),
        }
    }
}

/// How a spectral norm was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormBackend {
    /// Exact, from the Jacobi eigenvalue oracle.
    Exact,
    /// Power iteration with the given number of iterations. Underestimates.
    PowerIteration { iters: usize },
    /// Closed form, no eigen-solve needed (e.g. the ∞-norm).
    ClosedForm,
}

/// Matrix size above which spectral norms fall back to power iteration.
pub const EXACT_SPECTRAL_MAX_DIM: usize = 256;
/// Power iteration budget used for the fallback.
pub const FALLBACK_POWER_ITERS: usize = 100;

/// Maximum absolute row sum.
pub fn op_norm_inf(m: &Matrix) -> f64 {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Power iteration on `WᵀW` from a seeded Gaussian unit start vector.
///
/// Returns the Rayleigh-quotient estimate `σ̃ = sqrt(bᵀWᵀWb / bᵀb)` after
/// `iters` normalised updates, together with the final iterate `b`. For PSD
/// `WᵀW` the estimate never exceeds `σ_max(W)` and is non-decreasing in `iters`.
pub fn power_iteration(w: &Matrix, iters: usize, seed: u64) -> Result<(f64, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::Domain("power iteration needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b: Vec<f64> = (0..w.cols()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nb = norm2(&b);
    if nb == 0.0 {
        b[0] = 1.0;
    } else {
        b.iter_mut().for_each(|v| *v /= nb);
    }
    if w.max_abs() == 0.0 {
        return Ok((0.0, b));
    }

    let gram_apply = |v: &[f64]| w.t_matvec(&w.matvec(v));
    for _ in 0..iters {
        let next = gram_apply(&b);
        let n = norm2(&next);
        if n <= f64::MIN_POSITIVE {
            return Err(Error::DegenerateIterate);
        }
        b = next.into_iter().map(|v| v / n).collect();
    }
    let wb = w.matvec(&b);
    let sigma = (dot(&wb, &wb) / dot(&b, &b)).sqrt();
    Ok((sigma, b))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius mass drops below
/// `1e-14 * max(1, ‖A‖_F)`.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    const MAX_SWEEPS: usize = 100;
    if !a.is_square() {
        return Err(Error::Shape(format!("eigenvalues of non-square {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::Domain("eigenvalues of a non-finite matrix".into()));
    }
    let n = a.rows();
    let mut m = a.clone();
    let tol = 1e-14 * a.frobenius().max(1.0);

    for _ in 0..MAX_SWEEPS {
        let off = off_diagonal_mass(&m);
        if off < tol {
            return Ok((0..n).map(|i| m[(i, i)]).collect());
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                // Rotation angle that annihilates m[p][q].
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
            }
        }
    }
    Err(Error::NoConvergence(MAX_SWEEPS))
}

fn off_diagonal_mass(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Exact `σ_max(W) = sqrt(λ_max(WᵀW))`.
pub fn spectral_norm_oracle(w: &Matrix) -> Result<f64> {
    // Decompose the smaller Gram matrix; both share the non-zero spectrum.
    let gram = if w.rows() < w.cols() { w.matmul_t(w) } else { w.t_matmul(w) };
    if gram.rows() == 0 {
        return Ok(0.0);
    }
    let eig = symmetric_eigenvalues(&gram)?;
    let lmax = eig.into_iter().fold(0.0, f64::max);
    Ok(lmax.sqrt())
}

/// Spectral norm with an automatic exact/power-iteration choice by size.
pub fn spectral_norm(w: &Matrix) -> Result<(f64, NormBackend)> {
    if w.rows().min(w.cols()) <= EXACT_SPECTRAL_MAX_DIM {
        Ok((spectral_norm_oracle(w)?, NormBackend::Exact))
    } else {
        let (s, _) = power_iteration(w, FALLBACK_POWER_ITERS, 0)?;
        Ok((s, NormBackend::PowerIteration { iters: FALLBACK_POWER_ITERS }))
    }
}

/// Operator norm for the given p.
pub fn op_norm(m: &Matrix, p: NormKind) -> Result<f64> {
    match p {
        NormKind::Inf => Ok(op_norm_inf(m)),
        NormKind::Two => spectral_norm(m).map(|(s, _)| s),
    }
}
