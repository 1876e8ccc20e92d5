//! Lower bounds on the Lipschitz constant by maximizing the Jacobian norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_ascend, AdamOptions, AdamOutcome};
use crate::attention::{AttentionKind, MhaParams};
use crate::bounds::bound;
use crate::error::{Error, Result};
use crate::jacobian::{
    block_row_norm_inf, jacobian_norm, mha_jacobian, mha_jacobian_row, mha_row_gradient, mha_row_norms_inf, FD_STEP,
};
use crate::tensor::{dot, Matrix, NormKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Adjoint of the tied L2 Jacobian.
    Analytic,
    /// Central differences on the surrogate objective.
    FiniteDiff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub adam: AdamOptions,
    /// Steps between full-Jacobian scans for the maximizing block row
    /// (∞-norm only). The row is also picked before the first step.
    pub reselect_every: usize,
    /// Defaults to analytic for tied L2, finite differences otherwise.
    pub gradient: Option<GradientMethod>,
    /// Power-iteration steps per ascent step for the 2-norm objective.
    pub power_iters: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { adam: AdamOptions::default(), reselect_every: 500, gradient: None, power_iters: 20 }
    }
}

fn gradient_method(params: &MhaParams, opts: &SearchOptions) -> GradientMethod {
    opts.gradient.unwrap_or(if params.kind() == AttentionKind::L2 && params.is_tied() {
        GradientMethod::Analytic
    } else {
        GradientMethod::FiniteDiff
    })
}

/// `‖J_F(X)‖_p` for the full multihead map.
pub fn jacobian_objective(x: &Matrix, params: &MhaParams, p: NormKind) -> Result<f64> {
    match p {
        NormKind::Inf => Ok(mha_row_norms_inf(x, params, None)?.into_iter().fold(0.0, f64::max)),
        NormKind::Two => Ok(jacobian_norm(&mha_jacobian(x, params, None)?, p)?.0),
    }
}

/// Gradient of `Σ_{i ∈ rows} Σ_j ⟨S_ij, J_ij(X)⟩`.
fn pairing_gradient(x: &Matrix, params: &MhaParams, rows: &[(usize, Vec<Matrix>)], method: GradientMethod) -> Result<Matrix> {
    match method {
        GradientMethod::Analytic => {
            let mut g = Matrix::zeros(x.rows(), x.cols());
            for (i, s) in rows {
                g.add_assign(&mha_row_gradient(x, params, *i, s)?);
            }
            Ok(g)
        }
        GradientMethod::FiniteDiff => {
            let pairing = |y: &Matrix| -> Result<f64> {
                let mut total = 0.0;
                for (i, s) in rows {
                    let row = mha_jacobian_row(y, params, None, *i)?;
                    total += row.iter().zip(s).map(|(b, w)| dot(b.as_slice(), w.as_slice())).sum::<f64>();
                }
                Ok(total)
            };
            let mut y = x.clone();
            let mut g = Matrix::zeros(x.rows(), x.cols());
            for k in 0..x.rows() {
                for c in 0..x.cols() {
                    let orig = y[(k, c)];
                    y[(k, c)] = orig + FD_STEP;
                    let plus = pairing(&y)?;
                    y[(k, c)] = orig - FD_STEP;
                    let minus = pairing(&y)?;
                    y[(k, c)] = orig;
                    g[(k, c)] = (plus - minus) / (2.0 * FD_STEP);
                }
            }
            Ok(g)
        }
    }
}

/// Block row with the largest ∞-norm contribution.
fn argmax_block_row(x: &Matrix, params: &MhaParams) -> Result<usize> {
    let norms = mha_row_norms_inf(x, params, None)?;
    Ok(norms.iter().enumerate().fold((f64::NEG_INFINITY, 0), |best, (i, &v)| if v > best.0 { (v, i) } else { best }).1)
}

/// Weights `S_j = e_a sign(J_ij[a, :])` selecting the largest absolute row sum.
fn inf_weights(row: &[Matrix]) -> (f64, Vec<Matrix>) {
    let (value, a) = block_row_norm_inf(row);
    let s = row
        .iter()
        .map(|b| {
            let mut w = Matrix::zeros(b.rows(), b.cols());
            for (wv, bv) in w.row_mut(a).iter_mut().zip(b.row(a)) {
                *wv = if *bv > 0.0 {
                    1.0
                } else if *bv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            w
        })
        .collect();
    (value, s)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Ascends `‖J_F(X)‖_p` from `x0`. The returned value is the full Jacobian
/// norm at the best iterate.
pub fn maximize_jacobian_norm(params: &MhaParams, x0: Matrix, p: NormKind, opts: &SearchOptions) -> Result<AdamOutcome> {
    let method = gradient_method(params, opts);
    let mut out = match p {
        NormKind::Inf => {
            let every = opts.reselect_every.max(1);
            let mut calls = 0usize;
            let mut row = 0usize;
            adam_ascend(
                |x| {
                    if calls.is_multiple_of(every) {
                        row = argmax_block_row(x, params)?;
                    }
                    calls += 1;
                    let blocks = mha_jacobian_row(x, params, None, row)?;
                    let (value, s) = inf_weights(&blocks);
                    let g = pairing_gradient(x, params, &[(row, s)], method)?;
                    Ok((value, g))
                },
                x0,
                opts.adam,
            )?
        }
        NormKind::Two => {
            let dim = x0.rows() * x0.cols();
            let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
            adam_ascend(
                |x| {
                    let (n, d) = x.shape();
                    let jm = mha_jacobian(x, params, None)?.assemble();
                    let mut u = jm.matvec(&v);
                    for _ in 0..opts.power_iters.max(1) {
                        normalize(&mut u);
                        v = jm.t_matvec(&u);
                        normalize(&mut v);
                        u = jm.matvec(&v);
                    }
                    let sigma = normalize(&mut u);
                    let rows = (0..n)
                        .map(|i| {
                            let ui = &u[i * d..(i + 1) * d];
                            (i, (0..n).map(|j| Matrix::outer(ui, &v[j * d..(j + 1) * d])).collect())
                        })
                        .collect::<Vec<_>>();
                    Ok((sigma, pairing_gradient(x, params, &rows, method)?))
                },
                x0,
                opts.adam,
            )?
        }
    };
    out.value = jacobian_objective(&out.x, params, p)?;
    Ok(out)
}

/// One point of the bound-tightness sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub p: NormKind,
    /// Best optimized Jacobian norms, descending.
    pub lower_bounds: Vec<f64>,
    pub upper_bound: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl SweepRow {
    /// Errors if any lower bound exceeds the upper bound.
    pub fn check_dominance(&self) -> Result<()> {
        match self.lower_bounds.iter().copied().find(|l| *l > self.upper_bound) {
            Some(lower) => Err(Error::Dominance { n: self.n, lower, upper: self.upper_bound }),
            None => Ok(()),
        }
    }
}

/// Per-`(seed, n)` generator with one ChaCha stream per restart.
pub(crate) fn restart_rng(seed: u64, n: usize, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(restart as u64);
    rng
}

/// Draws `c ~ U[0, 10]` and `X ~ U[−c, c]^{N×D}`.
pub fn random_start<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Matrix {
    let c = rng.random_range(0.0..10.0);
    if c == 0.0 {
        return Matrix::zeros(n, d);
    }
    Matrix::random_uniform(n, d, -c, c, rng)
}

/// Maximizes `‖J(X)‖_p` for identity-weight tied L2 attention (`W^O = I`)
/// from `restarts` random starts and keeps the `top_k` best values.
#[allow(clippy::too_many_arguments)]
pub fn lower_bound_search(
    n: usize,
    d: usize,
    h: usize,
    p: NormKind,
    restarts: usize,
    top_k: usize,
    seed: u64,
    opts: &SearchOptions,
) -> Result<SweepRow> {
    if !(restarts >= top_k && top_k >= 1) {
        return Err(Error::Domain(format!("need restarts >= top_k >= 1, got {restarts} and {top_k}")));
    }
    let params = MhaParams::identity(AttentionKind::L2, d, h)?;
    let upper_bound = bound(&params, n, p)?.value;
    let mut values = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let x0 = random_start(n, d, &mut restart_rng(seed, n, r));
            maximize_jacobian_norm(&params, x0, p, opts).map(|o| o.value)
        })
        .collect::<Result<Vec<_>>>()?;
    values.sort_by(|a, b| b.total_cmp(a));
    values.truncate(top_k);
    Ok(SweepRow { n, p, lower_bounds: values, upper_bound, restarts, seed })
}
