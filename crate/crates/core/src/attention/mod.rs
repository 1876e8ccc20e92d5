//! Forward maps of dot-product and L2 multihead self-attention.
//!
//! A head computes `P = softmax(L)` from pairwise logits `L` and maps
//! `X ↦ P X` (dot-product) or `X ↦ P X A_h` (L2, with
//! `A_h = W^Q W^Qᵀ / √(D/H)`). Head outputs are projected by `W^{V,h}`,
//! concatenated and multiplied by `W^O`.

mod layernorm;
mod mask;
mod params;

pub use layernorm::{layer_norm, LayerNormParams};
pub(crate) use layernorm::moments;
pub use mask::MaskSet;
pub use params::{AttentionKind, HeadWeights, MhaParams, ParamsFile};

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Matrix, StochasticMatrix};

fn check_projection(x: &Matrix, w: &Matrix, name: &str) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "X is {:?} but {name} is {:?}",
            x.shape(),
            w.shape()
        )));
    }
    Ok(())
}

fn add_bias(m: &mut Matrix, b: Option<&[f64]>) -> Result<()> {
    if let Some(b) = b {
        if b.len() != m.cols() {
            return Err(Error::Shape(format!("bias of length {} for width {}", b.len(), m.cols())));
        }
        for i in 0..m.rows() {
            for (v, bj) in m.row_mut(i).iter_mut().zip(b) {
                *v += bj;
            }
        }
    }
    Ok(())
}

/// Dot-product logits `(x_iᵀW^Q + b^Q)·(x_jᵀW^K + b^K) / √(D/H)`, where `D/H`
/// is the projection width.
pub fn dp_logits(x: &Matrix, wq: &Matrix, wk: &Matrix, bq: Option<&[f64]>, bk: Option<&[f64]>) -> Result<Matrix> {
    check_projection(x, wq, "wq")?;
    check_projection(x, wk, "wk")?;
    if wq.cols() != wk.cols() {
        return Err(Error::Shape("wq and wk must have the same width".into()));
    }
    let mut q = x.matmul(wq);
    let mut k = x.matmul(wk);
    add_bias(&mut q, bq)?;
    add_bias(&mut k, bk)?;
    let s = (wq.cols() as f64).sqrt();
    Ok(q.matmul_t(&k).scale(1.0 / s))
}

/// L2 logits `-‖x_iᵀW^Q - x_jᵀW^K‖² / √(D/H)` from row norms and one Gram
/// product, `‖a‖² - 2aᵀb + ‖b‖²`.
pub fn l2_logits(x: &Matrix, wq: &Matrix, wk: &Matrix) -> Result<Matrix> {
    check_projection(x, wq, "wq")?;
    check_projection(x, wk, "wk")?;
    if wq.cols() != wk.cols() {
        return Err(Error::Shape("wq and wk must have the same width".into()));
    }
    let q = x.matmul(wq);
    let k = if wq == wk { q.clone() } else { x.matmul(wk) };
    let sq = |m: &Matrix| (0..m.rows()).map(|i| m.row(i).iter().map(|v| v * v).sum::<f64>()).collect::<Vec<_>>();
    let (qn, kn) = (sq(&q), sq(&k));
    let gram = q.matmul_t(&k);
    let s = (wq.cols() as f64).sqrt();
    Ok(Matrix::from_fn(x.rows(), x.rows(), |i, j| {
        let dist = (qn[i] + kn[j] - 2.0 * gram[(i, j)]).max(0.0);
        -dist / s
    }))
}

/// Sets masked logits to `-inf`.
pub fn apply_mask(logits: &Matrix, mask: &MaskSet) -> Result<Matrix> {
    if !logits.is_square() || logits.rows() != mask.n() {
        return Err(Error::Mask(format!(
            "mask for N = {} applied to {:?} logits",
            mask.n(),
            logits.shape()
        )));
    }
    let mut out = logits.clone();
    for (i, j) in mask.pairs() {
        out[(i, j)] = f64::NEG_INFINITY;
    }
    Ok(out)
}

fn check_input(x: &Matrix, params: &MhaParams) -> Result<()> {
    if x.cols() != params.d_model() || x.rows() == 0 {
        return Err(Error::Shape(format!(
            "X must be N x {} with N >= 1, got {:?}",
            params.d_model(),
            x.shape()
        )));
    }
    Ok(())
}

/// Attention matrix `P^h` of head `h`.
pub fn head_attention(x: &Matrix, params: &MhaParams, h: usize, mask: Option<&MaskSet>) -> Result<StochasticMatrix> {
    check_input(x, params)?;
    let head = params.head(h);
    let logits = match params.kind() {
        AttentionKind::DotProduct => dp_logits(x, &head.wq, &head.wk, head.bq.as_deref(), head.bk.as_deref())?,
        AttentionKind::L2 => l2_logits(x, &head.wq, &head.wk)?,
    };
    let logits = match mask {
        Some(m) => apply_mask(&logits, m)?,
        None => logits,
    };
    softmax_rows(&logits)
}

/// Per-head map before the value projection: `P X` (DP) or `P X A_h` (L2).
pub fn head_map(x: &Matrix, params: &MhaParams, h: usize, mask: Option<&MaskSet>) -> Result<Matrix> {
    let p = head_attention(x, params, h, mask)?;
    let px = p.matmul(x);
    Ok(match params.kind() {
        AttentionKind::DotProduct => px,
        AttentionKind::L2 => px.matmul(&params.a_matrix(h)),
    })
}

/// Full multihead self-attention `[f^1 W^{V,1}, …, f^H W^{V,H}] W^O`.
pub fn mha_forward(x: &Matrix, params: &MhaParams, mask: Option<&MaskSet>) -> Result<Matrix> {
    check_input(x, params)?;
    let (n, d, dh) = (x.rows(), params.d_model(), params.head_dim());
    let mut concat = Matrix::zeros(n, d);
    for h in 0..params.num_heads() {
        let p = head_attention(x, params, h, mask)?;
        let value_proj = match params.kind() {
            AttentionKind::DotProduct => params.head(h).wv.clone(),
            AttentionKind::L2 => params.a_matrix(h).matmul(&params.head(h).wv),
        };
        let out = p.matmul(&x.matmul(&value_proj));
        concat.set_block(0, h * dh, &out);
    }
    Ok(concat.matmul(params.wo()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_rows(&[[v]])
    }

    fn naive_l2(x: &Matrix, wq: &Matrix, wk: &Matrix) -> Matrix {
        let q = x.matmul(wq);
        let k = x.matmul(wk);
        let s = (wq.cols() as f64).sqrt();
        Matrix::from_fn(x.rows(), x.rows(), |i, j| {
            -q.row(i).iter().zip(k.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s
        })
    }

    #[test]
    fn dp_logits_hand_example() {
        let x = Matrix::from_rows(&[[1.0], [2.0]]);
        let l = dp_logits(&x, &scalar(1.0), &scalar(1.0), None, None).unwrap();
        assert_eq!(l, Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]));
    }

    #[test]
    fn dp_zero_input_gives_uniform_attention() {
        let x = Matrix::zeros(3, 1);
        let p = softmax_rows(&dp_logits(&x, &scalar(2.5), &scalar(-1.0), None, None).unwrap()).unwrap();
        for v in p.as_slice() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn dp_bias_cancelling_query_gives_uniform_row() {
        // x_0 wq + bq = 0 for x_0 = 2, wq = 1.5, bq = -3
        let x = Matrix::from_rows(&[[2.0], [5.0], [-7.0], [0.3]]);
        let l = dp_logits(&x, &scalar(1.5), &scalar(0.8), Some(&[-3.0]), Some(&[0.4])).unwrap();
        let p = softmax_rows(&l).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(p[(0, j)], 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn l2_logits_hand_example() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]);
        let l = l2_logits(&x, &scalar(1.0), &scalar(1.0)).unwrap();
        assert_eq!(l, Matrix::from_rows(&[[0.0, -1.0], [-1.0, 0.0]]));
    }

    #[test]
    fn l2_identical_rows_give_uniform_attention() {
        let x = Matrix::from_rows(&[[0.3, -1.2], [0.3, -1.2], [0.3, -1.2]]);
        let w = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 0.7]]);
        let l = l2_logits(&x, &w, &w).unwrap();
        assert_eq!(l.max_abs(), 0.0);
        let p = softmax_rows(&l).unwrap();
        assert_abs_diff_eq!(p[(1, 2)], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn l2_efficient_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::random_uniform(17, 6, -3.0, 3.0, &mut rng);
        let wq = Matrix::random_uniform(6, 3, -1.0, 1.0, &mut rng);
        let wk = Matrix::random_uniform(6, 3, -1.0, 1.0, &mut rng);
        let diff = l2_logits(&x, &wq, &wk).unwrap().sub(&naive_l2(&x, &wq, &wk));
        assert!(diff.max_abs() < 1e-9);
    }

    #[test]
    fn mask_examples() {
        let l = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]]);
        assert_eq!(apply_mask(&l, &MaskSet::empty(3)).unwrap(), l);

        let off_diag = MaskSet::new(3, (0..3).flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))).unwrap();
        let p = softmax_rows(&apply_mask(&l, &off_diag).unwrap()).unwrap();
        assert_eq!(*p.as_matrix(), Matrix::identity(3));

        let p = softmax_rows(&apply_mask(&l, &MaskSet::causal(3)).unwrap()).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(p.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-15);
            for j in i + 1..3 {
                assert_eq!(p[(i, j)], 0.0);
            }
        }
        assert!(apply_mask(&l, &MaskSet::empty(2)).is_err());
    }

    #[test]
    fn single_token_l2_is_linear_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = MhaParams::random(AttentionKind::L2, true, 4, 2, &mut rng).unwrap();
        let x = Matrix::random_uniform(1, 4, -1.0, 1.0, &mut rng);
        let out = mha_forward(&x, &params, None).unwrap();
        let mut concat = Matrix::zeros(1, 4);
        for h in 0..2 {
            let head = x.matmul(&params.a_matrix(h)).matmul(&params.head(h).wv);
            concat.set_block(0, 2 * h, &head);
        }
        let expected = concat.matmul(params.wo());
        assert!(out.sub(&expected).max_abs() < 1e-14);
    }

    #[test]
    fn dp_row_at_zero_is_mean() {
        let params = MhaParams::identity(AttentionKind::DotProduct, 1, 1).unwrap();
        let x = Matrix::from_rows(&[[0.0], [1.0], [-1.0]]);
        let out = mha_forward(&x, &params, None).unwrap();
        assert_abs_diff_eq!(out[(0, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn head_map_matches_mha_for_identity_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = MhaParams::random(AttentionKind::L2, true, 3, 1, &mut rng).unwrap();
        let params = params.with_wo(Matrix::identity(3)).unwrap();
        let x = Matrix::random_uniform(5, 3, -2.0, 2.0, &mut rng);
        let via_head = head_map(&x, &params, 0, None).unwrap().matmul(&params.head(0).wv);
        let full = mha_forward(&x, &params, None).unwrap();
        assert!(via_head.sub(&full).max_abs() < 1e-13);
    }

    #[test]
    fn shape_errors() {
        let params = MhaParams::identity(AttentionKind::L2, 2, 1).unwrap();
        assert!(mha_forward(&Matrix::zeros(3, 3), &params, None).is_err());
        assert!(dp_logits(&Matrix::zeros(3, 2), &scalar(1.0), &scalar(1.0), None, None).is_err());
    }
}
