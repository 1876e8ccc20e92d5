//! Analytical Jacobians of the attention maps and of LayerNorm, with a
//! central finite-difference oracle.
//!
//! Blocks follow the usual convention `J_ij[a][b] = ∂f_i[a] / ∂x_j[b]`, so a
//! block is `out_dim × in_dim` and `assemble()` stacks them row-major.
//!
//! Every attention Jacobian here is built from one softmax row at a time.
//! For output row `i` with attention weights `p = P_i:`, mean `m = Σ_k p_k x_k`
//! and covariance `Cov = Σ_k p_k (x_k − m)(x_k − m)ᵀ`, the map `PX` has
//!
//! ```text
//! J_ij = p_j (x_j − m) r_jᵀ + p_j I + δ_ij Cov M
//! ```
//!
//! where `r_j = ∇_{x_j} L_ij` and `Cov M` collects the `x_i`-dependence of the
//! query side. The L2 heads multiply every block by `A` on the left.

// Block formulas read best indexed by token and coordinate.
#![allow(clippy::needless_range_loop)]

use rayon::prelude::*;

use crate::attention::{moments, AttentionKind, LayerNormParams, MaskSet, MhaParams};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, op_norm_inf, power_iteration, softmax_into, spectral_norm_oracle, Matrix, NormBackend, NormKind};
use crate::tensor::{EXACT_SPECTRAL_MAX_DIM, FALLBACK_POWER_ITERS};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Block matrix `[J_ij]` with `n × n` blocks of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlocks {
    n: usize,
    out_dim: usize,
    in_dim: usize,
    blocks: Vec<Matrix>,
}

impl JacobianBlocks {
    pub fn zeros(n: usize, out_dim: usize, in_dim: usize) -> Self {
        Self { n, out_dim, in_dim, blocks: vec![Matrix::zeros(out_dim, in_dim); n * n] }
    }

    /// Builds from block rows, each holding `n` blocks.
    pub fn from_block_rows(rows: Vec<Vec<Matrix>>) -> Result<Self> {
        let n = rows.len();
        let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::Shape("no blocks".into()))?;
        let (out_dim, in_dim) = first.shape();
        let mut blocks = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n || row.iter().any(|b| b.shape() != (out_dim, in_dim)) {
                return Err(Error::Shape("block rows must hold n blocks of equal shape".into()));
            }
            blocks.extend(row);
        }
        Ok(Self { n, out_dim, in_dim, blocks })
    }

    /// Splits an assembled `(n·out) × (n·in)` matrix into blocks.
    pub fn from_assembled(n: usize, out_dim: usize, in_dim: usize, m: &Matrix) -> Result<Self> {
        if m.shape() != (n * out_dim, n * in_dim) {
            return Err(Error::Shape(format!("cannot split {:?} into {n}x{n} blocks of {out_dim}x{in_dim}", m.shape())));
        }
        let mut out = Self::zeros(n, out_dim, in_dim);
        for i in 0..n {
            for j in 0..n {
                *out.block_mut(i, j) =
                    Matrix::from_fn(out_dim, in_dim, |a, b| m[(i * out_dim + a, j * in_dim + b)]);
            }
        }
        Ok(out)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn block(&self, i: usize, j: usize) -> &Matrix {
        &self.blocks[i * self.n + j]
    }

    pub fn block_mut(&mut self, i: usize, j: usize) -> &mut Matrix {
        &mut self.blocks[i * self.n + j]
    }

    pub fn block_row(&self, i: usize) -> &[Matrix] {
        &self.blocks[i * self.n..(i + 1) * self.n]
    }

    pub fn assemble(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n * self.out_dim, self.n * self.in_dim);
        for i in 0..self.n {
            for j in 0..self.n {
                m.set_block(i * self.out_dim, j * self.in_dim, self.block(i, j));
            }
        }
        m
    }

    /// Block row `i` as an `out × (n·in)` matrix.
    pub fn assemble_row(&self, i: usize) -> Matrix {
        assemble_row(self.block_row(i))
    }

    pub fn scale(&self, t: f64) -> Self {
        Self { blocks: self.blocks.iter().map(|b| b.scale(t)).collect(), ..*self }
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.check_same(rhs)?;
        Ok(Self { blocks: self.blocks.iter().zip(&rhs.blocks).map(|(a, b)| a.sub(b)).collect(), ..*self })
    }

    pub fn frobenius(&self) -> f64 {
        self.blocks.iter().map(|b| b.frobenius().powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }

    /// `‖self − rhs‖_F / max(1, ‖rhs‖_F)`.
    pub fn relative_error(&self, rhs: &Self) -> Result<f64> {
        Ok(self.sub(rhs)?.frobenius() / rhs.frobenius().max(1.0))
    }

    fn check_same(&self, rhs: &Self) -> Result<()> {
        if (self.n, self.out_dim, self.in_dim) != (rhs.n, rhs.out_dim, rhs.in_dim) {
            return Err(Error::Shape("Jacobian block structures differ".into()));
        }
        Ok(())
    }
}

pub(crate) fn assemble_row(blocks: &[Matrix]) -> Matrix {
    let (out, inn) = blocks[0].shape();
    let mut m = Matrix::zeros(out, blocks.len() * inn);
    for (j, b) in blocks.iter().enumerate() {
        m.set_block(0, j * inn, b);
    }
    m
}

/// `P^(i) = diag(p) − p pᵀ`, the Jacobian of softmax at a row `p`.
pub fn softmax_derivative(p: &[f64]) -> Matrix {
    Matrix::from_fn(p.len(), p.len(), |a, b| if a == b { p[a] - p[a] * p[b] } else { -p[a] * p[b] })
}

/// Per-head quantities shared by all block rows.
pub(crate) struct HeadContext<'a> {
    x: &'a Matrix,
    kind: AttentionKind,
    mask: Option<&'a MaskSet>,
    wq: &'a Matrix,
    wk: &'a Matrix,
    /// Projected queries and keys, biases included.
    q: Matrix,
    k: Matrix,
    scale: f64,
    /// Left factor of every L2 block; `W^K W^Qᵀ / s` for DP.
    a: Matrix,
}

impl<'a> HeadContext<'a> {
    pub(crate) fn new(x: &'a Matrix, params: &'a MhaParams, h: usize, mask: Option<&'a MaskSet>) -> Result<Self> {
        if x.cols() != params.d_model() || x.rows() == 0 {
            return Err(Error::Shape(format!("X must be N x {}, got {:?}", params.d_model(), x.shape())));
        }
        if let Some(m) = mask {
            if m.n() != x.rows() {
                return Err(Error::Mask(format!("mask for N = {} applied to N = {}", m.n(), x.rows())));
            }
        }
        let head = params.head(h);
        let mut q = x.matmul(&head.wq);
        let mut k = x.matmul(&head.wk);
        for (mat, bias) in [(&mut q, &head.bq), (&mut k, &head.bk)] {
            if let Some(b) = bias {
                for i in 0..mat.rows() {
                    for (v, bj) in mat.row_mut(i).iter_mut().zip(b) {
                        *v += bj;
                    }
                }
            }
        }
        Ok(Self {
            x,
            kind: params.kind(),
            mask,
            wq: &head.wq,
            wk: &head.wk,
            q,
            k,
            scale: params.logit_scale(),
            a: params.a_matrix(h),
        })
    }

    pub(crate) fn n(&self) -> usize {
        self.x.rows()
    }

    pub(crate) fn a(&self) -> &Matrix {
        &self.a
    }

    /// Softmax row `P_i:`.
    pub(crate) fn attention_row(&self, i: usize) -> Result<Vec<f64>> {
        let n = self.n();
        let qi = self.q.row(i);
        let mut logits: Vec<f64> = (0..n)
            .map(|j| {
                let kj = self.k.row(j);
                match self.kind {
                    AttentionKind::DotProduct => dot(qi, kj) / self.scale,
                    AttentionKind::L2 => {
                        -qi.iter().zip(kj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.scale
                    }
                }
            })
            .collect();
        if let Some(m) = self.mask {
            for (j, l) in logits.iter_mut().enumerate() {
                if m.contains(i, j) {
                    *l = f64::NEG_INFINITY;
                }
            }
        }
        let mut p = vec![0.0; n];
        softmax_into(&logits, &mut p).map_err(|e| match e {
            Error::FullyMaskedRow(_) => Error::FullyMaskedRow(i),
            other => other,
        })?;
        Ok(p)
    }

    /// Weighted mean and covariance of the rows of X under `p`.
    pub(crate) fn moments(&self, p: &[f64]) -> (Vec<f64>, Matrix) {
        let d = self.x.cols();
        let mut m = vec![0.0; d];
        for (k, &pk) in p.iter().enumerate() {
            if pk != 0.0 {
                axpy(pk, self.x.row(k), &mut m);
            }
        }
        let mut cov = Matrix::zeros(d, d);
        for (k, &pk) in p.iter().enumerate() {
            if pk == 0.0 {
                continue;
            }
            let v: Vec<f64> = self.x.row(k).iter().zip(&m).map(|(a, b)| a - b).collect();
            for a in 0..d {
                let s = pk * v[a];
                for (c, vb) in cov.row_mut(a).iter_mut().zip(&v) {
                    *c += s * vb;
                }
            }
        }
        (m, cov)
    }

    /// `X − 𝟙mᵀ`.
    fn centred(&self, m: &[f64]) -> Matrix {
        let mut v = self.x.clone();
        for j in 0..v.rows() {
            for (a, b) in v.row_mut(j).iter_mut().zip(m) {
                *a -= b;
            }
        }
        v
    }

    /// Terms of block row `i` of `∂(PX)/∂X`.
    fn row_terms(&self, i: usize) -> Result<RowTerms> {
        let n = self.n();
        let p = self.attention_row(i)?;
        let (m, cov) = self.moments(&p);
        let v = self.centred(&m);
        let (r, diag) = match self.kind {
            AttentionKind::DotProduct => {
                // ∇_{x_j} L_ij = W^K q_i / s for j ≠ i; the query side adds Cov · W^K W^Qᵀ / s
                let r0: Vec<f64> = self.wk.matvec(self.q.row(i)).iter().map(|v| v / self.scale).collect();
                (Matrix::from_fn(n, r0.len(), |_, b| r0[b]), cov.matmul(&self.a))
            }
            AttentionKind::L2 => {
                // r_j = (2/s) W^K (q_i − k_j)
                let c = 2.0 / self.scale;
                let qi = self.q.row(i);
                let diff = Matrix::from_fn(n, self.k.cols(), |j, b| c * (qi[b] - self.k[(j, b)]));
                (diff.matmul_t(self.wk), cov.matmul(&self.wk.matmul_t(self.wq)).scale(c))
            }
        };
        Ok(RowTerms { p, v, r, diag })
    }
}

/// Block row `J_ij = p_j v_j r_jᵀ + p_j I + δ_ij diag` of `∂(PX)/∂X`, with
/// `v_j` and `r_j` stored as the rows of `v` and `r`.
struct RowTerms {
    p: Vec<f64>,
    v: Matrix,
    r: Matrix,
    diag: Matrix,
}

/// [`RowTerms`] premultiplied by a left factor `L`.
struct LeftRow {
    p: Vec<f64>,
    /// Row `j` is `L v_j`.
    lv: Matrix,
    r: Matrix,
    left: Matrix,
    left_diag: Matrix,
}

impl RowTerms {
    fn with_left(self, left: &Matrix) -> LeftRow {
        LeftRow { lv: self.v.matmul_t(left), left_diag: left.matmul(&self.diag), p: self.p, r: self.r, left: left.clone() }
    }
}

impl LeftRow {
    /// Adds `L · J_ij` into `block`.
    fn add_block(&self, i: usize, j: usize, block: &mut Matrix) {
        let pj = self.p[j];
        if pj != 0.0 {
            let lv = self.lv.row(j);
            let r = self.r.row(j);
            for a in 0..block.rows() {
                let s = pj * lv[a];
                for ((o, rb), lb) in block.row_mut(a).iter_mut().zip(r).zip(self.left.row(a)) {
                    *o += s * rb + pj * lb;
                }
            }
        }
        if j == i {
            block.add_assign(&self.left_diag);
        }
    }

    fn accumulate(&self, i: usize, out: &mut [Matrix]) {
        for (j, block) in out.iter_mut().enumerate() {
            self.add_block(i, j, block);
        }
    }
}

fn rows_in_order<F>(n: usize, f: F) -> Result<JacobianBlocks>
where
    F: Fn(usize) -> Result<Vec<Matrix>> + Sync + Send,
{
    let rows = (0..n).into_par_iter().map(f).collect::<Result<Vec<_>>>()?;
    JacobianBlocks::from_block_rows(rows)
}

fn check_head(params: &MhaParams, h: usize) -> Result<()> {
    if h >= params.num_heads() {
        return Err(Error::Shape(format!("head {h} out of range for H = {}", params.num_heads())));
    }
    Ok(())
}

/// Jacobian of the dot-product head map `X ↦ P^h X`.
pub fn dp_jacobian(x: &Matrix, params: &MhaParams, h: usize, mask: Option<&MaskSet>) -> Result<JacobianBlocks> {
    if params.kind() != AttentionKind::DotProduct {
        return Err(Error::Unsupported("dp_jacobian needs dot-product parameters".into()));
    }
    check_head(params, h)?;
    let ctx = HeadContext::new(x, params, h, mask)?;
    let eye = Matrix::identity(x.cols());
    rows_in_order(x.rows(), |i| {
        let mut row = vec![Matrix::zeros(x.cols(), x.cols()); x.rows()];
        ctx.row_terms(i)?.with_left(&eye).accumulate(i, &mut row);
        Ok(row)
    })
}

/// Jacobian of the tied L2 head map `X ↦ P^h X A_h`:
///
/// ```text
/// J_ii = A (2 Cov_i A + P_ii I)
/// J_ij = A (2 P_ij (x_j − m_i)(x_i − x_j)ᵀ A + P_ij I)
/// ```
pub fn l2_jacobian_tied(x: &Matrix, params: &MhaParams, h: usize, mask: Option<&MaskSet>) -> Result<JacobianBlocks> {
    if params.kind() != AttentionKind::L2 || !params.is_tied() {
        return Err(Error::Unsupported(
            "l2_jacobian_tied needs tied L2 parameters; use l2_jacobian_untied otherwise".into(),
        ));
    }
    check_head(params, h)?;
    let ctx = HeadContext::new(x, params, h, mask)?;
    let a = ctx.a();
    let (n, d) = x.shape();
    rows_in_order(n, |i| {
        let p = ctx.attention_row(i)?;
        let (m, cov) = ctx.moments(&p);
        let xi = x.row(i);
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let mut inner = Matrix::zeros(d, d);
            if j == i {
                inner = cov.matmul(a).scale(2.0);
            } else if p[j] != 0.0 {
                let xj = x.row(j);
                let v: Vec<f64> = xj.iter().zip(&m).map(|(a, b)| a - b).collect();
                let w: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a - b).collect();
                let wa = a.t_matvec(&w);
                inner = Matrix::outer(&v, &wa).scale(2.0 * p[j]);
            }
            for c in 0..d {
                inner[(c, c)] += p[j];
            }
            row.push(a.matmul(&inner));
        }
        Ok(row)
    })
}

/// Jacobian of the L2 head map `X ↦ P^h X A_h` for arbitrary `W^Q`, `W^K`.
pub fn l2_jacobian_untied(x: &Matrix, params: &MhaParams, h: usize, mask: Option<&MaskSet>) -> Result<JacobianBlocks> {
    if params.kind() != AttentionKind::L2 {
        return Err(Error::Unsupported("l2_jacobian_untied needs L2 parameters".into()));
    }
    check_head(params, h)?;
    let ctx = HeadContext::new(x, params, h, mask)?;
    let d = x.cols();
    rows_in_order(x.rows(), |i| {
        let mut row = vec![Matrix::zeros(d, d); x.rows()];
        ctx.row_terms(i)?.with_left(ctx.a()).accumulate(i, &mut row);
        Ok(row)
    })
}

/// Jacobian of the head map before the value projection, dispatching on kind.
pub fn head_jacobian(x: &Matrix, params: &MhaParams, h: usize, mask: Option<&MaskSet>) -> Result<JacobianBlocks> {
    match (params.kind(), params.is_tied()) {
        (AttentionKind::DotProduct, _) => dp_jacobian(x, params, h, mask),
        (AttentionKind::L2, true) => l2_jacobian_tied(x, params, h, mask),
        (AttentionKind::L2, false) => l2_jacobian_untied(x, params, h, mask),
    }
}

/// Left factors `(W^{V,h} W^O_h)ᵀ · A_h` (L2) or `(W^{V,h} W^O_h)ᵀ` (DP), where
/// `W^O_h` is the row slice of `W^O` belonging to head `h`.
pub(crate) fn head_output_factor(params: &MhaParams, h: usize) -> Matrix {
    let dh = params.head_dim();
    let wo_h = params.wo().row_range(h * dh, (h + 1) * dh);
    let b = params.head(h).wv.matmul(&wo_h).transpose();
    match params.kind() {
        AttentionKind::DotProduct => b,
        AttentionKind::L2 => b.matmul(&params.a_matrix(h)),
    }
}

pub(crate) struct MhaContext<'a> {
    heads: Vec<HeadContext<'a>>,
    left: Vec<Matrix>,
    d: usize,
}

impl<'a> MhaContext<'a> {
    pub(crate) fn new(x: &'a Matrix, params: &'a MhaParams, mask: Option<&'a MaskSet>) -> Result<Self> {
        let heads = (0..params.num_heads()).map(|h| HeadContext::new(x, params, h, mask)).collect::<Result<_>>()?;
        let left = (0..params.num_heads()).map(|h| head_output_factor(params, h)).collect();
        Ok(Self { heads, left, d: params.d_model() })
    }

    pub(crate) fn n(&self) -> usize {
        self.heads[0].n()
    }

    /// Block row `i` of the full multihead Jacobian.
    pub(crate) fn row(&self, i: usize) -> Result<Vec<Matrix>> {
        let mut row = vec![Matrix::zeros(self.d, self.d); self.n()];
        for (ctx, left) in self.heads.iter().zip(&self.left) {
            ctx.row_terms(i)?.with_left(left).accumulate(i, &mut row);
        }
        Ok(row)
    }

    /// `‖J_i:‖_∞` and the maximizing scalar row, without storing the blocks.
    pub(crate) fn row_norm_inf(&self, i: usize) -> Result<(f64, usize)> {
        let terms = self
            .heads
            .iter()
            .zip(&self.left)
            .map(|(ctx, left)| Ok(ctx.row_terms(i)?.with_left(left)))
            .collect::<Result<Vec<_>>>()?;
        let mut sums = vec![0.0; self.d];
        let mut block = Matrix::zeros(self.d, self.d);
        for j in 0..self.n() {
            block.as_mut_slice().fill(0.0);
            for t in &terms {
                t.add_block(i, j, &mut block);
            }
            for (a, s) in sums.iter_mut().enumerate() {
                *s += block.row(a).iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        Ok(sums.iter().enumerate().fold((f64::NEG_INFINITY, 0), |best, (a, &s)| if s > best.0 { (s, a) } else { best }))
    }
}

/// `‖J_i:‖_∞` of every block row of the multihead Jacobian.
pub fn mha_row_norms_inf(x: &Matrix, params: &MhaParams, mask: Option<&MaskSet>) -> Result<Vec<f64>> {
    let ctx = MhaContext::new(x, params, mask)?;
    (0..x.rows()).into_par_iter().map(|i| ctx.row_norm_inf(i).map(|r| r.0)).collect()
}

/// Gradient with respect to X of `Σ_j ⟨S_j, J_ij(X)⟩`, the pairing of a fixed
/// weight block row `S` with block row `i` of the multihead Jacobian.
///
/// Analytic for tied L2 parameters. Costs `O(N D³)` per head, the same order
/// as computing the block row itself.
pub fn mha_row_gradient(x: &Matrix, params: &MhaParams, i: usize, s: &[Matrix]) -> Result<Matrix> {
    if params.kind() != AttentionKind::L2 || !params.is_tied() {
        return Err(Error::Unsupported("analytic row gradient needs tied L2 parameters".into()));
    }
    let (n, d) = x.shape();
    if i >= n || s.len() != n || s.iter().any(|b| b.shape() != (d, d)) {
        return Err(Error::Shape(format!("need row < {n} and {n} weight blocks of {d}x{d}")));
    }
    let ctx = MhaContext::new(x, params, None)?;
    let mut grad = Matrix::zeros(n, d);
    for (head, left) in ctx.heads.iter().zip(&ctx.left) {
        tied_head_adjoint(head, left, i, s, &mut grad)?;
    }
    Ok(grad)
}

/// Adds the gradient of `Σ_j ⟨S_j, left · J̃_ij⟩` for one tied L2 head, where
/// `J̃_ii = 2 Cov A + P_ii I` and `J̃_ij = 2 P_ij v_j w_jᵀ A + P_ij I` with
/// `v_j = x_j − m` and `w_j = x_i − x_j`.
fn tied_head_adjoint(ctx: &HeadContext<'_>, left: &Matrix, i: usize, s: &[Matrix], grad: &mut Matrix) -> Result<()> {
    let x = ctx.x;
    let (n, d) = x.shape();
    let a = &ctx.a;
    let p = ctx.attention_row(i)?;
    let (m, _) = ctx.moments(&p);
    let v = ctx.centred(&m);
    // rows L v_j and A x_j (A is symmetric)
    let lv = v.matmul_t(left);
    let xa = x.matmul(a);

    let mut dp = vec![0.0; n];
    let mut dv = Matrix::zeros(n, d);
    let (mut aw, mut t1, mut t2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for j in 0..n {
        let sj = &s[j];
        dp[j] += dot(left.as_slice(), sj.as_slice());
        if j == i || p[j] == 0.0 {
            continue;
        }
        // ⟨S_j, 2 p_j L v_j (A w_j)ᵀ⟩ with w_j = x_i − x_j
        for c in 0..d {
            aw[c] = xa[(i, c)] - xa[(j, c)];
        }
        t2.fill(0.0);
        for r in 0..d {
            t1[r] = dot(sj.row(r), &aw);
            axpy(lv[(j, r)], sj.row(r), &mut t2);
        }
        let pj2 = 2.0 * p[j];
        dp[j] += 2.0 * dot(lv.row(j), &t1);
        for r in 0..d {
            axpy(pj2 * t1[r], left.row(r), dv.row_mut(j));
            let c = pj2 * t2[r];
            for col in 0..d {
                let val = c * a[(r, col)];
                grad[(i, col)] += val;
                grad[(j, col)] -= val;
            }
        }
    }

    // ⟨S_i, 2 L Cov A⟩ = ⟨dC, Cov⟩, Cov = Σ_k p_k v_k v_kᵀ
    let dc = left.t_matmul(&s[i]).matmul(a).scale(2.0);
    let sym = dc.add(&dc.transpose());
    for k in 0..n {
        if p[k] == 0.0 {
            continue;
        }
        let vk = v.row(k);
        for r in 0..d {
            t1[r] = dot(dc.row(r), vk);
            t2[r] = dot(sym.row(r), vk);
        }
        dp[k] += dot(vk, &t1);
        axpy(p[k], &t2, dv.row_mut(k));
    }

    // v_k = x_k − m, m = Σ_k p_k x_k
    let mut dm = vec![0.0; d];
    for k in 0..n {
        axpy(1.0, dv.row(k), grad.row_mut(k));
        axpy(-1.0, dv.row(k), &mut dm);
    }
    for k in 0..n {
        dp[k] += dot(&dm, x.row(k));
        axpy(p[k], &dm, grad.row_mut(k));
    }

    // softmax, then l_j = −(x_i − x_j)ᵀ A (x_i − x_j)
    let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
    for j in 0..n {
        let dl = p[j] * (dp[j] - mean);
        if dl == 0.0 || j == i {
            continue;
        }
        for c in 0..d {
            let val = 2.0 * dl * (xa[(i, c)] - xa[(j, c)]);
            grad[(i, c)] -= val;
            grad[(j, c)] += val;
        }
    }
    Ok(())
}

/// Block row `i` of the Jacobian of [`mha_forward`](crate::attention::mha_forward).
pub fn mha_jacobian_row(x: &Matrix, params: &MhaParams, mask: Option<&MaskSet>, i: usize) -> Result<Vec<Matrix>> {
    if i >= x.rows() {
        return Err(Error::Shape(format!("row {i} out of range for N = {}", x.rows())));
    }
    MhaContext::new(x, params, mask)?.row(i)
}

/// Jacobian of the full multihead map `X ↦ [f^h(X) W^{V,h}]_h W^O`.
pub fn mha_jacobian(x: &Matrix, params: &MhaParams, mask: Option<&MaskSet>) -> Result<JacobianBlocks> {
    let ctx = MhaContext::new(x, params, mask)?;
    rows_in_order(x.rows(), |i| ctx.row(i))
}

/// `∂LN/∂x = (σ²+ε)^{-1/2} [diag γ − γ𝟙ᵀ/D − (σ²+ε)^{-1} diag(γ)(x−μ)(x−μ)ᵀ/D]`.
pub fn layernorm_jacobian(x: &[f64], p: &LayerNormParams) -> Result<Matrix> {
    p.check_input(x)?;
    let d = x.len();
    let (mu, var) = moments(x);
    let s = var + p.eps();
    let inv = 1.0 / s.sqrt();
    let df = d as f64;
    let g = p.gamma();
    Ok(Matrix::from_fn(d, d, |a, b| {
        let eye = if a == b { g[a] } else { 0.0 };
        inv * (eye - g[a] / df - g[a] * (x[a] - mu) * (x[b] - mu) / (s * df))
    }))
}

/// Central differences `(f(X + h e) − f(X − h e)) / 2h` over every input
/// coordinate.
pub fn finite_diff_jacobian<F>(f: F, x: &Matrix, h: f64) -> Result<JacobianBlocks>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let y0 = f(x)?;
    let (n, in_dim) = x.shape();
    if y0.rows() != n {
        return Err(Error::Shape("finite_diff_jacobian needs a row-preserving map".into()));
    }
    let out_dim = y0.cols();
    let mut jac = JacobianBlocks::zeros(n, out_dim, in_dim);
    let mut xp = x.clone();
    for j in 0..n {
        for b in 0..in_dim {
            let orig = x[(j, b)];
            xp[(j, b)] = orig + h;
            let plus = f(&xp)?;
            xp[(j, b)] = orig - h;
            let minus = f(&xp)?;
            xp[(j, b)] = orig;
            for i in 0..n {
                let block = jac.block_mut(i, j);
                for a in 0..out_dim {
                    block[(a, b)] = (plus[(i, a)] - minus[(i, a)]) / (2.0 * h);
                }
            }
        }
    }
    Ok(jac)
}

/// Finite-difference Jacobian of a vector map.
pub fn finite_diff_vector<F>(f: F, x: &[f64], h: f64) -> Result<Matrix>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let jac = finite_diff_jacobian(|m: &Matrix| Matrix::from_vec(1, m.cols(), f(m.row(0))?), &xm, h)?;
    Ok(jac.block(0, 0).clone())
}

/// Operator norm of an assembled Jacobian and the backend that produced it.
pub fn jacobian_norm(j: &JacobianBlocks, p: NormKind) -> Result<(f64, NormBackend)> {
    let m = j.assemble();
    match p {
        NormKind::Inf => Ok((op_norm_inf(&m), NormBackend::ClosedForm)),
        NormKind::Two => {
            if m.rows().min(m.cols()) <= EXACT_SPECTRAL_MAX_DIM {
                Ok((spectral_norm_oracle(&m)?, NormBackend::Exact))
            } else {
                let (s, _) = power_iteration(&m, FALLBACK_POWER_ITERS, 0)?;
                Ok((s, NormBackend::PowerIteration { iters: FALLBACK_POWER_ITERS }))
            }
        }
    }
}

/// `‖J_i:‖_∞` of one block row: the largest absolute row sum across its blocks.
pub fn block_row_norm_inf(row: &[Matrix]) -> (f64, usize) {
    let out = row[0].rows();
    (0..out)
        .map(|a| (row.iter().map(|b| b.row(a).iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>(), a))
        .fold((f64::NEG_INFINITY, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}
