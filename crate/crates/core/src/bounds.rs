//! Closed-form Lipschitz upper bounds for tied L2 multihead attention,
//! LayerNorm, dropout and their compositions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{head_attention, AttentionKind, LayerNormParams, MaskSet, MhaParams};
use crate::error::{Error, Result};
use crate::tensor::{op_norm_inf, Matrix, phi_inv, spectral_norm, NormBackend, NormKind};

/// An upper bound together with the factors it multiplies out from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub p: NormKind,
    pub value: f64,
    /// `φ⁻¹(N − 1)` at the effective `N`.
    pub phi_term: f64,
    pub weight_factors: BTreeMap<String, f64>,
    pub n: usize,
    pub d: usize,
    pub h: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_effective_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row_unmasked_counts: Option<Vec<usize>>,
    pub backend: NormBackend,
}

impl BoundReport {
    /// Multiplies the recorded factors back together.
    pub fn recombine(&self) -> f64 {
        self.weight_factors.values().product()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn require_tied_l2(params: &MhaParams) -> Result<()> {
    if params.kind() != AttentionKind::L2 || !params.is_tied() {
        return Err(Error::Unsupported("bound holds only for tied L2 attention".into()));
    }
    Ok(())
}

fn require_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Domain(format!("bounds need N >= 2, got {n}")));
    }
    Ok(())
}

fn inf_report(params: &MhaParams, n: usize, effective_n: usize) -> Result<BoundReport> {
    let phi_term = phi_inv((effective_n - 1) as f64)?;
    let n_factor = 4.0 * phi_term + 1.0 / params.logit_scale();
    let wo = op_norm_inf(&params.wo().transpose());
    let wq = params
        .heads()
        .iter()
        .map(|h| op_norm_inf(&h.wq) * op_norm_inf(&h.wq.transpose()))
        .fold(0.0, f64::max);
    let wv = params.heads().iter().map(|h| op_norm_inf(&h.wv.transpose())).fold(0.0, f64::max);
    let weight_factors = BTreeMap::from([
        ("n_factor".to_string(), n_factor),
        ("wo_t_inf".to_string(), wo),
        ("max_wq_inf_wq_t_inf".to_string(), wq),
        ("max_wv_t_inf".to_string(), wv),
    ]);
    Ok(BoundReport {
        p: NormKind::Inf,
        value: n_factor * wo * wq * wv,
        phi_term,
        weight_factors,
        n,
        d: params.d_model(),
        h: params.num_heads(),
        masked_effective_n: None,
        row_unmasked_counts: None,
        backend: NormBackend::ClosedForm,
    })
}

/// `(4φ⁻¹(N−1) + 1/√(D/H)) ‖W^Oᵀ‖_∞ max_h ‖W^{Q,h}‖_∞‖W^{Q,hᵀ}‖_∞ max_h ‖W^{V,hᵀ}‖_∞`.
pub fn bound_inf(params: &MhaParams, n: usize) -> Result<BoundReport> {
    require_tied_l2(params)?;
    require_n(n)?;
    inf_report(params, n, n)
}

/// `√N/√(D/H) (4φ⁻¹(N−1) + 1) √(Σ_h ‖W^{Q,h}‖₂² ‖W^{V,h}‖₂²) ‖W^O‖₂`.
///
/// Spectral norms are exact for weights up to 256 on a side and use power
/// iteration beyond that; the report records which.
pub fn bound_2(params: &MhaParams, n: usize) -> Result<BoundReport> {
    require_tied_l2(params)?;
    require_n(n)?;
    let phi_term = phi_inv((n - 1) as f64)?;
    let n_factor = (n as f64).sqrt() / params.logit_scale() * (4.0 * phi_term + 1.0);
    let mut backend = NormBackend::Exact;
    let mut note = |b: NormBackend| {
        if b != NormBackend::Exact {
            backend = b;
        }
    };
    let mut sum = 0.0;
    for head in params.heads() {
        let (q, bq) = spectral_norm(&head.wq)?;
        let (v, bv) = spectral_norm(&head.wv)?;
        note(bq);
        note(bv);
        sum += q * q * v * v;
    }
    let (wo, bo) = spectral_norm(params.wo())?;
    note(bo);
    let qv = sum.sqrt();
    let weight_factors = BTreeMap::from([
        ("n_factor".to_string(), n_factor),
        ("sqrt_sum_wq2_wv2".to_string(), qv),
        ("wo_2".to_string(), wo),
    ]);
    Ok(BoundReport {
        p: NormKind::Two,
        value: n_factor * qv * wo,
        phi_term,
        weight_factors,
        n,
        d: params.d_model(),
        h: params.num_heads(),
        masked_effective_n: None,
        row_unmasked_counts: None,
        backend,
    })
}

/// Bound for either norm.
pub fn bound(params: &MhaParams, n: usize, p: NormKind) -> Result<BoundReport> {
    match p {
        NormKind::Inf => bound_inf(params, n),
        NormKind::Two => bound_2(params, n),
    }
}

/// [`bound_inf`] with `N` replaced by the largest number of unmasked
/// positions in any row.
///
/// Every token must attend to itself. A row whose only unmasked position is
/// the diagonal is allowed and contributes `φ⁻¹(0) = 0`.
pub fn bound_masked_inf(params: &MhaParams, n: usize, mask: &MaskSet) -> Result<BoundReport> {
    require_tied_l2(params)?;
    if mask.n() != n {
        return Err(Error::Mask(format!("mask for N = {} used with N = {n}", mask.n())));
    }
    if let Some(i) = (0..n).find(|&i| mask.contains(i, i)) {
        return Err(Error::Mask(format!("row {i} masks its own position")));
    }
    let counts = mask.row_unmasked_counts();
    let effective = counts.iter().copied().max().unwrap_or(0);
    if effective == 0 {
        return Err(Error::Domain("masked bound needs N >= 1".into()));
    }
    let mut report = inf_report(params, n, effective)?;
    report.masked_effective_n = Some(effective);
    report.row_unmasked_counts = Some(counts);
    Ok(report)
}

/// `ε^{-1/2} max_d |γ_d| (D² − 2) / D`.
pub fn layernorm_bound_inf(p: &LayerNormParams, d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::Domain(format!("layer norm bound needs D >= 2, got {d}")));
    }
    if p.dim() != d {
        return Err(Error::Shape(format!("layer norm has dimension {} but D = {d}", p.dim())));
    }
    let gmax = p.gamma().iter().map(|g| g.abs()).fold(0.0, f64::max);
    let df = d as f64;
    Ok(gmax * (df * df - 2.0) / df / p.eps().sqrt())
}

/// Lipschitz constant of a composition: the product of the factors.
pub fn composition_bound(factors: &[f64]) -> Result<f64> {
    if let Some(f) = factors.iter().find(|f| !(**f >= 0.0)) {
        return Err(Error::Domain(format!("Lipschitz factors must be >= 0, got {f}")));
    }
    Ok(factors.iter().product())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Dropout scales by the keep probability at evaluation time and applies a
/// binary diagonal mask (norm at most 1) during training.
pub fn dropout_factor(keep_prob: f64, mode: DropoutMode) -> Result<f64> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Domain(format!("keep probability must be in (0, 1], got {keep_prob}")));
    }
    Ok(match mode {
        DropoutMode::Eval => keep_prob,
        DropoutMode::Train => 1.0,
    })
}

/// Weighted spreads behind the tied L2 bound for one query row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceTerms {
    /// `Σ_j P_ij ‖y_j − Σ_k P_ik y_k‖²`.
    pub about_mean: f64,
    /// `Σ_j P_ij ‖y_j − y_i‖²`.
    pub about_query: f64,
}

/// [`TraceTerms`] for row `i` of head `h`, with `y_j = √A x_j` so that the
/// logits are `−‖y_i − y_j‖²`. Both terms are at most `φ⁻¹(N − 1)`.
pub fn trace_terms(x: &Matrix, params: &MhaParams, h: usize, i: usize) -> Result<TraceTerms> {
    require_tied_l2(params)?;
    if i >= x.rows() {
        return Err(Error::Domain(format!("row {i} out of range for N = {}", x.rows())));
    }
    let p = head_attention(x, params, h, None)?;
    let s = params.logit_scale().sqrt();
    let y = x.matmul(&params.head(h).wq).scale(1.0 / s);
    let pi = p.as_matrix().row(i);
    let mean = y.t_matvec(pi);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    let (mut about_mean, mut about_query) = (0.0, 0.0);
    for (j, pj) in pi.iter().enumerate() {
        about_mean += pj * sq(y.row(j), &mean);
        about_query += pj * sq(y.row(j), y.row(i));
    }
    Ok(TraceTerms { about_mean, about_query })
}
