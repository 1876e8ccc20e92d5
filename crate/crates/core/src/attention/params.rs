use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Which logit function a multihead attention layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Scaled dot-product logits `q_i·k_j / √(D/H)`.
    #[serde(rename = "DP")]
    DotProduct,
    /// Negative scaled squared distances `-‖q_i - k_j‖² / √(D/H)`.
    #[serde(rename = "L2")]
    L2,
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionKind::DotProduct => write!(f, "DP"),
            AttentionKind::L2 => write!(f, "L2"),
        }
    }
}

/// Weights of a single attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// D × D/H query projection.
    pub wq: Matrix,
    /// D × D/H key projection.
    pub wk: Matrix,
    /// D × D/H value projection.
    pub wv: Matrix,
    pub bq: Option<Vec<f64>>,
    pub bk: Option<Vec<f64>>,
}

impl HeadWeights {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Self {
        Self { wq, wk, wv, bq: None, bk: None }
    }

    pub fn tied(wq: Matrix, wv: Matrix) -> Self {
        Self { wk: wq.clone(), wq, wv, bq: None, bk: None }
    }
}

/// Multihead self-attention parameters, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    d_model: usize,
    kind: AttentionKind,
    tied: bool,
    heads: Vec<HeadWeights>,
    wo: Matrix,
}

impl MhaParams {
    pub fn new(kind: AttentionKind, tied: bool, heads: Vec<HeadWeights>, wo: Matrix) -> Result<Self> {
        let h = heads.len();
        if h == 0 {
            return Err(Error::Shape("at least one head is required".into()));
        }
        let d = wo.rows();
        if wo.cols() != d {
            return Err(Error::Shape(format!("W^O must be DxD, got {:?}", wo.shape())));
        }
        if d == 0 || !d.is_multiple_of(h) {
            return Err(Error::Shape(format!("H = {h} must divide D = {d}")));
        }
        let dh = d / h;
        for (idx, head) in heads.iter().enumerate() {
            for (name, w) in [("wq", &head.wq), ("wk", &head.wk), ("wv", &head.wv)] {
                if w.shape() != (d, dh) {
                    return Err(Error::Shape(format!(
                        "head {idx}: {name} must be {d}x{dh}, got {:?}",
                        w.shape()
                    )));
                }
            }
            if tied && head.wq != head.wk {
                return Err(Error::Domain(format!("head {idx}: tied parameters need wq == wk")));
            }
            let has_bias = head.bq.is_some() || head.bk.is_some();
            if has_bias && kind == AttentionKind::L2 {
                return Err(Error::Unsupported("biases are only supported for dot-product attention".into()));
            }
            for (name, b) in [("bq", &head.bq), ("bk", &head.bk)] {
                if let Some(b) = b {
                    if b.len() != dh {
                        return Err(Error::Shape(format!(
                            "head {idx}: {name} must have length {dh}, got {}",
                            b.len()
                        )));
                    }
                }
            }
        }
        Ok(Self { d_model: d, kind, tied, heads, wo })
    }

    /// Every projection is the identity (head `h` takes columns
    /// `h·D/H .. (h+1)·D/H` of `I_D`), and `W^O = I`.
    pub fn identity(kind: AttentionKind, d: usize, h: usize) -> Result<Self> {
        if h == 0 || d == 0 || !d.is_multiple_of(h) {
            return Err(Error::Shape(format!("H = {h} must divide D = {d}")));
        }
        let dh = d / h;
        let eye = Matrix::identity(d);
        let heads = (0..h)
            .map(|k| {
                let slice = eye.col_range(k * dh, (k + 1) * dh);
                HeadWeights::tied(slice.clone(), slice)
            })
            .collect();
        Self::new(kind, true, heads, eye)
    }

    /// Glorot-uniform weights `U[-√(1/(d_in+d_out)), √(1/(d_in+d_out))]`.
    pub fn random<R: Rng + ?Sized>(kind: AttentionKind, tied: bool, d: usize, h: usize, rng: &mut R) -> Result<Self> {
        if h == 0 || d == 0 || !d.is_multiple_of(h) {
            return Err(Error::Shape(format!("H = {h} must divide D = {d}")));
        }
        let dh = d / h;
        let lim_head = (1.0 / (d + dh) as f64).sqrt();
        let lim_out = (1.0 / (2 * d) as f64).sqrt();
        let heads = (0..h)
            .map(|_| {
                let wq = Matrix::random_uniform(d, dh, -lim_head, lim_head, rng);
                let wk = if tied { wq.clone() } else { Matrix::random_uniform(d, dh, -lim_head, lim_head, rng) };
                let wv = Matrix::random_uniform(d, dh, -lim_head, lim_head, rng);
                HeadWeights::new(wq, wk, wv)
            })
            .collect();
        let wo = Matrix::random_uniform(d, d, -lim_out, lim_out, rng);
        Self::new(kind, tied, heads, wo)
    }

    pub fn with_biases(mut self, bq: Vec<Vec<f64>>, bk: Vec<Vec<f64>>) -> Result<Self> {
        if bq.len() != self.heads.len() || bk.len() != self.heads.len() {
            return Err(Error::Shape("one bias vector per head is required".into()));
        }
        for (head, (q, k)) in self.heads.iter_mut().zip(bq.into_iter().zip(bk)) {
            head.bq = Some(q);
            head.bk = Some(k);
        }
        Self::new(self.kind, self.tied, self.heads, self.wo)
    }

    #[inline]
    pub fn d_model(&self) -> usize {
        self.d_model
    }

    #[inline]
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// D/H.
    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.len()
    }

    /// √(D/H), the logit divisor.
    #[inline]
    pub fn logit_scale(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }

    #[inline]
    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    #[inline]
    pub fn is_tied(&self) -> bool {
        self.tied
    }

    pub fn heads(&self) -> &[HeadWeights] {
        &self.heads
    }

    pub fn head(&self, h: usize) -> &HeadWeights {
        &self.heads[h]
    }

    pub fn wo(&self) -> &Matrix {
        &self.wo
    }

    /// The head's `A` matrix.
    ///
    /// L2: `A_h = W^Q W^Qᵀ / √(D/H)`, the extra right factor in `f^h = P X A_h`.
    /// DP: `A = W^K W^Qᵀ / √(D/H)`, so that logits are `x_iᵀ Aᵀ x_j`.
    pub fn a_matrix(&self, h: usize) -> Matrix {
        let head = &self.heads[h];
        let s = self.logit_scale();
        match self.kind {
            AttentionKind::L2 => head.wq.matmul_t(&head.wq).scale(1.0 / s),
            AttentionKind::DotProduct => head.wk.matmul_t(&head.wq).scale(1.0 / s),
        }
    }

    /// Copy with every head's value projection multiplied by `t`.
    pub fn scale_values(&self, t: f64) -> Self {
        let mut out = self.clone();
        for head in &mut out.heads {
            head.wv = head.wv.scale(t);
        }
        out
    }

    /// Copy with every head's query (and, when tied, key) projection multiplied by `t`.
    pub fn scale_queries(&self, t: f64) -> Self {
        let mut out = self.clone();
        for head in &mut out.heads {
            head.wq = head.wq.scale(t);
            if self.tied {
                head.wk = head.wq.clone();
            }
        }
        out
    }

    pub fn with_wo(&self, wo: Matrix) -> Result<Self> {
        Self::new(self.kind, self.tied, self.heads.clone(), wo)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ParamsFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(s)?;
        file.try_into()
    }
}

/// On-disk parameter layout. Matrices are flat row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub kind: AttentionKind,
    pub tied: bool,
    pub wq: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wk: Option<Vec<Vec<f64>>>,
    pub wv: Vec<Vec<f64>>,
    pub wo: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bq: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bk: Option<Vec<Vec<f64>>>,
}

impl From<&MhaParams> for ParamsFile {
    fn from(p: &MhaParams) -> Self {
        let flat = |f: fn(&HeadWeights) -> &Matrix| -> Vec<Vec<f64>> {
            p.heads.iter().map(|h| f(h).as_slice().to_vec()).collect()
        };
        let bias = |f: fn(&HeadWeights) -> &Option<Vec<f64>>| -> Option<Vec<Vec<f64>>> {
            p.heads.iter().map(|h| f(h).clone()).collect()
        };
        ParamsFile {
            h: p.num_heads(),
            d: p.d_model,
            kind: p.kind,
            tied: p.tied,
            wq: flat(|h| &h.wq),
            wk: Some(flat(|h| &h.wk)),
            wv: flat(|h| &h.wv),
            wo: p.wo.as_slice().to_vec(),
            bq: bias(|h| &h.bq),
            bk: bias(|h| &h.bk),
        }
    }
}

impl TryFrom<ParamsFile> for MhaParams {
    type Error = Error;

    fn try_from(f: ParamsFile) -> Result<Self> {
        if f.h == 0 || !f.d.is_multiple_of(f.h) {
            return Err(Error::Shape(format!("H = {} must divide D = {}", f.h, f.d)));
        }
        let dh = f.d / f.h;
        let per_head = |name: &str, v: &[Vec<f64>]| -> Result<Vec<Matrix>> {
            if v.len() != f.h {
                return Err(Error::Shape(format!("{name}: expected {} heads, got {}", f.h, v.len())));
            }
            v.iter().map(|w| Matrix::from_vec(f.d, dh, w.clone())).collect()
        };
        let wq = per_head("wq", &f.wq)?;
        let wk = match &f.wk {
            Some(wk) => per_head("wk", wk)?,
            None if f.tied => wq.clone(),
            None => return Err(Error::Shape("wk is required for untied parameters".into())),
        };
        let wv = per_head("wv", &f.wv)?;
        let wo = Matrix::from_vec(f.d, f.d, f.wo)?;
        let biases = |name: &str, b: Option<Vec<Vec<f64>>>| -> Result<Vec<Option<Vec<f64>>>> {
            match b {
                None => Ok(vec![None; f.h]),
                Some(b) if b.len() == f.h => Ok(b.into_iter().map(Some).collect()),
                Some(b) => Err(Error::Shape(format!("{name}: expected {} heads, got {}", f.h, b.len()))),
            }
        };
        let bq = biases("bq", f.bq)?;
        let bk = biases("bk", f.bk)?;
        let heads = wq
            .into_iter()
            .zip(wk)
            .zip(wv)
            .zip(bq.into_iter().zip(bk))
            .map(|(((wq, wk), wv), (bq, bk))| HeadWeights { wq, wk, wv, bq, bk })
            .collect();
        MhaParams::new(f.kind, f.tied, heads, wo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_dim_must_divide() {
        assert!(MhaParams::identity(AttentionKind::L2, 6, 4).is_err());
        let p = MhaParams::identity(AttentionKind::L2, 6, 3).unwrap();
        assert_eq!(p.head_dim(), 2);
        assert_eq!(p.head(1).wq.col_vec(0), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tied_requires_equal_projections() {
        let w = Matrix::identity(2);
        let heads = vec![HeadWeights::new(w.clone(), w.scale(2.0), w.clone())];
        assert!(MhaParams::new(AttentionKind::L2, true, heads.clone(), w.clone()).is_err());
        assert!(MhaParams::new(AttentionKind::L2, false, heads, w).is_ok());
    }

    #[test]
    fn l2_rejects_biases() {
        let p = MhaParams::identity(AttentionKind::L2, 2, 1).unwrap();
        let err = p.with_biases(vec![vec![0.0; 2]], vec![vec![0.0; 2]]).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
        let dp = MhaParams::identity(AttentionKind::DotProduct, 2, 1).unwrap();
        assert!(dp.clone().with_biases(vec![vec![0.0; 2]], vec![vec![0.0; 2]]).is_ok());
        assert!(dp.with_biases(vec![vec![0.0; 3]], vec![vec![0.0; 2]]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MhaParams::random(AttentionKind::DotProduct, false, 4, 2, &mut rng)
            .unwrap()
            .with_biases(vec![vec![0.5, -0.5]; 2], vec![vec![1.0, 2.0]; 2])
            .unwrap();
        let back = MhaParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn json_uses_documented_keys() {
        let p = MhaParams::identity(AttentionKind::L2, 2, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        for key in ["H", "D", "kind", "tied", "wq", "wk", "wv", "wo"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["kind"], "L2");
        assert!(v.get("bq").is_none());
    }

    #[test]
    fn json_tied_may_omit_wk() {
        let s = r#"{"H":1,"D":1,"kind":"L2","tied":true,"wq":[[2.0]],"wv":[[1.0]],"wo":[1.0]}"#;
        let p = MhaParams::from_json(s).unwrap();
        assert_eq!(p.head(0).wk[(0, 0)], 2.0);
        let bad = r#"{"H":1,"D":2,"kind":"L2","tied":true,"wq":[[2.0]],"wv":[[1.0]],"wo":[1.0]}"#;
        assert!(MhaParams::from_json(bad).is_err());
    }
}
