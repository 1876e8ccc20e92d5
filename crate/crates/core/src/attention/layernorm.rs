use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    eps: f64,
}

impl LayerNormParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("layer norm eps must be > 0, got {eps}")));
        }
        if gamma.len() != beta.len() {
            return Err(Error::Shape(format!(
                "gamma has length {} but beta has length {}",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(Self { gamma, beta, eps })
    }

    /// γ = 1, β = 0.
    pub fn standard(d: usize, eps: f64) -> Result<Self> {
        Self::new(vec![1.0; d], vec![0.0; d], eps)
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.is_empty() || x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "layer norm expects a vector of length {} >= 1, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }
}

/// Mean and (biased) variance.
pub(crate) fn moments(x: &[f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, var)
}

/// `(x - μ) / sqrt(σ² + ε) ⊙ γ + β`.
pub fn layer_norm(x: &[f64], p: &LayerNormParams) -> Result<Vec<f64>> {
    p.check_input(x)?;
    let (mu, var) = moments(x);
    let inv = 1.0 / (var + p.eps).sqrt();
    Ok(x.iter()
        .zip(p.gamma.iter().zip(&p.beta))
        .map(|(&xi, (&g, &b))| (xi - mu) * inv * g + b)
        .collect())
}
