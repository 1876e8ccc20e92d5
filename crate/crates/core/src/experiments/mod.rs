//! Desk-scale experiments: bound tightness, invertibility and the
//! dot-product divergence demo. Every runner is deterministic under its seed.

mod adam;
mod plot;
mod search;
mod selftest;

pub use adam::{adam_ascend, adam_maximize, AdamOptions, AdamOutcome, AdamState, STOP_WINDOW};
pub use plot::plot_csv;
pub use search::{
    jacobian_objective, lower_bound_search, maximize_jacobian_norm, random_start, GradientMethod, SearchOptions, SweepRow,
};
pub use selftest::{selftest, CheckResult};

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mha_forward, AttentionKind, MhaParams};
use crate::bounds::bound_inf;
use crate::contractive::{adversarial_batch, error_curve};
use crate::error::{Error, Result};
use crate::tensor::NormKind;

pub const SWEEP_SCHEMA: &str = "lipattn.sweep/1";
pub const INVERT_SCHEMA: &str = "lipattn.invert/1";
pub const DIVERGE_SCHEMA: &str = "lipattn.diverge/1";

/// Shortest round-trip text, in exponent form outside `[1e-4, 1e15)`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

/// Writes `#schema=<tag>`, a header row and the records.
pub fn write_csv<W: Write>(mut out: W, schema: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    writeln!(out, "#schema={schema}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep_header(top_k: usize) -> Vec<String> {
    let mut h = vec!["n".to_string(), "p".into(), "upper".into()];
    h.extend((1..=top_k).map(|k| format!("lower_{k}")));
    h.extend(["restarts".to_string(), "seed".into()]);
    h
}

impl SweepRow {
    pub fn to_record(&self) -> Vec<String> {
        let mut r = vec![self.n.to_string(), self.p.to_string(), fmt_f64(self.upper_bound)];
        r.extend(self.lower_bounds.iter().copied().map(fmt_f64));
        r.extend([self.restarts.to_string(), self.seed.to_string()]);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub n_list: Vec<usize>,
    pub d: usize,
    pub h: usize,
    pub p: NormKind,
    pub restarts: usize,
    pub top_k: usize,
    pub seed: u64,
    pub search: SearchOptions,
}

/// Runs [`lower_bound_search`] for every `N`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.n_list.is_empty() || cfg.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("n_list must be nonempty and strictly ascending".into()));
    }
    cfg.n_list
        .iter()
        .map(|&n| lower_bound_search(n, cfg.d, cfg.h, cfg.p, cfg.restarts, cfg.top_k, cfg.seed, &cfg.search))
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let top_k = rows.first().map_or(0, |r| r.lower_bounds.len());
    let records: Vec<_> = rows.iter().map(SweepRow::to_record).collect();
    write_csv(out, SWEEP_SCHEMA, &sweep_header(top_k), &records)
}

/// [`run_sweep`] written to `out_path` as CSV.
///
/// The file is written before dominance is checked, so a violating run still
/// leaves its data behind; the violation is then returned as an error.
pub fn bound_tightness_sweep(cfg: &SweepConfig, out_path: &Path) -> Result<Vec<SweepRow>> {
    let rows = run_sweep(cfg)?;
    write_sweep_csv(&rows, BufWriter::new(File::create(out_path)?))?;
    for r in &rows {
        r.check_dominance()?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    /// Raw dot-product attention scaled by `c`.
    #[serde(rename = "DP")]
    Dp,
    /// Tied L2 attention divided by its ∞-norm bound, scaled by `c`.
    #[serde(rename = "L2-contractive")]
    L2Contractive,
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridKind::Dp => "DP",
            GridKind::L2Contractive => "L2-contractive",
        })
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dp" => Ok(GridKind::Dp),
            "l2" | "l2-contractive" => Ok(GridKind::L2Contractive),
            _ => Err(Error::Domain(format!("unknown kind {s:?}; expected DP or L2-contractive"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub kind: GridKind,
    pub c_list: Vec<f64>,
    pub iter_list: Vec<usize>,
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub batch: usize,
    /// Half-width of the uniform draw for the nonzero rows.
    pub u: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub kind: GridKind,
    pub c: f64,
    pub iters: usize,
    pub max_error: f64,
}

/// Random weights from stream 0 and the adversarial batch from stream 1, so
/// both kinds see the same inputs under one seed.
fn grid_inputs(cfg: &GridConfig) -> Result<(MhaParams, Vec<crate::tensor::Matrix>)> {
    let mut wrng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = match cfg.kind {
        GridKind::Dp => MhaParams::random(AttentionKind::DotProduct, false, cfg.d, cfg.h, &mut wrng)?,
        GridKind::L2Contractive => MhaParams::random(AttentionKind::L2, true, cfg.d, cfg.h, &mut wrng)?,
    };
    let mut brng = ChaCha8Rng::seed_from_u64(cfg.seed);
    brng.set_stream(1);
    Ok((params, adversarial_batch(cfg.batch, cfg.n, cfg.d, cfg.u, &mut brng)))
}

/// Maximum reconstruction error of `Y = X + c·f(X)` over an adversarial batch
/// for every `(c, iters)` pair.
pub fn invertibility_grid(cfg: &GridConfig) -> Result<Vec<GridRow>> {
    if cfg.c_list.is_empty() || cfg.c_list.iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
        return Err(Error::Domain("c values must lie in (0, 1)".into()));
    }
    if cfg.iter_list.is_empty() || cfg.iter_list.contains(&0) {
        return Err(Error::Domain("iteration counts must be >= 1".into()));
    }
    if cfg.batch == 0 || cfg.n == 0 {
        return Err(Error::Domain("batch and n must be >= 1".into()));
    }
    let (params, batch) = grid_inputs(cfg)?;
    let scale = match cfg.kind {
        GridKind::Dp => 1.0,
        GridKind::L2Contractive => {
            let b = bound_inf(&params, cfg.n.max(2))?.value;
            if b == 0.0 {
                0.0
            } else {
                1.0 / b
            }
        }
    };
    let f = |x: &crate::tensor::Matrix| Ok(mha_forward(x, &params, None)?.scale(scale));
    let max_iter = *cfg.iter_list.iter().max().expect("nonempty");
    let mut rows = Vec::new();
    for &c in &cfg.c_list {
        let curve = error_curve(&batch, f, c, max_iter)?;
        rows.extend(cfg.iter_list.iter().map(|&k| GridRow { kind: cfg.kind, c, iters: k, max_error: curve[k - 1] }));
    }
    Ok(rows)
}

pub fn write_grid_csv<W: Write>(rows: &[GridRow], out: W) -> Result<()> {
    let header = ["kind", "c", "iters", "max_error"].map(String::from);
    let records: Vec<_> =
        rows.iter().map(|r| vec![r.kind.to_string(), fmt_f64(r.c), r.iters.to_string(), fmt_f64(r.max_error)]).collect();
    write_csv(out, INVERT_SCHEMA, &header, &records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergeConfig {
    pub n: usize,
    pub d: usize,
    pub steps: usize,
    pub lr: f64,
    /// Half-width of the initial draw for the nonzero rows.
    pub u: f64,
    pub seed: u64,
}

impl Default for DivergeConfig {
    fn default() -> Self {
        Self { n: 3, d: 1, steps: 500, lr: 0.1, u: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergeRow {
    pub step: usize,
    /// `‖J‖_∞` of identity-weight dot-product attention.
    pub dp: f64,
    pub dp_best: f64,
    /// Same ascent for identity-weight tied L2 attention from the same start.
    pub l2: f64,
}

/// Adam ascent of `‖J‖_∞` from an input with one zero row, for dot-product
/// and tied L2 attention with identity weights.
pub fn dp_divergence_demo(cfg: &DivergeConfig) -> Result<Vec<DivergeRow>> {
    if cfg.steps == 0 {
        return Err(Error::Domain("steps must be >= 1".into()));
    }
    if cfg.n < 2 {
        return Err(Error::Domain("the demo needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = adversarial_batch(1, cfg.n, cfg.d, cfg.u, &mut rng).remove(0);
    let opts = SearchOptions {
        adam: AdamOptions { lr: cfg.lr, max_steps: cfg.steps, rel_tol: 0.0 },
        reselect_every: 1,
        ..SearchOptions::default()
    };
    let dp = MhaParams::identity(AttentionKind::DotProduct, cfg.d, 1)?;
    let l2 = MhaParams::identity(AttentionKind::L2, cfg.d, 1)?;
    let dp_out = maximize_jacobian_norm(&dp, x0.clone(), NormKind::Inf, &opts)?;
    let l2_out = maximize_jacobian_norm(&l2, x0, NormKind::Inf, &opts)?;
    let mut best = f64::NEG_INFINITY;
    Ok(dp_out
        .trace
        .iter()
        .zip(&l2_out.trace)
        .enumerate()
        .map(|(step, (&dp, &l2))| {
            best = best.max(dp);
            DivergeRow { step, dp, dp_best: best, l2 }
        })
        .collect())
}

pub fn write_diverge_csv<W: Write>(rows: &[DivergeRow], out: W) -> Result<()> {
    let header = ["step", "dp_jac_inf", "dp_best", "l2_jac_inf"].map(String::from);
    let records: Vec<_> = rows
        .iter()
        .map(|r| vec![r.step.to_string(), fmt_f64(r.dp), fmt_f64(r.dp_best), fmt_f64(r.l2)])
        .collect();
    write_csv(out, DIVERGE_SCHEMA, &header, &records)
}

#[cfg(test)]
mod tests {
    #[test]
    fn float_text_round_trips() {
        for v in [0.0, 1.0, -2.5, 1e-4, 2.3092638912203256e-14, 5e-324, 1e300, 0.1 + 0.2] {
            assert_eq!(super::fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(super::fmt_f64(2.5e-14), "2.5e-14");
        assert_eq!(super::fmt_f64(0.5), "0.5");
    }

    use super::*;

    #[test]
    fn grid_rejects_bad_inputs() {
        let cfg = GridConfig {
            kind: GridKind::L2Contractive,
            c_list: vec![0.5],
            iter_list: vec![0],
            n: 4,
            d: 2,
            h: 1,
            batch: 2,
            u: 10.0,
            seed: 0,
        };
        assert!(invertibility_grid(&cfg).is_err());
        assert!(invertibility_grid(&GridConfig { iter_list: vec![1], c_list: vec![1.0], ..cfg.clone() }).is_err());
    }

    #[test]
    fn one_iteration_leaves_positive_error() {
        let cfg = GridConfig {
            kind: GridKind::L2Contractive,
            c_list: vec![0.5, 0.9],
            iter_list: vec![1, 5],
            n: 6,
            d: 4,
            h: 2,
            batch: 4,
            u: 10.0,
            seed: 3,
        };
        let rows = invertibility_grid(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().filter(|r| r.iters == 1).all(|r| r.max_error > 0.0));
        assert!(rows[1].max_error < rows[0].max_error);
    }

    #[test]
    fn diverge_rejects_zero_steps() {
        assert!(dp_divergence_demo(&DivergeConfig { steps: 0, ..DivergeConfig::default() }).is_err());
    }

    #[test]
    fn grid_kind_parsing() {
        assert_eq!("dp".parse::<GridKind>().unwrap(), GridKind::Dp);
        assert_eq!("L2-contractive".parse::<GridKind>().unwrap(), GridKind::L2Contractive);
        assert!("x".parse::<GridKind>().is_err());
    }
}
