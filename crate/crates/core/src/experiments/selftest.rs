use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::search::{lower_bound_search, SearchOptions};
use super::AdamOptions;
use crate::attention::{layer_norm, mha_forward, AttentionKind, LayerNormParams, MaskSet, MhaParams};
use crate::bounds::{layernorm_bound_inf, trace_terms};
use crate::error::{Error, Result};
use crate::jacobian::{finite_diff_jacobian, finite_diff_vector, layernorm_jacobian, mha_jacobian, FD_STEP};
use crate::tensor::{op_norm_inf, phi, phi_inv, power_iteration, spectral_norm_oracle, Matrix, NormKind};

/// Outcome of one invariant suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// True when the failure is a lower bound above its upper bound.
    pub dominance: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<String>;

const CHECKS: [(&str, Check); 7] = [
    ("jacobian_vs_finite_differences", check_jacobians),
    ("trace_lemma", check_trace_lemma),
    ("phi_round_trip", check_phi),
    ("power_iteration_underestimates", check_power_iteration),
    ("masked_blocks_vanish", check_masking),
    ("layernorm_bound", check_layernorm),
    ("sweep_dominance", check_dominance),
];

fn fail(msg: String) -> Error {
    Error::Domain(msg)
}

fn check_jacobians(rng: &mut ChaCha8Rng) -> Result<String> {
    let mut worst: f64 = 0.0;
    for (kind, tied) in [(AttentionKind::DotProduct, false), (AttentionKind::L2, true), (AttentionKind::L2, false)] {
        for _ in 0..10 {
            let n = rng.random_range(1..6);
            let params = MhaParams::random(kind, tied, 4, 2, rng)?;
            let x = Matrix::random_uniform(n, 4, -1.0, 1.0, rng);
            let exact = mha_jacobian(&x, &params, None)?;
            let fd = finite_diff_jacobian(|m: &Matrix| mha_forward(m, &params, None), &x, FD_STEP)?;
            worst = worst.max(exact.relative_error(&fd)?);
        }
    }
    if worst < 1e-6 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(fail(format!("relative error {worst:.2e} >= 1e-6")))
    }
}

fn check_trace_lemma(rng: &mut ChaCha8Rng) -> Result<String> {
    let (mut slack, mut order) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..500 {
        let n = rng.random_range(2..17);
        let params = MhaParams::random(AttentionKind::L2, true, 4, 2, rng)?;
        let c = rng.random_range(0.0..8.0);
        let x = Matrix::random_uniform(n, 4, -c, c, rng);
        let t = trace_terms(&x, &params, rng.random_range(0..2), rng.random_range(0..n))?;
        slack = slack.min(phi_inv((n - 1) as f64)? - t.about_query);
        order = order.min(t.about_query - t.about_mean);
    }
    if slack >= -1e-10 && order >= -1e-10 {
        Ok(format!("min slack to bound {slack:.3e}"))
    } else {
        Err(fail(format!("slack {slack:.2e}, ordering slack {order:.2e}")))
    }
}

fn check_phi(_: &mut ChaCha8Rng) -> Result<String> {
    let mut worst: f64 = 0.0;
    for k in 0..=1000 {
        let x = k as f64 / 100.0;
        worst = worst.max((phi_inv(phi(x)?)? - x).abs());
    }
    if worst < 1e-10 {
        Ok(format!("max round-trip error {worst:.2e}"))
    } else {
        Err(fail(format!("round-trip error {worst:.2e}")))
    }
}

fn check_power_iteration(rng: &mut ChaCha8Rng) -> Result<String> {
    let mut gap = f64::INFINITY;
    for _ in 0..10 {
        let w = Matrix::random_uniform(20, 20, -1.0, 1.0, rng);
        let exact = spectral_norm_oracle(&w)?;
        let (est, _) = power_iteration(&w, 100, rng.random())?;
        gap = gap.min(exact * (1.0 + 1e-12) - est);
    }
    if gap >= 0.0 {
        Ok(format!("min gap {gap:.2e}"))
    } else {
        Err(fail(format!("estimate exceeded exact norm by {:.2e}", -gap)))
    }
}

fn check_masking(rng: &mut ChaCha8Rng) -> Result<String> {
    let n = 5;
    let mask = MaskSet::causal(n);
    for kind in [AttentionKind::DotProduct, AttentionKind::L2] {
        let params = MhaParams::random(kind, true, 4, 2, rng)?;
        let x = Matrix::random_uniform(n, 4, -2.0, 2.0, rng);
        let j = mha_jacobian(&x, &params, Some(&mask))?;
        if let Some((a, b)) = mask.pairs().find(|&(a, b)| j.block(a, b).max_abs() != 0.0) {
            return Err(fail(format!("{kind}: block ({a}, {b}) is nonzero")));
        }
    }
    Ok("causal blocks exactly zero".into())
}

fn check_layernorm(rng: &mut ChaCha8Rng) -> Result<String> {
    let mut ratio: f64 = 0.0;
    for d in [2, 8] {
        let p = LayerNormParams::standard(d, 1e-2)?;
        let cap = layernorm_bound_inf(&p, d)?;
        for _ in 0..200 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let j = layernorm_jacobian(&x, &p)?;
            let fd = finite_diff_vector(|v: &[f64]| layer_norm(v, &p), &x, FD_STEP)?;
            if j.sub(&fd).max_abs() > 1e-5 * (1.0 + j.max_abs()) {
                return Err(fail(format!("jacobian disagrees with finite differences at D = {d}")));
            }
            ratio = ratio.max(op_norm_inf(&j) / cap);
        }
    }
    if ratio <= 1.0 {
        Ok(format!("max norm/bound {ratio:.6}"))
    } else {
        Err(fail(format!("norm exceeded bound by factor {ratio:.3}")))
    }
}

fn check_dominance(rng: &mut ChaCha8Rng) -> Result<String> {
    let opts = SearchOptions {
        adam: AdamOptions { max_steps: 300, ..AdamOptions::default() },
        reselect_every: 25,
        ..SearchOptions::default()
    };
    let seed = rng.random();
    let mut summary = Vec::new();
    for n in [2, 5, 10] {
        let row = lower_bound_search(n, 1, 1, NormKind::Inf, 4, 1, seed, &opts)?;
        row.check_dominance()?;
        summary.push(format!("N={n}: {:.3} <= {:.3}", row.lower_bounds[0], row.upper_bound));
    }
    Ok(summary.join(", "))
}

/// Runs every quick invariant suite from one seed.
pub fn selftest(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(k, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            match check(&mut rng) {
                Ok(detail) => CheckResult { name, passed: true, dominance: false, detail },
                Err(e) => CheckResult { name, passed: false, dominance: matches!(e, Error::Dominance { .. }), detail: e.to_string() },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let results = selftest(0);
        assert_eq!(results.len(), CHECKS.len());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results, selftest(0));
    }
}
