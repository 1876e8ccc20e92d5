use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lipattn::attention::{head_attention, head_map, l2_logits, mha_forward, AttentionKind, MaskSet, MhaParams};
use lipattn::bounds::{bound_2, bound_inf, trace_terms};
use lipattn::contractive::{max_norm, ContractiveMha};
use lipattn::jacobian::{jacobian_norm, mha_jacobian};
use lipattn::tensor::{phi, phi_inv, power_iteration, spectral_norm_oracle, Matrix, NormKind};

fn kind_strategy() -> impl Strategy<Value = (AttentionKind, bool)> {
    prop_oneof![
        Just((AttentionKind::DotProduct, false)),
        Just((AttentionKind::DotProduct, true)),
        Just((AttentionKind::L2, true)),
        Just((AttentionKind::L2, false)),
    ]
}

/// `(N, D, H)` with `H | D`.
fn shape_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..8, prop_oneof![Just((1usize, 1usize)), Just((2, 1)), Just((2, 2)), Just((4, 1)), Just((4, 2)), Just((6, 3))])
        .prop_map(|(n, (d, h))| (n, d, h))
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> MaskSet {
    let pairs: Vec<_> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| i != j && rng.random_bool(0.4)).collect();
    MaskSet::new(n, pairs).unwrap()
}

fn setup(kind: (AttentionKind, bool), shape: (usize, usize, usize), scale: f64, seed: u64) -> (MhaParams, Matrix, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, h) = shape;
    let params = MhaParams::random(kind.0, kind.1, d, h, &mut rng).unwrap();
    let x = Matrix::random_uniform(n, d, -scale, scale, &mut rng);
    (params, x, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_stochastic(kind in kind_strategy(), shape in shape_strategy(), scale in 0.0f64..20.0, seed: u64) {
        let (params, x, mut rng) = setup(kind, shape, scale, seed);
        let mask = random_mask(shape.0, &mut rng);
        for h in 0..shape.2 {
            let p = head_attention(&x, &params, h, Some(&mask)).unwrap();
            for i in 0..shape.0 {
                let row = p.row(i);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, v) in row.iter().enumerate() {
                    if mask.contains(i, j) {
                        prop_assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance(kind in kind_strategy(), shape in shape_strategy(), scale in 0.0f64..5.0, seed: u64) {
        let (params, x, mut rng) = setup(kind, shape, scale, seed);
        let mut perm: Vec<usize> = (0..shape.0).collect();
        perm.shuffle(&mut rng);
        let lhs = mha_forward(&x.permute_rows(&perm), &params, None).unwrap();
        let rhs = mha_forward(&x, &params, None).unwrap().permute_rows(&perm);
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn tied_l2_logits_are_symmetric(shape in shape_strategy(), scale in 0.0f64..10.0, seed: u64) {
        let (params, x, _) = setup((AttentionKind::L2, true), shape, scale, seed);
        for head in params.heads() {
            let l = l2_logits(&x, &head.wq, &head.wk).unwrap();
            prop_assert!(l.sub(&l.transpose()).max_abs() <= 1e-12 * (1.0 + l.max_abs()));
            prop_assert!((0..shape.0).all(|i| l[(i, i)] == 0.0));
        }
    }

    #[test]
    fn masked_inputs_do_not_reach_masked_rows(kind in kind_strategy(), shape in shape_strategy(), seed: u64) {
        let (params, x, mut rng) = setup(kind, shape, 3.0, seed);
        let n = shape.0;
        let mask = random_mask(n, &mut rng);
        let first = mask.pairs().next();
        if let Some((i, j)) = first {
            let mut moved = x.clone();
            for v in moved.row_mut(j) {
                *v += rng.random_range(-5.0..5.0);
            }
            for h in 0..shape.2 {
                let before = head_map(&x, &params, h, Some(&mask)).unwrap();
                let after = head_map(&moved, &params, h, Some(&mask)).unwrap();
                prop_assert_eq!(before.row(i), after.row(i));
            }
        }
    }

    #[test]
    fn trace_terms_below_phi_inverse(shape in shape_strategy(), scale in 0.0f64..10.0, q_scale in 0.1f64..10.0, seed: u64) {
        let (params, x, mut rng) = setup((AttentionKind::L2, true), shape, scale, seed);
        let params = params.scale_queries(q_scale);
        let n = shape.0;
        prop_assume!(n >= 2);
        let cap = phi_inv((n - 1) as f64).unwrap();
        let t = trace_terms(&x, &params, rng.random_range(0..shape.2), rng.random_range(0..n)).unwrap();
        prop_assert!(t.about_mean <= t.about_query + 1e-10);
        prop_assert!(t.about_query <= cap + 1e-10);
    }

    #[test]
    fn bounds_grow_with_n(d_h in prop_oneof![Just((1usize, 1usize)), Just((4, 2)), Just((6, 3))], n in 2usize..500, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MhaParams::random(AttentionKind::L2, true, d_h.0, d_h.1, &mut rng).unwrap();
        prop_assert!(bound_inf(&params, n + 1).unwrap().value > bound_inf(&params, n).unwrap().value);
        prop_assert!(bound_2(&params, n + 1).unwrap().value > bound_2(&params, n).unwrap().value);
    }

    #[test]
    fn bounds_scale_with_value_and_output_weights(t in 0.01f64..100.0, n in 2usize..50, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MhaParams::random(AttentionKind::L2, true, 4, 2, &mut rng).unwrap();
        let scaled_v = params.scale_values(t);
        let scaled_o = params.with_wo(params.wo().scale(t)).unwrap();
        for p in [NormKind::Inf, NormKind::Two] {
            let base = lipattn::bounds::bound(&params, n, p).unwrap();
            for other in [&scaled_v, &scaled_o] {
                let b = lipattn::bounds::bound(other, n, p).unwrap();
                prop_assert!((b.value - t * base.value).abs() <= 1e-10 * t * base.value);
                prop_assert!((b.recombine() - b.value).abs() <= 1e-12 * b.value);
            }
        }
    }

    #[test]
    fn bounds_dominate_jacobian_norms(shape in shape_strategy(), scale in 0.0f64..10.0, q_scale in 0.1f64..5.0, seed: u64) {
        let (params, x, _) = setup((AttentionKind::L2, true), shape, scale, seed);
        let params = params.scale_queries(q_scale);
        prop_assume!(shape.0 >= 2);
        let j = mha_jacobian(&x, &params, None).unwrap();
        prop_assert!(jacobian_norm(&j, NormKind::Inf).unwrap().0 <= bound_inf(&params, shape.0).unwrap().value);
        prop_assert!(jacobian_norm(&j, NormKind::Two).unwrap().0 <= bound_2(&params, shape.0).unwrap().value);
    }

    #[test]
    fn contractive_attention_is_a_contraction(shape in shape_strategy(), c in 0.05f64..0.95, seed: u64) {
        let (params, x, mut rng) = setup((AttentionKind::L2, true), shape, 5.0, seed);
        prop_assume!(shape.0 >= 2);
        let f = ContractiveMha::new(params, c, shape.0).unwrap();
        let y = x.add(&Matrix::random_uniform(shape.0, shape.1, -1.0, 1.0, &mut rng));
        let lhs = max_norm(&f.forward(&x).unwrap().sub(&f.forward(&y).unwrap()));
        prop_assert!(lhs <= c * max_norm(&x.sub(&y)) + 1e-12);
    }

    #[test]
    fn phi_round_trip(x in 0.0f64..10.0) {
        prop_assert!((phi_inv(phi(x).unwrap()).unwrap() - x).abs() < 1e-10);
    }

    #[test]
    fn phi_inverse_is_increasing(y in 0.0f64..1e6, dy in 1e-3f64..1e3) {
        prop_assert!(phi_inv(y + dy).unwrap() > phi_inv(y).unwrap());
    }

    #[test]
    fn power_iteration_never_overestimates(rows in 1usize..12, cols in 1usize..12, iters in 1usize..60, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::random_uniform(rows, cols, -1.0, 1.0, &mut rng);
        let exact = spectral_norm_oracle(&w).unwrap();
        let (est, _) = power_iteration(&w, iters, seed).unwrap();
        prop_assert!(est <= exact * (1.0 + 1e-12));
    }

    #[test]
    fn params_json_round_trip(kind in kind_strategy(), shape in shape_strategy(), seed: u64) {
        let (params, _, _) = setup(kind, shape, 1.0, seed);
        prop_assert_eq!(MhaParams::from_json(&params.to_json().unwrap()).unwrap(), params);
    }
}
