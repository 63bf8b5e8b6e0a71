use pipret::capacity::{
    bracket_bounds, exact_inverse_capacity, inverse_rate_achievable, inverse_rate_converse, solve_root_coefficients,
    BoundQuery,
};
use proptest::prelude::*;

/// `Σ_{i<K} N^{-i}` term by term.
fn geometric(k: usize, n: usize) -> f64 {
    let mut acc = 0.0;
    let mut term = 1.0;
    for _ in 0..k {
        acc += term;
        term /= n as f64;
    }
    acc
}

#[test]
fn single_message_reduces_to_geometric_sum() {
    for n in 2..=6 {
        for k in 2..=10 {
            let bq = BoundQuery::new(k, 1, n).unwrap();
            let got = inverse_rate_achievable(&bq).unwrap();
            assert!((got - geometric(k, n)).abs() < 1e-9, "K={k} N={n}: {got}");
            assert!((inverse_rate_converse(&bq) - geometric(k, n)).abs() < 1e-9);
        }
    }
}

#[test]
fn bounds_meet_at_ratio_two() {
    for p in 1..=8 {
        for n in 2..=8 {
            let bq = BoundQuery::new(2 * p, p, n).unwrap();
            let a = inverse_rate_achievable(&bq).unwrap();
            let c = inverse_rate_converse(&bq);
            assert!((a - c).abs() < 1e-9, "P={p} N={n}: {a} vs {c}");
        }
    }
}

#[test]
fn bounds_meet_at_integer_ratios() {
    for p in 1..=6 {
        for ratio in 2..=6 {
            for n in 2..=5 {
                let bq = BoundQuery::new(ratio * p, p, n).unwrap();
                let a = inverse_rate_achievable(&bq).unwrap();
                assert!((a - geometric(ratio, n)).abs() < 1e-9, "K={} P={p} N={n}", ratio * p);
            }
        }
    }
}

#[test]
fn root_residuals_small() {
    for p in 1..=8 {
        for n in 2..=8 {
            for k in 2 * p + 1..=2 * p + 12 {
                let bq = BoundQuery::new(k, p, n).unwrap();
                let rc = solve_root_coefficients(&bq).unwrap();
                assert!(rc.max_residual < 1e-9, "K={k} P={p} N={n}: {}", rc.max_residual);
            }
        }
    }
}

#[test]
fn exact_values() {
    assert_eq!(exact_inverse_capacity(2, 2, 2), Some(1.25));
    assert_eq!(exact_inverse_capacity(3, 2, 2), Some(1.75));
    let b = bracket_bounds(2, 2, 2, None, 0.5, 1.0).unwrap();
    assert_eq!(b.converse, 1.25);
    assert_eq!(b.achievable, 1.25);
}

proptest! {
    #[test]
    fn bounds_ordered_and_in_range(p in 1usize..=8, extra in 0usize..30, n in 2usize..=8) {
        let k = p + extra;
        prop_assume!(k >= 1);
        let bq = BoundQuery::new(k, p, n).unwrap();
        let c = inverse_rate_converse(&bq);
        let a = inverse_rate_achievable(&bq).unwrap();
        prop_assert!(a >= c - 1e-9, "achievable {} < converse {}", a, c);
        let ceiling = k as f64 / p as f64 + 1e-9;
        prop_assert!((1.0..=ceiling).contains(&c));
        prop_assert!((1.0 - 1e-12..=ceiling).contains(&a));
    }

    #[test]
    fn more_servers_never_hurt(p in 1usize..=6, extra in 0usize..20, n in 2usize..=7) {
        let k = p + extra;
        let c1 = inverse_rate_converse(&BoundQuery::new(k, p, n).unwrap());
        let c2 = inverse_rate_converse(&BoundQuery::new(k, p, n + 1).unwrap());
        prop_assert!(c2 <= c1 + 1e-12);
    }

    #[test]
    fn finite_length_correction_shrinks(l in 1u64..60, lambda in 0.0f64..0.99, c in 0.0f64..10.0) {
        let a = bracket_bounds(3, 2, 2, Some(l), lambda, c).unwrap();
        let b = bracket_bounds(3, 2, 2, Some(l + 1), lambda, c).unwrap();
        prop_assert!(b.correction <= a.correction);
        prop_assert!(a.converse <= a.converse_limit);
    }
}
