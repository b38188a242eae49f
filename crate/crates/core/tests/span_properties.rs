//! Randomized invariants of the span pooling operators.

use proptest::prelude::*;
use spanprobe::span::{pool_forward, CoherentSplit, SpanKind, SpanMethod};

/// `n x d` token matrix with `1 <= n <= 8` and `4 <= d <= 12`, `d` even.
fn tokens() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=8, 2usize..=6).prop_flat_map(|(n, half)| {
        let d = 2 * half;
        (
            Just(n),
            Just(d),
            prop::collection::vec(-10.0f64..10.0, n * d),
        )
    })
}

fn method(kind: SpanKind, d: usize, v: &[f64]) -> SpanMethod<f64> {
    match kind {
        SpanKind::Attn => SpanMethod::Attn { v: v[..d].to_vec() },
        SpanKind::Coherent => SpanMethod::Coherent(CoherentSplit::new(d / 2 - 1, 1, d).unwrap()),
        other => SpanMethod::new(other, d).unwrap(),
    }
}

fn random_v() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn output_dimension_law((n, d, e) in tokens(), v in random_v()) {
        for kind in SpanKind::ALL {
            let m = method(kind, d, &v);
            let out = pool_forward(&m, &e, d).unwrap().value;
            let expected = match kind {
                SpanKind::Avg | SpanKind::Attn | SpanKind::Max => d,
                SpanKind::Endpoint | SpanKind::DiffSum => 2 * d,
                SpanKind::Coherent => 2 * (d / 2 - 1) + 1,
            };
            prop_assert_eq!(out.len(), expected, "{} with n={}", kind.name(), n);
            prop_assert_eq!(m.output_dim(d).unwrap(), expected);
        }
    }

    #[test]
    fn boundary_methods_ignore_the_interior((n, d, e) in tokens(), noise in prop::collection::vec(-10.0f64..10.0, 96)) {
        prop_assume!(n >= 3);
        let mut perturbed = e.clone();
        for k in 1..n - 1 {
            for i in 0..d {
                perturbed[k * d + i] = noise[(k * d + i) % noise.len()];
            }
        }
        for kind in [SpanKind::Endpoint, SpanKind::DiffSum, SpanKind::Coherent] {
            let m = method(kind, d, &[]);
            let a = pool_forward(&m, &e, d).unwrap().value;
            let b = pool_forward(&m, &perturbed, d).unwrap().value;
            prop_assert_eq!(a, b, "{}", kind.name());
        }
    }

    #[test]
    fn content_methods_ignore_token_order((n, d, e) in tokens(), v in random_v(), shift in 0usize..8) {
        // rotate the rows by `shift`
        let rotated: Vec<f64> = (0..n).flat_map(|k| e[((k + shift) % n) * d..((k + shift) % n + 1) * d].to_vec()).collect();
        for kind in [SpanKind::Avg, SpanKind::Attn, SpanKind::Max] {
            let m = method(kind, d, &v);
            let a = pool_forward(&m, &e, d).unwrap().value;
            let b = pool_forward(&m, &rotated, d).unwrap().value;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{}: {} vs {}", kind.name(), x, y);
            }
        }
    }

    #[test]
    fn zero_attention_is_average_bit_for_bit((_, d, e) in tokens()) {
        let avg = pool_forward(&SpanMethod::<f64>::Avg, &e, d).unwrap().value;
        let attn = pool_forward(&SpanMethod::Attn { v: vec![0.0; d] }, &e, d).unwrap().value;
        prop_assert_eq!(
            avg.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            attn.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn diffsum_reconstructs_endpoints((n, d, e) in tokens()) {
        let ends = pool_forward(&SpanMethod::<f64>::Endpoint, &e, d).unwrap().value;
        let ds = pool_forward(&SpanMethod::<f64>::DiffSum, &e, d).unwrap().value;
        let (sum, diff) = ds.split_at(d);
        for i in 0..d {
            let first = (sum[i] - diff[i]) / 2.0;
            let last = (sum[i] + diff[i]) / 2.0;
            prop_assert!((first - ends[i]).abs() <= 1e-12);
            prop_assert!((last - ends[d + i]).abs() <= 1e-12);
            prop_assert_eq!(ends[i], e[i]);
            prop_assert_eq!(ends[d + i], e[(n - 1) * d + i]);
        }
    }

    #[test]
    fn max_dominates_every_token((n, d, e) in tokens()) {
        let m = pool_forward(&SpanMethod::<f64>::Max, &e, d).unwrap().value;
        for i in 0..d {
            prop_assert!((0..n).all(|k| e[k * d + i] <= m[i]));
            prop_assert!((0..n).any(|k| e[k * d + i] == m[i]));
        }
    }

    #[test]
    fn single_token_spans_collapse((_, d, e) in tokens()) {
        let row = &e[..d];
        for kind in [SpanKind::Avg, SpanKind::Max] {
            prop_assert_eq!(&pool_forward(&method(kind, d, &[]), row, d).unwrap().value[..], row);
        }
    }
}

#[test]
fn proportional_split_examples() {
    let s = CoherentSplit::proportional(256).unwrap();
    assert_eq!((s.a, s.b, s.output_dim()), (120, 8, 241));
    let s = CoherentSplit::proportional(1024).unwrap();
    assert_eq!((s.a, s.b, s.output_dim()), (480, 32, 961));
    let s = CoherentSplit::proportional(20).unwrap();
    assert_eq!((s.a, s.b), (9, 1));
    assert!(CoherentSplit::proportional(2).is_err());
}

#[test]
fn coherent_layout() {
    // d = 6 split as a = 2, b = 1: [e^1 (2) | e^2 (2) | e^3 (1) | e^4 (1)]
    let m = SpanMethod::<f64>::Coherent(CoherentSplit::new(2, 1, 6).unwrap());
    let e = [
        1.0, 2.0, 3.0, 4.0, 5.0, 6.0, /* interior */ 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 7.0, 8.0,
        9.0, 10.0, 11.0, 12.0,
    ];
    let out = pool_forward(&m, &e, 6).unwrap().value;
    assert_eq!(out, vec![1.0, 2.0, 9.0, 10.0, 5.0 * 12.0]);
}
