//! Rouge-L and KS statistics against brute-force oracles, plus p-values frozen
//! from an arbitrary-precision evaluation of the Kolmogorov series.

use dto_core::{ks_two_sample, rouge_l};
use proptest::prelude::*;

/// Full-table LCS, written independently of the library's rolling-row version.
fn lcs_table(a: &[u32], b: &[u32]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn oracle_f1(reference: &[u32], hypothesis: &[u32]) -> f64 {
    let l = lcs_table(reference, hypothesis) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hypothesis.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn ecdf_distance(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rouge_matches_table_oracle(
        a in prop::collection::vec(0u32..6, 0..=30),
        b in prop::collection::vec(0u32..6, 0..=30),
    ) {
        prop_assert_eq!(rouge_l(&a, &b).f1, oracle_f1(&a, &b));
    }

    #[test]
    fn ks_statistic_matches_ecdf_enumeration(
        a in prop::collection::vec(0u8..12, 1..=50),
        b in prop::collection::vec(0u8..12, 1..=50),
    ) {
        // small integer support forces plenty of ties
        let a: Vec<f64> = a.into_iter().map(|v| v as f64 / 4.0).collect();
        let b: Vec<f64> = b.into_iter().map(|v| v as f64 / 4.0).collect();
        let ks = ks_two_sample(&a, &b).unwrap();
        prop_assert_eq!(ks.statistic, ecdf_distance(&a, &b));
        prop_assert!((0.0..=1.0).contains(&ks.p_value));
        let swapped = ks_two_sample(&b, &a).unwrap();
        prop_assert_eq!(ks, swapped);
    }
}

#[test]
fn worked_example() {
    let ks = ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.5]).unwrap();
    assert_eq!(ks.statistic, 0.5);
    assert!(
        (ks.p_value - 0.736_069_436_119_535).abs() < 1e-9,
        "{}",
        ks.p_value
    );
}

#[test]
fn p_values_match_high_precision_series() {
    // (sample a, sample b, p) with D fixed by construction
    let grid = |n: usize, shift: f64| -> Vec<f64> { (0..n).map(|i| i as f64 + shift).collect() };
    // n = m = 20: shifting b by 6 slots gives D = 0.3, by 11 gives D = 0.55
    let cases = [
        (grid(20, 0.0), grid(20, 5.5), 0.3, 0.275_268_867_267_421_35),
        (
            grid(20, 0.0),
            grid(20, 10.5),
            0.55,
            0.002_570_614_309_514_982,
        ),
    ];
    for (a, b, d, p) in cases {
        let ks = ks_two_sample(&a, &b).unwrap();
        assert!((ks.statistic - d).abs() < 1e-15, "{}", ks.statistic);
        assert!((ks.p_value - p).abs() < 1e-9, "{} vs {p}", ks.p_value);
    }
}

#[test]
fn identical_samples_give_p_one() {
    let a = [0.1, 0.4, 0.4, 0.9];
    let ks = ks_two_sample(&a, &a).unwrap();
    assert_eq!(ks.statistic, 0.0);
    assert_eq!(ks.p_value, 1.0);
}
