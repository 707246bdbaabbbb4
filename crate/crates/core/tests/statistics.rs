//! Test statistics against pair enumeration and numerical quadrature.

mod common;

use common::oracles;
use common::rng;
use proptest::prelude::*;
use rand::Rng;
use ross::analysis::{mann_whitney_u, percentiles, stat_report, welch_t_test};

/// Random samples with deliberate ties: values on a coarse grid.
fn case(r: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let na = r.random_range(2..15);
    let nb = r.random_range(2..15);
    let grid = r.random_range(3..40) as f64;
    let shift = r.random_range(-0.3..0.3);
    let a = (0..na).map(|_| (r.random::<f64>() * grid).floor() / grid).collect();
    let b = (0..nb).map(|_| ((r.random::<f64>() + shift) * grid).floor() / grid).collect();
    (a, b)
}

#[test]
fn mann_whitney_matches_pair_enumeration() {
    let mut r = rng(2024);
    for i in 0..100 {
        let (a, b) = case(&mut r);
        let (u, p) = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(u, oracles::brute_force_u(&a, &b), "case {i}");
        let want = oracles::mann_whitney_p(&a, &b, u);
        assert!((p - want).abs() <= 1e-8, "case {i}: p {p} vs {want}");
    }
}

#[test]
fn welch_matches_quadrature() {
    let mut r = rng(77);
    let mut done = 0;
    while done < 100 {
        let (a, b) = case(&mut r);
        let (Ok((t, p)), (want_t, want_p)) = (welch_t_test(&a, &b), oracles::welch(&a, &b)) else {
            continue;
        };
        if !want_t.is_finite() {
            continue;
        }
        assert!((t - want_t).abs() <= 1e-8 * want_t.abs().max(1.0), "t {t} vs {want_t}");
        assert!((p - want_p).abs() <= 1e-8, "p {p} vs {want_p} (t {t})");
        done += 1;
    }
}

#[test]
fn report_is_consistent() {
    let a: Vec<f64> = (0..30).map(|i| i as f64 / 30.0).collect();
    let b: Vec<f64> = (0..40).map(|i| 0.2 + i as f64 / 40.0).collect();
    let rep = stat_report(&a, &b).unwrap();
    assert_eq!((rep.n_a, rep.n_b), (30, 40));
    assert!(rep.mean_b > rep.mean_a && rep.t_stat < 0.0);
    assert!((0.0..=1.0).contains(&rep.t_pvalue) && (0.0..=1.0).contains(&rep.u_pvalue));
}

proptest! {
    #[test]
    fn percentiles_are_monotone_and_bounded(xs in prop::collection::vec(-1e3f64..1e3, 1..60)) {
        let p = percentiles(&xs).unwrap();
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= p.p25 && p.p25 <= p.p50 && p.p50 <= p.p75 && p.p75 <= p.p95 && p.p95 <= hi);
    }

    #[test]
    fn u_statistics_of_both_sides_sum_to_pairs(
        a in prop::collection::vec(0u8..10, 1..20),
        b in prop::collection::vec(0u8..10, 1..20),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let (uab, pab) = mann_whitney_u(&a, &b).unwrap();
        let (uba, pba) = mann_whitney_u(&b, &a).unwrap();
        prop_assert_eq!(uab + uba, (a.len() * b.len()) as f64);
        prop_assert!((pab - pba).abs() < 1e-12);
    }
}
