use mixfed_core::metrics::*;
use mixfed_core::mixer::ItemKind;
use mixfed_core::{Nanos, NodeId};
use num_bigint::BigUint;
use statrs::distribution::{ContinuousCDF, Normal};

/// `log2` of an arbitrary-size integer from its top 64 bits.
fn big_log2(x: &BigUint) -> f64 {
    let bits = x.bits();
    let shift = bits.saturating_sub(64);
    let top: BigUint = x >> shift;
    let top = top.iter_u64_digits().next().unwrap_or(0) as f64;
    top.log2() + shift as f64
}

fn oracle_path_entropy(o: u64, k: u32) -> f64 {
    let sum: BigUint = (1..=k).map(|j| BigUint::from(o).pow(j)).sum();
    big_log2(&sum)
}

#[test]
fn path_entropy_matches_big_integer_oracle() {
    for o in [1u64, 2, 3, 5, 7, 10, 16, 50, 100, 150, 1000, 65_536] {
        for k in 1..=12u32 {
            let got = path_entropy(o as usize, k as usize);
            let want = oracle_path_entropy(o, k);
            assert!((got - want).abs() < 1e-9, "O={o} K={k}: {got} vs {want}");
        }
    }
}

#[test]
fn path_entropy_reference_points() {
    // log2(10 + 100) and log2(150 + 22500).
    assert!((path_entropy(10, 2) - 110f64.log2()).abs() < 1e-12);
    assert!((path_entropy(10, 2) - 6.78).abs() < 0.01);
    assert!((path_entropy(150, 2) - 14.47).abs() < 0.01);
    assert!(path_entropy(150, 2) > 14.0);
    assert_eq!(path_entropy(1, 1), 0.0);
}

#[test]
fn relay_bound_values() {
    assert_eq!(relay_match_bound(10, 1), 0.0);
    assert!((relay_match_bound(5, 2) - 0.1).abs() < 1e-15);
    assert!((relay_match_bound(10, 2) - 0.05).abs() < 1e-15);
    assert!((relay_match_bound(10, 3) - 2.0 / 30.0).abs() < 1e-15);
    assert!((relay_match_bound(50, 2) - 0.01).abs() < 1e-15);
}

fn record(occupancy: usize, probe: Option<u64>, q: usize, e: usize) -> EmissionRecord {
    EmissionRecord {
        t: Nanos::ZERO,
        node: NodeId(0),
        kind: ItemKind::Relay,
        occupancy,
        batch: 0,
        queued_index: q,
        emitted_index: e,
        probe,
    }
}

#[test]
fn relay_entropy_of_full_batches() {
    // Draining a batch of O sees occupancies O, O-1, ..., 1.
    for o in [1usize, 2, 10, 50] {
        let emissions: Vec<EmissionRecord> = (0..200).flat_map(|_| (1..=o).rev().map(|occ| record(occ, None, 0, 1))).collect();
        let want = (1..=o).map(|x| (x as f64).log2()).sum::<f64>() / o as f64;
        if emissions.len() >= MIN_EMISSIONS {
            assert!((relay_entropy(&emissions).unwrap() - want).abs() < 1e-12);
        }
    }
    assert!(relay_entropy(&[record(10, None, 0, 0)]).is_err());
}

#[test]
fn relay_match_counts_only_forwarded_hits() {
    let mut e = vec![record(5, None, 0, 0); MIN_EMISSIONS];
    e.push(record(5, Some(1), 2, 2));
    e.push(record(5, Some(2), 2, 3));
    let m = empirical_relay_match(&e, 10).unwrap();
    assert_eq!((m.trials, m.hits), (10, 1));
    assert!((m.rate - 0.1).abs() < 1e-15);
    assert!((m.standard_error(0.1) - (0.09f64 / 10.0).sqrt()).abs() < 1e-15);
}

#[test]
fn game_interval_matches_the_normal_approximation() {
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.975);
    for (n, c) in [(500u64, 257u64), (100, 100), (1000, 430), (100, 50)] {
        let g = GameResult::from_counts(n, c);
        let p = c as f64 / n as f64;
        assert!((g.advantage - (p - 0.5).abs()).abs() < 1e-15);
        assert!((g.ci95 - z * (p * (1.0 - p) / n as f64).sqrt()).abs() < 1e-3 * g.ci95.max(1e-9));
        assert_eq!(g.ci_contains_zero(), g.advantage <= g.ci95);
    }
    let g = GameResult::from_counts(500, 257);
    assert!(g.ci_contains_zero() && g.ci_upper() < 0.07);
}

#[test]
fn auc_oracle() {
    let pos = [3.0, 4.0, 5.0];
    let neg = [1.0, 2.0, 3.0];
    // 8 wins and one tie out of 9 pairs.
    assert!((auc(&pos, &neg) - 8.5 / 9.0).abs() < 1e-12);
    assert!((auc(&neg, &neg) - 0.5).abs() < 1e-12);
}
