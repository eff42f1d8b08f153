//! Exhaustive checks of the gating rules for every `n <= 8` on a 101-point
//! utilization grid, against an integer oracle and brute-force enumeration.

use tnn_core::gating::{complexity, independent_gate, nested_gate, GateVector, Utilization};
use tnn_core::rng::seeded;

/// `min(n, floor(i (n + 1) / 100))` in exact integer arithmetic.
fn oracle_count(n: usize, i: usize) -> usize {
    n.min(i * (n + 1) / 100)
}

fn all_patterns(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u32..1 << n).map(move |m| (0..n).map(|j| m >> j & 1 == 1).collect())
}

#[test]
fn nested_gates_match_the_oracle_on_the_grid() {
    for n in 1..=8 {
        let mut prev = 0;
        for i in 0..=100 {
            let u = i as f64 / 100.0;
            let g = nested_gate(n, Utilization::new(u).unwrap());
            let k = oracle_count(n, i);
            assert_eq!(g.popcount(), k, "n {n} u {u}");
            assert_eq!(g.leading_active(), k);
            assert!(k >= prev, "count must not drop as u grows");
            prev = k;
            let c = complexity(&g).unwrap();
            assert!(
                (c - u).abs() <= 1.0 / n as f64 + 1.0 / (n + 1) as f64,
                "n {n} u {u} c {c}"
            );
        }
        assert_eq!(prev, n);
    }
}

#[test]
fn nested_gates_contain_each_other() {
    for n in 1..=8 {
        let gates: Vec<GateVector> = (0..=100)
            .map(|i| nested_gate(n, Utilization::new(i as f64 / 100.0).unwrap()))
            .collect();
        for a in &gates {
            for b in &gates {
                if a.popcount() <= b.popcount() {
                    assert!((0..n).all(|j| !a.is_on(j) || b.is_on(j)));
                }
            }
        }
    }
}

#[test]
fn independent_gates_have_the_oracle_popcount() {
    let mut rng = seeded(0);
    for n in 1..=8 {
        for i in 0..=100 {
            let u = Utilization::new(i as f64 / 100.0).unwrap();
            for _ in 0..4 {
                assert_eq!(independent_gate(n, u, &mut rng).popcount(), oracle_count(n, i));
            }
        }
    }
}

#[test]
fn independent_gates_reach_every_pattern_of_their_size() {
    let mut rng = seeded(1);
    let n = 4;
    let u = Utilization::new(0.5).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..400 {
        seen.insert(independent_gate(n, u, &mut rng).bits().to_vec());
    }
    let size = oracle_count(n, 50);
    let expected = all_patterns(n)
        .filter(|p| p.iter().filter(|&&b| b).count() == size)
        .count();
    assert_eq!(seen.len(), expected);
}

#[test]
fn is_nested_agrees_with_brute_force() {
    for n in 1..=8 {
        for bits in all_patterns(n) {
            let brute = (0..n).all(|i| !bits[i] || (0..i).all(|j| bits[j]));
            let k = bits.iter().filter(|&&b| b).count();
            let g = GateVector::new(bits).unwrap();
            assert_eq!(g.is_nested(), brute);
            assert_eq!(g.is_nested(), g.leading_active() == k);
        }
    }
}

#[test]
fn complexity_is_the_weighted_active_fraction() {
    let w = [1.0, 2.0, 3.0, 4.0, 5.0];
    for bits in all_patterns(5) {
        let on: f64 = bits.iter().zip(&w).filter(|(b, _)| **b).map(|(_, w)| w).sum();
        let g = GateVector::with_weights(bits, w.to_vec()).unwrap();
        assert!((complexity(&g).unwrap() - on / 15.0).abs() < 1e-12);
    }
}
