//! Exhaustive verification of the Hungarian solver against brute-force
//! enumeration of all injections for small problem sizes.

use pointtad_core::matching::hungarian_assign;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Minimum-cost assignment of every ground truth (column) to a distinct
/// query (row) by explicit enumeration. Returns (assignment per query, cost
/// summed in ground-truth order).
fn brute_force(cost: &[Vec<f64>]) -> (Vec<Option<usize>>, f64) {
    let n_q = cost.len();
    let n_g = cost[0].len();
    let mut best_cost = f64::INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut chosen = vec![usize::MAX; n_g];
    let mut used = vec![false; n_q];

    fn recurse(
        cost: &[Vec<f64>],
        gi: usize,
        chosen: &mut Vec<usize>,
        used: &mut Vec<bool>,
        best_cost: &mut f64,
        best: &mut Vec<usize>,
    ) {
        let n_g = cost[0].len();
        if gi == n_g {
            let total: f64 = (0..n_g).map(|k| cost[chosen[k]][k]).sum();
            if total < *best_cost {
                *best_cost = total;
                *best = chosen.clone();
            }
            return;
        }
        for q in 0..cost.len() {
            if used[q] {
                continue;
            }
            used[q] = true;
            chosen[gi] = q;
            recurse(cost, gi + 1, chosen, used, best_cost, best);
            used[q] = false;
        }
    }
    recurse(cost, 0, &mut chosen, &mut used, &mut best_cost, &mut best);

    let mut assignment = vec![None; n_q];
    for (gi, q) in best.iter().enumerate() {
        assignment[*q] = Some(gi);
    }
    (assignment, best_cost)
}

#[test]
fn matches_brute_force_on_1000_random_matrices() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    for case in 0..1000 {
        let n_q = rng.gen_range(1..=7usize);
        let n_g = rng.gen_range(1..=n_q);
        let cost: Vec<Vec<f64>> = (0..n_q)
            .map(|_| (0..n_g).map(|_| rng.gen_range(-20.0..20.0)).collect())
            .collect();
        let solved = hungarian_assign(&cost).unwrap();
        let (expected_assignment, expected_cost) = brute_force(&cost);
        assert_eq!(
            solved.total_cost, expected_cost,
            "case {case}: cost mismatch for {cost:?}"
        );
        assert_eq!(
            solved.assignment, expected_assignment,
            "case {case}: assignment mismatch for {cost:?}"
        );
    }
}

#[test]
fn matching_is_scale_consistent() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n_q = rng.gen_range(2..=6usize);
        let n_g = rng.gen_range(1..=n_q);
        let cost: Vec<Vec<f64>> = (0..n_q)
            .map(|_| (0..n_g).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let scaled: Vec<Vec<f64>> =
            cost.iter().map(|row| row.iter().map(|c| c * 3.7).collect()).collect();
        let a = hungarian_assign(&cost).unwrap();
        let b = hungarian_assign(&scaled).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }
}

#[test]
fn every_ground_truth_is_assigned_once() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n_q = rng.gen_range(1..=9usize);
        let n_g = rng.gen_range(0..=n_q);
        let cost: Vec<Vec<f64>> = (0..n_q)
            .map(|_| (0..n_g).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let solved = hungarian_assign(&cost).unwrap();
        let mut seen = vec![false; n_g];
        for a in solved.assignment.iter().flatten() {
            assert!(!seen[*a], "ground truth {a} assigned twice");
            seen[*a] = true;
        }
        assert!(seen.iter().all(|s| *s), "unassigned ground truth");
    }
}
