//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls the library's enumeration or scoring code.
#![allow(dead_code)]

use negolab_core::acquisition::NoveltyScore;
use negolab_core::env::ContextPair;
use negolab_core::model::{LossGraph, PolicyModel};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dot(values: [u8; 3], items: [u8; 3]) -> u32 {
    (0..3).map(|j| values[j] as u32 * items[j] as u32).sum()
}

/// Every (score A, score B) reachable by splitting the whole pool.
pub fn all_splits(pair: &ContextPair) -> Vec<(u32, u32)> {
    let counts = pair.counts.as_array();
    let (ua, ub) = (pair.utilities_a.as_array(), pair.utilities_b.as_array());
    let mut out = Vec::new();
    for books in 0..=counts[0] {
        for hats in 0..=counts[1] {
            for balls in 0..=counts[2] {
                let mine = [books, hats, balls];
                let theirs = [counts[0] - books, counts[1] - hats, counts[2] - balls];
                out.push((dot(ua, mine), dot(ub, theirs)));
            }
        }
    }
    out
}

pub fn oracle_pareto(pair: &ContextPair, a: u32, b: u32) -> bool {
    !all_splits(pair).into_iter().any(|(x, y)| x >= a && y >= b && (x > a || y > b))
}

pub fn oracle_joint_max(pair: &ContextPair) -> u32 {
    all_splits(pair).into_iter().map(|(x, y)| x + y).fold(0, u32::max)
}

/// (agreed, score A, score B) for two final selections.
pub fn oracle_scores(pair: &ContextPair, sel_a: [u8; 3], sel_b: [u8; 3]) -> (bool, u32, u32) {
    let counts = pair.counts.as_array();
    let exact = (0..3).all(|j| sel_a[j] as u16 + sel_b[j] as u16 == counts[j] as u16);
    if exact {
        (true, dot(pair.utilities_a.as_array(), sel_a), dot(pair.utilities_b.as_array(), sel_b))
    } else {
        (false, 0, 0)
    }
}

/// Repeated extraction of the extremal remaining score, lowest id first on
/// ties.
pub fn sort_oracle(scores: &[NoveltyScore], larger: bool, k: usize) -> Vec<usize> {
    let mut left: Vec<NoveltyScore> = scores.to_vec();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (left[i], left[best]);
            let better = if larger { a.score > b.score } else { a.score < b.score };
            if better || (a.score == b.score && a.id < b.id) {
                best = i;
            }
        }
        out.push(left.remove(best).id);
    }
    out
}

/// Central differences against the analytic gradient at `picks` sampled
/// coordinates: half where the gradient is nonzero, half anywhere.
/// Returns the worst relative error.
pub fn finite_difference_check(model: &PolicyModel, graph: &LossGraph<'_>, picks: usize, seed: u64) -> f64 {
    let (_, grads) = model.backward(graph).unwrap();
    let analytic = grads.values();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let active: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i] != 0.0).collect();
    assert!(active.len() >= picks / 2, "only {} active coordinates", active.len());
    let mut coords: Vec<usize> = (0..picks / 2).map(|_| *active.choose(&mut rng).unwrap()).collect();
    coords.extend((0..picks - picks / 2).map(|_| rng.random_range(0..analytic.len())));
    let step = 1e-5;
    let mut worst = 0.0f64;
    for &i in &coords {
        let mut plus = model.clone();
        plus.params_mut()[i] += step;
        let mut minus = model.clone();
        minus.params_mut()[i] -= step;
        let numeric = (plus.loss(graph).unwrap() - minus.loss(graph).unwrap()) / (2.0 * step);
        let scale = numeric.abs().max(analytic[i].abs());
        // Coordinates whose true gradient is zero only need to agree absolutely.
        let error = if scale < 1e-7 { 0.0 } else { (numeric - analytic[i]).abs() / scale };
        worst = worst.max(error);
    }
    worst
}

/// One-sided 95% lower bound of the mean of paired differences, from a
/// seeded percentile bootstrap over seeds.
pub fn bootstrap_lower_bound(differences: &[f64], resamples: usize, seed: u64) -> f64 {
    assert!(!differences.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = differences.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| differences[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    means[(0.05 * resamples as f64).floor() as usize]
}

/// Least-squares slope of `values` against 0, 1, 2, ...
pub fn slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = values.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in values.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}
