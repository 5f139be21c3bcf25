//! Library scoring, Pareto and joint-maximum checks against independent
//! brute-force scanners written here from the game rules.

mod common;

use std::time::Instant;

use common::{bootstrap_lower_bound, oracle_joint_max, oracle_pareto, oracle_scores, slope};

use negolab_core::corpus::{random_record, DialogueRecord};
use negolab_core::env::{
    is_pareto_optimal, max_joint_score, resolve_outcome, sample_context_pair, Agent, Allocation,
    Transcript, DEFAULT_MAX_TURNS,
};
use negolab_core::metrics::{joint_outcome_rates, pareto_rate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_selection(rng: &mut ChaCha8Rng, counts: [u8; 3]) -> [u8; 3] {
    [rng.random_range(0..=counts[0]), rng.random_range(0..=counts[1]), rng.random_range(0..=counts[2])]
}

#[test]
fn outcome_pareto_and_joint_max_match_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut agreed_seen = 0;
    for case in 0..2000 {
        let pair = sample_context_pair(&mut rng);
        let counts = pair.counts.as_array();
        let sel_a = random_selection(&mut rng, counts);
        // Half the cases use the exact complement so agreements are common.
        let sel_b = if case % 2 == 0 {
            [counts[0] - sel_a[0], counts[1] - sel_a[1], counts[2] - sel_a[2]]
        } else {
            random_selection(&mut rng, counts)
        };
        let mut transcript = Transcript::new(pair, DEFAULT_MAX_TURNS);
        transcript.apply(negolab_core::env::DialogueAct::End).unwrap();
        let outcome =
            resolve_outcome(&transcript, Allocation::new(sel_a).unwrap(), Allocation::new(sel_b).unwrap()).unwrap();
        let (agreed, a, b) = oracle_scores(&pair, sel_a, sel_b);
        assert_eq!((outcome.agreed, outcome.score_a, outcome.score_b), (agreed, a, b), "case {case}");
        assert_eq!(outcome.pareto, oracle_pareto(&pair, a, b), "case {case}");
        assert_eq!(is_pareto_optimal(a, b, &pair), oracle_pareto(&pair, a, b));
        assert_eq!(max_joint_score(&pair), oracle_joint_max(&pair), "case {case}");
        agreed_seen += usize::from(agreed);
        if !agreed {
            assert!(!outcome.pareto, "a disagreement is always dominated");
        }
    }
    assert!(agreed_seen >= 1000);
    assert!(start.elapsed().as_secs_f64() < 10.0, "took {:?}", start.elapsed());
}

#[test]
fn both_maximal_is_always_pareto() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let pair = sample_context_pair(&mut rng);
        assert!(is_pareto_optimal(10, 10, &pair));
        assert!(!is_pareto_optimal(0, 0, &pair));
    }
}

#[test]
fn corpus_rates_match_per_record_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let records: Vec<DialogueRecord> = (0..1000)
        .map(|_| {
            let pair = sample_context_pair(&mut rng);
            random_record(pair, DEFAULT_MAX_TURNS, &mut rng)
        })
        .collect();
    let mut agreed = 0usize;
    let mut pareto = 0usize;
    let mut joint = 0usize;
    let mut same = 0usize;
    for r in &records {
        let pair = r.pair();
        let o = r.outcome();
        let (ok, a, b) = oracle_scores(pair, o.selection(Agent::A).as_array(), o.selection(Agent::B).as_array());
        assert_eq!((ok, a, b), (o.agreed, o.score_a, o.score_b));
        if ok {
            agreed += 1;
            pareto += usize::from(oracle_pareto(pair, a, b));
        }
        joint += usize::from(a + b == oracle_joint_max(pair));
        same += usize::from(a == b);
    }
    assert!(agreed > 0);
    let expected_pareto = pareto as f64 / agreed as f64;
    assert_eq!(pareto_rate(&records), Some(expected_pareto));
    let (j, s) = joint_outcome_rates(&records);
    assert_eq!(j, joint as f64 / 1000.0);
    assert_eq!(s, same as f64 / 1000.0);
}

#[test]
fn statistics_helpers() {
    assert!((slope(&[1.0, 3.0, 5.0, 7.0]) - 2.0).abs() < 1e-12);
    assert_eq!(slope(&[4.0, 4.0, 4.0]), 0.0);
    assert!(bootstrap_lower_bound(&[1.0; 10], 1000, 0) == 1.0);
    let mixed = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
    assert!(bootstrap_lower_bound(&mixed, 5000, 0) < 0.0);
    let shifted: Vec<f64> = mixed.iter().map(|x| x * 0.1 + 1.0).collect();
    assert!(bootstrap_lower_bound(&shifted, 5000, 0) > 0.9);
}
