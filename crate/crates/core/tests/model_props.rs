mod common;

use negolab_core::corpus::{perspectives, random_record};
use negolab_core::env::{
    enumerate_allocations, sample_context_pair, ActKind, Agent, DialogueAct, Transcript, DEFAULT_MAX_TURNS,
};
use negolab_core::model::{act_id, legal_mask, ActDistribution, LossGraph, PolicyModel, VOCAB_SIZE};
use negolab_core::training::{reinforce_coefficients, reinforce_graph, self_play_episode, sl_graph};
use common::finite_difference_check;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, hidden: usize, scale: f64) -> PolicyModel {
    PolicyModel::init(&mut ChaCha8Rng::seed_from_u64(seed), hidden, scale).unwrap()
}

fn assert_valid(dist: &ActDistribution, mask: &[bool; VOCAB_SIZE]) {
    let total: f64 = dist.probs().iter().sum();
    assert!((total - 1.0).abs() < 1e-6, "sums to {total}");
    for (id, &p) in dist.probs().iter().enumerate() {
        assert!(p >= 0.0);
        if !mask[id] {
            assert_eq!(p, 0.0, "mass on masked id {id}");
        }
    }
}

#[test]
fn supervised_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..3 {
        let m = model(100 + trial, 4, 0.5);
        let record = random_record(sample_context_pair(&mut rng), DEFAULT_MAX_TURNS, &mut rng);
        let (a, b) = perspectives(&record);
        for view in [a, b] {
            if view.own_positions().count() == 0 {
                continue;
            }
            let worst = finite_difference_check(&m, &sl_graph(&view, 0.5), 120, trial);
            assert!(worst < 1e-3, "trial {trial}: relative error {worst}");
        }
    }
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let alice = model(7, 4, 0.5);
    let bob = model(8, 4, 0.5);
    let mut checked = 0;
    while checked < 3 {
        let episode = self_play_episode(&alice, &bob, sample_context_pair(&mut rng), DEFAULT_MAX_TURNS, &mut rng).unwrap();
        let coefficients = reinforce_coefficients(episode.record.turns(), Agent::A, 0.95, 1.7);
        if coefficients.iter().all(|c| *c == 0.0) {
            continue;
        }
        let graph = reinforce_graph(&episode.record, Agent::A, coefficients);
        let worst = finite_difference_check(&alice, &graph, 120, checked);
        assert!(worst < 1e-3, "relative error {worst}");
        checked += 1;
    }
}

#[test]
fn sampling_matches_probabilities() {
    let m = model(3, 16, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let pair = sample_context_pair(&mut rng);
    let dist = m.act_distribution(pair.context(Agent::A), Agent::A, &[], DEFAULT_MAX_TURNS).unwrap();
    let draws = 100_000;
    let mut by_id = vec![0usize; VOCAB_SIZE];
    for _ in 0..draws {
        by_id[act_id(&dist.sample(&mut rng))] += 1;
    }
    let within = |count: usize, p: f64| {
        let expected = p * draws as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - expected).abs() <= 3.0 * sigma.max(1e-9)
    };
    // Per kind, and for the five most probable ids.
    for kind in ActKind::ALL {
        let (mut count, mut p) = (0, 0.0);
        for id in 0..VOCAB_SIZE {
            if negolab_core::model::act_from_id(id).kind() == kind {
                count += by_id[id];
                p += dist.probs()[id];
            }
        }
        assert!(within(count, p), "{kind:?}: {count} draws for p = {p}");
    }
    let mut ranked: Vec<usize> = (0..VOCAB_SIZE).collect();
    ranked.sort_by(|a, b| dist.probs()[*b].total_cmp(&dist.probs()[*a]));
    for &id in &ranked[..5] {
        assert!(within(by_id[id], dist.probs()[id]), "id {id}");
    }
    for id in 0..VOCAB_SIZE {
        if dist.probs()[id] == 0.0 {
            assert_eq!(by_id[id], 0);
        }
    }
}

#[test]
fn selection_head_is_the_brute_force_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for trial in 0..40 {
        let m = model(200 + trial, 8, 1.0);
        let record = random_record(sample_context_pair(&mut rng), DEFAULT_MAX_TURNS, &mut rng);
        for me in [Agent::A, Agent::B] {
            let context = record.pair().context(me);
            let state = m.read(context, me, record.turns(), DEFAULT_MAX_TURNS);
            // Smallest selection loss over every share of the pool.
            let best = enumerate_allocations(&context.counts)
                .into_iter()
                .map(|share| {
                    let graph = LossGraph {
                        context,
                        me,
                        turns: record.turns(),
                        max_turns: DEFAULT_MAX_TURNS,
                        act_weights: vec![0.0; record.len()],
                        selection: Some((share, 1.0)),
                    };
                    (m.loss(&graph).unwrap(), share)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            assert_eq!(m.head_selection(&state), best);
        }
    }
}

#[test]
fn forward_is_deterministic_and_incremental_reading_matches_batch() {
    let m = model(5, 12, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let record = random_record(sample_context_pair(&mut rng), DEFAULT_MAX_TURNS, &mut rng);
    let context = record.pair().context(Agent::B);
    let along = m.distributions_along(context, Agent::B, record.turns(), DEFAULT_MAX_TURNS).unwrap();
    for i in 0..record.len() {
        let direct = m.act_distribution(context, Agent::B, &record.turns()[..i], DEFAULT_MAX_TURNS).unwrap();
        assert_eq!(direct, along[i]);
    }
    let again = model(5, 12, 0.4);
    assert_eq!(again.distributions_along(context, Agent::B, record.turns(), DEFAULT_MAX_TURNS).unwrap(), along);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_are_valid_along_random_rollouts(seed in any::<u64>(), scale in 0.0f64..3.0) {
        let m = model(seed, 6, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let pair = sample_context_pair(&mut rng);
        let mut t = Transcript::new(pair, DEFAULT_MAX_TURNS);
        while !t.is_terminated() {
            let me = t.next_speaker();
            let dist = m.act_distribution(pair.context(me), me, t.turns(), DEFAULT_MAX_TURNS).unwrap();
            let mask = legal_mask(&pair.counts, t.has_proposal());
            assert_valid(&dist, &mask);
            prop_assert_eq!(dist.support_size() <= t.legal_acts().unwrap().len(), true);
            let act = dist.sample(&mut rng);
            prop_assert!(t.check(&act).is_ok());
            let log_prob = m.act_log_prob(pair.context(me), me, t.turns(), DEFAULT_MAX_TURNS, &act).unwrap();
            prop_assert!(log_prob <= 0.0);
            prop_assert!((log_prob - dist.prob(&act).ln()).abs() < 1e-12);
            t.apply(act).unwrap();
        }
        // An illegal act has no log-probability.
        let fresh = Transcript::new(pair, DEFAULT_MAX_TURNS);
        prop_assert!(m.act_log_prob(pair.context(fresh.next_speaker()), fresh.next_speaker(), &[], DEFAULT_MAX_TURNS, &DialogueAct::Agree).is_err());
    }

    #[test]
    fn serialization_round_trips(seed in any::<u64>(), hidden in 1usize..10) {
        let m = model(seed, hidden, 0.3);
        prop_assert_eq!(PolicyModel::from_json(&m.to_json()).unwrap(), m);
    }
}
