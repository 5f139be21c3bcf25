use negolab_core::corpus::{generate_synthetic_corpus, filter_by_quality, Corpus, Provenance, StyleMixture};
use negolab_core::env::{Agent, DialogueAct, Turn};
use negolab_core::model::PolicyModel;
use negolab_core::training::{
    reinforce_coefficients, reinforce_update, rl_train, self_play_episode, sl_train, BaselineState, Episode,
    RlConfig, Schedule, SlConfig,
};
use negolab_core::env::sample_context_pair;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, hidden: usize) -> PolicyModel {
    PolicyModel::init(&mut ChaCha8Rng::seed_from_u64(seed), hidden, 0.1).unwrap()
}

fn episode(alice: &PolicyModel, bob: &PolicyModel, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let e = self_play_episode(alice, bob, sample_context_pair(&mut rng), 20, &mut rng).unwrap();
        if e.record.transcript().acts_by(Agent::A).count() > 0 {
            return e;
        }
    }
}

#[test]
fn reward_at_the_baseline_leaves_parameters_unchanged() {
    let bob = model(2, 8);
    for seed in 0..20 {
        let mut alice = model(1, 8);
        let e = episode(&alice, &bob, seed);
        let reward = e.record.outcome().score_a as f64;
        let mut baseline = BaselineState::default();
        baseline.update(reward);
        let before = alice.clone();
        for learning_rate in [1e-3, 1.0, 1e6] {
            let config = RlConfig { learning_rate, ..RlConfig::default() };
            let step = reinforce_update(&mut alice, &e, &mut baseline.clone(), &config).unwrap();
            assert_eq!(step.baseline_before, reward);
            assert_eq!(alice.params(), before.params());
        }
        // Any other reward moves her.
        let mut off = BaselineState::default();
        off.update(reward + 1.0);
        reinforce_update(&mut alice, &e, &mut off, &RlConfig::default()).unwrap();
        assert_ne!(alice.params(), before.params());
    }
}

#[test]
fn frozen_partner_is_bit_identical_after_training() {
    let bob = model(4, 8);
    let snapshot = bob.to_json();
    let schedule = Schedule { episodes: 60, episodes_per_epoch: 20, ..Schedule::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut epochs = Vec::new();
    let trained = rl_train(model(3, 8), &bob, schedule, RlConfig::default(), SlConfig::default(), None, &mut rng, |epoch, _, episodes| {
        epochs.push((epoch, episodes.len()));
        Ok(())
    })
    .unwrap();
    assert_eq!(bob.to_json(), snapshot);
    assert_ne!(trained.params(), model(3, 8).params());
    assert_eq!(epochs, vec![(1, 20), (2, 20), (3, 20)]);
}

#[test]
fn interleaved_training_is_reproducible() {
    let data = filter_by_quality(&generate_synthetic_corpus(1, 200, &StyleMixture::default()).unwrap(), 0.5).unwrap();
    let bob = model(6, 8);
    let schedule = Schedule { sl_period: Some(4), episodes: 40, episodes_per_epoch: 20, ..Schedule::default() };
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rl_train(model(5, 8), &bob, schedule, RlConfig::default(), SlConfig::default(), Some(&data), &mut rng, |_, _, _| Ok(()))
            .unwrap()
    };
    assert_eq!(run(), run());
    // Interleaving needs supervised data.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    assert!(rl_train(model(5, 8), &bob, schedule, RlConfig::default(), SlConfig::default(), None, &mut rng, |_, _, _| Ok(())).is_err());
}

#[test]
fn supervised_loss_decreases() {
    let data = generate_synthetic_corpus(2, 300, &StyleMixture::default()).unwrap();
    let mut m = model(8, 16);
    let config = SlConfig { epochs: 6, ..SlConfig::default() };
    let curve = sl_train(&mut m, &data, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let violations = curve.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations <= 1, "curve {curve:?}");
    assert!(curve.last() < curve.first());
}

#[test]
fn supervised_training_overfits_repeated_dialogue() {
    let source = generate_synthetic_corpus(3, 1, &StyleMixture::default()).unwrap();
    let repeated = Corpus::new(vec![source.records()[0].clone(); 16], Provenance::Mixed);
    let mut m = model(10, 16);
    let config = SlConfig { epochs: 60, learning_rate: 0.1, ..SlConfig::default() };
    let curve = sl_train(&mut m, &repeated, &config, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let record = &source.records()[0];
    assert!(*curve.last().unwrap() < 0.05 * curve[0], "curve ends at {:?}", curve.last());
    // Greedy reading now reproduces every act of the dialogue.
    for me in [Agent::A, Agent::B] {
        let context = record.pair().context(me);
        for (i, turn) in record.turns().iter().enumerate().filter(|(_, t)| t.speaker == me) {
            let dist = m.act_distribution(context, me, &record.turns()[..i], 20).unwrap();
            assert_eq!(dist.argmax(), turn.act, "position {i}");
        }
    }
}

#[test]
fn empty_and_invalid_training_inputs() {
    let mut m = model(0, 4);
    let empty = Corpus::new(Vec::new(), Provenance::Mixed);
    assert!(sl_train(&mut m, &empty, &SlConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(SlConfig { batch_size: 0, ..SlConfig::default() }.validate().is_err());
    assert!(RlConfig { gamma: 0.0, ..RlConfig::default() }.validate().is_err());
    assert!(RlConfig { gamma: 1.5, ..RlConfig::default() }.validate().is_err());
    assert!(Schedule { sl_period: Some(0), ..Schedule::default() }.validate().is_err());
    assert!(Schedule { sl_period: Some(3001), ..Schedule::default() }.validate().is_err());
    assert!(Schedule { sl_period: Some(3000), ..Schedule::default() }.validate().is_ok());
}

fn alternating(length: usize) -> Vec<Turn> {
    (0..length)
        .map(|i| Turn { speaker: if i % 2 == 0 { Agent::A } else { Agent::B }, act: DialogueAct::Disagree })
        .collect()
}

proptest! {
    #[test]
    fn baseline_is_the_exact_mean(rewards in prop::collection::vec(0u32..=11, 1..200)) {
        let mut baseline = BaselineState::default();
        for r in &rewards {
            baseline.update(*r as f64);
        }
        let sum: u32 = rewards.iter().sum();
        let exact = sum as f64 / rewards.len() as f64;
        prop_assert!((baseline.mean() - exact).abs() <= 1e-12 * exact.max(1.0));
        prop_assert_eq!(baseline.count(), rewards.len() as u64);
    }

    #[test]
    fn coefficients_grow_towards_the_end(length in 1usize..=20, gamma in 0.05f64..0.999, centered in 0.01f64..10.0) {
        let turns = alternating(length);
        let c = reinforce_coefficients(&turns, Agent::A, gamma, centered);
        let own: Vec<f64> = c.iter().copied().enumerate().filter(|(i, _)| i % 2 == 0).map(|(_, v)| v).collect();
        prop_assert!(own.windows(2).all(|w| w[0] < w[1]));
        for (i, v) in c.iter().enumerate() {
            if i % 2 == 1 {
                prop_assert_eq!(*v, 0.0);
            } else {
                let expected = gamma.powi((length - i - 1) as i32) * centered;
                prop_assert!((v - expected).abs() <= 1e-12 * expected.abs());
            }
        }
    }
}
