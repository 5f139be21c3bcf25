//! Central finite differences against the analytic backward pass.

use negolab_core::env::{sample_context_pair, Agent, Transcript, Turn, DEFAULT_MAX_TURNS};
use negolab_core::model::{LossGraph, PolicyModel};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

fn random_transcript(rng: &mut ChaCha8Rng) -> Transcript {
    let pair = sample_context_pair(rng);
    let mut t = Transcript::new(pair, DEFAULT_MAX_TURNS);
    let len = rng.random_range(1..8);
    while !t.is_terminated() && t.len() < len {
        let legal = t.legal_acts().unwrap();
        t.apply(*legal.choose(rng).unwrap()).unwrap();
    }
    t
}

fn check(model: &mut PolicyModel, graph: &LossGraph<'_>, coords: &[usize]) -> usize {
    let (_, grads) = model.backward(graph).unwrap();
    let mut bad = 0;
    for &i in coords {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + EPS;
        let up = model.loss(graph).unwrap();
        model.params_mut()[i] = orig - EPS;
        let down = model.loss(graph).unwrap();
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        let analytic = grads.values()[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        if rel > REL_TOL {
            eprintln!("coord {i}: numeric {numeric:e} analytic {analytic:e}");
            bad += 1;
        }
    }
    bad
}

fn coordinates(model: &PolicyModel, rng: &mut ChaCha8Rng, per_block: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for block in model.blocks() {
        for _ in 0..per_block {
            out.push(block.offset + rng.random_range(0..block.len()));
        }
    }
    out
}

fn weights(turns: &[Turn], me: Agent, rng: &mut ChaCha8Rng) -> Vec<f64> {
    turns
        .iter()
        .map(|t| if t.speaker == me { rng.random_range(-1.5..1.5) } else { rng.random_range(0.0..0.5) })
        .collect()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = PolicyModel::init(&mut rng, 4, 0.5).unwrap();
    let mut checked = 0;
    let mut bad = 0;
    for _ in 0..6 {
        let t = random_transcript(&mut rng);
        let me = if rng.random_bool(0.5) { Agent::A } else { Agent::B };
        let sel = t.pair().counts.everything();
        let graph = LossGraph {
            context: t.pair().context(me),
            me,
            turns: t.turns(),
            max_turns: t.max_turns(),
            act_weights: weights(t.turns(), me, &mut rng),
            selection: Some((sel, 0.5)),
        };
        let coords = coordinates(&model, &mut rng, 3);
        checked += coords.len();
        bad += check(&mut model, &graph, &coords);
    }
    assert!(checked >= 200);
    assert_eq!(bad, 0, "{bad} of {checked} coordinates off");
}
