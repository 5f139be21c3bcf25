//! Evaluation quantities and the harness that pits a learner against a
//! partner on a fixed set of contexts.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DialogueRecord;
use crate::env::{max_joint_score, sample_context_pair, Agent, ContextPair, Transcript, Turn};
use crate::model::{ModelError, PolicyModel};
use crate::training::{self_play_episode, TrainError};

pub const DEFAULT_EVAL_SEEDS: usize = 20;
pub const HUMAN_STUDY_CONTEXTS: usize = 390;

/// Mean score difference from `agent`'s seat; zero for no records.
pub fn advantage(records: &[DialogueRecord], agent: Agent) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.advantage(agent)).sum::<f64>() / records.len() as f64
}

pub fn agreement_rate(records: &[DialogueRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.outcome().agreed).count() as f64 / records.len() as f64
}

/// Pareto-optimal share of agreed records; `None` without agreements.
pub fn pareto_rate(records: &[DialogueRecord]) -> Option<f64> {
    let agreed: Vec<_> = records.iter().filter(|r| r.outcome().agreed).collect();
    if agreed.is_empty() {
        return None;
    }
    Some(agreed.iter().filter(|r| r.outcome().pareto).count() as f64 / agreed.len() as f64)
}

/// Fractions of records whose scores reach the best joint total, and whose
/// two scores are equal.
pub fn joint_outcome_rates(records: &[DialogueRecord]) -> (f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let n = records.len() as f64;
    let mut joint = 0usize;
    let mut same = 0usize;
    for record in records {
        let o = record.outcome();
        if o.score_a + o.score_b == max_joint_score(record.pair()) {
            joint += 1;
        }
        if o.score_a == o.score_b {
            same += 1;
        }
    }
    (joint as f64 / n, same as f64 / n)
}

/// Sum and count of the partner's probabilities for the learner's acts,
/// with the partner reading from the learner's seat.
pub fn partner_probability_mass(
    record: &DialogueRecord,
    learner: Agent,
    partner: &PolicyModel,
) -> Result<(f64, usize), ModelError> {
    let turns = record.turns();
    let dists = partner.distributions_along(
        record.pair().context(learner),
        learner,
        turns,
        record.transcript().max_turns(),
    )?;
    let mut sum = 0.0;
    let mut count = 0;
    for (turn, dist) in turns.iter().zip(&dists) {
        if turn.speaker == learner {
            sum += dist.prob(&turn.act);
            count += 1;
        }
    }
    Ok((sum, count))
}

/// One minus the partner's mean probability of the learner's acts, pooled
/// over all acts of all records. `None` when the learner never acted.
pub fn novelty(records: &[DialogueRecord], learner: Agent, partner: &PolicyModel) -> Result<Option<f64>, ModelError> {
    let mut sum = 0.0;
    let mut count = 0;
    for record in records {
        let (s, c) = partner_probability_mass(record, learner, partner)?;
        sum += s;
        count += c;
    }
    Ok((count > 0).then(|| 1.0 - sum / count as f64))
}

pub fn mean_length(records: &[DialogueRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.len() as f64).sum::<f64>() / records.len() as f64
}

// ---------------------------------------------------------------------------
// Pairing harness

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    Sampled,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub contexts: usize,
    pub seeds: usize,
    pub mode: RolloutMode,
    /// Seed of the fixed context set.
    pub context_seed: u64,
    pub max_turns: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            contexts: 200,
            seeds: DEFAULT_EVAL_SEEDS,
            mode: RolloutMode::Sampled,
            context_seed: 0x5eed,
            max_turns: crate::env::DEFAULT_MAX_TURNS,
        }
    }
}

/// The fixed evaluation context set for a suite.
pub fn evaluation_contexts(seed: u64, n: usize) -> Vec<ContextPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_context_pair(&mut rng)).collect()
}

/// Mean with its standard error over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Option<Estimate> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let stderr = if samples.len() > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(Estimate { mean, stderr })
    }
}

/// Metrics of one seed's rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub advantage: f64,
    pub pareto_rate: Option<f64>,
    pub agreement_rate: f64,
    pub novelty: Option<f64>,
    pub joint_max_rate: f64,
    pub same_score_rate: f64,
    pub mean_length: f64,
    pub mean_score: f64,
}

impl SeedMetrics {
    pub fn compute(
        seed: u64,
        records: &[DialogueRecord],
        learner: Agent,
        partner: &PolicyModel,
    ) -> Result<SeedMetrics, ModelError> {
        let (joint_max_rate, same_score_rate) = joint_outcome_rates(records);
        let mean_score = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.outcome().score(learner) as f64).sum::<f64>() / records.len() as f64
        };
        Ok(SeedMetrics {
            seed,
            advantage: advantage(records, learner),
            pareto_rate: pareto_rate(records),
            agreement_rate: agreement_rate(records),
            novelty: novelty(records, learner, partner)?,
            joint_max_rate,
            same_score_rate,
            mean_length: mean_length(records),
            mean_score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub advantage: Estimate,
    pub pareto_rate: Option<Estimate>,
    pub agreement_rate: Estimate,
    pub novelty: Option<Estimate>,
    pub joint_max_rate: Estimate,
    pub same_score_rate: Estimate,
    pub mean_length: Estimate,
    pub mean_score: Estimate,
    pub n_negotiations: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
}

impl EvalReport {
    pub fn from_seeds(per_seed: Vec<SeedMetrics>, n_negotiations: usize) -> EvalReport {
        let column = |f: &dyn Fn(&SeedMetrics) -> Option<f64>| -> Option<Estimate> {
            let values: Vec<f64> = per_seed.iter().filter_map(f).collect();
            Estimate::from_samples(&values)
        };
        let zero = Estimate { mean: 0.0, stderr: 0.0 };
        EvalReport {
            advantage: column(&|s| Some(s.advantage)).unwrap_or(zero),
            pareto_rate: column(&|s| s.pareto_rate),
            agreement_rate: column(&|s| Some(s.agreement_rate)).unwrap_or(zero),
            novelty: column(&|s| s.novelty),
            joint_max_rate: column(&|s| Some(s.joint_max_rate)).unwrap_or(zero),
            same_score_rate: column(&|s| Some(s.same_score_rate)).unwrap_or(zero),
            mean_length: column(&|s| Some(s.mean_length)).unwrap_or(zero),
            mean_score: column(&|s| Some(s.mean_score)).unwrap_or(zero),
            n_negotiations,
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            per_seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per seed plus header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record([
            "seed",
            "advantage",
            "pareto",
            "agreement",
            "novelty",
            "joint_max",
            "same_score",
            "mean_length",
            "mean_score",
        ])?;
        for s in &self.per_seed {
            out.write_record([
                s.seed.to_string(),
                fmt_metric(s.advantage),
                s.pareto_rate.map(fmt_metric).unwrap_or_default(),
                fmt_metric(s.agreement_rate),
                s.novelty.map(fmt_metric).unwrap_or_default(),
                fmt_metric(s.joint_max_rate),
                fmt_metric(s.same_score_rate),
                fmt_metric(s.mean_length),
                fmt_metric(s.mean_score),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Fixed-precision rendering used in every CSV this crate writes.
pub fn fmt_metric(value: f64) -> String {
    format!("{value:.6}")
}

/// Plays the learner (seat A) against `partner` (seat B) until the end;
/// greedy mode takes each side's most probable act.
pub fn rollout<R: Rng + ?Sized>(
    learner: &PolicyModel,
    partner: &PolicyModel,
    pair: ContextPair,
    max_turns: usize,
    mode: RolloutMode,
    rng: &mut R,
) -> Result<DialogueRecord, TrainError> {
    if mode == RolloutMode::Sampled {
        return Ok(self_play_episode(learner, partner, pair, max_turns, rng)?.record);
    }
    let mut transcript = Transcript::new(pair, max_turns);
    let mut states = [
        learner.begin(pair.context(Agent::A), Agent::A, max_turns),
        partner.begin(pair.context(Agent::B), Agent::B, max_turns),
    ];
    while !transcript.is_terminated() {
        let speaker = transcript.next_speaker();
        let model = if speaker == Agent::A { learner } else { partner };
        let act = model.distribution(&states[speaker.index()])?.argmax();
        transcript.apply(act)?;
        let turn = Turn { speaker, act };
        learner.observe(&mut states[0], &turn);
        partner.observe(&mut states[1], &turn);
    }
    let selection_a = learner.predict_selection(&transcript, Agent::A);
    let selection_b = partner.predict_selection(&transcript, Agent::B);
    Ok(DialogueRecord::new(transcript, selection_a, selection_b)?)
}

/// Runs every context once per seed and aggregates per-seed metrics.
/// Novelty is measured against `partner`.
pub fn evaluate_pairing(
    learner: &PolicyModel,
    partner: &PolicyModel,
    contexts: &[ContextPair],
    seeds: &[u64],
    spec: &EvalSpec,
) -> Result<EvalReport, TrainError> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = contexts
            .iter()
            .map(|pair| rollout(learner, partner, *pair, spec.max_turns, spec.mode, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        per_seed.push(SeedMetrics::compute(seed, &records, Agent::A, partner)?);
    }
    Ok(EvalReport::from_seeds(per_seed, contexts.len() * seeds.len()))
}
