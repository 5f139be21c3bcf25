//! Targeted data acquisition. The partner scores each of the learner's
//! negotiations by how surprising the learner's acts were to it, the most
//! surprising ones are handed to an expert who takes over the partner's
//! seat from the flagged turn, and the partner is retrained on the grown
//! dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, DialogueRecord, Provenance};
use crate::env::{Agent, Transcript};
use crate::model::{ActDistribution, ModelError, PolicyModel};
use crate::training::{play_out, sl_step, sl_train, SlConfig, TrainError};

pub const DEFAULT_ANNOTATION_BUDGET: usize = 200;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("negotiation {id} has no acts by the learner")]
    NoLearnerActs { id: usize },
    #[error("negotiation {id} has no position with two or more legal acts")]
    NoMargin { id: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcquisitionFunction {
    Likelihood,
    Entropy,
    Margin,
    Random,
}

impl AcquisitionFunction {
    pub const ALL: [AcquisitionFunction; 4] = [
        AcquisitionFunction::Likelihood,
        AcquisitionFunction::Entropy,
        AcquisitionFunction::Margin,
        AcquisitionFunction::Random,
    ];

    /// Whether larger scores are more novel.
    pub fn prefers_large(self) -> bool {
        self == AcquisitionFunction::Entropy
    }

    pub fn name(self) -> &'static str {
        match self {
            AcquisitionFunction::Likelihood => "likelihood",
            AcquisitionFunction::Entropy => "entropy",
            AcquisitionFunction::Margin => "margin",
            AcquisitionFunction::Random => "random",
        }
    }
}

/// Which agents learn from the expert's annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    /// Only the partner is retrained; the expert reaches the learner
    /// indirectly.
    Second,
    /// The learner is trained on the annotations as well.
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartnerRetrain {
    /// New random weights each epoch, trained on the merged dataset.
    Fresh,
    /// Continue from the current partner weights.
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub function: AcquisitionFunction,
    /// Annotation budget per epoch.
    pub k: usize,
    pub order: Order,
    pub retrain: PartnerRetrain,
    /// Step size for the learner's passes over fresh annotations
    /// (first-order only).
    pub learner_learning_rate: f64,
    pub learner_passes: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            function: AcquisitionFunction::Likelihood,
            k: DEFAULT_ANNOTATION_BUDGET,
            order: Order::Second,
            retrain: PartnerRetrain::Fresh,
            learner_learning_rate: 0.05,
            learner_passes: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyScore {
    pub id: usize,
    pub score: f64,
    /// Transcript position of the learner act that attains the score.
    pub flagged: usize,
}

/// The partner's predictive distributions at each of the learner's
/// positions, read from the learner's seat and context.
fn learner_positions(
    record: &DialogueRecord,
    learner: Agent,
    partner: &PolicyModel,
) -> Result<Vec<(usize, ActDistribution)>, ModelError> {
    let turns = record.turns();
    let dists = partner.distributions_along(
        record.pair().context(learner),
        learner,
        turns,
        record.transcript().max_turns(),
    )?;
    Ok(dists
        .into_iter()
        .enumerate()
        .filter(|(i, _)| turns[*i].speaker == learner)
        .collect())
}

/// Reduces per-position values, keeping the first extremum.
fn extremum(
    id: usize,
    values: impl Iterator<Item = (usize, f64)>,
    larger: bool,
) -> Option<NoveltyScore> {
    let mut best: Option<NoveltyScore> = None;
    for (flagged, score) in values {
        let better = match best {
            None => true,
            Some(b) if larger => score > b.score,
            Some(b) => score < b.score,
        };
        if better {
            best = Some(NoveltyScore { id, score, flagged });
        }
    }
    best
}

/// Lowest log-probability the partner assigns to any learner act.
pub fn score_likelihood(
    id: usize,
    record: &DialogueRecord,
    learner: Agent,
    partner: &PolicyModel,
) -> Result<NoveltyScore, AcquisitionError> {
    let turns = record.turns();
    let positions = learner_positions(record, learner, partner)?;
    extremum(id, positions.iter().map(|(i, d)| (*i, d.prob(&turns[*i].act).ln())), false)
        .ok_or(AcquisitionError::NoLearnerActs { id })
}

/// Highest entropy of the partner's distribution at a learner position.
pub fn score_entropy(
    id: usize,
    record: &DialogueRecord,
    learner: Agent,
    partner: &PolicyModel,
) -> Result<NoveltyScore, AcquisitionError> {
    let positions = learner_positions(record, learner, partner)?;
    extremum(id, positions.iter().map(|(i, d)| (*i, d.entropy())), true)
        .ok_or(AcquisitionError::NoLearnerActs { id })
}

/// Smallest gap between the partner's two most likely acts at a learner
/// position; positions with a single legal act are skipped.
pub fn score_margin(
    id: usize,
    record: &DialogueRecord,
    learner: Agent,
    partner: &PolicyModel,
) -> Result<NoveltyScore, AcquisitionError> {
    let positions = learner_positions(record, learner, partner)?;
    if positions.is_empty() {
        return Err(AcquisitionError::NoLearnerActs { id });
    }
    extremum(id, positions.iter().filter_map(|(i, d)| d.margin().map(|m| (*i, m))), false)
        .ok_or(AcquisitionError::NoMargin { id })
}

/// Uniform score in `[0, 1)` and a uniformly chosen learner act.
pub fn score_random<R: Rng + ?Sized>(
    id: usize,
    record: &DialogueRecord,
    learner: Agent,
    rng: &mut R,
) -> Result<NoveltyScore, AcquisitionError> {
    let positions: Vec<usize> = record.transcript().acts_by(learner).map(|(i, _)| i).collect();
    if positions.is_empty() {
        return Err(AcquisitionError::NoLearnerActs { id });
    }
    let score = rng.random::<f64>();
    let flagged = positions[rng.random_range(0..positions.len())];
    Ok(NoveltyScore { id, score, flagged })
}

pub fn score_record<R: Rng + ?Sized>(
    function: AcquisitionFunction,
    id: usize,
    record: &DialogueRecord,
    learner: Agent,
    partner: &PolicyModel,
    rng: &mut R,
) -> Result<NoveltyScore, AcquisitionError> {
    match function {
        AcquisitionFunction::Likelihood => score_likelihood(id, record, learner, partner),
        AcquisitionFunction::Entropy => score_entropy(id, record, learner, partner),
        AcquisitionFunction::Margin => score_margin(id, record, learner, partner),
        AcquisitionFunction::Random => score_random(id, record, learner, rng),
    }
}

/// Ids of the `k` most novel scores: smallest first, or largest first for
/// entropy. Ties go to the lower id.
pub fn select_for_annotation(
    scores: &[NoveltyScore],
    function: AcquisitionFunction,
    k: usize,
) -> Vec<usize> {
    let mut ranked: Vec<&NoveltyScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        let by_score = if function.prefers_large() {
            b.score.total_cmp(&a.score)
        } else {
            a.score.total_cmp(&b.score)
        };
        by_score.then(a.id.cmp(&b.id))
    });
    ranked.into_iter().take(k).map(|s| s.id).collect()
}

/// A negotiation completed by the expert from the flagged turn onward.
#[derive(Debug, Clone)]
pub struct AnnotatedDialogue {
    pub record: DialogueRecord,
    /// Acts kept from the original negotiation.
    pub prefix_len: usize,
}

impl AnnotatedDialogue {
    /// Share of the final transcript produced after the takeover.
    pub fn annotated_fraction(&self) -> f64 {
        (self.record.len() - self.prefix_len) as f64 / self.record.len() as f64
    }
}

/// Keeps the negotiation up to and including the flagged learner act, then
/// lets `expert` play the partner's seat against `learner_model` until the
/// end. Returns `None` when the prefix already ends the negotiation.
pub fn expert_annotate<R: Rng + ?Sized>(
    record: &DialogueRecord,
    flagged: usize,
    expert: &PolicyModel,
    learner_model: &PolicyModel,
    rng: &mut R,
) -> Result<Option<AnnotatedDialogue>, TrainError> {
    let prefix = &record.turns()[..=flagged];
    let transcript = Transcript::replay(*record.pair(), record.transcript().max_turns(), prefix.iter().copied())?;
    if transcript.is_terminated() {
        return Ok(None);
    }
    let episode = play_out(learner_model, expert, transcript, rng)?;
    Ok(Some(AnnotatedDialogue { record: episode.record, prefix_len: prefix.len() }))
}

/// How the partner is rebuilt after each acquisition step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartnerSpec {
    pub hidden: usize,
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionReport {
    pub scored: usize,
    pub selected: usize,
    /// Annotations that survived deduplication against the dataset.
    pub annotated: usize,
    pub skipped: usize,
    pub mean_annotated_fraction: Option<f64>,
    pub dprime_advantage: Option<f64>,
    pub dprime_pareto: Option<f64>,
    pub dataset_size: usize,
}

/// One acquisition step over an epoch's negotiations: score against the
/// current partner, annotate the top `k`, merge into `dataset`, retrain the
/// partner (and, first-order, the learner) on the result.
#[allow(clippy::too_many_arguments)]
pub fn acquisition_epoch<R: Rng + ?Sized>(
    learner_model: &mut PolicyModel,
    partner: &mut PolicyModel,
    dataset: &mut Corpus,
    episodes: &[DialogueRecord],
    learner: Agent,
    expert: &PolicyModel,
    config: &AcquisitionConfig,
    sl: &SlConfig,
    partner_spec: PartnerSpec,
    rng: &mut R,
) -> Result<AcquisitionReport, AcquisitionError> {
    let mut scores = Vec::with_capacity(episodes.len());
    for (id, record) in episodes.iter().enumerate() {
        match score_record(config.function, id, record, learner, partner, rng) {
            Ok(score) => scores.push(score),
            Err(AcquisitionError::NoLearnerActs { .. } | AcquisitionError::NoMargin { .. }) => {}
            Err(other) => return Err(other),
        }
    }
    let selected = select_for_annotation(&scores, config.function, config.k);

    let mut annotations = Vec::with_capacity(selected.len());
    let mut fractions = Vec::with_capacity(selected.len());
    let mut skipped = 0;
    for id in &selected {
        let flagged = scores.iter().find(|s| s.id == *id).expect("selected id was scored").flagged;
        match expert_annotate(&episodes[*id], flagged, expert, learner_model, rng) {
            Ok(Some(annotated)) => {
                fractions.push(annotated.annotated_fraction());
                annotations.push(annotated.record);
            }
            Ok(None) => skipped += 1,
            Err(error) => {
                tracing::warn!(negotiation = id, %error, "skipping annotation");
                skipped += 1;
            }
        }
    }
    let fresh = Corpus::deduplicated(annotations, Provenance::Annotated);
    let dprime_advantage = (!fresh.is_empty()).then(|| {
        fresh.records().iter().map(|r| r.advantage(learner)).sum::<f64>() / fresh.len() as f64
    });
    let agreed: Vec<_> = fresh.records().iter().filter(|r| r.outcome().agreed).collect();
    let dprime_pareto = (!agreed.is_empty())
        .then(|| agreed.iter().filter(|r| r.outcome().pareto).count() as f64 / agreed.len() as f64);
    let added = dataset.merge(&fresh);

    if !dataset.is_empty() {
        match config.retrain {
            PartnerRetrain::Fresh => {
                let mut init_rng = ChaCha8Rng::seed_from_u64(rng.random());
                *partner = PolicyModel::init(&mut init_rng, partner_spec.hidden, partner_spec.init_scale)?;
            }
            PartnerRetrain::FineTune => partner.reset_optimizer(),
        }
        sl_train(partner, dataset, sl, rng)?;
    }
    if config.order == Order::First && !fresh.is_empty() {
        let examples = fresh.perspectives();
        for _ in 0..config.learner_passes {
            for chunk in examples.chunks(sl.batch_size) {
                sl_step(learner_model, chunk, sl.alpha, config.learner_learning_rate, sl.clip_norm)?;
            }
        }
    }

    Ok(AcquisitionReport {
        scored: scores.len(),
        selected: selected.len(),
        annotated: added,
        skipped,
        mean_annotated_fraction: (!fractions.is_empty())
            .then(|| fractions.iter().sum::<f64>() / fractions.len() as f64),
        dprime_advantage,
        dprime_pareto,
        dataset_size: dataset.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(values: &[f64]) -> Vec<NoveltyScore> {
        values.iter().enumerate().map(|(id, &score)| NoveltyScore { id, score, flagged: 0 }).collect()
    }

    #[test]
    fn selects_smallest_with_id_ties() {
        let s = scores(&[0.5, -1.0, 0.5, -2.0]);
        assert_eq!(select_for_annotation(&s, AcquisitionFunction::Likelihood, 3), vec![3, 1, 0]);
        assert_eq!(select_for_annotation(&s, AcquisitionFunction::Entropy, 2), vec![0, 2]);
    }

    #[test]
    fn budget_larger_than_pool_takes_all() {
        let s = scores(&[0.1, 0.2]);
        assert_eq!(select_for_annotation(&s, AcquisitionFunction::Random, 500).len(), 2);
    }
}
