//! Supervised pretraining, REINFORCE self-play against a partner, and the
//! interleaved schedule that mixes the two.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, DialogueRecord, PerspectiveExample};
use crate::env::{sample_context_pair, Agent, ContextPair, EnvError, Outcome, Transcript, Turn};
use crate::model::{Gradients, LossGraph, ModelError, PolicyModel};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.95;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;
pub const DEFAULT_EPISODES_PER_EPOCH: usize = 500;
pub const DEFAULT_SL_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at {stage} {index}: {source}")]
    Diverged {
        stage: &'static str,
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlConfig {
    /// Weight of the selection term.
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied when an epoch fails to improve.
    pub anneal: f64,
    pub clip_norm: f64,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig {
            alpha: DEFAULT_ALPHA,
            batch_size: DEFAULT_SL_BATCH,
            epochs: 12,
            learning_rate: 0.1,
            anneal: 0.5,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

impl SlConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha >= 0.0) {
            return Err(TrainError::Config("alpha must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return Err(TrainError::Config("learning rate or anneal factor out of range".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardVariant {
    Plain,
    ParetoBonus,
    ParetoBonusNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub variant: RewardVariant,
    pub clip_norm: f64,
    pub max_turns: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            gamma: DEFAULT_GAMMA,
            learning_rate: 0.002,
            variant: RewardVariant::Plain,
            clip_norm: DEFAULT_CLIP_NORM,
            max_turns: crate::env::DEFAULT_MAX_TURNS,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TrainError::Config("gamma must lie in (0, 1]".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("learning rate or clip norm out of range".into()));
        }
        if self.max_turns == 0 {
            return Err(TrainError::Config("turn cap must be positive".into()));
        }
        Ok(())
    }
}

/// When supervised minibatches are mixed into self-play.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// One supervised minibatch after every `n`-th episode; `None` for
    /// pure self-play.
    pub sl_period: Option<usize>,
    pub episodes: usize,
    pub episodes_per_epoch: usize,
    /// Perspectives per interleaved minibatch.
    pub sl_batch: usize,
    /// Step size of interleaved supervised updates.
    pub sl_learning_rate: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            sl_period: None,
            episodes: 6 * DEFAULT_EPISODES_PER_EPOCH,
            episodes_per_epoch: DEFAULT_EPISODES_PER_EPOCH,
            sl_batch: DEFAULT_SL_BATCH,
            sl_learning_rate: 0.05,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.episodes == 0 || self.episodes_per_epoch == 0 {
            return Err(TrainError::Config("episode counts must be positive".into()));
        }
        if let Some(n) = self.sl_period {
            if n == 0 || n > self.episodes {
                return Err(TrainError::Config(format!(
                    "interleave period {n} must lie in 1..={}",
                    self.episodes
                )));
            }
            if self.sl_batch == 0 {
                return Err(TrainError::Config("interleaved batch must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.episodes.div_ceil(self.episodes_per_epoch)
    }
}

// ---------------------------------------------------------------------------
// Supervised learning

/// Loss graph for one seat view: every own act at weight one plus the
/// selection heads at weight `alpha`.
pub fn sl_graph<'a>(example: &PerspectiveExample<'a>, alpha: f64) -> LossGraph<'a> {
    LossGraph {
        context: example.context,
        me: example.me,
        turns: example.turns,
        max_turns: example.max_turns,
        act_weights: example
            .turns
            .iter()
            .map(|t| if t.speaker == example.me { 1.0 } else { 0.0 })
            .collect(),
        selection: (alpha > 0.0).then_some((example.target, alpha)),
    }
}

/// Negative log-likelihood of a seat's own acts and, weighted by `alpha`,
/// of its final share.
pub fn sl_loss(
    model: &PolicyModel,
    example: &PerspectiveExample<'_>,
    alpha: f64,
) -> Result<(f64, Gradients), ModelError> {
    model.backward(&sl_graph(example, alpha))
}

/// One averaged minibatch step. Returns the mean loss.
pub fn sl_step(
    model: &mut PolicyModel,
    batch: &[PerspectiveExample<'_>],
    alpha: f64,
    learning_rate: f64,
    clip_norm: f64,
) -> Result<f64, ModelError> {
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for example in batch {
        let (l, g) = sl_loss(model, example, alpha)?;
        loss += l;
        total.add(&g);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    model.apply_gradients(&total, learning_rate, clip_norm)?;
    Ok(loss * scale)
}

/// Minibatch training over shuffled seat views. Returns the mean loss of
/// each epoch. The step size is annealed whenever an epoch fails to beat
/// the best mean so far.
pub fn sl_train<R: Rng + ?Sized>(
    model: &mut PolicyModel,
    corpus: &Corpus,
    config: &SlConfig,
    rng: &mut R,
) -> Result<Vec<f64>, TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let examples = corpus.perspectives();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut learning_rate = config.learning_rate;
    let mut best = f64::INFINITY;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| examples[i]).collect();
            let loss = sl_step(model, &batch, config.alpha, learning_rate, config.clip_norm)
                .map_err(|source| TrainError::Diverged { stage: "supervised epoch", index: epoch, source })?;
            sum += loss * batch.len() as f64;
        }
        let mean = sum / examples.len() as f64;
        if mean >= best {
            learning_rate *= config.anneal;
        }
        best = best.min(mean);
        curve.push(mean);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Self-play

/// A finished self-play negotiation with the learner's per-act
/// log-probabilities (in order of its acts).
#[derive(Debug, Clone)]
pub struct Episode {
    pub record: DialogueRecord,
    pub learner: Agent,
    pub log_probs: Vec<f64>,
}

/// Samples acts for both seats until termination; the learner sits in
/// seat A. Both sides then select through their own models.
pub fn self_play_episode<R: Rng + ?Sized>(
    alice: &PolicyModel,
    bob: &PolicyModel,
    pair: ContextPair,
    max_turns: usize,
    rng: &mut R,
) -> Result<Episode, TrainError> {
    let transcript = Transcript::new(pair, max_turns);
    play_out(alice, bob, transcript, rng)
}

/// Continues `transcript` to termination with `alice` in seat A and
/// `bob` in seat B, then records the outcome. Log-probabilities cover only
/// the acts sampled here.
pub fn play_out<R: Rng + ?Sized>(
    alice: &PolicyModel,
    bob: &PolicyModel,
    mut transcript: Transcript,
    rng: &mut R,
) -> Result<Episode, TrainError> {
    let pair = *transcript.pair();
    let max_turns = transcript.max_turns();
    let mut states = [
        alice.read(pair.context(Agent::A), Agent::A, transcript.turns(), max_turns),
        bob.read(pair.context(Agent::B), Agent::B, transcript.turns(), max_turns),
    ];
    let mut log_probs = Vec::new();
    while !transcript.is_terminated() {
        let speaker = transcript.next_speaker();
        let model = if speaker == Agent::A { alice } else { bob };
        let (act, log_prob) = model.sample_act(&states[speaker.index()], rng)?;
        if speaker == Agent::A {
            log_probs.push(log_prob);
        }
        transcript.apply(act)?;
        let turn = Turn { speaker, act };
        alice.observe(&mut states[0], &turn);
        bob.observe(&mut states[1], &turn);
    }
    let selection_a = alice.predict_selection(&transcript, Agent::A);
    let selection_b = bob.predict_selection(&transcript, Agent::B);
    Ok(Episode {
        record: DialogueRecord::new(transcript, selection_a, selection_b)?,
        learner: Agent::A,
        log_probs,
    })
}

/// Running mean of completed-negotiation rewards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    mean: f64,
    count: u64,
}

impl BaselineState {
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, reward: f64) {
        self.count += 1;
        self.mean += (reward - self.mean) / self.count as f64;
    }
}

/// Reward after engineering: `r`, `r + p` or `r / 10 + p`, where `p` is one
/// for an agreed Pareto-optimal outcome.
pub fn engineered_reward(outcome: &Outcome, agent: Agent, variant: RewardVariant) -> f64 {
    let score = outcome.score(agent) as f64;
    let bonus = if outcome.agreed && outcome.pareto { 1.0 } else { 0.0 };
    match variant {
        RewardVariant::Plain => score,
        RewardVariant::ParetoBonus => score + bonus,
        RewardVariant::ParetoBonusNormalized => score / crate::env::TOTAL_VALUE as f64 + bonus,
    }
}

/// Per-turn coefficients `gamma^(T - t) * (reward - baseline)` for the
/// learner's acts, zero elsewhere; `t` counts from one over the whole
/// transcript.
pub fn reinforce_coefficients(turns: &[Turn], learner: Agent, gamma: f64, centered: f64) -> Vec<f64> {
    let length = turns.len();
    turns
        .iter()
        .enumerate()
        .map(|(i, turn)| {
            if turn.speaker == learner {
                gamma.powi((length - (i + 1)) as i32) * centered
            } else {
                0.0
            }
        })
        .collect()
}

/// Loss graph of the policy-gradient surrogate
/// `-sum_t R(x_t) log p(x_t | ...)` over the learner's acts.
pub fn reinforce_graph<'a>(
    record: &'a DialogueRecord,
    learner: Agent,
    coefficients: Vec<f64>,
) -> LossGraph<'a> {
    LossGraph {
        context: record.pair().context(learner),
        me: learner,
        turns: record.turns(),
        max_turns: record.transcript().max_turns(),
        act_weights: coefficients,
        selection: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReinforceStep {
    pub reward: f64,
    pub baseline_before: f64,
    pub grad_norm: f64,
}

/// One on-policy update from a finished episode, then the baseline absorbs
/// the (engineered) reward. A reward equal to the baseline leaves the
/// parameters untouched.
pub fn reinforce_update(
    alice: &mut PolicyModel,
    episode: &Episode,
    baseline: &mut BaselineState,
    config: &RlConfig,
) -> Result<ReinforceStep, ModelError> {
    let reward = engineered_reward(episode.record.outcome(), episode.learner, config.variant);
    let before = baseline.mean();
    let coefficients =
        reinforce_coefficients(episode.record.turns(), episode.learner, config.gamma, reward - before);
    let mut grad_norm = 0.0;
    if coefficients.iter().any(|c| *c != 0.0) {
        let graph = reinforce_graph(&episode.record, episode.learner, coefficients);
        let (_, grads) = alice.backward(&graph)?;
        grad_norm = alice.apply_gradients(&grads, config.learning_rate, config.clip_norm)?;
    }
    baseline.update(reward);
    Ok(ReinforceStep { reward, baseline_before: before, grad_norm })
}

// ---------------------------------------------------------------------------
// Self-play driver

/// Learner state across episodes: its model, reward baseline and the
/// supervised data used by interleaved updates.
#[derive(Debug, Clone)]
pub struct Learner<'a> {
    pub model: PolicyModel,
    pub baseline: BaselineState,
    rl: RlConfig,
    sl: SlConfig,
    schedule: Schedule,
    sl_examples: Vec<PerspectiveExample<'a>>,
    episodes_done: usize,
}

impl<'a> Learner<'a> {
    pub fn new(
        model: PolicyModel,
        rl: RlConfig,
        sl: SlConfig,
        schedule: Schedule,
        sl_corpus: Option<&'a Corpus>,
    ) -> Result<Self, TrainError> {
        rl.validate()?;
        sl.validate()?;
        schedule.validate()?;
        let sl_examples = sl_corpus.map(|c| c.perspectives()).unwrap_or_default();
        if schedule.sl_period.is_some() && sl_examples.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        Ok(Learner { model, baseline: BaselineState::default(), rl, sl, schedule, sl_examples, episodes_done: 0 })
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn rl_config(&self) -> &RlConfig {
        &self.rl
    }

    /// Plays one negotiation against `partner`, applies the policy-gradient
    /// update, and runs an interleaved supervised minibatch when due.
    pub fn episode<R: Rng + ?Sized>(&mut self, partner: &PolicyModel, rng: &mut R) -> Result<Episode, TrainError> {
        let index = self.episodes_done;
        let diverged = |source| TrainError::Diverged { stage: "episode", index, source };
        let pair = sample_context_pair(rng);
        let episode = self_play_episode(&self.model, partner, pair, self.rl.max_turns, rng)?;
        reinforce_update(&mut self.model, &episode, &mut self.baseline, &self.rl).map_err(diverged)?;
        self.episodes_done += 1;
        if let Some(period) = self.schedule.sl_period {
            if self.episodes_done % period == 0 {
                let batch: Vec<_> = (0..self.schedule.sl_batch)
                    .map(|_| *self.sl_examples.choose(rng).expect("nonempty"))
                    .collect();
                sl_step(&mut self.model, &batch, self.sl.alpha, self.schedule.sl_learning_rate, self.sl.clip_norm)
                    .map_err(diverged)?;
            }
        }
        Ok(episode)
    }
}

/// Self-play against a fixed partner for `schedule.episodes` negotiations.
/// `on_epoch` sees the learner after each logical epoch together with that
/// epoch's episodes.
pub fn rl_train<R, F>(
    alice: PolicyModel,
    bob: &PolicyModel,
    schedule: Schedule,
    rl: RlConfig,
    sl: SlConfig,
    sl_corpus: Option<&Corpus>,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<PolicyModel, TrainError>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &PolicyModel, &[Episode]) -> Result<(), TrainError>,
{
    let mut learner = Learner::new(alice, rl, sl, schedule, sl_corpus)?;
    let mut epoch_episodes = Vec::with_capacity(schedule.episodes_per_epoch);
    for _ in 0..schedule.episodes {
        epoch_episodes.push(learner.episode(bob, rng)?);
        if epoch_episodes.len() == schedule.episodes_per_epoch || learner.episodes_done() == schedule.episodes {
            let epoch = learner.episodes_done().div_ceil(schedule.episodes_per_epoch);
            on_epoch(epoch, &learner.model, &epoch_episodes)?;
            epoch_episodes.clear();
        }
    }
    Ok(learner.model)
}
