//! Session state machine. Every change goes through [`Session::apply`] as an
//! [`Event`], so a session rebuilt from its log matches the live one.

use negolab_core::env::{
    resolve_outcome, sample_context_pair, ActKind, Agent, Allocation, ContextPair, DialogueAct, Outcome, Transcript,
    Turn, DEFAULT_MAX_TURNS,
};
use negolab_core::model::PolicyModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::ArenaError;
use crate::survey::{SurveyAnswers, QUESTIONS};

/// The trained agent always sits in seat A; the human takes seat B.
pub const AGENT_SEAT: Agent = Agent::A;
pub const HUMAN_SEAT: Agent = Agent::B;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Negotiating,
    Selecting,
    Surveying,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Human,
    Agent,
}

impl Party {
    fn seat(self) -> Agent {
        match self {
            Party::Human => HUMAN_SEAT,
            Party::Agent => AGENT_SEAT,
        }
    }

    fn of(seat: Agent) -> Party {
        if seat == HUMAN_SEAT {
            Party::Human
        } else {
            Party::Agent
        }
    }
}

/// Wire form of an act; `allocation` is the speaker's own claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActPayload {
    pub kind: ActKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<[u8; 3]>,
}

impl ActPayload {
    pub fn from_act(act: &DialogueAct) -> Self {
        ActPayload { kind: act.kind(), allocation: act.allocation().map(|a| a.as_array()) }
    }

    pub fn to_act(self) -> Result<DialogueAct, ArenaError> {
        let allocation = self
            .allocation
            .map(Allocation::new)
            .transpose()
            .map_err(|e| ArenaError::Invalid(e.to_string()))?;
        DialogueAct::from_parts(self.kind, allocation).ok_or_else(|| {
            ArenaError::Invalid(if self.kind.takes_allocation() {
                format!("{} needs an allocation", self.kind.name())
            } else {
                format!("{} takes no allocation", self.kind.name())
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: Uuid,
        model: String,
        seed: u64,
        pair: ContextPair,
        created_at: u64,
        #[serde(default)]
        study: Option<String>,
    },
    Act {
        party: Party,
        act: ActPayload,
    },
    Selection {
        human: [u8; 3],
        agent: [u8; 3],
    },
    Survey {
        answers: SurveyAnswers,
    },
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: Uuid,
    pub model: String,
    pub seed: u64,
    pub created_at: u64,
    pub study: Option<String>,
    transcript: Transcript,
    phase: Phase,
    outcome: Option<Outcome>,
    survey: Option<SurveyAnswers>,
}

/// Stream used for the agent's act at transcript position `position`.
fn agent_rng(seed: u64, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + position as u64);
    rng
}

impl Session {
    /// The creation event for a fresh session. The context pair depends on
    /// `seed` alone.
    pub fn creation(id: Uuid, model: &str, seed: u64, created_at: u64, study: Option<String>) -> Event {
        let pair = sample_context_pair(&mut ChaCha8Rng::seed_from_u64(seed));
        Event::Created { id, model: model.to_string(), seed, pair, created_at, study }
    }

    fn from_creation(event: &Event) -> Result<Session, ArenaError> {
        let Event::Created { id, model, seed, pair, created_at, study } = event else {
            return Err(ArenaError::Invalid("session log must start with a creation event".into()));
        };
        let pair = ContextPair::new(pair.counts, pair.utilities_a, pair.utilities_b, pair.starter)
            .map_err(|e| ArenaError::Invalid(e.to_string()))?;
        Ok(Session {
            id: *id,
            model: model.clone(),
            seed: *seed,
            created_at: *created_at,
            study: study.clone(),
            transcript: Transcript::new(pair, DEFAULT_MAX_TURNS),
            phase: Phase::Negotiating,
            outcome: None,
            survey: None,
        })
    }

    /// Rebuilds a session from its full event history.
    pub fn replay(events: &[Event]) -> Result<Session, ArenaError> {
        let (first, rest) = events.split_first().ok_or_else(|| ArenaError::Invalid("empty session log".into()))?;
        let mut session = Session::from_creation(first)?;
        for event in rest {
            session.apply(event)?;
        }
        Ok(session)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.outcome.as_ref()
    }

    pub fn survey(&self) -> Option<&SurveyAnswers> {
        self.survey.as_ref()
    }

    fn expect_phase(&self, expected: Phase) -> Result<(), ArenaError> {
        if self.phase != expected {
            return Err(ArenaError::WrongPhase { expected, found: self.phase });
        }
        Ok(())
    }

    /// Applies one event after checking it against the rules.
    pub fn apply(&mut self, event: &Event) -> Result<(), ArenaError> {
        match event {
            Event::Created { .. } => return Err(ArenaError::Invalid("session already created".into())),
            Event::Act { party, act } => {
                self.expect_phase(Phase::Negotiating)?;
                if self.transcript.next_speaker() != party.seat() {
                    return Err(ArenaError::WrongTurn);
                }
                self.transcript.apply(act.to_act()?)?;
                if self.transcript.is_terminated() {
                    self.phase = Phase::Selecting;
                }
            }
            Event::Selection { human, agent } => {
                self.expect_phase(Phase::Selecting)?;
                let parse = |a: &[u8; 3]| Allocation::new(*a).map_err(|e| ArenaError::Invalid(e.to_string()));
                let (human, agent) = (parse(human)?, parse(agent)?);
                let (selection_a, selection_b) =
                    if AGENT_SEAT == Agent::A { (agent, human) } else { (human, agent) };
                let outcome =
                    resolve_outcome(&self.transcript, selection_a, selection_b).map_err(|e| ArenaError::Invalid(e.to_string()))?;
                self.outcome = Some(outcome);
                self.phase = Phase::Surveying;
            }
            Event::Survey { answers } => {
                self.expect_phase(Phase::Surveying)?;
                answers.validate()?;
                self.survey = Some(answers.clone());
                self.phase = Phase::Done;
            }
        }
        Ok(())
    }

    /// Applies `event` and records it in `log`.
    fn record(&mut self, event: Event, log: &mut Vec<Event>) -> Result<(), ArenaError> {
        self.apply(&event)?;
        log.push(event);
        Ok(())
    }

    /// The agent's move, if it is the agent's turn.
    pub fn agent_turn(&mut self, model: &PolicyModel) -> Result<Vec<Event>, ArenaError> {
        let mut log = Vec::new();
        if self.phase == Phase::Negotiating && self.transcript.next_speaker() == AGENT_SEAT {
            let dist = model
                .act_distribution(
                    self.transcript.pair().context(AGENT_SEAT),
                    AGENT_SEAT,
                    self.transcript.turns(),
                    self.transcript.max_turns(),
                )
                .map_err(|e| ArenaError::Agent(e.to_string()))?;
            let act = dist.sample(&mut agent_rng(self.seed, self.transcript.len()));
            self.record(Event::Act { party: Party::Agent, act: ActPayload::from_act(&act) }, &mut log)?;
        }
        Ok(log)
    }

    /// The human's act followed by the agent's reply. Nothing changes if
    /// the act is rejected.
    pub fn human_act(&mut self, act: ActPayload, model: &PolicyModel) -> Result<Vec<Event>, ArenaError> {
        let parsed = act.to_act()?;
        self.expect_phase(Phase::Negotiating)?;
        if self.transcript.next_speaker() != HUMAN_SEAT {
            return Err(ArenaError::WrongTurn);
        }
        self.transcript.check(&parsed)?;
        let mut log = Vec::new();
        self.record(Event::Act { party: Party::Human, act }, &mut log)?;
        log.extend(self.agent_turn(model)?);
        Ok(log)
    }

    /// Scores the human's final share against the agent's selection.
    pub fn select(&mut self, share: [u8; 3], model: &PolicyModel) -> Result<Event, ArenaError> {
        self.expect_phase(Phase::Selecting)?;
        let allocation = Allocation::new(share).map_err(|e| ArenaError::Invalid(e.to_string()))?;
        if !allocation.fits(self.transcript.counts()) {
            return Err(ArenaError::Invalid(format!(
                "selection {allocation} exceeds item counts {}",
                self.transcript.counts()
            )));
        }
        let agent = model.predict_selection(&self.transcript, AGENT_SEAT);
        let event = Event::Selection { human: share, agent: agent.as_array() };
        self.apply(&event)?;
        Ok(event)
    }

    pub fn submit_survey(&mut self, answers: SurveyAnswers) -> Result<Event, ArenaError> {
        self.expect_phase(Phase::Surveying)?;
        answers.validate()?;
        let event = Event::Survey { answers };
        self.apply(&event)?;
        Ok(event)
    }

    /// Everything the human may see.
    pub fn view(&self) -> SessionView {
        let pair = self.transcript.pair();
        let counts = *self.transcript.counts();
        let transcript = self
            .transcript
            .turns()
            .iter()
            .map(|t: &Turn| {
                let claim = t.act.allocation();
                TurnView {
                    party: Party::of(t.speaker),
                    kind: t.act.kind(),
                    allocation: claim.map(|a| a.as_array()),
                    your_share: claim.map(|a| {
                        if t.speaker == HUMAN_SEAT { a } else { a.complement(&counts) }.as_array()
                    }),
                }
            })
            .collect();
        let negotiating = self.phase == Phase::Negotiating;
        SessionView {
            id: self.id,
            model: self.model.clone(),
            phase: self.phase,
            counts: counts.as_array(),
            your_utilities: pair.utilities(HUMAN_SEAT).as_array(),
            you_started: pair.starter == HUMAN_SEAT,
            transcript,
            your_turn: negotiating && self.transcript.next_speaker() == HUMAN_SEAT,
            turns_left: self.transcript.max_turns() - self.transcript.len(),
            outcome: self.outcome.map(|o| OutcomeView {
                agreed: o.agreed,
                pareto_optimal: o.pareto,
                your_selection: o.selection(HUMAN_SEAT).as_array(),
                agent_selection: o.selection(AGENT_SEAT).as_array(),
                your_score: o.score(HUMAN_SEAT),
                agent_score: o.score(AGENT_SEAT),
            }),
            questions: (self.phase == Phase::Surveying).then(|| QUESTIONS.iter().map(|q| q.to_string()).collect()),
            study: self.study.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnView {
    pub party: Party,
    pub kind: ActKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allocation: Option<[u8; 3]>,
    /// What the proposal would leave the human with.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub your_share: Option<[u8; 3]>,
}

/// Revealed only after both selections are in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeView {
    pub agreed: bool,
    pub pareto_optimal: bool,
    pub your_selection: [u8; 3],
    pub agent_selection: [u8; 3],
    pub your_score: u32,
    pub agent_score: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: Uuid,
    pub model: String,
    pub phase: Phase,
    pub counts: [u8; 3],
    pub your_utilities: [u8; 3],
    pub you_started: bool,
    pub transcript: Vec<TurnView>,
    pub your_turn: bool,
    pub turns_left: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub questions: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<String>,
}
