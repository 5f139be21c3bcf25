//! Rules engine for the three-item division game.
//!
//! Two agents share a pool of books, hats and balls. Each sees the item
//! counts and its own private per-unit values, scaled so the whole pool is
//! worth exactly [`TOTAL_VALUE`] points to it. They alternate coarse dialogue
//! acts until someone ends the conversation (or the turn cap is hit), then
//! each names the share it takes. Matching shares are scored, anything else
//! scores zero for both.

use std::fmt;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_ITEMS: usize = 3;
pub const MIN_COUNT: u8 = 1;
pub const MAX_COUNT: u8 = 4;
pub const MAX_UTILITY: u8 = 10;
pub const TOTAL_VALUE: u32 = 10;
pub const DEFAULT_MAX_TURNS: usize = 20;

pub const ITEM_NAMES: [&str; NUM_ITEMS] = ["books", "hats", "balls"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("item count {value} for {item} outside {MIN_COUNT}..={MAX_COUNT}")]
    InvalidCount { item: &'static str, value: u8 },
    #[error("utility {value} for {item} outside 0..={MAX_UTILITY}")]
    InvalidUtility { item: &'static str, value: u8 },
    #[error("utilities are worth {total} points against the item counts, expected {TOTAL_VALUE}")]
    UtilityTotal { total: u32 },
    #[error("allocation {allocation} exceeds item counts {counts}")]
    AllocationExceedsCounts { allocation: Allocation, counts: ItemCounts },
    #[error("illegal act {act}: {rule}")]
    IllegalAct { act: DialogueAct, rule: Rule },
    #[error("act by {found} but it is {expected}'s turn")]
    WrongSpeaker { expected: Agent, found: Agent },
    #[error("transcript is not terminated")]
    NotTerminated,
}

/// The rule an illegal act violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// The conversation already ended.
    Terminated,
    /// A proposal claims more of some item than exists.
    AllocationExceedsCounts,
    /// Agreement before anyone has proposed anything.
    AgreeWithoutProposal,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Terminated => "terminated",
            Rule::AllocationExceedsCounts => "allocation_exceeds_counts",
            Rule::AgreeWithoutProposal => "agree_without_proposal",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Agent {
    A,
    B,
}

impl Agent {
    pub fn other(self) -> Agent {
        match self {
            Agent::A => Agent::B,
            Agent::B => Agent::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Agent::A => 0,
            Agent::B => 1,
        }
    }
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Agent::A => f.write_str("A"),
            Agent::B => f.write_str("B"),
        }
    }
}

/// Number of each item in the shared pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemCounts([u8; NUM_ITEMS]);

impl ItemCounts {
    pub fn new(counts: [u8; NUM_ITEMS]) -> Result<Self, EnvError> {
        for (j, &value) in counts.iter().enumerate() {
            if !(MIN_COUNT..=MAX_COUNT).contains(&value) {
                return Err(EnvError::InvalidCount { item: ITEM_NAMES[j], value });
            }
        }
        Ok(ItemCounts(counts))
    }

    pub fn as_array(&self) -> [u8; NUM_ITEMS] {
        self.0
    }

    pub fn get(&self, item: usize) -> u8 {
        self.0[item]
    }

    pub fn num_allocations(&self) -> usize {
        self.0.iter().map(|&c| c as usize + 1).product()
    }

    /// The whole pool as a single allocation.
    pub fn everything(&self) -> Allocation {
        Allocation(self.0)
    }
}

impl fmt::Display for ItemCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

/// Per-unit private values of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utilities([u8; NUM_ITEMS]);

impl Utilities {
    pub fn new(values: [u8; NUM_ITEMS]) -> Result<Self, EnvError> {
        for (j, &value) in values.iter().enumerate() {
            if value > MAX_UTILITY {
                return Err(EnvError::InvalidUtility { item: ITEM_NAMES[j], value });
            }
        }
        Ok(Utilities(values))
    }

    pub fn as_array(&self) -> [u8; NUM_ITEMS] {
        self.0
    }

    pub fn get(&self, item: usize) -> u8 {
        self.0[item]
    }

    /// Points earned for taking `allocation`.
    pub fn value_of(&self, allocation: &Allocation) -> u32 {
        self.0
            .iter()
            .zip(allocation.0.iter())
            .map(|(&u, &o)| u as u32 * o as u32)
            .sum()
    }
}

impl fmt::Display for Utilities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

/// Items claimed by one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Allocation([u8; NUM_ITEMS]);

impl Allocation {
    pub const EMPTY: Allocation = Allocation([0; NUM_ITEMS]);

    /// Any allocation with each component in `0..=MAX_COUNT`; legality
    /// against a particular pool is checked separately.
    pub fn new(claims: [u8; NUM_ITEMS]) -> Result<Self, EnvError> {
        match claims.iter().position(|&c| c > MAX_COUNT) {
            Some(j) => Err(EnvError::InvalidCount { item: ITEM_NAMES[j], value: claims[j] }),
            None => Ok(Allocation(claims)),
        }
    }

    pub fn as_array(&self) -> [u8; NUM_ITEMS] {
        self.0
    }

    pub fn get(&self, item: usize) -> u8 {
        self.0[item]
    }

    pub fn fits(&self, counts: &ItemCounts) -> bool {
        self.0.iter().zip(counts.0.iter()).all(|(&o, &c)| o <= c)
    }

    /// What is left for the partner. Callers must check [`fits`](Self::fits).
    pub fn complement(&self, counts: &ItemCounts) -> Allocation {
        debug_assert!(self.fits(counts));
        Allocation([
            counts.0[0] - self.0[0],
            counts.0[1] - self.0[1],
            counts.0[2] - self.0[2],
        ])
    }

    /// `self + other == counts` componentwise.
    pub fn partitions(&self, other: &Allocation, counts: &ItemCounts) -> bool {
        (0..NUM_ITEMS).all(|j| self.0[j] as u16 + other.0[j] as u16 == counts.0[j] as u16)
    }
}

impl fmt::Display for Allocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

/// All allocations of `counts`, books-major order.
pub fn enumerate_allocations(counts: &ItemCounts) -> Vec<Allocation> {
    let [b, h, l] = counts.0;
    let mut out = Vec::with_capacity(counts.num_allocations());
    for books in 0..=b {
        for hats in 0..=h {
            for balls in 0..=l {
                out.push(Allocation([books, hats, balls]));
            }
        }
    }
    out
}

/// One agent's private view: `[counts; utilities]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context {
    pub counts: ItemCounts,
    pub utilities: Utilities,
}

impl Context {
    pub fn new(counts: ItemCounts, utilities: Utilities) -> Result<Self, EnvError> {
        let total = utilities.value_of(&counts.everything());
        if total != TOTAL_VALUE {
            return Err(EnvError::UtilityTotal { total });
        }
        Ok(Context { counts, utilities })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextPair {
    pub counts: ItemCounts,
    pub utilities_a: Utilities,
    pub utilities_b: Utilities,
    pub starter: Agent,
}

impl ContextPair {
    pub fn new(
        counts: ItemCounts,
        utilities_a: Utilities,
        utilities_b: Utilities,
        starter: Agent,
    ) -> Result<Self, EnvError> {
        Context::new(counts, utilities_a)?;
        Context::new(counts, utilities_b)?;
        Ok(ContextPair { counts, utilities_a, utilities_b, starter })
    }

    pub fn utilities(&self, agent: Agent) -> Utilities {
        match agent {
            Agent::A => self.utilities_a,
            Agent::B => self.utilities_b,
        }
    }

    pub fn context(&self, agent: Agent) -> Context {
        Context { counts: self.counts, utilities: self.utilities(agent) }
    }

    /// Same pool with the seats exchanged.
    pub fn swapped(&self) -> ContextPair {
        ContextPair {
            counts: self.counts,
            utilities_a: self.utilities_b,
            utilities_b: self.utilities_a,
            starter: self.starter.other(),
        }
    }

    /// Scores of the full split where A takes `allocation_a`.
    pub fn split_scores(&self, allocation_a: &Allocation) -> (u32, u32) {
        let allocation_b = allocation_a.complement(&self.counts);
        (
            self.utilities_a.value_of(allocation_a),
            self.utilities_b.value_of(&allocation_b),
        )
    }
}

fn count_index(counts: [u8; NUM_ITEMS]) -> usize {
    counts
        .iter()
        .fold(0, |acc, &c| acc * MAX_COUNT as usize + (c - MIN_COUNT) as usize)
}

/// Utility vectors worth exactly [`TOTAL_VALUE`] for each count vector.
fn utility_table() -> &'static Vec<Vec<Utilities>> {
    static TABLE: OnceLock<Vec<Vec<Utilities>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let span = (MAX_COUNT - MIN_COUNT + 1) as usize;
        let mut table = vec![Vec::new(); span.pow(NUM_ITEMS as u32)];
        for b in MIN_COUNT..=MAX_COUNT {
            for h in MIN_COUNT..=MAX_COUNT {
                for l in MIN_COUNT..=MAX_COUNT {
                    let slot = &mut table[count_index([b, h, l])];
                    for ub in 0..=MAX_UTILITY {
                        for uh in 0..=MAX_UTILITY {
                            for ul in 0..=MAX_UTILITY {
                                let total = b as u32 * ub as u32
                                    + h as u32 * uh as u32
                                    + l as u32 * ul as u32;
                                if total == TOTAL_VALUE {
                                    slot.push(Utilities([ub, uh, ul]));
                                }
                            }
                        }
                    }
                }
            }
        }
        table
    })
}

/// Every count vector that admits at least one valid utility vector.
///
/// (3,3,3) and (4,4,4) cannot sum to 10 points and are excluded.
pub fn feasible_counts() -> &'static [ItemCounts] {
    static FEASIBLE: OnceLock<Vec<ItemCounts>> = OnceLock::new();
    FEASIBLE.get_or_init(|| {
        let table = utility_table();
        let mut out = Vec::new();
        for b in MIN_COUNT..=MAX_COUNT {
            for h in MIN_COUNT..=MAX_COUNT {
                for l in MIN_COUNT..=MAX_COUNT {
                    if !table[count_index([b, h, l])].is_empty() {
                        out.push(ItemCounts([b, h, l]));
                    }
                }
            }
        }
        out
    })
}

/// All utility vectors worth exactly [`TOTAL_VALUE`] against `counts`.
pub fn valid_utilities(counts: &ItemCounts) -> &'static [Utilities] {
    &utility_table()[count_index(counts.0)]
}

/// Draws a fresh negotiation: counts uniform over the feasible count
/// vectors, each side's utilities uniform over the vectors valued at exactly
/// ten points, and a uniformly chosen starter.
pub fn sample_context_pair<R: Rng + ?Sized>(rng: &mut R) -> ContextPair {
    let feasible = feasible_counts();
    let counts = feasible[rng.random_range(0..feasible.len())];
    let options = valid_utilities(&counts);
    let utilities_a = options[rng.random_range(0..options.len())];
    let utilities_b = options[rng.random_range(0..options.len())];
    let starter = if rng.random_bool(0.5) { Agent::A } else { Agent::B };
    ContextPair { counts, utilities_a, utilities_b, starter }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Propose,
    Insist,
    Agree,
    Disagree,
    End,
}

impl ActKind {
    pub const ALL: [ActKind; 5] = [
        ActKind::Propose,
        ActKind::Insist,
        ActKind::Agree,
        ActKind::Disagree,
        ActKind::End,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActKind::Propose => "propose",
            ActKind::Insist => "insist",
            ActKind::Agree => "agree",
            ActKind::Disagree => "disagree",
            ActKind::End => "end",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn takes_allocation(self) -> bool {
        matches!(self, ActKind::Propose | ActKind::Insist)
    }
}

/// A coarse dialogue act. Proposal arguments are the speaker's own claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DialogueAct {
    Propose(Allocation),
    Insist(Allocation),
    Agree,
    Disagree,
    End,
}

impl DialogueAct {
    pub fn kind(&self) -> ActKind {
        match self {
            DialogueAct::Propose(_) => ActKind::Propose,
            DialogueAct::Insist(_) => ActKind::Insist,
            DialogueAct::Agree => ActKind::Agree,
            DialogueAct::Disagree => ActKind::Disagree,
            DialogueAct::End => ActKind::End,
        }
    }

    pub fn allocation(&self) -> Option<Allocation> {
        match self {
            DialogueAct::Propose(a) | DialogueAct::Insist(a) => Some(*a),
            _ => None,
        }
    }

    pub fn from_parts(kind: ActKind, allocation: Option<Allocation>) -> Option<DialogueAct> {
        match (kind, allocation) {
            (ActKind::Propose, Some(a)) => Some(DialogueAct::Propose(a)),
            (ActKind::Insist, Some(a)) => Some(DialogueAct::Insist(a)),
            (ActKind::Agree, None) => Some(DialogueAct::Agree),
            (ActKind::Disagree, None) => Some(DialogueAct::Disagree),
            (ActKind::End, None) => Some(DialogueAct::End),
            _ => None,
        }
    }

    pub fn is_proposal(&self) -> bool {
        self.kind().takes_allocation()
    }
}

impl fmt::Display for DialogueAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.allocation() {
            Some(a) => write!(f, "{}{}", self.kind().name(), a),
            None => f.write_str(self.kind().name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Turn {
    pub speaker: Agent,
    pub act: DialogueAct,
}

/// Ordered acts of one negotiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pair: ContextPair,
    turns: Vec<Turn>,
    terminated: bool,
    max_turns: usize,
}

impl Transcript {
    pub fn new(pair: ContextPair, max_turns: usize) -> Self {
        assert!(max_turns > 0, "turn cap must be positive");
        Transcript { pair, turns: Vec::new(), terminated: false, max_turns }
    }

    /// Replays `turns` through the rules, checking the recorded speakers.
    pub fn replay(
        pair: ContextPair,
        max_turns: usize,
        turns: impl IntoIterator<Item = Turn>,
    ) -> Result<Self, EnvError> {
        let mut transcript = Transcript::new(pair, max_turns);
        for turn in turns {
            let expected = transcript.next_speaker();
            if turn.speaker != expected {
                return Err(EnvError::WrongSpeaker { expected, found: turn.speaker });
            }
            transcript.apply(turn.act)?;
        }
        Ok(transcript)
    }

    pub fn pair(&self) -> &ContextPair {
        &self.pair
    }

    pub fn counts(&self) -> &ItemCounts {
        &self.pair.counts
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }

    pub fn next_speaker(&self) -> Agent {
        if self.turns.len() % 2 == 0 {
            self.pair.starter
        } else {
            self.pair.starter.other()
        }
    }

    pub fn has_proposal(&self) -> bool {
        self.turns.iter().any(|t| t.act.is_proposal())
    }

    /// Positions (0-based) and acts spoken by `agent`.
    pub fn acts_by(&self, agent: Agent) -> impl Iterator<Item = (usize, &DialogueAct)> + '_ {
        self.turns
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.speaker == agent)
            .map(|(i, t)| (i, &t.act))
    }

    /// Checks `act` against the rules without applying it.
    pub fn check(&self, act: &DialogueAct) -> Result<(), EnvError> {
        let illegal = |rule| Err(EnvError::IllegalAct { act: *act, rule });
        if self.terminated {
            return illegal(Rule::Terminated);
        }
        match act {
            DialogueAct::Propose(a) | DialogueAct::Insist(a) if !a.fits(&self.pair.counts) => {
                illegal(Rule::AllocationExceedsCounts)
            }
            DialogueAct::Agree if !self.has_proposal() => illegal(Rule::AgreeWithoutProposal),
            _ => Ok(()),
        }
    }

    /// Every act the next speaker may take.
    pub fn legal_acts(&self) -> Result<Vec<DialogueAct>, EnvError> {
        if self.terminated {
            return Err(EnvError::IllegalAct { act: DialogueAct::End, rule: Rule::Terminated });
        }
        let allocations = enumerate_allocations(&self.pair.counts);
        let mut acts = Vec::with_capacity(2 * allocations.len() + 3);
        acts.extend(allocations.iter().map(|&a| DialogueAct::Propose(a)));
        acts.extend(allocations.iter().map(|&a| DialogueAct::Insist(a)));
        if self.has_proposal() {
            acts.push(DialogueAct::Agree);
        }
        acts.push(DialogueAct::Disagree);
        acts.push(DialogueAct::End);
        Ok(acts)
    }

    /// Appends `act` for the current speaker. Terminates on `End` or when
    /// the turn cap is reached.
    pub fn apply(&mut self, act: DialogueAct) -> Result<(), EnvError> {
        self.check(&act)?;
        let speaker = self.next_speaker();
        self.turns.push(Turn { speaker, act });
        if act == DialogueAct::End || self.turns.len() >= self.max_turns {
            self.terminated = true;
        }
        Ok(())
    }

    /// Functional form of [`apply`](Self::apply).
    pub fn with_act(&self, act: DialogueAct) -> Result<Transcript, EnvError> {
        let mut next = self.clone();
        next.apply(act)?;
        Ok(next)
    }

    /// The last proposal, if the other agent agreed to it afterwards.
    /// Returns the proposer and the proposer's claimed share.
    pub fn standing_agreement(&self) -> Option<(Agent, Allocation)> {
        let (index, proposal) = self
            .turns
            .iter()
            .enumerate()
            .rev()
            .find(|(_, t)| t.act.is_proposal())?;
        let accepted = self.turns[index + 1..]
            .iter()
            .any(|t| t.act == DialogueAct::Agree && t.speaker != proposal.speaker);
        if accepted {
            proposal.act.allocation().map(|a| (proposal.speaker, a))
        } else {
            None
        }
    }

    /// Share implied for `agent` by the standing agreement, if any.
    pub fn agreed_share(&self, agent: Agent) -> Option<Allocation> {
        self.standing_agreement().map(|(proposer, claim)| {
            if proposer == agent {
                claim
            } else {
                claim.complement(&self.pair.counts)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub selection_a: Allocation,
    pub selection_b: Allocation,
    pub agreed: bool,
    pub score_a: u32,
    pub score_b: u32,
    pub pareto: bool,
}

impl Outcome {
    pub fn score(&self, agent: Agent) -> u32 {
        match agent {
            Agent::A => self.score_a,
            Agent::B => self.score_b,
        }
    }

    pub fn selection(&self, agent: Agent) -> Allocation {
        match agent {
            Agent::A => self.selection_a,
            Agent::B => self.selection_b,
        }
    }
}

/// Scores the final selections. Shares that do not exactly partition the
/// pool are a disagreement and score zero for both sides.
pub fn resolve_outcome(
    transcript: &Transcript,
    selection_a: Allocation,
    selection_b: Allocation,
) -> Result<Outcome, EnvError> {
    if !transcript.is_terminated() {
        return Err(EnvError::NotTerminated);
    }
    score_selections(transcript.pair(), selection_a, selection_b)
}

/// Scoring without the transcript; used where selections are checked
/// against a pair directly.
pub fn score_selections(
    pair: &ContextPair,
    selection_a: Allocation,
    selection_b: Allocation,
) -> Result<Outcome, EnvError> {
    let counts = pair.counts;
    for selection in [selection_a, selection_b] {
        if !selection.fits(&counts) {
            return Err(EnvError::AllocationExceedsCounts { allocation: selection, counts });
        }
    }
    let agreed = selection_a.partitions(&selection_b, &counts);
    let (score_a, score_b) = if agreed {
        (pair.utilities_a.value_of(&selection_a), pair.utilities_b.value_of(&selection_b))
    } else {
        (0, 0)
    };
    Ok(Outcome {
        selection_a,
        selection_b,
        agreed,
        score_a,
        score_b,
        pareto: is_pareto_optimal(score_a, score_b, pair),
    })
}

/// True iff no full split of the pool gives both agents at least these
/// scores with one strictly better.
pub fn is_pareto_optimal(score_a: u32, score_b: u32, pair: &ContextPair) -> bool {
    !enumerate_allocations(&pair.counts).iter().any(|o| {
        let (a, b) = pair.split_scores(o);
        a >= score_a && b >= score_b && (a > score_a || b > score_b)
    })
}

/// Largest `r_A + r_B` over all full splits.
pub fn max_joint_score(pair: &ContextPair) -> u32 {
    enumerate_allocations(&pair.counts)
        .iter()
        .map(|o| {
            let (a, b) = pair.split_scores(o);
            a + b
        })
        .max()
        .unwrap_or(0)
}
