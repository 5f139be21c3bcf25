//! Recorded negotiations: synthetic generation from scripted styles,
//! quality filtering, per-seat training views, statistics and JSON-lines
//! persistence.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    enumerate_allocations, is_pareto_optimal, resolve_outcome, sample_context_pair, ActKind, Agent,
    Allocation, Context, ContextPair, DialogueAct, EnvError, ItemCounts, Outcome, Transcript, Turn,
    Utilities, DEFAULT_MAX_TURNS,
};

pub const DEFAULT_CORPUS_SIZE: usize = 2000;
pub const LOW_QUALITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("a corpus needs at least one dialogue")]
    Empty,
    #[error("style weights must be non-negative with a positive total")]
    BadWeights,
    #[error("quality threshold {0} is outside (0, 1]")]
    BadThreshold(f64),
    #[error("no dialogue has a unique-act ratio below {threshold}; generate a larger source corpus")]
    FilteredEmpty { threshold: f64 },
    #[error("transcript has no acts")]
    EmptyTranscript,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid record: {0}")]
    Invalid(#[from] EnvError),
    #[error("corpus file: {0}")]
    Io(#[from] std::io::Error),
}

/// One finished negotiation with its scored outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueRecord {
    transcript: Transcript,
    outcome: Outcome,
}

impl DialogueRecord {
    /// Scores `selection_a`/`selection_b` against a terminated transcript.
    pub fn new(
        transcript: Transcript,
        selection_a: Allocation,
        selection_b: Allocation,
    ) -> Result<Self, EnvError> {
        let outcome = resolve_outcome(&transcript, selection_a, selection_b)?;
        Ok(DialogueRecord { transcript, outcome })
    }

    pub fn pair(&self) -> &ContextPair {
        self.transcript.pair()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn outcome(&self) -> &Outcome {
        &self.outcome
    }

    pub fn turns(&self) -> &[Turn] {
        self.transcript.turns()
    }

    pub fn len(&self) -> usize {
        self.transcript.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transcript.is_empty()
    }

    /// Score difference from `agent`'s side.
    pub fn advantage(&self, agent: Agent) -> f64 {
        self.outcome.score(agent) as f64 - self.outcome.score(agent.other()) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "threshold")]
pub enum Provenance {
    SyntheticHigh,
    FilteredLow(f64),
    Annotated,
    Mixed,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::SyntheticHigh => f.write_str("synthetic-high"),
            Provenance::FilteredLow(t) => write!(f, "filtered-low({t})"),
            Provenance::Annotated => f.write_str("annotated"),
            Provenance::Mixed => f.write_str("mixed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<DialogueRecord>,
    provenance: Provenance,
}

impl Corpus {
    pub fn new(records: Vec<DialogueRecord>, provenance: Provenance) -> Corpus {
        Corpus { records, provenance }
    }

    pub fn records(&self) -> &[DialogueRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DialogueRecord> {
        self.records
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Union with `other`, skipping records already present. Returns how
    /// many records were added.
    pub fn merge(&mut self, other: &Corpus) -> usize {
        let mut seen: HashSet<String> = self.records.iter().map(record_key).collect();
        let before = self.records.len();
        for record in &other.records {
            if seen.insert(record_key(record)) {
                self.records.push(record.clone());
            }
        }
        if self.records.len() > before && self.provenance != other.provenance {
            self.provenance = Provenance::Mixed;
        }
        self.records.len() - before
    }

    /// Drops exact duplicates, keeping first occurrences.
    pub fn deduplicated(records: Vec<DialogueRecord>, provenance: Provenance) -> Corpus {
        let mut corpus = Corpus::new(Vec::new(), provenance);
        corpus.merge(&Corpus::new(records, provenance));
        corpus.provenance = provenance;
        corpus
    }

    /// Both seat views of every record, in record order.
    pub fn perspectives(&self) -> Vec<PerspectiveExample<'_>> {
        self.records
            .iter()
            .flat_map(|r| {
                let (a, b) = perspectives(r);
                [a, b]
            })
            .collect()
    }
}

fn record_key(record: &DialogueRecord) -> String {
    serde_json::to_string(&RecordLine::from_record(record)).expect("record serializes")
}

// ---------------------------------------------------------------------------
// Scripted styles

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    /// Opens high, concedes along Pareto-efficient splits, accepts offers
    /// that meet its falling aspiration.
    Compromiser,
    /// Accepts whatever is on the table, repeatedly.
    QuickAgreer,
    /// Picks one greedy claim and repeats it.
    Repeater,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Compromiser, Style::QuickAgreer, Style::Repeater];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleMixture {
    pub compromiser: f64,
    pub quick_agreer: f64,
    pub repeater: f64,
}

impl Default for StyleMixture {
    fn default() -> Self {
        StyleMixture { compromiser: 0.60, quick_agreer: 0.25, repeater: 0.15 }
    }
}

impl StyleMixture {
    pub fn only(style: Style) -> StyleMixture {
        let mut m = StyleMixture { compromiser: 0.0, quick_agreer: 0.0, repeater: 0.0 };
        match style {
            Style::Compromiser => m.compromiser = 1.0,
            Style::QuickAgreer => m.quick_agreer = 1.0,
            Style::Repeater => m.repeater = 1.0,
        }
        m
    }

    fn weights(&self) -> [f64; 3] {
        [self.compromiser, self.quick_agreer, self.repeater]
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let w = self.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(CorpusError::BadWeights);
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Style {
        let w = self.weights();
        let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
        for (style, weight) in Style::ALL.iter().zip(w) {
            if u < weight {
                return *style;
            }
            u -= weight;
        }
        *Style::ALL.iter().zip(w).rev().find(|(_, w)| *w > 0.0).expect("positive weight").0
    }
}

/// Per-seat state of a scripted negotiator.
#[derive(Debug, Clone)]
struct Scripted {
    style: Style,
    me: Agent,
    aspiration: f64,
    concession: f64,
    target: Allocation,
    repeats_left: u32,
    insist_prob: f64,
}

impl Scripted {
    fn new<R: Rng + ?Sized>(style: Style, me: Agent, pair: &ContextPair, rng: &mut R) -> Scripted {
        let utilities = pair.utilities(me);
        let frontier = pareto_splits(pair, me);
        let target = match style {
            // Greedy but not everything: best own value among splits that
            // leave the partner at least one item.
            Style::Repeater => *frontier
                .iter()
                .filter(|a| **a != pair.counts.everything())
                .max_by_key(|a| utilities.value_of(a))
                .unwrap_or(&pair.counts.everything()),
            // Any claim close to half the pool's value.
            _ => *enumerate_allocations(&pair.counts)
                .iter()
                .min_by_key(|a| (utilities.value_of(a) as i32 - 5).abs())
                .expect("nonempty enumeration"),
        };
        Scripted {
            style,
            me,
            aspiration: rng.random_range(6.0..=9.0),
            concession: rng.random_range(0.8..=1.6),
            target,
            repeats_left: rng.random_range(2..=6),
            insist_prob: rng.random_range(0.0..0.3),
        }
    }

    fn act<R: Rng + ?Sized>(&mut self, transcript: &Transcript, rng: &mut R) -> DialogueAct {
        let pair = transcript.pair();
        let utilities = pair.utilities(self.me);
        let turns = transcript.turns();
        let last = turns.last();
        let partner_offer = last_proposal(turns)
            .filter(|(speaker, _)| *speaker != self.me)
            .map(|(_, claim)| claim.complement(&pair.counts));
        let my_offer_accepted = matches!(transcript.standing_agreement(), Some((p, _)) if p == self.me);
        let partner_agreed_last = last.is_some_and(|t| t.speaker != self.me && t.act == DialogueAct::Agree);

        match self.style {
            Style::Compromiser => {
                if my_offer_accepted && partner_agreed_last {
                    return DialogueAct::End;
                }
                if transcript.standing_agreement().is_some() {
                    return DialogueAct::End;
                }
                if let Some(offer) = partner_offer {
                    if last.is_some_and(|t| t.act.is_proposal())
                        && utilities.value_of(&offer) as f64 >= self.aspiration
                    {
                        return DialogueAct::Agree;
                    }
                }
                if turns.len() + 2 >= transcript.max_turns() {
                    return DialogueAct::End;
                }
                if partner_offer.is_some() && last.is_some_and(|t| t.act.is_proposal()) && rng.random_bool(0.15) {
                    self.aspiration = (self.aspiration - self.concession * 0.5).max(3.0);
                    return DialogueAct::Disagree;
                }
                let claim = concession_split(pair, self.me, self.aspiration);
                self.aspiration = (self.aspiration - self.concession).max(3.0);
                let repeated = last_own_claim(turns, self.me) == Some(claim);
                if repeated && rng.random_bool(0.5) {
                    DialogueAct::Insist(claim)
                } else {
                    DialogueAct::Propose(claim)
                }
            }
            Style::QuickAgreer => {
                if my_offer_accepted && partner_agreed_last {
                    if self.repeats_left == 0 {
                        return DialogueAct::End;
                    }
                    // Re-confirms the accepted offer.
                    self.repeats_left -= 1;
                    return DialogueAct::Propose(self.target);
                }
                if partner_offer.is_some() {
                    return DialogueAct::Agree;
                }
                if turns.len() + 2 >= transcript.max_turns() {
                    return DialogueAct::End;
                }
                DialogueAct::Propose(self.target)
            }
            Style::Repeater => {
                if let Some(offer) = partner_offer {
                    if last.is_some_and(|t| t.act.is_proposal())
                        && utilities.value_of(&offer) >= utilities.value_of(&self.target)
                    {
                        return DialogueAct::Agree;
                    }
                }
                if self.repeats_left == 0 || turns.len() + 2 >= transcript.max_turns() {
                    return DialogueAct::End;
                }
                self.repeats_left -= 1;
                if rng.random_bool(self.insist_prob) || last_own_claim(turns, self.me).is_some() {
                    DialogueAct::Insist(self.target)
                } else {
                    DialogueAct::Propose(self.target)
                }
            }
        }
    }

    /// Final share: the agreed split if there is one, otherwise what this
    /// seat last claimed (or everything).
    fn select(&self, transcript: &Transcript) -> Allocation {
        transcript
            .agreed_share(self.me)
            .or_else(|| last_own_claim(transcript.turns(), self.me))
            .unwrap_or_else(|| transcript.counts().everything())
    }
}

fn last_proposal(turns: &[Turn]) -> Option<(Agent, Allocation)> {
    turns
        .iter()
        .rev()
        .find_map(|t| t.act.allocation().map(|a| (t.speaker, a)))
}

fn last_own_claim(turns: &[Turn], me: Agent) -> Option<Allocation> {
    turns
        .iter()
        .rev()
        .filter(|t| t.speaker == me)
        .find_map(|t| t.act.allocation())
}

/// Own claims whose split is Pareto-optimal, as seen from `me`.
fn pareto_splits(pair: &ContextPair, me: Agent) -> Vec<Allocation> {
    enumerate_allocations(&pair.counts)
        .into_iter()
        .filter(|claim| {
            let mine = pair.utilities(me).value_of(claim);
            let theirs = pair.utilities(me.other()).value_of(&claim.complement(&pair.counts));
            let (a, b) = match me {
                Agent::A => (mine, theirs),
                Agent::B => (theirs, mine),
            };
            is_pareto_optimal(a, b, pair)
        })
        .collect()
}

/// Pareto-efficient claim meeting `aspiration` that is kindest to the
/// partner; the greediest efficient claim if none meets it.
fn concession_split(pair: &ContextPair, me: Agent, aspiration: f64) -> Allocation {
    let mine = pair.utilities(me);
    let theirs = pair.utilities(me.other());
    let frontier = pareto_splits(pair, me);
    let partner_value = |a: &Allocation| theirs.value_of(&a.complement(&pair.counts));
    frontier
        .iter()
        .filter(|a| mine.value_of(a) as f64 >= aspiration)
        .max_by_key(|a| (partner_value(a), mine.value_of(a)))
        .or_else(|| frontier.iter().max_by_key(|a| (mine.value_of(a), partner_value(a))))
        .copied()
        .expect("frontier is nonempty")
}

/// One negotiation between two scripted seats.
pub fn scripted_dialogue<R: Rng + ?Sized>(
    pair: ContextPair,
    style_a: Style,
    style_b: Style,
    rng: &mut R,
) -> DialogueRecord {
    let mut seats = [
        Scripted::new(style_a, Agent::A, &pair, rng),
        Scripted::new(style_b, Agent::B, &pair, rng),
    ];
    let mut transcript = Transcript::new(pair, DEFAULT_MAX_TURNS);
    while !transcript.is_terminated() {
        let speaker = transcript.next_speaker();
        let act = seats[speaker.index()].act(&transcript, rng);
        transcript.apply(act).expect("scripted acts are legal");
    }
    let selection_a = seats[0].select(&transcript);
    let selection_b = seats[1].select(&transcript);
    DialogueRecord::new(transcript, selection_a, selection_b).expect("terminated transcript")
}

/// Synthetic corpus: one style per dialogue, drawn from `mixture` and
/// played from both seats, each dialogue on its own rng stream split from
/// `seed`.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_dialogues: usize,
    mixture: &StyleMixture,
) -> Result<Corpus, CorpusError> {
    if n_dialogues == 0 {
        return Err(CorpusError::Empty);
    }
    mixture.validate()?;
    let records = (0..n_dialogues)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let pair = sample_context_pair(&mut rng);
            let style = mixture.draw(&mut rng);
            scripted_dialogue(pair, style, style, &mut rng)
        })
        .collect();
    Ok(Corpus::new(records, Provenance::SyntheticHigh))
}

// ---------------------------------------------------------------------------
// Quality

/// Distinct acts over total acts; proposals differ by kind or claim.
pub fn unique_act_ratio(record: &DialogueRecord) -> Result<f64, CorpusError> {
    let turns = record.turns();
    if turns.is_empty() {
        return Err(CorpusError::EmptyTranscript);
    }
    let distinct: HashSet<DialogueAct> = turns.iter().map(|t| t.act).collect();
    Ok(distinct.len() as f64 / turns.len() as f64)
}

/// Keeps records whose unique-act ratio is strictly below `threshold`.
pub fn filter_by_quality(corpus: &Corpus, threshold: f64) -> Result<Corpus, CorpusError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CorpusError::BadThreshold(threshold));
    }
    let mut kept = Vec::new();
    for record in corpus.records() {
        if unique_act_ratio(record)? < threshold {
            kept.push(record.clone());
        }
    }
    if kept.is_empty() {
        return Err(CorpusError::FilteredEmpty { threshold });
    }
    Ok(Corpus::new(kept, Provenance::FilteredLow(threshold)))
}

// ---------------------------------------------------------------------------
// Seat views

/// One record as seen from one seat; the selection target is that seat's
/// final share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerspectiveExample<'a> {
    pub me: Agent,
    pub context: Context,
    pub turns: &'a [Turn],
    pub max_turns: usize,
    pub target: Allocation,
}

impl PerspectiveExample<'_> {
    /// Positions of this seat's own acts.
    pub fn own_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.speaker == self.me)
            .map(|(i, _)| i)
    }
}

pub fn perspectives(record: &DialogueRecord) -> (PerspectiveExample<'_>, PerspectiveExample<'_>) {
    let view = |me: Agent| PerspectiveExample {
        me,
        context: record.pair().context(me),
        turns: record.turns(),
        max_turns: record.transcript().max_turns(),
        target: record.outcome().selection(me),
    };
    (view(Agent::A), view(Agent::B))
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub mean_length: f64,
    pub mean_unique_ratio: f64,
    /// Seat A minus seat B.
    pub mean_advantage: f64,
    pub agreement_rate: f64,
    /// Over agreed records; `None` when nothing was agreed.
    pub pareto_rate: Option<f64>,
    /// Fraction of all acts by kind, in `ActKind::ALL` order.
    pub act_histogram: [f64; 5],
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats, CorpusError> {
    let records = corpus.records();
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }
    let n = records.len() as f64;
    let mut length = 0.0;
    let mut unique = 0.0;
    let mut advantage = 0.0;
    let mut agreed = 0usize;
    let mut pareto = 0usize;
    let mut kinds = [0usize; 5];
    let mut acts = 0usize;
    for record in records {
        length += record.len() as f64;
        unique += unique_act_ratio(record)?;
        advantage += record.advantage(Agent::A);
        let outcome = record.outcome();
        if outcome.agreed {
            agreed += 1;
            if is_pareto_optimal(outcome.score_a, outcome.score_b, record.pair()) {
                pareto += 1;
            }
        }
        for turn in record.turns() {
            kinds[turn.act.kind().index()] += 1;
            acts += 1;
        }
    }
    Ok(CorpusStats {
        dialogues: records.len(),
        mean_length: length / n,
        mean_unique_ratio: unique / n,
        mean_advantage: advantage / n,
        agreement_rate: agreed as f64 / n,
        pareto_rate: (agreed > 0).then(|| pareto as f64 / agreed as f64),
        act_histogram: kinds.map(|k| k as f64 / acts as f64),
    })
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Serialize, Deserialize)]
struct ActLine {
    who: Agent,
    kind: ActKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alloc: Option<[u8; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    counts: [u8; 3],
    u_a: [u8; 3],
    u_b: [u8; 3],
    starter: Agent,
    acts: Vec<ActLine>,
    sel_a: [u8; 3],
    sel_b: [u8; 3],
}

impl RecordLine {
    fn from_record(record: &DialogueRecord) -> RecordLine {
        let pair = record.pair();
        RecordLine {
            counts: pair.counts.as_array(),
            u_a: pair.utilities_a.as_array(),
            u_b: pair.utilities_b.as_array(),
            starter: pair.starter,
            acts: record
                .turns()
                .iter()
                .map(|t| ActLine {
                    who: t.speaker,
                    kind: t.act.kind(),
                    alloc: t.act.allocation().map(|a| a.as_array()),
                })
                .collect(),
            sel_a: record.outcome().selection_a.as_array(),
            sel_b: record.outcome().selection_b.as_array(),
        }
    }

    fn into_record(self) -> Result<DialogueRecord, CorpusError> {
        let counts = ItemCounts::new(self.counts)?;
        let pair = ContextPair::new(
            counts,
            Utilities::new(self.u_a)?,
            Utilities::new(self.u_b)?,
            self.starter,
        )?;
        let mut turns = Vec::with_capacity(self.acts.len());
        for act in self.acts {
            let alloc = act.alloc.map(Allocation::new).transpose()?;
            let parsed = DialogueAct::from_parts(act.kind, alloc).ok_or_else(|| CorpusError::Parse {
                line: 0,
                message: format!("act `{}` has the wrong arguments", act.kind.name()),
            })?;
            turns.push(Turn { speaker: act.who, act: parsed });
        }
        let transcript = Transcript::replay(pair, DEFAULT_MAX_TURNS, turns)?;
        if !transcript.is_terminated() {
            return Err(CorpusError::Invalid(EnvError::NotTerminated));
        }
        Ok(DialogueRecord::new(
            transcript,
            Allocation::new(self.sel_a)?,
            Allocation::new(self.sel_b)?,
        )?)
    }
}

pub fn write_corpus<W: Write>(corpus: &Corpus, writer: W) -> Result<(), CorpusError> {
    let mut writer = BufWriter::new(writer);
    for record in corpus.records() {
        serde_json::to_writer(&mut writer, &RecordLine::from_record(record))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Parses records line by line; scores are recomputed, never read.
pub fn read_corpus<R: BufRead>(reader: R, provenance: Provenance) -> Result<Corpus, CorpusError> {
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = parsed.into_record().map_err(|e| match e {
            CorpusError::Parse { message, .. } => CorpusError::Parse { line: line_no, message },
            other => CorpusError::Parse { line: line_no, message: other.to_string() },
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(Corpus::new(records, provenance))
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_corpus(corpus, fs::File::create(path)?)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    read_corpus(BufReader::new(fs::File::open(path)?), Provenance::Mixed)
}

/// A random legal negotiation, useful for tests and smoke runs.
pub fn random_record<R: Rng + ?Sized>(pair: ContextPair, max_turns: usize, rng: &mut R) -> DialogueRecord {
    let mut transcript = Transcript::new(pair, max_turns);
    while !transcript.is_terminated() {
        let legal = transcript.legal_acts().expect("not terminated");
        let act = *legal.choose(rng).expect("legal acts exist");
        transcript.apply(act).expect("legal act");
    }
    let pick = |rng: &mut R| *enumerate_allocations(&pair.counts).choose(rng).expect("nonempty");
    let selection_a = transcript.agreed_share(Agent::A).unwrap_or_else(|| pick(rng));
    let selection_b = transcript.agreed_share(Agent::B).unwrap_or_else(|| pick(rng));
    DialogueRecord::new(transcript, selection_a, selection_b).expect("terminated")
}
