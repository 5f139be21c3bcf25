//! Recurrent act policy with a selection head.
//!
//! The model reads a negotiation from one agent's seat. Its context (item
//! counts and own utilities) is embedded once and fed to a gated recurrent
//! cell at every step alongside the previous act. From each hidden state it
//! scores a flat vocabulary of 253 acts (every propose/insist allocation for
//! a 4-4-4 pool plus agree, disagree and end), masked to what is legal for
//! the current pool. Proposal logits are built from per-item claim terms and
//! the claim's value to the speaker, so nearby allocations share parameters.
//! Three per-item categorical heads read the final state and predict the
//! agent's own share.
//!
//! Parameters live in one flat vector split into named blocks, which keeps
//! the optimizer, clipping, finite-difference checks and serialization
//! uniform.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{
    Agent, Allocation, Context, DialogueAct, Transcript, Turn, MAX_COUNT, MAX_UTILITY,
    MIN_COUNT, NUM_ITEMS, TOTAL_VALUE,
};

/// Allocations of a 4-4-4 pool.
pub const NUM_CLAIMS: usize = 125;
pub const VOCAB_SIZE: usize = 2 * NUM_CLAIMS + 3;
pub const AGREE_ID: usize = 2 * NUM_CLAIMS;
pub const DISAGREE_ID: usize = AGREE_ID + 1;
pub const END_ID: usize = AGREE_ID + 2;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_INIT_SCALE: f64 = 0.1;
pub const MOMENTUM: f64 = 0.9;

const CLAIM_LEVELS: usize = MAX_COUNT as usize + 1;
const COUNT_LEVELS: usize = (MAX_COUNT - MIN_COUNT + 1) as usize;
const UTILITY_LEVELS: usize = MAX_UTILITY as usize + 1;
/// One-hot context width: counts then utilities, per item.
const CONTEXT_INPUTS: usize = NUM_ITEMS * (COUNT_LEVELS + UTILITY_LEVELS);

// Step input layout.
const X_KIND: usize = 0; // 5 act kinds + start token
const X_SPEAKER: usize = 6; // self, other
const X_SHARE: usize = 8; // one-hot own share per item
const X_SHARE_VALUE: usize = X_SHARE + NUM_ITEMS * CLAIM_LEVELS;
const X_POSITION: usize = X_SHARE_VALUE + 1;
const STEP_INPUTS: usize = X_POSITION + 1;
const START_KIND: usize = 5;

const PROPOSAL_KINDS: usize = 2;
const NUM_KINDS: usize = 5;
const CLAIM_TERMS: usize = PROPOSAL_KINDS * NUM_ITEMS * CLAIM_LEVELS;
const SELECTION_TERMS: usize = NUM_ITEMS * CLAIM_LEVELS;

const FORMAT: &str = "negolab-policy";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("hidden width must be positive")]
    ZeroHidden,
    #[error("act {act} is not legal at position {position}")]
    IllegalAct { act: DialogueAct, position: usize },
    #[error("no legal acts at position {position}")]
    EmptySupport { position: usize },
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: &'static str },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("history does not replay: {0}")]
    History(#[from] crate::env::EnvError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file is not valid: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("model file format `{found}` version {version} is not supported")]
    Version { found: String, version: u32 },
    #[error("model file was written for a different action vocabulary")]
    VocabularyMismatch,
    #[error("parameter block `{block}` has shape {found:?}, expected {expected:?}")]
    Shape { block: String, found: (usize, usize), expected: (usize, usize) },
}

// ---------------------------------------------------------------------------
// Action vocabulary

/// Flat id of an act. Proposals index their claim books-major.
pub fn act_id(act: &DialogueAct) -> usize {
    match act {
        DialogueAct::Propose(a) => claim_index(a),
        DialogueAct::Insist(a) => NUM_CLAIMS + claim_index(a),
        DialogueAct::Agree => AGREE_ID,
        DialogueAct::Disagree => DISAGREE_ID,
        DialogueAct::End => END_ID,
    }
}

pub fn act_from_id(id: usize) -> DialogueAct {
    assert!(id < VOCAB_SIZE, "act id {id} out of range");
    match id {
        AGREE_ID => DialogueAct::Agree,
        DISAGREE_ID => DialogueAct::Disagree,
        END_ID => DialogueAct::End,
        _ if id < NUM_CLAIMS => DialogueAct::Propose(claim_table()[id]),
        _ => DialogueAct::Insist(claim_table()[id - NUM_CLAIMS]),
    }
}

fn claim_index(a: &Allocation) -> usize {
    let [b, h, l] = a.as_array();
    (b as usize * CLAIM_LEVELS + h as usize) * CLAIM_LEVELS + l as usize
}

fn claim_table() -> &'static [Allocation; NUM_CLAIMS] {
    static TABLE: OnceLock<[Allocation; NUM_CLAIMS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [Allocation::EMPTY; NUM_CLAIMS];
        for (i, slot) in table.iter_mut().enumerate() {
            let claims = [
                (i / (CLAIM_LEVELS * CLAIM_LEVELS)) as u8,
                ((i / CLAIM_LEVELS) % CLAIM_LEVELS) as u8,
                (i % CLAIM_LEVELS) as u8,
            ];
            *slot = Allocation::new(claims).expect("claims within MAX_COUNT");
        }
        table
    })
}

/// Digest of the id-to-act listing, stored in model files.
pub fn vocabulary_hash() -> String {
    let mut hasher = Sha256::new();
    for id in 0..VOCAB_SIZE {
        hasher.update(act_from_id(id).to_string().as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Legal ids for a pool, given whether a proposal has been made.
pub fn legal_mask(counts: &crate::env::ItemCounts, has_proposal: bool) -> [bool; VOCAB_SIZE] {
    let mut mask = [false; VOCAB_SIZE];
    for (i, claim) in claim_table().iter().enumerate() {
        let fits = claim.fits(counts);
        mask[i] = fits;
        mask[NUM_CLAIMS + i] = fits;
    }
    mask[AGREE_ID] = has_proposal;
    mask[DISAGREE_ID] = true;
    mask[END_ID] = true;
    mask
}

// ---------------------------------------------------------------------------
// Parameter layout

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

const CTX_W: usize = 0;
const CTX_B: usize = 1;
const GRU_WX: usize = 2;
const GRU_WC: usize = 3;
const GRU_U: usize = 4;
const GRU_B: usize = 5;
const KIND_W: usize = 6;
const KIND_B: usize = 7;
const CLAIM_W: usize = 8;
const CLAIM_B: usize = 9;
const VALUE_W: usize = 10;
const VALUE_B: usize = 11;
const SEL_W: usize = 12;
const SEL_B: usize = 13;
const NUM_BLOCKS: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    blocks: [Block; NUM_BLOCKS],
    total: usize,
}

impl Layout {
    fn new(hidden: usize) -> Layout {
        let shapes: [(&'static str, usize, usize); NUM_BLOCKS] = [
            ("context.weight", hidden, CONTEXT_INPUTS),
            ("context.bias", hidden, 1),
            ("gru.input_weight", 3 * hidden, STEP_INPUTS),
            ("gru.context_weight", 3 * hidden, hidden),
            ("gru.recurrent_weight", 3 * hidden, hidden),
            ("gru.bias", 3 * hidden, 1),
            ("act.kind_weight", NUM_KINDS, hidden),
            ("act.kind_bias", NUM_KINDS, 1),
            ("act.claim_weight", CLAIM_TERMS, hidden),
            ("act.claim_bias", CLAIM_TERMS, 1),
            ("act.value_weight", PROPOSAL_KINDS, hidden),
            ("act.value_bias", PROPOSAL_KINDS, 1),
            ("selection.weight", SELECTION_TERMS, hidden),
            ("selection.bias", SELECTION_TERMS, 1),
        ];
        let mut offset = 0;
        let blocks = shapes.map(|(name, rows, cols)| {
            let block = Block { name, offset, rows, cols };
            offset += rows * cols;
            block
        });
        Layout { blocks, total: offset }
    }
}

/// Gradient (or any parameter-shaped vector) for a [`PolicyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    hidden: usize,
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &PolicyModel) -> Gradients {
        Gradients { hidden: model.hidden, values: vec![0.0; model.params.len()] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add(&mut self, other: &Gradients) {
        assert_eq!(self.values.len(), other.values.len());
        self.values.iter_mut().zip(&other.values).for_each(|(g, o)| *g += o);
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Names the first block holding a non-finite entry.
    pub fn check_finite(&self) -> Result<(), ModelError> {
        let layout = Layout::new(self.hidden);
        for block in layout.blocks.iter() {
            if self.values[block.range()].iter().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFiniteGradient { block: block.name });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Distributions

/// Masked, renormalized distribution over the act vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ActDistribution {
    probs: Vec<f64>,
}

impl ActDistribution {
    fn from_logits(logits: &[f64], mask: &[bool; VOCAB_SIZE], position: usize) -> Result<Self, ModelError> {
        let max = logits
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(ModelError::EmptySupport { position });
        }
        let mut probs = vec![0.0; VOCAB_SIZE];
        let mut total = 0.0;
        for id in 0..VOCAB_SIZE {
            if mask[id] {
                let e = (logits[id] - max).exp();
                probs[id] = e;
                total += e;
            }
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(ActDistribution { probs })
    }

    /// Builds a distribution from explicit probabilities; used by tests and
    /// scripted partners.
    pub fn from_probs(probs: Vec<f64>) -> ActDistribution {
        assert_eq!(probs.len(), VOCAB_SIZE);
        ActDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, act: &DialogueAct) -> f64 {
        self.probs[act_id(act)]
    }

    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DialogueAct {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = None;
        for (id, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = Some(id);
            if u < acc {
                return act_from_id(id);
            }
        }
        act_from_id(last.expect("distribution has support"))
    }

    /// Most probable act; lowest id on ties.
    pub fn argmax(&self) -> DialogueAct {
        let mut best = 0;
        for id in 1..VOCAB_SIZE {
            if self.probs[id] > self.probs[best] {
                best = id;
            }
        }
        act_from_id(best)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Gap between the two most probable acts, or `None` with fewer than two
    /// legal acts.
    pub fn margin(&self) -> Option<f64> {
        if self.support_size() < 2 {
            return None;
        }
        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &p in self.probs.iter().filter(|&&p| p > 0.0) {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        Some(first - second)
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    hidden: usize,
    layout: Layout,
    params: Vec<f64>,
    velocity: Vec<f64>,
    steps: u64,
}

/// Incremental reading state for one seat.
#[derive(Debug, Clone)]
pub struct PolicyState {
    me: Agent,
    context: Context,
    max_turns: usize,
    context_drive: Vec<f64>,
    h: Vec<f64>,
    observed: usize,
    has_proposal: bool,
}

impl PolicyState {
    pub fn me(&self) -> Agent {
        self.me
    }

    pub fn context(&self) -> &Context {
        &self.context
    }

    pub fn observed(&self) -> usize {
        self.observed
    }
}

/// Cached activations of one recurrent step.
#[derive(Debug, Clone)]
struct StepCache {
    x: [f64; STEP_INPUTS],
    h_prev: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
    n: Vec<f64>,
    q: Vec<f64>,
    h: Vec<f64>,
}

struct HeadOutput {
    kind: [f64; NUM_KINDS],
    claim: [f64; CLAIM_TERMS],
    value: [f64; PROPOSAL_KINDS],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn context_columns(context: &Context) -> [usize; 2 * NUM_ITEMS] {
    let counts = context.counts.as_array();
    let utilities = context.utilities.as_array();
    let mut cols = [0; 2 * NUM_ITEMS];
    for j in 0..NUM_ITEMS {
        cols[j] = j * COUNT_LEVELS + (counts[j] - MIN_COUNT) as usize;
        cols[NUM_ITEMS + j] = NUM_ITEMS * COUNT_LEVELS + j * UTILITY_LEVELS + utilities[j] as usize;
    }
    cols
}

fn step_input(turn: Option<&Turn>, me: Agent, context: &Context, position: usize, max_turns: usize) -> [f64; STEP_INPUTS] {
    let mut x = [0.0; STEP_INPUTS];
    match turn {
        None => x[X_KIND + START_KIND] = 1.0,
        Some(turn) => {
            x[X_KIND + turn.act.kind().index()] = 1.0;
            x[X_SPEAKER + usize::from(turn.speaker != me)] = 1.0;
            if let Some(claim) = turn.act.allocation() {
                let share = if turn.speaker == me {
                    claim
                } else {
                    claim.complement(&context.counts)
                };
                for j in 0..NUM_ITEMS {
                    x[X_SHARE + j * CLAIM_LEVELS + share.get(j) as usize] = 1.0;
                }
                x[X_SHARE_VALUE] = context.utilities.value_of(&share) as f64 / TOTAL_VALUE as f64;
            }
        }
    }
    x[X_POSITION] = position as f64 / max_turns as f64;
    x
}

impl PolicyModel {
    /// Fresh model with every parameter uniform in `[-scale, scale]`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, hidden: usize, scale: f64) -> Result<Self, ModelError> {
        if hidden == 0 {
            return Err(ModelError::ZeroHidden);
        }
        let layout = Layout::new(hidden);
        let params = (0..layout.total)
            .map(|_| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 })
            .collect();
        Ok(PolicyModel {
            hidden,
            velocity: vec![0.0; layout.total],
            layout,
            params,
            steps: 0,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.steps
    }

    pub fn blocks(&self) -> &[Block] {
        &self.layout.blocks
    }

    fn block(&self, index: usize) -> &[f64] {
        &self.params[self.layout.blocks[index].range()]
    }

    // -- forward pieces ----------------------------------------------------

    /// Context embedding and its constant contribution to each gate.
    fn encode_context(&self, context: &Context) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let w = self.block(CTX_W);
        let b = self.block(CTX_B);
        let cols = context_columns(context);
        let c: Vec<f64> = (0..h)
            .map(|i| {
                let row = &w[i * CONTEXT_INPUTS..(i + 1) * CONTEXT_INPUTS];
                (b[i] + cols.iter().map(|&col| row[col]).sum::<f64>()).tanh()
            })
            .collect();
        let wc = self.block(GRU_WC);
        let gb = self.block(GRU_B);
        let drive = (0..3 * h).map(|i| gb[i] + dot(&wc[i * h..(i + 1) * h], &c)).collect();
        (c, drive)
    }

    fn gru_step(&self, x: [f64; STEP_INPUTS], drive: &[f64], h_prev: &[f64]) -> StepCache {
        let h = self.hidden;
        let wx = self.block(GRU_WX);
        let uw = self.block(GRU_U);
        let input = |i: usize| -> f64 {
            let row = &wx[i * STEP_INPUTS..(i + 1) * STEP_INPUTS];
            x.iter().zip(row).filter(|(v, _)| **v != 0.0).map(|(v, w)| v * w).sum()
        };
        let mut r = vec![0.0; h];
        let mut u = vec![0.0; h];
        let mut n = vec![0.0; h];
        let mut q = vec![0.0; h];
        let mut out = vec![0.0; h];
        for i in 0..h {
            r[i] = sigmoid(drive[i] + input(i) + dot(&uw[i * h..(i + 1) * h], h_prev));
            u[i] = sigmoid(drive[h + i] + input(h + i) + dot(&uw[(h + i) * h..(h + i + 1) * h], h_prev));
            q[i] = dot(&uw[(2 * h + i) * h..(2 * h + i + 1) * h], h_prev);
            n[i] = (drive[2 * h + i] + input(2 * h + i) + r[i] * q[i]).tanh();
            out[i] = (1.0 - u[i]) * n[i] + u[i] * h_prev[i];
        }
        StepCache { x, h_prev: h_prev.to_vec(), r, u, n, q, h: out }
    }

    fn head(&self, h: &[f64]) -> HeadOutput {
        let hd = self.hidden;
        let kw = self.block(KIND_W);
        let kb = self.block(KIND_B);
        let cw = self.block(CLAIM_W);
        let cb = self.block(CLAIM_B);
        let vw = self.block(VALUE_W);
        let vb = self.block(VALUE_B);
        let mut out = HeadOutput {
            kind: [0.0; NUM_KINDS],
            claim: [0.0; CLAIM_TERMS],
            value: [0.0; PROPOSAL_KINDS],
        };
        for k in 0..NUM_KINDS {
            out.kind[k] = kb[k] + dot(&kw[k * hd..(k + 1) * hd], h);
        }
        for t in 0..CLAIM_TERMS {
            out.claim[t] = cb[t] + dot(&cw[t * hd..(t + 1) * hd], h);
        }
        for k in 0..PROPOSAL_KINDS {
            out.value[k] = vb[k] + dot(&vw[k * hd..(k + 1) * hd], h);
        }
        out
    }

    fn logits(&self, head: &HeadOutput, context: &Context, mask: &[bool; VOCAB_SIZE]) -> Vec<f64> {
        let mut logits = vec![f64::NEG_INFINITY; VOCAB_SIZE];
        let table = claim_table();
        for k in 0..PROPOSAL_KINDS {
            for (i, claim) in table.iter().enumerate() {
                let id = k * NUM_CLAIMS + i;
                if !mask[id] {
                    continue;
                }
                let mut z = head.kind[k];
                for j in 0..NUM_ITEMS {
                    z += head.claim[(k * NUM_ITEMS + j) * CLAIM_LEVELS + claim.get(j) as usize];
                }
                z += head.value[k] * context.utilities.value_of(claim) as f64 / TOTAL_VALUE as f64;
                logits[id] = z;
            }
        }
        for (id, kind) in [(AGREE_ID, 2), (DISAGREE_ID, 3), (END_ID, 4)] {
            if mask[id] {
                logits[id] = head.kind[kind];
            }
        }
        logits
    }

    fn selection_logits(&self, h: &[f64], item: usize) -> [f64; CLAIM_LEVELS] {
        let hd = self.hidden;
        let sw = self.block(SEL_W);
        let sb = self.block(SEL_B);
        let mut out = [0.0; CLAIM_LEVELS];
        for (m, slot) in out.iter_mut().enumerate() {
            let t = item * CLAIM_LEVELS + m;
            *slot = sb[t] + dot(&sw[t * hd..(t + 1) * hd], h);
        }
        out
    }

    /// Log-probabilities of the per-item own-share heads, masked to the pool.
    fn selection_log_probs(&self, h: &[f64], context: &Context) -> [[f64; CLAIM_LEVELS]; NUM_ITEMS] {
        let mut out = [[f64::NEG_INFINITY; CLAIM_LEVELS]; NUM_ITEMS];
        for (j, row) in out.iter_mut().enumerate() {
            let logits = self.selection_logits(h, j);
            let limit = context.counts.get(j) as usize;
            let max = logits[..=limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_total = max + logits[..=limit].iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            for m in 0..=limit {
                row[m] = logits[m] - log_total;
            }
        }
        out
    }

    // -- incremental inference ---------------------------------------------

    /// Starts reading a negotiation from `me`'s seat.
    pub fn begin(&self, context: Context, me: Agent, max_turns: usize) -> PolicyState {
        let (_, drive) = self.encode_context(&context);
        let x = step_input(None, me, &context, 0, max_turns);
        let step = self.gru_step(x, &drive, &vec![0.0; self.hidden]);
        PolicyState {
            me,
            context,
            max_turns,
            context_drive: drive,
            h: step.h,
            observed: 0,
            has_proposal: false,
        }
    }

    pub fn observe(&self, state: &mut PolicyState, turn: &Turn) {
        let position = state.observed + 1;
        let x = step_input(Some(turn), state.me, &state.context, position, state.max_turns);
        let step = self.gru_step(x, &state.context_drive, &state.h);
        state.h = step.h;
        state.observed = position;
        state.has_proposal |= turn.act.is_proposal();
    }

    /// Distribution over the next act from the current state.
    pub fn distribution(&self, state: &PolicyState) -> Result<ActDistribution, ModelError> {
        let mask = legal_mask(&state.context.counts, state.has_proposal);
        let logits = self.logits(&self.head(&state.h), &state.context, &mask);
        ActDistribution::from_logits(&logits, &mask, state.observed)
    }

    /// Argmax of the selection heads, restricted to the pool.
    pub fn head_selection(&self, state: &PolicyState) -> Allocation {
        let log_probs = self.selection_log_probs(&state.h, &state.context);
        let mut claims = [0u8; NUM_ITEMS];
        for j in 0..NUM_ITEMS {
            let mut best = 0;
            for m in 1..CLAIM_LEVELS {
                if log_probs[j][m] > log_probs[j][best] {
                    best = m;
                }
            }
            claims[j] = best as u8;
        }
        Allocation::new(claims).expect("selection within pool")
    }

    /// Reads `history` from `me`'s seat.
    pub fn read(&self, context: Context, me: Agent, history: &[Turn], max_turns: usize) -> PolicyState {
        let mut state = self.begin(context, me, max_turns);
        for turn in history {
            self.observe(&mut state, turn);
        }
        state
    }

    /// Distribution over the next act after `history`.
    pub fn act_distribution(
        &self,
        context: Context,
        me: Agent,
        history: &[Turn],
        max_turns: usize,
    ) -> Result<ActDistribution, ModelError> {
        self.distribution(&self.read(context, me, history, max_turns))
    }

    /// Draws the next act and returns it with its log-probability.
    pub fn sample_act<R: Rng + ?Sized>(
        &self,
        state: &PolicyState,
        rng: &mut R,
    ) -> Result<(DialogueAct, f64), ModelError> {
        let dist = self.distribution(state)?;
        let act = dist.sample(rng);
        Ok((act, dist.prob(&act).ln()))
    }

    /// Log-probability of `act` following `history`.
    pub fn act_log_prob(
        &self,
        context: Context,
        me: Agent,
        history: &[Turn],
        max_turns: usize,
        act: &DialogueAct,
    ) -> Result<f64, ModelError> {
        let dist = self.act_distribution(context, me, history, max_turns)?;
        let p = dist.prob(act);
        if p <= 0.0 {
            return Err(ModelError::IllegalAct { act: *act, position: history.len() });
        }
        Ok(p.ln())
    }

    /// Per-position distributions for every act in `history`, read from
    /// `me`'s seat. Entry `i` is the distribution that act `i` was drawn
    /// against.
    pub fn distributions_along(
        &self,
        context: Context,
        me: Agent,
        history: &[Turn],
        max_turns: usize,
    ) -> Result<Vec<ActDistribution>, ModelError> {
        let mut state = self.begin(context, me, max_turns);
        let mut out = Vec::with_capacity(history.len());
        for turn in history {
            out.push(self.distribution(&state)?);
            self.observe(&mut state, turn);
        }
        Ok(out)
    }

    /// Final own share after a finished negotiation. A standing agreement
    /// fixes the share; otherwise the selection heads decide.
    pub fn predict_selection(&self, transcript: &Transcript, me: Agent) -> Allocation {
        if let Some(share) = transcript.agreed_share(me) {
            return share;
        }
        let context = transcript.pair().context(me);
        let state = self.read(context, me, transcript.turns(), transcript.max_turns());
        self.head_selection(&state)
    }

    // -- training ----------------------------------------------------------

    /// Loss value without gradients.
    pub fn loss(&self, graph: &LossGraph<'_>) -> Result<f64, ModelError> {
        Ok(self.forward_graph(graph)?.loss)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn backward(&self, graph: &LossGraph<'_>) -> Result<(f64, Gradients), ModelError> {
        let fwd = self.forward_graph(graph)?;
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(graph, &fwd, &mut grads.values);
        grads.check_finite()?;
        Ok((fwd.loss, grads))
    }

    fn forward_graph(&self, graph: &LossGraph<'_>) -> Result<GraphForward, ModelError> {
        let hd = self.hidden;
        let (c, drive) = self.encode_context(&graph.context);
        let mut steps = Vec::with_capacity(graph.turns.len() + 1);
        let x0 = step_input(None, graph.me, &graph.context, 0, graph.max_turns);
        steps.push(self.gru_step(x0, &drive, &vec![0.0; hd]));
        for (i, turn) in graph.turns.iter().enumerate() {
            let x = step_input(Some(turn), graph.me, &graph.context, i + 1, graph.max_turns);
            let prev = steps.last().expect("start step").h.clone();
            steps.push(self.gru_step(x, &drive, &prev));
        }

        let mut loss = 0.0;
        let mut act_terms = Vec::new();
        let mut has_proposal = false;
        for (i, turn) in graph.turns.iter().enumerate() {
            let weight = graph.act_weights.get(i).copied().unwrap_or(0.0);
            if weight != 0.0 {
                let mask = legal_mask(&graph.context.counts, has_proposal);
                let logits = self.logits(&self.head(&steps[i].h), &graph.context, &mask);
                let dist = ActDistribution::from_logits(&logits, &mask, i)?;
                let id = act_id(&turn.act);
                if dist.probs[id] <= 0.0 {
                    return Err(ModelError::IllegalAct { act: turn.act, position: i });
                }
                loss -= weight * dist.probs[id].ln();
                act_terms.push((i, id, weight, dist, mask));
            }
            has_proposal |= turn.act.is_proposal();
        }

        let mut selection = None;
        if let Some((target, weight)) = graph.selection {
            let last = &steps.last().expect("start step").h;
            let log_probs = self.selection_log_probs(last, &graph.context);
            for j in 0..NUM_ITEMS {
                let lp = log_probs[j][target.get(j) as usize];
                if !lp.is_finite() {
                    return Err(ModelError::NonFiniteLoss);
                }
                loss -= weight * lp;
            }
            selection = Some((target, weight, log_probs));
        }
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        Ok(GraphForward { c, steps, loss, act_terms, selection })
    }

    fn backward_into(&self, graph: &LossGraph<'_>, fwd: &GraphForward, grad: &mut [f64]) {
        let hd = self.hidden;
        let blocks = self.layout.blocks;
        let n_steps = fwd.steps.len();
        let mut dh_head = vec![vec![0.0; hd]; n_steps];

        // Act heads.
        let table = claim_table();
        for (i, id, weight, dist, mask) in &fwd.act_terms {
            let h = &fwd.steps[*i].h;
            let mut g = vec![0.0; VOCAB_SIZE];
            for v in 0..VOCAB_SIZE {
                if mask[v] {
                    g[v] = weight * dist.probs[v];
                }
            }
            g[*id] -= weight;

            let mut d_kind = [0.0; NUM_KINDS];
            let mut d_claim = [0.0; CLAIM_TERMS];
            let mut d_value = [0.0; PROPOSAL_KINDS];
            for k in 0..PROPOSAL_KINDS {
                for (c, claim) in table.iter().enumerate() {
                    let gv = g[k * NUM_CLAIMS + c];
                    if gv == 0.0 {
                        continue;
                    }
                    d_kind[k] += gv;
                    for j in 0..NUM_ITEMS {
                        d_claim[(k * NUM_ITEMS + j) * CLAIM_LEVELS + claim.get(j) as usize] += gv;
                    }
                    d_value[k] += gv * graph.context.utilities.value_of(claim) as f64 / TOTAL_VALUE as f64;
                }
            }
            d_kind[2] += g[AGREE_ID];
            d_kind[3] += g[DISAGREE_ID];
            d_kind[4] += g[END_ID];

            let dh = &mut dh_head[*i];
            let terms: [(usize, usize, &[f64]); 3] = [
                (KIND_W, KIND_B, &d_kind),
                (CLAIM_W, CLAIM_B, &d_claim),
                (VALUE_W, VALUE_B, &d_value),
            ];
            for (wi, bi, d) in terms {
                let w = self.block(wi);
                let wo = blocks[wi].offset;
                let bo = blocks[bi].offset;
                for (row, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    grad[bo + row] += dv;
                    for col in 0..hd {
                        grad[wo + row * hd + col] += dv * h[col];
                        dh[col] += dv * w[row * hd + col];
                    }
                }
            }
        }

        // Selection heads.
        if let Some((target, weight, log_probs)) = &fwd.selection {
            let last = n_steps - 1;
            let h = &fwd.steps[last].h;
            let w = self.block(SEL_W);
            let wo = blocks[SEL_W].offset;
            let bo = blocks[SEL_B].offset;
            for j in 0..NUM_ITEMS {
                for m in 0..CLAIM_LEVELS {
                    let p = if log_probs[j][m].is_finite() { log_probs[j][m].exp() } else { 0.0 };
                    let onehot = if m == target.get(j) as usize { 1.0 } else { 0.0 };
                    let dv = weight * (p - onehot);
                    if dv == 0.0 {
                        continue;
                    }
                    let row = j * CLAIM_LEVELS + m;
                    grad[bo + row] += dv;
                    for col in 0..hd {
                        grad[wo + row * hd + col] += dv * h[col];
                        dh_head[last][col] += dv * w[row * hd + col];
                    }
                }
            }
        }

        // Recurrent cell, back through time.
        let uw = self.block(GRU_U);
        let wxo = blocks[GRU_WX].offset;
        let uo = blocks[GRU_U].offset;
        let mut d_drive = vec![0.0; 3 * hd];
        let mut dh_next = vec![0.0; hd];
        let mut da = vec![0.0; 3 * hd]; // r, u, n pre-activations (n slot holds dq for U)
        for s in (0..n_steps).rev() {
            let st = &fwd.steps[s];
            let mut dh_prev = vec![0.0; hd];
            for i in 0..hd {
                let dh = dh_head[s][i] + dh_next[i];
                let dn = dh * (1.0 - st.u[i]);
                let du = dh * (st.h_prev[i] - st.n[i]);
                dh_prev[i] += dh * st.u[i];
                let da_n = dn * (1.0 - st.n[i] * st.n[i]);
                let dr = da_n * st.q[i];
                let dq = da_n * st.r[i];
                let da_u = du * st.u[i] * (1.0 - st.u[i]);
                let da_r = dr * st.r[i] * (1.0 - st.r[i]);
                da[i] = da_r;
                da[hd + i] = da_u;
                da[2 * hd + i] = da_n;
                d_drive[i] += da_r;
                d_drive[hd + i] += da_u;
                d_drive[2 * hd + i] += da_n;
                // Recurrent weights: gate n uses dq rather than its pre-activation.
                let rec = [da_r, da_u, dq];
                for (g, &dv) in rec.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let row = g * hd + i;
                    let urow = &uw[row * hd..(row + 1) * hd];
                    let grow = &mut grad[uo + row * hd..uo + (row + 1) * hd];
                    for col in 0..hd {
                        grow[col] += dv * st.h_prev[col];
                        dh_prev[col] += dv * urow[col];
                    }
                }
            }
            for row in 0..3 * hd {
                let dv = da[row];
                if dv == 0.0 {
                    continue;
                }
                for (col, &xv) in st.x.iter().enumerate() {
                    if xv != 0.0 {
                        grad[wxo + row * STEP_INPUTS + col] += dv * xv;
                    }
                }
            }
            dh_next = dh_prev;
        }

        // Context path.
        let wc = self.block(GRU_WC);
        let wco = blocks[GRU_WC].offset;
        let gbo = blocks[GRU_B].offset;
        let mut dc = vec![0.0; hd];
        for row in 0..3 * hd {
            let dv = d_drive[row];
            if dv == 0.0 {
                continue;
            }
            grad[gbo + row] += dv;
            for col in 0..hd {
                grad[wco + row * hd + col] += dv * fwd.c[col];
                dc[col] += dv * wc[row * hd + col];
            }
        }
        let cwo = blocks[CTX_W].offset;
        let cbo = blocks[CTX_B].offset;
        let cols = context_columns(&graph.context);
        for i in 0..hd {
            let dpre = dc[i] * (1.0 - fwd.c[i] * fwd.c[i]);
            grad[cbo + i] += dpre;
            for &col in &cols {
                grad[cwo + i * CONTEXT_INPUTS + col] += dpre;
            }
        }
    }

    /// Momentum SGD step with global-norm clipping. Returns the gradient
    /// norm before clipping.
    pub fn apply_gradients(
        &mut self,
        grads: &Gradients,
        learning_rate: f64,
        clip_norm: f64,
    ) -> Result<f64, ModelError> {
        grads.check_finite()?;
        let mut clipped = grads.clone();
        let norm = clipped.clip_global_norm(clip_norm);
        for ((p, v), g) in self.params.iter_mut().zip(self.velocity.iter_mut()).zip(&clipped.values) {
            *v = MOMENTUM * *v + g;
            *p -= learning_rate * *v;
        }
        self.steps += 1;
        Ok(norm)
    }

    /// Clears momentum; used when a model is retrained from its current
    /// weights under a new objective.
    pub fn reset_optimizer(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
        self.steps = 0;
    }

    // -- persistence -------------------------------------------------------

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: FORMAT.to_string(),
            version: FORMAT_VERSION,
            hidden: self.hidden,
            vocabulary: vocabulary_hash(),
            steps: self.steps,
            blocks: self
                .layout
                .blocks
                .iter()
                .map(|b| BlockFile {
                    name: b.name.to_string(),
                    shape: (b.rows, b.cols),
                    values: self.params[b.range()].to_vec(),
                    velocity: self.velocity[b.range()].to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<PolicyModel, ModelError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != FORMAT_VERSION {
            return Err(ModelError::Version { found: file.format, version: file.version });
        }
        if file.vocabulary != vocabulary_hash() {
            return Err(ModelError::VocabularyMismatch);
        }
        if file.hidden == 0 {
            return Err(ModelError::ZeroHidden);
        }
        let layout = Layout::new(file.hidden);
        if file.blocks.len() != NUM_BLOCKS {
            return Err(ModelError::Shape {
                block: "<block count>".into(),
                found: (file.blocks.len(), 0),
                expected: (NUM_BLOCKS, 0),
            });
        }
        let mut params = vec![0.0; layout.total];
        let mut velocity = vec![0.0; layout.total];
        for (block, stored) in layout.blocks.iter().zip(&file.blocks) {
            let expected = (block.rows, block.cols);
            if stored.name != block.name
                || stored.shape != expected
                || stored.values.len() != block.len()
                || stored.velocity.len() != block.len()
            {
                return Err(ModelError::Shape {
                    block: stored.name.clone(),
                    found: stored.shape,
                    expected,
                });
            }
            params[block.range()].copy_from_slice(&stored.values);
            velocity[block.range()].copy_from_slice(&stored.velocity);
        }
        Ok(PolicyModel { hidden: file.hidden, layout, params, velocity, steps: file.steps })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PolicyModel, ModelError> {
        PolicyModel::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    hidden: usize,
    vocabulary: String,
    steps: u64,
    blocks: Vec<BlockFile>,
}

#[derive(Serialize, Deserialize)]
struct BlockFile {
    name: String,
    shape: (usize, usize),
    values: Vec<f64>,
    velocity: Vec<f64>,
}

/// A weighted negative log-likelihood over one seat's reading of a
/// negotiation: `-sum_i w_i log p(act_i | acts_<i, context)` plus an
/// optional `-w_sel sum_j log p(share_j | all acts, context)`.
///
/// Supervised and policy-gradient objectives are both expressed this way.
#[derive(Debug, Clone)]
pub struct LossGraph<'a> {
    pub context: Context,
    pub me: Agent,
    pub turns: &'a [Turn],
    pub max_turns: usize,
    /// One weight per turn; zero means the turn contributes no term.
    pub act_weights: Vec<f64>,
    pub selection: Option<(Allocation, f64)>,
}

struct GraphForward {
    c: Vec<f64>,
    steps: Vec<StepCache>,
    loss: f64,
    act_terms: Vec<(usize, usize, f64, ActDistribution, [bool; VOCAB_SIZE])>,
    selection: Option<(Allocation, f64, [[f64; CLAIM_LEVELS]; NUM_ITEMS])>,
}
