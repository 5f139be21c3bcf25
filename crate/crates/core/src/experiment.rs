//! End-to-end runs: build the per-seed foundation (corpora, expert,
//! supervised starting point), train one regime, evaluate every epoch
//! against the expert, and write traces plus a manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acquisition::{
    acquisition_epoch, AcquisitionConfig, AcquisitionError, AcquisitionFunction, AcquisitionReport, Order,
    PartnerSpec,
};
use crate::corpus::{
    filter_by_quality, generate_synthetic_corpus, save_corpus, Corpus, CorpusError, Provenance, StyleMixture,
    DEFAULT_CORPUS_SIZE, LOW_QUALITY_THRESHOLD,
};
use crate::env::Agent;
use crate::metrics::{evaluate_pairing, evaluation_contexts, fmt_metric, EvalReport, EvalSpec};
use crate::model::{ModelError, PolicyModel, DEFAULT_HIDDEN, DEFAULT_INIT_SCALE};
use crate::training::{
    rl_train, sl_train, Learner, RewardVariant, RlConfig, Schedule, SlConfig, TrainError,
    DEFAULT_EPISODES_PER_EPOCH, DEFAULT_SL_BATCH,
};

pub const TRACE_FILE: &str = "trace.csv";
pub const ACQUISITION_FILE: &str = "acquisition.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "eval.json";
pub const LEARNER_FILE: &str = "alice.json";
pub const PARTNER_FILE: &str = "partner.json";
pub const TRACE_HEADER: [&str; 7] =
    ["epoch", "advantage", "pareto", "agreement", "novelty", "mean_length", "mean_reward"];
pub const ACQUISITION_HEADER: [&str; 5] =
    ["epoch", "n_annotated", "mean_annotated_fraction", "dprime_advantage", "dprime_pareto"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub size: usize,
    pub mixture: StyleMixture,
    pub threshold: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { size: DEFAULT_CORPUS_SIZE, mixture: StyleMixture::default(), threshold: LOW_QUALITY_THRESHOLD }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: usize,
    pub init_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { hidden: DEFAULT_HIDDEN, init_scale: DEFAULT_INIT_SCALE }
    }
}

fn default_period() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Regime {
    /// The supervised starting point, unchanged.
    Sl,
    /// Self-play against the frozen supervised partner.
    Rl,
    /// Self-play with a supervised minibatch after every `period`-th
    /// episode.
    RlSl {
        #[serde(default = "default_period")]
        period: usize,
    },
    /// Self-play against a partner that acquires expert annotations.
    Ta {
        #[serde(default = "default_function")]
        function: AcquisitionFunction,
        #[serde(default)]
        k: Option<usize>,
        #[serde(default = "default_order")]
        order: Order,
    },
    /// Self-play from random weights against a random frozen partner.
    RlRandomInit,
    /// Acquisition from random weights and an empty dataset.
    TaRandomInit {
        #[serde(default = "default_function")]
        function: AcquisitionFunction,
        #[serde(default)]
        k: Option<usize>,
        #[serde(default = "default_order")]
        order: Order,
    },
    /// Self-play with an engineered reward.
    RlEngineered { variant: RewardVariant },
}

fn default_function() -> AcquisitionFunction {
    AcquisitionFunction::Likelihood
}

fn default_order() -> Order {
    Order::Second
}

impl Regime {
    pub fn label(&self) -> String {
        match self {
            Regime::Sl => "sl".into(),
            Regime::Rl => "rl".into(),
            Regime::RlSl { period } => format!("rl+sl({period})"),
            Regime::Ta { function, order, .. } => format!("ta({},{})", function.name(), order_name(*order)),
            Regime::RlRandomInit => "rl-random-init".into(),
            Regime::TaRandomInit { function, order, .. } => {
                format!("ta-random-init({},{})", function.name(), order_name(*order))
            }
            Regime::RlEngineered { variant } => format!("rl-engineered({})", variant_name(*variant)),
        }
    }

    /// Parses the compact forms used on the command line, e.g. `rl`,
    /// `rl+sl(4)`, `ta(likelihood,first)`, `rl-engineered(pareto-bonus)`.
    pub fn parse(text: &str) -> Result<Regime, ExperimentError> {
        let text = text.trim();
        let (head, args) = match text.find('(') {
            Some(open) if text.ends_with(')') => {
                let inner = &text[open + 1..text.len() - 1];
                (&text[..open], inner.split(',').map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>())
            }
            _ => (text, Vec::new()),
        };
        let bad = || ExperimentError::Config(format!("unrecognized regime `{text}`"));
        let function = |s: &str| {
            AcquisitionFunction::ALL.into_iter().find(|f| f.name() == s).ok_or_else(bad)
        };
        let order = |s: &str| match s {
            "first" => Ok(Order::First),
            "second" => Ok(Order::Second),
            _ => Err(bad()),
        };
        let ta_args = |args: &[&str]| -> Result<(AcquisitionFunction, Order), ExperimentError> {
            let f = args.first().map(|s| function(s)).transpose()?.unwrap_or(AcquisitionFunction::Likelihood);
            let o = args.get(1).map(|s| order(s)).transpose()?.unwrap_or(Order::Second);
            Ok((f, o))
        };
        match head {
            "sl" if args.is_empty() => Ok(Regime::Sl),
            "rl" if args.is_empty() => Ok(Regime::Rl),
            "rl+sl" => {
                let period = match args.as_slice() {
                    [] => default_period(),
                    [n] => n.parse().map_err(|_| bad())?,
                    _ => return Err(bad()),
                };
                Ok(Regime::RlSl { period })
            }
            "ta" => {
                let (function, order) = ta_args(&args)?;
                Ok(Regime::Ta { function, k: None, order })
            }
            "rl-random-init" if args.is_empty() => Ok(Regime::RlRandomInit),
            "ta-random-init" => {
                let (function, order) = ta_args(&args)?;
                Ok(Regime::TaRandomInit { function, k: None, order })
            }
            "rl-engineered" => {
                let variant = match args.as_slice() {
                    ["plain"] => RewardVariant::Plain,
                    ["pareto-bonus"] | [] => RewardVariant::ParetoBonus,
                    ["pareto-bonus-normalized"] | ["normalized"] => RewardVariant::ParetoBonusNormalized,
                    _ => return Err(bad()),
                };
                Ok(Regime::RlEngineered { variant })
            }
            _ => Err(bad()),
        }
    }
}

fn order_name(order: Order) -> &'static str {
    match order {
        Order::First => "first",
        Order::Second => "second",
    }
}

fn variant_name(variant: RewardVariant) -> &'static str {
    match variant {
        RewardVariant::Plain => "plain",
        RewardVariant::ParetoBonus => "pareto-bonus",
        RewardVariant::ParetoBonusNormalized => "pareto-bonus-normalized",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterleaveSpec {
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for InterleaveSpec {
    fn default() -> Self {
        InterleaveSpec { batch: DEFAULT_SL_BATCH, learning_rate: Schedule::default().sl_learning_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: ModelSpec,
    pub regime: Regime,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub sl: SlConfig,
    pub rl: RlConfig,
    pub interleave: InterleaveSpec,
    pub acquisition: AcquisitionConfig,
    pub eval: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: None,
            seed: 0,
            corpus: CorpusSpec::default(),
            model: ModelSpec::default(),
            regime: Regime::Rl,
            epochs: 6,
            episodes_per_epoch: DEFAULT_EPISODES_PER_EPOCH,
            sl: SlConfig::default(),
            rl: RlConfig::default(),
            interleave: InterleaveSpec::default(),
            acquisition: AcquisitionConfig::default(),
            eval: EvalSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, ExperimentError> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}-seed{}", self.regime.label(), self.seed))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let config = |m: String| Err(ExperimentError::Config(m));
        if self.corpus.size == 0 {
            return config("corpus.size must be positive".into());
        }
        self.corpus.mixture.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if !(self.corpus.threshold > 0.0 && self.corpus.threshold <= 1.0) {
            return config(format!("corpus.threshold {} is outside (0, 1]", self.corpus.threshold));
        }
        if self.model.hidden == 0 {
            return config("model.hidden must be positive".into());
        }
        if !(self.model.init_scale >= 0.0) {
            return config("model.init_scale must be non-negative".into());
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return config("epochs and episodes_per_epoch must be positive".into());
        }
        if self.eval.contexts == 0 || self.eval.seeds == 0 {
            return config("eval.contexts and eval.seeds must be positive".into());
        }
        let wrap = |e: TrainError| ExperimentError::Config(e.to_string());
        self.sl.validate().map_err(wrap)?;
        self.rl.validate().map_err(wrap)?;
        self.schedule().validate().map_err(wrap)?;
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            sl_period: match self.regime {
                Regime::RlSl { period } => Some(period),
                _ => None,
            },
            episodes: self.epochs * self.episodes_per_epoch,
            episodes_per_epoch: self.episodes_per_epoch,
            sl_batch: self.interleave.batch,
            sl_learning_rate: self.interleave.learning_rate,
        }
    }

    fn foundation_spec(&self) -> FoundationSpec {
        FoundationSpec { seed: self.seed, corpus: self.corpus.clone(), model: self.model, sl: self.sl }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent rng stream for a named purpose within a run.
pub fn derived_rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derived_seed(seed, purpose))
}

pub fn derived_seed(seed: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

// ---------------------------------------------------------------------------
// Foundation

/// Everything a seed's regimes share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoundationSpec {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: ModelSpec,
    pub sl: SlConfig,
}

#[derive(Debug, Clone)]
pub struct Foundation {
    pub spec: FoundationSpec,
    /// The full synthetic corpus; trains the expert.
    pub high: Corpus,
    /// The low-diversity subset every non-random regime starts from.
    pub low: Corpus,
    pub expert: PolicyModel,
    pub supervised: PolicyModel,
    pub expert_curve: Vec<f64>,
    pub supervised_curve: Vec<f64>,
}

impl Foundation {
    pub fn build(spec: FoundationSpec) -> Result<Foundation, ExperimentError> {
        let high = generate_synthetic_corpus(derived_seed(spec.seed, "corpus"), spec.corpus.size, &spec.corpus.mixture)?;
        let low = filter_by_quality(&high, spec.corpus.threshold)?;
        let train = |corpus: &Corpus, purpose: &str| -> Result<(PolicyModel, Vec<f64>), ExperimentError> {
            let mut rng = derived_rng(spec.seed, purpose);
            let mut model = PolicyModel::init(&mut rng, spec.model.hidden, spec.model.init_scale)?;
            let curve = sl_train(&mut model, corpus, &spec.sl, &mut rng)?;
            model.reset_optimizer();
            Ok((model, curve))
        };
        let (expert, expert_curve) = train(&high, "expert")?;
        let (supervised, supervised_curve) = train(&low, "supervised")?;
        Ok(Foundation { spec, high, low, expert, supervised, expert_curve, supervised_curve })
    }

    pub fn for_config(config: &ExperimentConfig) -> Result<Foundation, ExperimentError> {
        Foundation::build(config.foundation_spec())
    }

    pub fn matches(&self, config: &ExperimentConfig) -> bool {
        self.spec == config.foundation_spec()
    }
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub advantage: f64,
    pub pareto: Option<f64>,
    pub agreement: f64,
    pub novelty: Option<f64>,
    pub mean_length: f64,
    pub mean_reward: f64,
}

impl TraceRow {
    fn from_report(epoch: usize, report: &EvalReport) -> TraceRow {
        TraceRow {
            epoch,
            advantage: report.advantage.mean,
            pareto: report.pareto_rate.map(|e| e.mean),
            agreement: report.agreement_rate.mean,
            novelty: report.novelty.map(|e| e.mean),
            mean_length: report.mean_length.mean,
            mean_reward: report.mean_score.mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRow {
    pub epoch: usize,
    pub n_annotated: usize,
    pub mean_annotated_fraction: Option<f64>,
    pub dprime_advantage: Option<f64>,
    pub dprime_pareto: Option<f64>,
}

impl AcquisitionRow {
    fn from_report(epoch: usize, report: &AcquisitionReport) -> AcquisitionRow {
        AcquisitionRow {
            epoch,
            n_annotated: report.annotated,
            mean_annotated_fraction: report.mean_annotated_fraction,
            dprime_advantage: report.dprime_advantage,
            dprime_pareto: report.dprime_pareto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Vec<TraceRow>,
    pub acquisition: Vec<AcquisitionRow>,
    pub learner: PolicyModel,
    pub partner: PolicyModel,
    /// Evaluation of the final learner against the expert.
    pub report: EvalReport,
}

impl RunResult {
    pub fn final_row(&self) -> &TraceRow {
        self.trace.last().expect("trace has the initial row")
    }
}

fn optional(value: Option<f64>) -> String {
    value.map(fmt_metric).unwrap_or_default()
}

pub fn write_trace<W: Write>(rows: &[TraceRow], writer: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(TRACE_HEADER)?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            fmt_metric(r.advantage),
            optional(r.pareto),
            fmt_metric(r.agreement),
            optional(r.novelty),
            fmt_metric(r.mean_length),
            fmt_metric(r.mean_reward),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_acquisition<W: Write>(rows: &[AcquisitionRow], writer: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(ACQUISITION_HEADER)?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.n_annotated.to_string(),
            optional(r.mean_annotated_fraction),
            optional(r.dprime_advantage),
            optional(r.dprime_pareto),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trace written by [`write_trace`].
pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>, ExperimentError> {
    let mut reader = csv::Reader::from_path(path)?;
    let parse_opt = |s: &str| -> Result<Option<f64>, ExperimentError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| ExperimentError::Config(format!("bad number `{s}` in trace")))
        }
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64, ExperimentError> {
            parse_opt(field(i))?.ok_or_else(|| ExperimentError::Config("missing value in trace".into()))
        };
        rows.push(TraceRow {
            epoch: field(0).parse().map_err(|_| ExperimentError::Config("bad epoch in trace".into()))?,
            advantage: num(1)?,
            pareto: parse_opt(field(2))?,
            agreement: num(3)?,
            novelty: parse_opt(field(4))?,
            mean_length: num(5)?,
            mean_reward: num(6)?,
        });
    }
    Ok(rows)
}

/// Trains the configured regime on a prepared foundation.
pub fn run_regime(config: &ExperimentConfig, foundation: &Foundation) -> Result<RunResult, ExperimentError> {
    config.validate()?;
    if !foundation.matches(config) {
        return Err(ExperimentError::Config("foundation was built for a different config".into()));
    }
    let contexts = evaluation_contexts(config.eval.context_seed, config.eval.contexts);
    let eval_seeds: Vec<u64> = (0..config.eval.seeds as u64).collect();
    let evaluate = |alice: &PolicyModel| evaluate_pairing(alice, &foundation.expert, &contexts, &eval_seeds, &config.eval);
    let mut train_rng = derived_rng(config.seed, "episodes");
    let random_model = |purpose: &str| -> Result<PolicyModel, ModelError> {
        PolicyModel::init(&mut derived_rng(config.seed, purpose), config.model.hidden, config.model.init_scale)
    };
    let mut rl = config.rl;
    if let Regime::RlEngineered { variant } = config.regime {
        rl.variant = variant;
    }
    let schedule = config.schedule();

    let mut trace = Vec::with_capacity(config.epochs + 1);
    let mut acquisition = Vec::new();
    let (learner, partner, report) = match config.regime {
        Regime::Sl => {
            let report = evaluate(&foundation.supervised)?;
            for epoch in 0..=config.epochs {
                trace.push(TraceRow::from_report(epoch, &report));
            }
            (foundation.supervised.clone(), foundation.supervised.clone(), report)
        }
        Regime::Rl | Regime::RlSl { .. } | Regime::RlEngineered { .. } | Regime::RlRandomInit => {
            let (alice, bob) = if config.regime == Regime::RlRandomInit {
                (random_model("learner-init")?, random_model("partner-init")?)
            } else {
                (foundation.supervised.clone(), foundation.supervised.clone())
            };
            let initial = evaluate(&alice)?;
            trace.push(TraceRow::from_report(0, &initial));
            let mut last = initial;
            let sl_corpus = schedule.sl_period.map(|_| &foundation.low);
            let alice = rl_train(alice, &bob, schedule, rl, config.sl, sl_corpus, &mut train_rng, |epoch, model, _| {
                let report = evaluate(model)?;
                trace.push(TraceRow::from_report(epoch, &report));
                last = report;
                Ok(())
            })?;
            (alice, bob, last)
        }
        Regime::Ta { function, k, order } | Regime::TaRandomInit { function, k, order } => {
            let random = matches!(config.regime, Regime::TaRandomInit { .. });
            let (alice, mut bob, mut dataset) = if random {
                (random_model("learner-init")?, random_model("partner-init")?, Corpus::new(Vec::new(), Provenance::Mixed))
            } else {
                (foundation.supervised.clone(), foundation.supervised.clone(), foundation.low.clone())
            };
            let acq = AcquisitionConfig { function, order, k: k.unwrap_or(config.acquisition.k), ..config.acquisition };
            let partner_spec = PartnerSpec { hidden: config.model.hidden, init_scale: config.model.init_scale };
            let mut acq_rng = derived_rng(config.seed, "acquisition");
            let mut learner = Learner::new(alice, rl, config.sl, schedule, None)?;
            let mut last = evaluate(&learner.model)?;
            trace.push(TraceRow::from_report(0, &last));
            for epoch in 1..=config.epochs {
                let mut records = Vec::with_capacity(config.episodes_per_epoch);
                for _ in 0..config.episodes_per_epoch {
                    records.push(learner.episode(&bob, &mut train_rng)?.record);
                }
                let step = acquisition_epoch(
                    &mut learner.model,
                    &mut bob,
                    &mut dataset,
                    &records,
                    Agent::A,
                    &foundation.expert,
                    &acq,
                    &config.sl,
                    partner_spec,
                    &mut acq_rng,
                )?;
                acquisition.push(AcquisitionRow::from_report(epoch, &step));
                last = evaluate(&learner.model)?;
                trace.push(TraceRow::from_report(epoch, &last));
            }
            (learner.model, bob, last)
        }
    };
    Ok(RunResult { trace, acquisition, learner, partner, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub label: String,
    pub regime: String,
    pub config_hash: String,
    pub version: String,
    pub vocabulary: String,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

/// Writes all artifacts of a finished run into `dir`.
pub fn write_run(dir: &Path, config: &ExperimentConfig, result: &RunResult) -> Result<Manifest, ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut files = vec![CONFIG_FILE.to_string(), TRACE_FILE.to_string(), REPORT_FILE.to_string()];
    fs::write(dir.join(CONFIG_FILE), config.to_json())?;
    write_trace(&result.trace, fs::File::create(dir.join(TRACE_FILE))?)?;
    if !result.acquisition.is_empty() {
        write_acquisition(&result.acquisition, fs::File::create(dir.join(ACQUISITION_FILE))?)?;
        files.push(ACQUISITION_FILE.into());
    }
    fs::write(dir.join(REPORT_FILE), result.report.to_json())?;
    result.learner.save(dir.join(LEARNER_FILE))?;
    result.partner.save(dir.join(PARTNER_FILE))?;
    files.extend([LEARNER_FILE.to_string(), PARTNER_FILE.to_string()]);
    let manifest = Manifest {
        label: config.label(),
        regime: config.regime.label(),
        config_hash: config.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        vocabulary: crate::model::vocabulary_hash(),
        files,
        config: config.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

/// Builds the foundation, trains, and writes the run directory
/// `out/<label>`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<(PathBuf, RunResult), ExperimentError> {
    config.validate()?;
    let foundation = Foundation::for_config(config)?;
    let result = run_regime(config, &foundation)?;
    let dir = out.join(config.label());
    write_run(&dir, config, &result)?;
    save_corpus(&foundation.low, dir.join("corpus-low.jsonl"))?;
    Ok((dir, result))
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum SweepAxis {
    Seed(Vec<u64>),
    Threshold(Vec<f64>),
    Function(Vec<AcquisitionFunction>),
    Period(Vec<usize>),
    Regime(Vec<Regime>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Seed(v) => v.len(),
            SweepAxis::Threshold(v) => v.len(),
            SweepAxis::Function(v) => v.len(),
            SweepAxis::Period(v) => v.len(),
            SweepAxis::Regime(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One labelled config per axis value.
    pub fn expand(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c.name = Some(format!("{}-{}", base.label(), sanitize(&label)));
            (label, c)
        };
        match self {
            SweepAxis::Seed(v) => v.iter().map(|s| with(format!("seed={s}"), &|c| c.seed = *s)).collect(),
            SweepAxis::Threshold(v) => {
                v.iter().map(|t| with(format!("threshold={t}"), &|c| c.corpus.threshold = *t)).collect()
            }
            SweepAxis::Function(v) => v
                .iter()
                .map(|f| {
                    with(format!("function={}", f.name()), &|c| {
                        c.regime = match c.regime {
                            Regime::TaRandomInit { k, order, .. } => Regime::TaRandomInit { function: *f, k, order },
                            Regime::Ta { k, order, .. } => Regime::Ta { function: *f, k, order },
                            _ => Regime::Ta { function: *f, k: None, order: Order::Second },
                        }
                    })
                })
                .collect(),
            SweepAxis::Period(v) => {
                v.iter().map(|n| with(format!("period={n}"), &|c| c.regime = Regime::RlSl { period: *n })).collect()
            }
            SweepAxis::Regime(v) => v.iter().map(|r| with(r.label(), &|c| c.regime = *r)).collect(),
        }
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub status: String,
    pub result: Option<TraceRow>,
}

pub const SWEEP_FILE: &str = "summary.csv";

/// Runs each axis value as an independent experiment, `parallelism` at a
/// time. Failed runs are recorded and the sweep continues.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: &SweepAxis,
    parallelism: usize,
    out: &Path,
) -> Result<Vec<SweepRow>, ExperimentError> {
    if axis.is_empty() {
        return Err(ExperimentError::Config("sweep axis has no values".into()));
    }
    let runs = axis.expand(base);
    for (_, config) in &runs {
        config.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        runs.par_iter()
            .map(|(label, config)| match run_experiment(config, out) {
                Ok((_, result)) => SweepRow { label: label.clone(), status: "ok".into(), result: Some(result.final_row().clone()) },
                Err(error) => {
                    tracing::warn!(run = %label, %error, "sweep run failed");
                    SweepRow { label: label.clone(), status: format!("failed: {error}"), result: None }
                }
            })
            .collect()
    });
    fs::create_dir_all(out)?;
    write_sweep(&rows, fs::File::create(out.join(SWEEP_FILE))?)?;
    Ok(rows)
}

pub fn write_sweep<W: Write>(rows: &[SweepRow], writer: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["label", "status"];
    header.extend_from_slice(&TRACE_HEADER);
    out.write_record(&header)?;
    for row in rows {
        let mut fields = vec![row.label.clone(), row.status.clone()];
        match &row.result {
            Some(r) => fields.extend([
                r.epoch.to_string(),
                fmt_metric(r.advantage),
                optional(r.pareto),
                fmt_metric(r.agreement),
                optional(r.novelty),
                fmt_metric(r.mean_length),
                fmt_metric(r.mean_reward),
            ]),
            None => fields.extend(std::iter::repeat_n(String::new(), TRACE_HEADER.len())),
        }
        out.write_record(&fields)?;
    }
    out.flush()?;
    Ok(())
}
