//! Shared service state: the session index, the event log and the model
//! registry. HTTP handlers are thin wrappers over these methods.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::error::ArenaError;
use crate::registry::ModelRegistry;
use crate::session::{ActPayload, Event, Phase, Session, SessionView, AGENT_SEAT, HUMAN_SEAT};
use crate::store::EventLog;
use crate::survey::{SurveyAnswers, LIKERT_ITEMS};

type Shared = Arc<Mutex<Session>>;

pub struct Arena {
    registry: ModelRegistry,
    log: EventLog,
    sessions: RwLock<HashMap<Uuid, Shared>>,
    /// Serializes study sequencing so one token never gets two open
    /// sessions.
    study_lock: Mutex<()>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub model: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRequest {
    pub allocation: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StudyStep {
    Session { position: usize, of: usize, session: SessionView },
    Done { completed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub sessions: usize,
    pub scored: usize,
    pub surveys: usize,
    pub agreement_rate: Option<f64>,
    pub mean_human_score: Option<f64>,
    pub mean_agent_score: Option<f64>,
    /// Mean rating per Likert question, once any survey is in.
    pub mean_likert: Option<Vec<f64>>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn lock(session: &Shared) -> std::sync::MutexGuard<'_, Session> {
    session.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl Arena {
    /// Opens the log under `data_dir` and rebuilds every stored session.
    pub fn open(registry: ModelRegistry, data_dir: impl AsRef<std::path::Path>) -> Result<Arena, ArenaError> {
        let log = EventLog::open(data_dir)?;
        let mut sessions = HashMap::new();
        for events in log.load_all()? {
            let session = Session::replay(&events)?;
            sessions.insert(session.id, Arc::new(Mutex::new(session)));
        }
        tracing::info!(sessions = sessions.len(), models = registry.len(), "arena ready");
        Ok(Arena { registry, log, sessions: RwLock::new(sessions), study_lock: Mutex::new(()) })
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    fn get(&self, id: Uuid) -> Result<Shared, ArenaError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&id)
            .cloned()
            .ok_or(ArenaError::UnknownSession(id))
    }

    fn all(&self) -> Vec<Shared> {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).values().cloned().collect()
    }

    pub fn create(&self, request: CreateSession) -> Result<SessionView, ArenaError> {
        self.create_in_study(request, None)
    }

    fn create_in_study(&self, request: CreateSession, study: Option<String>) -> Result<SessionView, ArenaError> {
        let model = self.registry.get(&request.model)?;
        let id = Uuid::new_v4();
        let seed = request.seed.unwrap_or_else(rand::random);
        let creation = Session::creation(id, &request.model, seed, now(), study);
        let mut session = Session::replay(std::slice::from_ref(&creation))?;
        let mut events = vec![creation];
        events.extend(session.agent_turn(&model)?);
        self.log.append(id, &events)?;
        let view = session.view();
        self.sessions.write().unwrap_or_else(|p| p.into_inner()).insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    /// Server-side copy of a session, including both seats' utilities.
    /// Never sent to clients.
    pub fn session(&self, id: Uuid) -> Result<Session, ArenaError> {
        Ok(lock(&self.get(id)?).clone())
    }

    pub fn view(&self, id: Uuid) -> Result<SessionView, ArenaError> {
        Ok(lock(&self.get(id)?).view())
    }

    /// Runs `change` on a copy and commits it only once its events are
    /// durably logged.
    fn mutate(
        &self,
        id: Uuid,
        change: impl FnOnce(&mut Session) -> Result<Vec<Event>, ArenaError>,
    ) -> Result<SessionView, ArenaError> {
        let shared = self.get(id)?;
        let mut guard = lock(&shared);
        let mut draft = guard.clone();
        let events = change(&mut draft)?;
        self.log.append(id, &events)?;
        *guard = draft;
        Ok(guard.view())
    }

    pub fn post_act(&self, id: Uuid, act: ActPayload) -> Result<SessionView, ArenaError> {
        let shared = self.get(id)?;
        let model_id = lock(&shared).model.clone();
        let model = self.registry.get(&model_id)?;
        self.mutate(id, |s| s.human_act(act, &model))
    }

    pub fn submit_selection(&self, id: Uuid, request: SelectionRequest) -> Result<SessionView, ArenaError> {
        let shared = self.get(id)?;
        let model_id = lock(&shared).model.clone();
        let model = self.registry.get(&model_id)?;
        self.mutate(id, |s| s.select(request.allocation, &model).map(|e| vec![e]))
    }

    pub fn record_survey(&self, id: Uuid, answers: SurveyAnswers) -> Result<SessionView, ArenaError> {
        self.mutate(id, |s| s.submit_survey(answers).map(|e| vec![e]))
    }

    /// Model order for a participant, fixed by the token.
    pub fn study_order(&self, token: &str) -> Vec<String> {
        let digest = Sha256::digest(token.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"));
        let mut ids = self.registry.ids();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids
    }

    /// The participant's open session, or a new one with the next model in
    /// their order.
    pub fn study_next(&self, token: &str) -> Result<StudyStep, ArenaError> {
        if token.is_empty() || token.len() > 128 {
            return Err(ArenaError::Invalid("participant token must be 1 to 128 characters".into()));
        }
        let _guard = self.study_lock.lock().unwrap_or_else(|p| p.into_inner());
        let order = self.study_order(token);
        let mine: Vec<(String, Phase, SessionView)> = self
            .all()
            .iter()
            .filter_map(|s| {
                let s = lock(s);
                (s.study.as_deref() == Some(token)).then(|| (s.model.clone(), s.phase(), s.view()))
            })
            .collect();
        let position_of = |model: &str| order.iter().position(|m| m == model).unwrap_or(0) + 1;
        if let Some((model, _, view)) = mine.iter().find(|(_, phase, _)| *phase != Phase::Done) {
            return Ok(StudyStep::Session { position: position_of(model), of: order.len(), session: view.clone() });
        }
        let finished: Vec<&String> = mine.iter().map(|(m, ..)| m).collect();
        match order.iter().find(|m| !finished.contains(m)) {
            Some(model) => {
                let view = self.create_in_study(CreateSession { model: model.clone(), seed: None }, Some(token.to_string()))?;
                Ok(StudyStep::Session { position: position_of(model), of: order.len(), session: view })
            }
            None => Ok(StudyStep::Done { completed: finished.len() }),
        }
    }

    fn snapshot(&self) -> Vec<Session> {
        let mut sessions: Vec<Session> = self.all().iter().map(|s| lock(s).clone()).collect();
        sessions.sort_by(|a, b| (a.created_at, a.id).cmp(&(b.created_at, b.id)));
        sessions
    }

    /// One CSV row per session: outcome and survey answers.
    pub fn export_csv(&self) -> Result<String, ArenaError> {
        let mut out = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "session", "model", "study", "created_at", "phase", "human_started", "turns", "agreed", "pareto_optimal",
            "human_score", "agent_score",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((1..=10).map(|q| format!("q{q}")));
        let csv_err = |e: csv::Error| ArenaError::Invalid(e.to_string());
        out.write_record(&header).map_err(csv_err)?;
        for s in self.snapshot() {
            let view = s.view();
            let outcome = s.outcome();
            let mut row = vec![
                s.id.to_string(),
                s.model.clone(),
                s.study.clone().unwrap_or_default(),
                s.created_at.to_string(),
                serde_json::to_value(s.phase()).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                view.you_started.to_string(),
                s.transcript().len().to_string(),
                outcome.map(|o| o.agreed.to_string()).unwrap_or_default(),
                outcome.map(|o| o.pareto.to_string()).unwrap_or_default(),
                outcome.map(|o| o.score(HUMAN_SEAT).to_string()).unwrap_or_default(),
                outcome.map(|o| o.score(AGENT_SEAT).to_string()).unwrap_or_default(),
            ];
            match s.survey() {
                Some(a) => {
                    row.extend(a.likert.iter().map(|v| v.to_string()));
                    row.push(a.strategy.clone());
                    row.push(a.comments.clone());
                }
                None => row.extend(std::iter::repeat_n(String::new(), 10)),
            }
            out.write_record(&row).map_err(csv_err)?;
        }
        let bytes = out.into_inner().map_err(|e| ArenaError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Per-model aggregates, including mean Likert ratings.
    pub fn summary(&self) -> Vec<ModelSummary> {
        let mut by_model: BTreeMap<String, Vec<Session>> =
            self.registry.ids().into_iter().map(|m| (m, Vec::new())).collect();
        for s in self.snapshot() {
            by_model.entry(s.model.clone()).or_default().push(s);
        }
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        by_model
            .into_iter()
            .map(|(model, sessions)| {
                let outcomes: Vec<_> = sessions.iter().filter_map(|s| s.outcome().copied()).collect();
                let surveys: Vec<_> = sessions.iter().filter_map(|s| s.survey()).collect();
                let column = |f: &dyn Fn(&negolab_core::env::Outcome) -> f64| outcomes.iter().map(f).collect::<Vec<_>>();
                let mean_likert = (!surveys.is_empty()).then(|| {
                    (0..LIKERT_ITEMS)
                        .map(|q| surveys.iter().map(|a| a.likert[q] as f64).sum::<f64>() / surveys.len() as f64)
                        .collect()
                });
                ModelSummary {
                    model,
                    sessions: sessions.len(),
                    scored: outcomes.len(),
                    surveys: surveys.len(),
                    agreement_rate: mean(&column(&|o| if o.agreed { 1.0 } else { 0.0 })),
                    mean_human_score: mean(&column(&|o| o.score(HUMAN_SEAT) as f64)),
                    mean_agent_score: mean(&column(&|o| o.score(AGENT_SEAT) as f64)),
                    mean_likert,
                }
            })
            .collect()
    }
}
