use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use negolab_arena::service::CreateSession;
use negolab_arena::session::{Event, Phase, Session, HUMAN_SEAT};
use negolab_arena::{router, Arena, ModelRegistry};
use negolab_core::env::{resolve_outcome, ActKind, Agent, Allocation, Transcript, DEFAULT_MAX_TURNS};
use negolab_core::model::PolicyModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;
use uuid::Uuid;

fn model(seed: u64) -> PolicyModel {
    PolicyModel::init(&mut ChaCha8Rng::seed_from_u64(seed), 8, 0.5).unwrap()
}

fn registry() -> ModelRegistry {
    ModelRegistry::new().with_model("alpha", model(1)).with_model("beta", model(2))
}

struct Harness {
    dir: TempDir,
    arena: Arc<Arena>,
    app: Router,
}

fn harness() -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let arena = Arc::new(Arena::open(registry(), dir.path()).unwrap());
    let app = router(arena.clone());
    Harness { dir, arena, app }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, String) {
    let builder = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(b) => builder.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let json = serde_json::from_str(&text).unwrap_or(Value::Null);
    (status, json, text)
}

async fn create(app: &Router, model: &str, seed: u64) -> Value {
    let (status, view, _) = call(app, "POST", "/sessions", Some(json!({"model": model, "seed": seed}))).await;
    assert_eq!(status, StatusCode::CREATED, "{view}");
    view
}

fn id_of(view: &Value) -> String {
    view["id"].as_str().unwrap().to_string()
}

/// Ends the negotiation from the human side.
async fn finish_negotiation(app: &Router, id: &str) -> Value {
    let (_, mut view, _) = call(app, "GET", &format!("/sessions/{id}"), None).await;
    while view["phase"] == "negotiating" {
        let (status, next, _) = call(app, "POST", &format!("/sessions/{id}/acts"), Some(json!({"kind": "end"}))).await;
        assert_eq!(status, StatusCode::OK, "{next}");
        view = next;
    }
    assert_eq!(view["phase"], "selecting");
    view
}

const SURVEY: &str = r#"{"likert": [5, 4, 3, 2, 1, 2, 3, 4], "strategy": "firm", "comments": "none"}"#;

/// Every key that appears anywhere in a JSON document.
fn keys(value: &Value, out: &mut BTreeSet<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                out.insert(k.clone());
                keys(v, out);
            }
        }
        Value::Array(items) => items.iter().for_each(|v| keys(v, out)),
        _ => {}
    }
}

const VISIBLE_KEYS: [&str; 22] = [
    "id",
    "model",
    "phase",
    "counts",
    "your_utilities",
    "you_started",
    "transcript",
    "party",
    "kind",
    "allocation",
    "your_share",
    "your_turn",
    "turns_left",
    "outcome",
    "agreed",
    "pareto_optimal",
    "your_selection",
    "agent_selection",
    "your_score",
    "agent_score",
    "questions",
    "study",
];

fn assert_no_opponent_utilities(payload: &Value, arena: &Arena) {
    let mut found = BTreeSet::new();
    keys(payload, &mut found);
    let allowed: BTreeSet<String> =
        VISIBLE_KEYS.iter().map(|s| s.to_string()).chain(["status", "position", "of", "session"].map(String::from)).collect();
    let extra: Vec<_> = found.difference(&allowed).collect();
    assert!(extra.is_empty(), "unexpected fields {extra:?} in {payload}");
    let view = if payload.get("session").is_some() { &payload["session"] } else { payload };
    if let Some(id) = view.get("id").and_then(|v| v.as_str()) {
        let session = arena.session(Uuid::parse_str(id).unwrap()).unwrap();
        let mine = session.transcript().pair().utilities(HUMAN_SEAT).as_array();
        assert_eq!(view["your_utilities"], json!(mine));
    }
}

#[tokio::test]
async fn create_hides_agent_utilities_and_is_reproducible() {
    let h = harness();
    let first = create(&h.app, "alpha", 42).await;
    let second = create(&h.app, "alpha", 42).await;
    assert_no_opponent_utilities(&first, &h.arena);
    assert_eq!(first["counts"], second["counts"]);
    assert_eq!(first["your_utilities"], second["your_utilities"]);
    assert_eq!(first["transcript"], second["transcript"]);
    assert_eq!(first["phase"], "negotiating");
    assert_eq!(first["your_turn"], true);
    assert_ne!(first["id"], second["id"]);
}

#[tokio::test]
async fn unknown_model_and_session() {
    let h = harness();
    let (status, body, _) = call(&h.app, "POST", "/sessions", Some(json!({"model": "nobody"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_model");
    let (status, _, _) = call(&h.app, "GET", &format!("/sessions/{}", Uuid::new_v4()), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = call(&h.app, "GET", "/sessions/not-a-uuid", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, _) = call(&h.app, "POST", "/sessions", Some(json!({"modle": "alpha"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn starter_is_roughly_uniform() {
    let h = harness();
    let n = 300;
    let mut human_first = 0;
    for seed in 0..n {
        let view = create(&h.app, "alpha", seed).await;
        if view["you_started"] == true {
            human_first += 1;
            assert!(view["transcript"].as_array().unwrap().is_empty());
        } else {
            assert_eq!(view["transcript"].as_array().unwrap().len(), 1);
        }
    }
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((human_first as f64 - n as f64 / 2.0).abs() < 4.0 * sigma, "{human_first} of {n}");
}

#[tokio::test]
async fn illegal_acts_are_rejected_with_the_rule() {
    let h = harness();
    // Find a session the human opens so Agree is illegal.
    let mut seed = 0;
    let view = loop {
        let v = create(&h.app, "alpha", seed).await;
        if v["you_started"] == true {
            break v;
        }
        seed += 1;
    };
    let id = id_of(&view);
    let url = format!("/sessions/{id}/acts");
    let (status, body, _) = call(&h.app, "POST", &url, Some(json!({"kind": "agree"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "agree_without_proposal");

    let counts: Vec<u8> = serde_json::from_value(view["counts"].clone()).unwrap();
    let over = [counts[0] + 1, 0, 0];
    let (status, body, _) = call(&h.app, "POST", &url, Some(json!({"kind": "propose", "allocation": over}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "allocation_exceeds_counts");

    let (status, _, _) = call(&h.app, "POST", &url, Some(json!({"kind": "propose"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, _) = call(&h.app, "POST", &url, Some(json!({"kind": "end", "allocation": [0, 0, 0]}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // Nothing was recorded by the rejected requests.
    let (_, after, _) = call(&h.app, "GET", &format!("/sessions/{id}"), None).await;
    assert!(after["transcript"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn full_session_scores_match_recomputation() {
    let h = harness();
    for seed in 0..20 {
        let view = create(&h.app, "beta", seed).await;
        let id = id_of(&view);
        let url = format!("/sessions/{id}/acts");
        let counts: [u8; 3] = serde_json::from_value(view["counts"].clone()).unwrap();
        let claim = [counts[0], 0, counts[2] / 2];
        if view["phase"] == "negotiating" {
            // Selection before the end is out of phase.
            let (status, _, _) =
                call(&h.app, "POST", &format!("/sessions/{id}/selection"), Some(json!({"allocation": claim}))).await;
            assert_eq!(status, StatusCode::CONFLICT);
            let (status, v, _) =
                call(&h.app, "POST", &url, Some(json!({"kind": "propose", "allocation": claim}))).await;
            assert_eq!(status, StatusCode::OK, "{v}");
            assert_no_opponent_utilities(&v, &h.arena);
            let turns = v["transcript"].as_array().unwrap();
            let mine = turns.iter().rev().find(|t| t["party"] == "human").unwrap();
            assert_eq!(mine["your_share"], json!(claim));
        }
        let selecting = finish_negotiation(&h.app, &id).await;
        assert!(selecting.get("outcome").is_none());

        let (status, _, _) =
            call(&h.app, "POST", &format!("/sessions/{id}/selection"), Some(json!({"allocation": [9, 9, 9]}))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        let (status, scored, _) =
            call(&h.app, "POST", &format!("/sessions/{id}/selection"), Some(json!({"allocation": claim}))).await;
        assert_eq!(status, StatusCode::OK, "{scored}");
        assert_eq!(scored["phase"], "surveying");
        assert_eq!(scored["questions"].as_array().unwrap().len(), 10);
        assert_no_opponent_utilities(&scored, &h.arena);

        let session = h.arena.session(Uuid::parse_str(&id).unwrap()).unwrap();
        let agent_pick: [u8; 3] = serde_json::from_value(scored["outcome"]["agent_selection"].clone()).unwrap();
        let oracle = resolve_outcome(
            session.transcript(),
            Allocation::new(agent_pick).unwrap(),
            Allocation::new(claim).unwrap(),
        )
        .unwrap();
        assert_eq!(scored["outcome"]["your_score"], json!(oracle.score(Agent::B)));
        assert_eq!(scored["outcome"]["agent_score"], json!(oracle.score(Agent::A)));
        assert_eq!(scored["outcome"]["agreed"], json!(oracle.agreed));
        if !oracle.agreed {
            assert_eq!(scored["outcome"]["your_score"], 0);
            assert_eq!(scored["outcome"]["agent_score"], 0);
        }
    }
}

#[tokio::test]
async fn conflicting_selections_score_zero() {
    let h = harness();
    let view = create(&h.app, "alpha", 7).await;
    let id = id_of(&view);
    finish_negotiation(&h.app, &id).await;
    let counts: [u8; 3] = serde_json::from_value(view["counts"].clone()).unwrap();
    // Claiming everything can only partition with an empty agent pick.
    let (_, scored, _) =
        call(&h.app, "POST", &format!("/sessions/{id}/selection"), Some(json!({"allocation": counts}))).await;
    let agent: [u8; 3] = serde_json::from_value(scored["outcome"]["agent_selection"].clone()).unwrap();
    if agent != [0, 0, 0] {
        assert_eq!(scored["outcome"]["agreed"], false);
        assert_eq!(scored["outcome"]["your_score"], 0);
        assert_eq!(scored["outcome"]["agent_score"], 0);
    }
}

#[tokio::test]
async fn survey_validation_and_resubmission() {
    let h = harness();
    let view = create(&h.app, "alpha", 3).await;
    let id = id_of(&view);
    let survey_url = format!("/sessions/{id}/survey");
    let survey: Value = serde_json::from_str(SURVEY).unwrap();
    let (status, _, _) = call(&h.app, "POST", &survey_url, Some(survey.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    finish_negotiation(&h.app, &id).await;
    call(&h.app, "POST", &format!("/sessions/{id}/selection"), Some(json!({"allocation": [0, 0, 0]}))).await;

    let (status, body, _) =
        call(&h.app, "POST", &survey_url, Some(json!({"likert": [5, 4, 3, 2, 1, 2, 3, 6]}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let (status, _, _) = call(&h.app, "POST", &survey_url, Some(json!({"likert": [5, 4, 3]}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, done, _) = call(&h.app, "POST", &survey_url, Some(survey.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(done["phase"], "done");
    let (status, _, _) = call(&h.app, "POST", &survey_url, Some(survey)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _, _) = call(&h.app, "POST", &format!("/sessions/{id}/acts"), Some(json!({"kind": "end"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let stored = h.arena.session(Uuid::parse_str(&id).unwrap()).unwrap();
    let answers = stored.survey().unwrap();
    assert_eq!(answers.likert.len(), 8);
    assert_eq!(answers.strategy, "firm");
    assert_eq!(answers.comments, "none");
}

#[tokio::test]
async fn export_and_summary() {
    let h = harness();
    let survey: Value = serde_json::from_str(SURVEY).unwrap();
    for (seed, likert_first) in [(1u64, 5u8), (2, 3)] {
        let view = create(&h.app, "alpha", seed).await;
        let id = id_of(&view);
        finish_negotiation(&h.app, &id).await;
        call(&h.app, "POST", &format!("/sessions/{id}/selection"), Some(json!({"allocation": [0, 0, 0]}))).await;
        let mut answers = survey.clone();
        answers["likert"][0] = json!(likert_first);
        let (status, _, _) = call(&h.app, "POST", &format!("/sessions/{id}/survey"), Some(answers)).await;
        assert_eq!(status, StatusCode::OK);
    }
    create(&h.app, "beta", 9).await;

    let (status, _, csv_text) = call(&h.app, "GET", "/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.get(0), Some("session"));
    assert!(header.iter().any(|h| h == "q10"));
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    let q9 = header.iter().position(|h| h == "q9").unwrap();
    assert_eq!(rows.iter().filter(|r| &r[q9] == "firm").count(), 2);
    assert!(!csv_text.contains("utilities"));

    let (_, summary, _) = call(&h.app, "GET", "/export/summary", None).await;
    let alpha = summary.as_array().unwrap().iter().find(|m| m["model"] == "alpha").unwrap();
    assert_eq!(alpha["surveys"], 2);
    assert_eq!(alpha["mean_likert"][0], 4.0);
    assert_eq!(alpha["mean_likert"][7], 4.0);
    let beta = summary.as_array().unwrap().iter().find(|m| m["model"] == "beta").unwrap();
    assert_eq!(beta["sessions"], 1);
    assert!(beta["mean_likert"].is_null());
}

#[tokio::test]
async fn sessions_survive_restart() {
    let h = harness();
    let view = create(&h.app, "alpha", 11).await;
    let id = id_of(&view);
    let counts: [u8; 3] = serde_json::from_value(view["counts"].clone()).unwrap();
    call(&h.app, "POST", &format!("/sessions/{id}/acts"), Some(json!({"kind": "propose", "allocation": counts}))).await;
    let (_, before, _) = call(&h.app, "GET", &format!("/sessions/{id}"), None).await;

    let reopened = Arc::new(Arena::open(registry(), h.dir.path()).unwrap());
    let app = router(reopened.clone());
    let (status, after, _) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before, after);

    // The agent's next reply is the same whichever process serves it.
    let act = json!({"kind": "disagree"});
    let (_, a, _) = call(&h.app, "POST", &format!("/sessions/{id}/acts"), Some(act.clone())).await;
    let (_, b, _) = call(&app, "POST", &format!("/sessions/{id}/acts"), Some(act)).await;
    assert_eq!(a, b);
}

#[test]
fn replay_rejects_out_of_turn_events() {
    let creation = Session::creation(Uuid::new_v4(), "alpha", 5, 0, None);
    let mut session = Session::replay(std::slice::from_ref(&creation)).unwrap();
    let starter = session.transcript().pair().starter;
    let wrong = if starter == HUMAN_SEAT { "agent" } else { "human" };
    let event: Event =
        serde_json::from_value(json!({"event": "act", "party": wrong, "act": {"kind": "disagree"}})).unwrap();
    let err = session.apply(&event).unwrap_err();
    assert_eq!(err.status(), StatusCode::CONFLICT);
    assert_eq!(session.phase(), Phase::Negotiating);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_keep_the_transcript_legal() {
    let h = harness();
    let view = create(&h.app, "alpha", 21).await;
    let id = id_of(&view);
    let counts: [u8; 3] = serde_json::from_value(view["counts"].clone()).unwrap();
    let mut tasks = Vec::new();
    for i in 0..100u8 {
        let app = h.app.clone();
        let url = format!("/sessions/{id}/acts");
        let act = match i % 3 {
            0 => json!({"kind": "propose", "allocation": [i % (counts[0] + 1), 0, counts[2]]}),
            1 => json!({"kind": "insist", "allocation": [0, counts[1], 0]}),
            _ => json!({"kind": "disagree"}),
        };
        tasks.push(tokio::spawn(async move { call(&app, "POST", &url, Some(act)).await.0 }));
    }
    let mut ok = 0;
    for task in tasks {
        let status = task.await.unwrap();
        assert!(status == StatusCode::OK || status == StatusCode::CONFLICT, "{status}");
        ok += usize::from(status == StatusCode::OK);
    }
    let session = h.arena.session(Uuid::parse_str(&id).unwrap()).unwrap();
    let transcript = session.transcript();
    let replayed = Transcript::replay(*transcript.pair(), DEFAULT_MAX_TURNS, transcript.turns().iter().copied()).unwrap();
    assert_eq!(&replayed, transcript);
    let human_turns = transcript.turns().iter().filter(|t| t.speaker == HUMAN_SEAT).count();
    assert_eq!(ok, human_turns);
    assert!(transcript.is_terminated());
    assert_eq!(session.phase(), Phase::Selecting);
}

#[tokio::test]
async fn agent_replies_follow_its_distribution() {
    let h = harness();
    let agent = model(1);
    let n = 600;
    let mut observed = [0usize; 5];
    let mut expected = [0f64; 5];
    let mut variance = [0f64; 5];
    let mut opened = 0;
    for seed in 0..n {
        let view = h.arena.create(CreateSession { model: "alpha".into(), seed: Some(seed) }).unwrap();
        if view.you_started {
            continue;
        }
        opened += 1;
        let session = h.arena.session(view.id).unwrap();
        let pair = session.transcript().pair();
        let dist = agent.act_distribution(pair.context(Agent::A), Agent::A, &[], DEFAULT_MAX_TURNS).unwrap();
        let first = session.transcript().turns()[0].act;
        observed[first.kind().index()] += 1;
        let legal = Transcript::new(*pair, DEFAULT_MAX_TURNS).legal_acts().unwrap();
        for kind in ActKind::ALL {
            let p: f64 = legal.iter().filter(|a| a.kind() == kind).map(|a| dist.prob(a)).sum();
            expected[kind.index()] += p;
            variance[kind.index()] += p * (1.0 - p);
        }
    }
    assert!(opened > 200);
    for kind in ActKind::ALL {
        let i = kind.index();
        let gap = (observed[i] as f64 - expected[i]).abs();
        assert!(gap <= 4.0 * variance[i].sqrt() + 1e-9, "{kind:?}: observed {} expected {:.1}", observed[i], expected[i]);
    }
}

#[tokio::test]
async fn study_sequences_every_model_once() {
    let h = harness();
    let order = h.arena.study_order("participant-7");
    assert_eq!(order, h.arena.study_order("participant-7"));
    assert_eq!(order.iter().collect::<BTreeSet<_>>().len(), 2);

    let survey: Value = serde_json::from_str(SURVEY).unwrap();
    for position in 1..=2 {
        let (status, step, _) = call(&h.app, "GET", "/study/participant-7/next", None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(step["status"], "session");
        assert_eq!(step["position"], position);
        assert_eq!(step["of"], 2);
        assert_eq!(step["session"]["model"], json!(order[position - 1]));
        assert_eq!(step["session"]["study"], "participant-7");
        assert_no_opponent_utilities(&step, &h.arena);
        let id = id_of(&step["session"]);
        // Asking again before finishing returns the same session.
        let (_, again, _) = call(&h.app, "GET", "/study/participant-7/next", None).await;
        assert_eq!(again["session"]["id"], json!(id));

        finish_negotiation(&h.app, &id).await;
        call(&h.app, "POST", &format!("/sessions/{id}/selection"), Some(json!({"allocation": [0, 0, 0]}))).await;
        call(&h.app, "POST", &format!("/sessions/{id}/survey"), Some(survey.clone())).await;
    }
    let (_, done, _) = call(&h.app, "GET", "/study/participant-7/next", None).await;
    assert_eq!(done["status"], "done");
    assert_eq!(done["completed"], 2);
}
