use std::collections::BTreeSet;
use std::sync::Arc;

use bapgan_core::data::{generate_phantom, PhantomSpec};
use bapgan_vtt::{
    plan_trials, router, AppState, HeldOutImage, ModelTag, PlannedTrial, SessionKind, SessionStore, Synthesizer,
    TrialSource, Truth, VttError, VttSessionSpec,
};
use serde_json::{json, Value};

const S: usize = 16;

fn pool(n: usize) -> Vec<HeldOutImage> {
    (0..n)
        .map(|i| {
            let bin = i % 5;
            let age = bin as f64 * 4.0 + 1.0;
            HeldOutImage {
                pixels: generate_phantom(&PhantomSpec::new(age, i as u64, S)).unwrap().pixels,
                bin,
            }
        })
        .collect()
}

struct Negate;

impl Synthesizer for Negate {
    fn age_bins(&self) -> usize {
        5
    }
    fn generate(&self, images: &[Vec<f32>], _targets: &[usize]) -> Result<Vec<Vec<f32>>, VttError> {
        Ok(images.iter().map(|im| im.iter().map(|v| -v).collect()).collect())
    }
}

struct FakeSource {
    pool: Vec<HeldOutImage>,
}

impl TrialSource for FakeSource {
    fn plan(&self, spec: &VttSessionSpec) -> Result<Vec<PlannedTrial>, VttError> {
        plan_trials(spec, &self.pool, &Negate)
    }
}

struct Harness {
    app: Arc<AppState>,
    base: String,
    client: reqwest::Client,
    server: tokio::task::JoinHandle<()>,
}

async fn start(root: &std::path::Path, pool_size: usize) -> Harness {
    let store = SessionStore::open(root).unwrap();
    let app = AppState::new(store, FakeSource { pool: pool(pool_size) });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let r = router(app.clone());
    let server = tokio::spawn(async move {
        axum::serve(listener, r).await.unwrap();
    });
    Harness {
        app,
        base,
        client: reqwest::Client::new(),
        server,
    }
}

impl Harness {
    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn create(&self, spec: Value) -> (String, u64) {
        let (status, body) = self.post("/sessions", spec).await;
        assert_eq!(status, 201, "{body}");
        (body["session_id"].as_str().unwrap().to_string(), body["n_trials"].as_u64().unwrap())
    }

    fn truth_of(&self, session: &str, trial: &str) -> Truth {
        self.app
            .store
            .trials(session)
            .unwrap()
            .into_iter()
            .find(|t| t.trial_id == trial)
            .unwrap()
            .truth
    }
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn percents(report: &Value) -> Vec<(String, Option<u64>)> {
    report["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["name"].as_str().unwrap().to_string(), c["percent"].as_u64()))
        .collect()
}

fn realism_spec(counts: (usize, usize), seed: u64) -> Value {
    json!({"kind": "realism", "model_tag": "bapgan", "dataset_tag": "phantom", "counts": [counts.0, counts.1], "shuffle_seed": seed})
}

/// Answer every trial through the API; `policy` sees the hidden truth and
/// how many trials of that class came before.
async fn run_session(h: &Harness, id: &str, kind: SessionKind, policy: impl Fn(Truth, usize) -> Truth) -> Vec<Value> {
    let mut seen = [0usize; 2];
    let mut payloads = Vec::new();
    loop {
        let (status, next) = h.get(&format!("/sessions/{id}/next")).await;
        assert_eq!(status, 200);
        payloads.push(next.clone());
        if next.get("done").is_some() {
            break;
        }
        let trial = next["trial_id"].as_str().unwrap().to_string();
        let truth = h.truth_of(id, &trial);
        let slot = (truth == Truth::Synthetic) as usize;
        let answer = policy(truth, seen[slot]);
        seen[slot] += 1;
        let (status, ack) = h
            .post(&format!("/sessions/{id}/responses"), json!({"trial_id": trial, "answer": kind.answer_word(answer)}))
            .await;
        assert_eq!(status, 200, "{ack}");
        payloads.push(ack);
    }
    payloads
}

#[tokio::test]
async fn default_counts_give_standard_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), 150).await;
    let (_, n) = h
        .create(json!({"kind": "realism", "model_tag": "bapgan", "dataset_tag": "phantom", "shuffle_seed": 1}))
        .await;
    assert_eq!(n, 100);
    let (_, n) = h
        .create(json!({"kind": "progression", "model_tag": "caae", "dataset_tag": "phantom", "shuffle_seed": 1}))
        .await;
    assert_eq!(n, 50);
    h.server.abort();
}

#[test]
fn same_seed_same_order() {
    let p = pool(60);
    let spec = VttSessionSpec {
        counts: Some((20, 20)),
        ..VttSessionSpec::new(SessionKind::Realism, ModelTag::Bapgan, "phantom", 7)
    };
    let a = plan_trials(&spec, &p, &Negate).unwrap();
    let b = plan_trials(&spec, &p, &Negate).unwrap();
    assert_eq!(a, b);
    let c = plan_trials(&VttSessionSpec { shuffle_seed: 8, ..spec.clone() }, &p, &Negate).unwrap();
    assert_ne!(a, c);
    assert_eq!(a.iter().filter(|t| t.truth == Truth::Real).count(), 20);
}

#[test]
fn synthetic_sources_are_disjoint_from_real_trials() {
    let p = pool(40);
    let spec = VttSessionSpec {
        counts: Some((20, 20)),
        ..VttSessionSpec::new(SessionKind::Realism, ModelTag::Bapgan, "phantom", 3)
    };
    let trials = plan_trials(&spec, &p, &Negate).unwrap();
    let reals: BTreeSet<Vec<u32>> = trials
        .iter()
        .filter(|t| t.truth == Truth::Real)
        .map(|t| t.pixels.iter().map(|v| v.to_bits()).collect())
        .collect();
    for t in trials.iter().filter(|t| t.truth == Truth::Synthetic) {
        let source: Vec<u32> = t.pixels.iter().map(|v| (-v).to_bits()).collect();
        assert!(!reals.contains(&source));
    }
}

#[test]
fn progression_sources_have_a_target_bin() {
    let p = pool(100);
    struct Check;
    impl Synthesizer for Check {
        fn age_bins(&self) -> usize {
            5
        }
        fn generate(&self, images: &[Vec<f32>], targets: &[usize]) -> Result<Vec<Vec<f32>>, VttError> {
            assert!(targets.iter().all(|&t| t >= 2));
            Ok(images.to_vec())
        }
    }
    let spec = VttSessionSpec::new(SessionKind::Progression, ModelTag::Bapgan, "phantom", 1);
    assert_eq!(plan_trials(&spec, &p, &Check).unwrap().len(), 50);
}

#[tokio::test]
async fn shortfall_is_reported_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), 40).await;
    let (status, body) = h
        .post("/sessions", json!({"kind": "progression", "model_tag": "bapgan", "dataset_tag": "phantom", "shuffle_seed": 1}))
        .await;
    assert_eq!(status, 422);
    let msg = body["error"].as_str().unwrap();
    assert!(msg.contains("25 synthetic sources (24 eligible of 40"), "{msg}");
    assert!(msg.contains("25 disjoint real images"), "{msg}");
    h.server.abort();
}

#[tokio::test]
async fn no_client_payload_carries_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), 60).await;
    let r = h.client.post(format!("{}/sessions", h.base)).json(&realism_spec((20, 20), 2)).send().await.unwrap();
    let created: Value = r.json().await.unwrap();
    assert_eq!(keys(&created), ["n_trials", "session_id"].map(String::from).into());
    let id = created["session_id"].as_str().unwrap().to_string();
    let payloads = run_session(&h, &id, SessionKind::Realism, |t, _| t).await;
    let (done, rest) = payloads.split_last().unwrap();
    assert_eq!(keys(done), ["done", "report_url"].map(String::from).into());
    let mut tokens = BTreeSet::new();
    for p in rest {
        let k = keys(p);
        if k.contains("image_url") {
            assert_eq!(k, ["image_url", "trial_id"].map(String::from).into());
            let url = p["image_url"].as_str().unwrap();
            let token = url.strip_prefix("/images/").unwrap();
            assert!(uuid::Uuid::parse_str(token).is_ok(), "{url}");
            tokens.insert(token.to_string());
            let img = h.client.get(format!("{}{url}", h.base)).send().await.unwrap();
            assert_eq!(img.headers()["content-type"], "image/png");
            let bytes = img.bytes().await.unwrap();
            assert_eq!(&bytes[1..4], b"PNG");
        } else {
            assert_eq!(k, ["status", "trial_id"].map(String::from).into());
        }
        let text = p.to_string();
        for word in ["truth", "synthetic", "real\"", "recon", "progress"] {
            assert!(!text.contains(word), "{word} in {text}");
        }
    }
    assert_eq!(tokens.len(), 40);
    h.server.abort();
}

#[tokio::test]
async fn scripted_rater_reproduces_hand_computed_realism_report() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), 40).await;
    let (id, n) = h.create(realism_spec((10, 10), 5)).await;
    assert_eq!(n, 20);
    // 8 of 10 reals judged real; 6 of 10 synthetic judged synthetic
    run_session(&h, &id, SessionKind::Realism, |truth, i| match truth {
        Truth::Real if i < 8 => Truth::Real,
        Truth::Real => Truth::Synthetic,
        Truth::Synthetic if i < 6 => Truth::Synthetic,
        Truth::Synthetic => Truth::Real,
    })
    .await;
    let (status, report) = h.get(&format!("/sessions/{id}/report")).await;
    assert_eq!(status, 200, "{report}");
    assert_eq!(
        percents(&report),
        vec![
            ("Accuracy".into(), Some(70)),
            ("R as R".into(), Some(80)),
            ("R as S".into(), Some(20)),
            ("S as R".into(), Some(40)),
            ("S as S".into(), Some(60)),
        ]
    );
    assert_eq!(report["partial"], false);
    assert_eq!(report["counts"]["real_as_real"], 8);
    h.server.abort();
}

#[tokio::test]
async fn all_correct_gives_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), 40).await;
    let (id, _) = h.create(realism_spec((7, 5), 1)).await;
    run_session(&h, &id, SessionKind::Realism, |t, _| t).await;
    let (_, report) = h.get(&format!("/sessions/{id}/report")).await;
    assert_eq!(percents(&report)[0], ("Accuracy".into(), Some(100)));
    h.server.abort();
}

#[tokio::test]
async fn age_shift_sessions_combine_into_three_columns() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), 150).await;
    let spec = |kind: &str| json!({"kind": kind, "model_tag": "bapgan", "dataset_tag": "phantom", "shuffle_seed": 4});
    let (prog, n) = h.create(spec("progression")).await;
    assert_eq!(n, 50);
    // all 25 reals right, 15 of 25 progressed right: (25 + 15) / 50
    run_session(&h, &prog, SessionKind::Progression, |t, i| match t {
        Truth::Real => Truth::Real,
        Truth::Synthetic if i < 15 => Truth::Synthetic,
        Truth::Synthetic => Truth::Real,
    })
    .await;
    let (_, report) = h.get(&format!("/sessions/{prog}/report")).await;
    assert_eq!(percents(&report), vec![("Accuracy".into(), Some(80)), ("Progression".into(), Some(80))]);

    let (reg, _) = h.create(spec("regression")).await;
    // 22 + 22 of 50 correct
    run_session(&h, &reg, SessionKind::Regression, |t, i| if i < 22 { t } else if t == Truth::Real { Truth::Synthetic } else { Truth::Real }).await;
    let (status, table) = h.get(&format!("/sessions/{reg}/report?pair={prog}")).await;
    assert_eq!(status, 200, "{table}");
    assert_eq!(
        percents(&table),
        vec![("Accuracy".into(), Some(84)), ("Progression".into(), Some(80)), ("Regression".into(), Some(88))]
    );
    assert_eq!(table["progression_session"], prog.as_str());
    h.server.abort();
}

#[tokio::test]
async fn resubmission_rules() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), 40).await;
    let (id, _) = h.create(realism_spec((5, 5), 1)).await;
    let (_, next) = h.get(&format!("/sessions/{id}/next")).await;
    let trial = next["trial_id"].as_str().unwrap();
    let url = format!("/sessions/{id}/responses");
    let (s1, a1) = h.post(&url, json!({"trial_id": trial, "answer": "real"})).await;
    assert_eq!((s1, a1["status"].as_str()), (200, Some("recorded")));
    let (s2, a2) = h.post(&url, json!({"trial_id": trial, "answer": "real"})).await;
    assert_eq!((s2, a2["status"].as_str()), (200, Some("duplicate")));
    let (s3, _) = h.post(&url, json!({"trial_id": trial, "answer": "synthetic"})).await;
    assert_eq!(s3, 409);
    let (s4, _) = h.post(&url, json!({"trial_id": "999", "answer": "real"})).await;
    assert_eq!(s4, 404);
    let (s5, _) = h.post(&url, json!({"trial_id": trial, "answer": "maybe"})).await;
    assert_eq!(s5, 400);
    let (s6, _) = h.post("/sessions/nope/responses", json!({"trial_id": "1", "answer": "real"})).await;
    assert_eq!(s6, 404);
    let (s7, _) = h.get("/sessions/nope/next").await;
    assert_eq!(s7, 404);
    let (s8, _) = h.get("/images/not-a-token").await;
    assert_eq!(s8, 404);
    let (s9, _) = h.post("/sessions", json!({"kind": "realism"})).await;
    assert_eq!(s9, 400);
    assert_eq!(h.app.store.summary(&id).unwrap().answered, 1);
    h.server.abort();
}

#[tokio::test]
async fn partial_reports_need_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), 40).await;
    let (id, _) = h.create(realism_spec((5, 5), 1)).await;
    let (status, _) = h.get(&format!("/sessions/{id}/report?partial=true")).await;
    assert_eq!(status, 409, "empty session has nothing to score");
    let (_, next) = h.get(&format!("/sessions/{id}/next")).await;
    h.post(&format!("/sessions/{id}/responses"), json!({"trial_id": next["trial_id"], "answer": "real"}))
        .await;
    let (status, _) = h.get(&format!("/sessions/{id}/report")).await;
    assert_eq!(status, 409);
    let (status, report) = h.get(&format!("/sessions/{id}/report?partial=true")).await;
    assert_eq!(status, 200);
    assert_eq!((report["partial"].as_bool(), report["answered"].as_u64()), (Some(true), Some(1)));
    h.server.abort();
}

#[tokio::test]
async fn acknowledged_responses_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), 40).await;
    let (id, _) = h.create(realism_spec((6, 6), 9)).await;
    let mut answered = Vec::new();
    for _ in 0..5 {
        let (_, next) = h.get(&format!("/sessions/{id}/next")).await;
        let trial = next["trial_id"].as_str().unwrap().to_string();
        let (status, _) = h
            .post(&format!("/sessions/{id}/responses"), json!({"trial_id": trial, "answer": "synthetic"}))
            .await;
        assert_eq!(status, 200);
        answered.push(trial);
    }
    let (_, expected_next) = h.get(&format!("/sessions/{id}/next")).await;
    h.server.abort();
    drop(h);

    // a torn, unacknowledged write at the end of the log is dropped on replay
    let log = dir.path().join("sessions").join(format!("{id}.jsonl"));
    let mut f = std::fs::OpenOptions::new().append(true).open(&log).unwrap();
    std::io::Write::write_all(&mut f, b"{\"type\":\"response\",\"trial_id\":\"3").unwrap();
    drop(f);

    let h = start(dir.path(), 40).await;
    let s = h.app.store.summary(&id).unwrap();
    assert_eq!((s.answered, s.n_trials), (5, 12));
    let (_, next) = h.get(&format!("/sessions/{id}/next")).await;
    assert_eq!(next, expected_next);
    let (status, ack) = h
        .post(&format!("/sessions/{id}/responses"), json!({"trial_id": answered[0], "answer": "synthetic"}))
        .await;
    assert_eq!((status, ack["status"].as_str()), (200, Some("duplicate")));
    let img = h.client.get(format!("{}{}", h.base, next["image_url"].as_str().unwrap())).send().await.unwrap();
    assert_eq!(img.status().as_u16(), 200);
    h.server.abort();
}

#[test]
fn corrupt_log_line_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("sessions")).unwrap();
    std::fs::write(dir.path().join("sessions").join("x.jsonl"), "{\"type\":\"bogus\"}\n").unwrap();
    assert!(matches!(SessionStore::open(dir.path()), Err(VttError::CorruptLog { line: 1, .. })));
}
