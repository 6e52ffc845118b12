use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use mdtb_core::generation::{ModelParams, ModelProfile};
use mdtb_core::{Engine, RunConfig};
use reqwest::blocking::{multipart, Client};
use reqwest::StatusCode;
use serde_json::{json, Value};

const TOKEN: &str = "s3cret-token";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/cases")
}

struct Service {
    base: String,
    client: Client,
    _tmp: tempfile::TempDir,
}

impl Service {
    fn start() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::with_root(tmp.path().join("lake"));
        cfg.fixtures_dir = Some(fixtures());
        let slow = ModelParams {
            mock_delay_ms: 1500,
            ..Default::default()
        };
        cfg.backends.push(ModelProfile::mock("mock-slow").with_params(slow));
        let engine = Arc::new(Engine::open(cfg).unwrap());
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let app = mdtb::server::router(engine, TOKEN);
        std::thread::spawn(move || {
            tokio::runtime::Runtime::new().unwrap().block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                axum::serve(listener, app).await.unwrap();
            })
        });
        Self {
            base,
            client: Client::builder().timeout(Duration::from_secs(60)).build().unwrap(),
            _tmp: tmp,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(self.url(path)).bearer_auth(TOKEN).send().unwrap();
        (r.status(), r.json().unwrap())
    }

    fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(self.url(path)).bearer_auth(TOKEN).json(&body).send().unwrap();
        (r.status(), r.json().unwrap())
    }

    fn patch(&self, case: &str, updates: Value) -> (StatusCode, Value) {
        let r = self
            .client
            .patch(self.url(&format!("/cases/{case}/form")))
            .bearer_auth(TOKEN)
            .json(&json!({"user_id": "dr-test", "updates": updates}))
            .send()
            .unwrap();
        (r.status(), r.json().unwrap())
    }

    fn ingest_fixture(&self, case: &str) {
        let bytes = std::fs::read(fixtures().join(case).join("narrative.txt")).unwrap();
        let form = multipart::Form::new().part("file", multipart::Part::bytes(bytes).file_name("narrative.txt"));
        let r = self
            .client
            .post(self.url(&format!("/cases/{case}/ingest")))
            .bearer_auth(TOKEN)
            .multipart(form)
            .send()
            .unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        let manifest: Value = r.json().unwrap();
        assert_eq!(manifest["ingested"].as_array().unwrap().len(), 1, "{manifest}");
    }
}

fn active_blocks(form_view: &Value) -> Vec<u64> {
    form_view["form"]["active_blocks"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).collect()
}

#[test]
fn requests_without_valid_token_are_rejected() {
    let svc = Service::start();
    let r = svc.client.get(svc.url("/health")).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = svc.client.get(svc.url("/schema")).bearer_auth("wrong").send().unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = svc.client.get(svc.url("/health")).header("authorization", TOKEN).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let (status, health) = svc.get("/health");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["schema_version"], "lung_mdtb@1.0.0");
}

#[test]
fn schema_is_served() {
    let svc = Service::start();
    let (status, schema) = svc.get("/schema");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(schema["blocks"].as_array().unwrap().len(), 7);
}

#[test]
fn autofill_review_round_trip() {
    let svc = Service::start();
    svc.ingest_fixture("case-01");
    let (status, health) = svc.get("/health");
    assert_eq!(status, StatusCode::OK);
    assert!(health["index_size"].as_u64().unwrap() > 0);

    let (status, report) = svc.post("/cases/case-01/autofill?backend=mock", json!({}));
    assert_eq!(status, StatusCode::OK, "{report}");
    assert_eq!(report["version"], 1);
    assert_eq!(report["form"]["values"]["ecog"]["value"], 1);

    // stable serialization: keys in sorted order
    let raw = svc
        .client
        .get(svc.url("/cases/case-01/form"))
        .bearer_auth(TOKEN)
        .send()
        .unwrap()
        .text()
        .unwrap();
    let top: Vec<usize> = ["\"case_id\"", "\"form\"", "\"version\""].iter().map(|k| raw.find(k).unwrap()).collect();
    assert!(top.windows(2).all(|w| w[0] < w[1]), "{raw}");
    let fields: Vec<usize> = ["\"chemotherapy\"", "\"ecog\"", "\"smoking_status\""].iter().map(|k| raw.find(k).unwrap()).collect();
    assert!(fields.windows(2).all(|w| w[0] < w[1]));
    let again = svc.client.get(svc.url("/cases/case-01/form")).bearer_auth(TOKEN).send().unwrap().text().unwrap();
    assert_eq!(raw, again);

    // ecog=9 is rejected with per-field detail and leaves the form alone
    let (status, err) = svc.patch("case-01", json!([{"field_id": "ecog", "value": 9}]));
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["fields"][0]["field_id"], "ecog");
    assert_eq!(err["fields"][0]["kind"], "OutOfRange");
    let (_, view) = svc.get("/cases/case-01/form");
    assert_eq!(view["version"], 1);
    assert_eq!(view["form"]["values"]["ecog"]["value"], 1);

    let (status, view) = svc.patch("case-01", json!([{"field_id": "previous_neoplasia", "value": true}]));
    assert_eq!(status, StatusCode::OK, "{view}");
    assert_eq!(view["version"], 2);
    assert_eq!(active_blocks(&view), [1, 2]);
    assert_eq!(view["form"]["values"]["previous_neoplasia"]["source"], "human");

    let (_, view) = svc.patch("case-01", json!([{"field_id": "previous_neoplasia", "value": false}]));
    assert_eq!(active_blocks(&view), [1]);
}

#[test]
fn provenance_matches_contexts_shown() {
    let svc = Service::start();
    svc.ingest_fixture("case-08");
    let (_, report) = svc.post("/cases/case-08/autofill?backend=mock", json!({}));
    let block7 = report["completions"].as_array().unwrap().iter().find(|c| c["block_id"] == 7).unwrap();
    let mut shown: Vec<&str> = block7["hits"].as_array().unwrap().iter().map(|h| h["chunk_id"].as_str().unwrap()).collect();
    let (status, prov) = svc.get("/cases/case-08/provenance/chemo_intent");
    assert_eq!(status, StatusCode::OK);
    let mut got: Vec<&str> = prov["items"].as_array().unwrap().iter().map(|i| i["chunk_id"].as_str().unwrap()).collect();
    shown.sort();
    got.sort();
    assert_eq!(got, shown);
    assert!(prov["items"][0]["text"].as_str().unwrap().len() > 10);
}

#[test]
fn not_found_and_bad_requests() {
    let svc = Service::start();
    assert_eq!(svc.get("/cases/ghost/form").0, StatusCode::NOT_FOUND);
    assert_eq!(svc.post("/cases/ghost/autofill?backend=mock", json!({})).0, StatusCode::NOT_FOUND);
    svc.ingest_fixture("case-02");
    assert_eq!(svc.get("/cases/case-02/provenance/not_a_field").0, StatusCode::NOT_FOUND);
    let (status, err) = svc.post("/cases/case-02/autofill?backend=nope", json!({}));
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["message"].as_str().unwrap().contains("nope"));
    let (status, _) = svc.post("/cases/bad%20id/ingest", json!({"paths": [fixtures().join("case-02/narrative.txt")]}));
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn ingest_accepts_server_side_paths() {
    let svc = Service::start();
    let path = fixtures().join("case-07/informe_tc.txt");
    let (status, manifest) = svc.post("/cases/case-07/ingest", json!({"paths": [path]}));
    assert_eq!(status, StatusCode::OK, "{manifest}");
    assert_eq!(manifest["ingested"].as_array().unwrap().len(), 1);
    let (status, view) = svc.get("/cases/case-07/form");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["version"], 0);
}

#[test]
fn patch_during_autofill_conflicts() {
    let svc = Arc::new(Service::start());
    svc.ingest_fixture("case-03");
    let bg = {
        let svc = svc.clone();
        std::thread::spawn(move || svc.post("/cases/case-03/autofill?backend=mock-slow", json!({})).0)
    };
    std::thread::sleep(Duration::from_millis(400));
    let (status, err) = svc.patch("case-03", json!([{"field_id": "ecog", "value": 0}]));
    assert_eq!(status, StatusCode::CONFLICT, "{err}");
    assert_eq!(bg.join().unwrap(), StatusCode::OK);
    assert_eq!(svc.patch("case-03", json!([{"field_id": "ecog", "value": 0}])).0, StatusCode::OK);
}

#[test]
fn benchmark_endpoint_reports_location() {
    let svc = Service::start();
    let (status, out) = svc.post("/benchmark", json!({"backends": ["mock"]}));
    assert_eq!(status, StatusCode::OK, "{out}");
    let dir = PathBuf::from(out["out_dir"].as_str().unwrap());
    assert!(dir.join("summary.csv").is_file());
    assert_eq!(out["backends"][0]["backend_id"], "mock");
    assert!(out["backends"][0]["accuracy"]["mean"].as_f64().unwrap() >= 95.0);
}
