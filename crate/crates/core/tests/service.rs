mod common;

use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use kaamlab::data::{ColumnPlan, ModelBundle};
use kaamlab::interpret::{nearest_patients, radar};
use kaamlab::kaam::average_contribution;
use kaamlab::pipeline::ModelFamily;
use kaamlab::service::{router, LoadedModel, PatientRequest, Registry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use tower::ServiceExt;

const PATIENTS: usize = 50;

struct Fixture {
    registry: Arc<Registry>,
}

/// Built once and shared: the registry is read-only.
fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(Fixture::new)
}

impl Fixture {
    fn new() -> Self {
        let models = vec![
            LoadedModel::new("bc", common::breast_cancer_bundle(80)).unwrap(),
            LoadedModel::new("mixed", common::mixed_bundle(ModelFamily::Kaam)).unwrap(),
            LoadedModel::new("lr", common::mixed_bundle_binary_lr()).unwrap(),
        ];
        Fixture { registry: Arc::new(Registry::new(models).unwrap()) }
    }

    fn model(&self, id: &str) -> &LoadedModel {
        self.registry.get(id).unwrap()
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
        let req = req.body(body.map_or_else(Body::empty, Body::from)).unwrap();
        let resp = router(self.registry.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }
}

/// Random raw covariates drawn inside each feature's observed range.
fn random_patient(model: &LoadedModel, rng: &mut ChaCha8Rng) -> Map<String, Value> {
    let info = model.info();
    let mut out = Map::new();
    for (f, fi) in model.bundle.preprocessor.features().iter().zip(&info.features) {
        let v = match &f.plan {
            ColumnPlan::Numeric { .. } => {
                let (lo, hi) = fi.range.unwrap();
                let x = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                if f.spec.kind == kaamlab::data::FeatureKind::Integer {
                    json!(x.round())
                } else {
                    json!(x)
                }
            }
            ColumnPlan::Binary { values, .. } => json!(values[rng.random_range(0..values.len())]),
            ColumnPlan::Categorical { vocabulary } => json!(vocabulary[rng.random_range(0..vocabulary.len())]),
        };
        out.insert(f.spec.name.clone(), v);
    }
    out
}

fn body<T: serde::Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).unwrap()
}

#[tokio::test]
async fn post_endpoints_match_in_process_calls() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for id in ["bc", "mixed"] {
        let m = fx.model(id);
        let classes = m.bundle.model.class_labels().len();
        for endpoint in ["predict", "explain/radar", "explain/pdp", "neighbors"] {
            for _ in 0..PATIENTS {
                let req = PatientRequest {
                    covariates: random_patient(m, &mut rng),
                    class: Some(rng.random_range(0..classes)),
                    neighbors: rng.random_bool(0.5),
                    k: Some(rng.random_range(1..=8)),
                    features: None,
                };
                let expected = match endpoint {
                    "predict" => body(&m.predict(&req).unwrap()),
                    "explain/radar" => body(&m.radar(&req).unwrap()),
                    "explain/pdp" => body(&m.pdp(&req).unwrap()),
                    _ => body(&m.neighbors(&req).unwrap()),
                };
                let (status, got) = fx.call("POST", &format!("/models/{id}/{endpoint}"), Some(body(&req))).await;
                assert_eq!(status, StatusCode::OK, "{id} {endpoint}: {}", String::from_utf8_lossy(&got));
                assert_eq!(got, expected, "{id} {endpoint}");
            }
        }
    }
}

#[tokio::test]
async fn radar_and_predict_agree_with_direct_library_calls() {
    let fx = fixture();
    let m = fx.model("mixed");
    let bundle: &ModelBundle = &m.bundle;
    let kaam = bundle.model.additive().unwrap();
    let train = bundle.train.dataset(&bundle.preprocessor).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..PATIENTS {
        let covariates = random_patient(m, &mut rng);
        let class = rng.random_range(0..3);
        let record = bundle.preprocessor.record_from_json(&covariates).unwrap();
        let (x, _) = bundle.preprocessor.transform_record(&record).unwrap();

        let delta = kaam.explanation_matrix(train.x.view(), class, Some(&train.ids)).unwrap();
        let avg = average_contribution(&delta).unwrap();
        let query = kaam.explanation_row(&x, class).unwrap();
        let nb = nearest_patients(&delta, &query, 5).unwrap();
        let rows: Vec<Vec<f64>> = nb.neighbors.iter().map(|n| delta.values().row(n.row).to_vec()).collect();
        let direct = radar(&kaam, &avg, &x, class, Some(&rows)).unwrap();

        let req = json!({"covariates": covariates, "class": class, "neighbors": true});
        let (status, got) = fx.call("POST", "/models/mixed/explain/radar", Some(body(&req))).await;
        assert_eq!(status, StatusCode::OK);
        let v: Value = serde_json::from_slice(&got).unwrap();
        assert_eq!(v["axes"], json!(direct.axes));
        assert_eq!(v["baseline"], json!(direct.baseline));
        assert_eq!(v["neighbor_axes"], json!(direct.neighbor_axes));
        assert_eq!(v["model_id"], "mixed");
        assert_eq!(v["bundle_hash"], json!(bundle.hash().unwrap()));

        let (_, got) = fx.call("POST", "/models/mixed/predict", Some(body(&json!({"covariates": covariates})))).await;
        let v: Value = serde_json::from_slice(&got).unwrap();
        let probs = bundle.model.predict_proba(&x).unwrap();
        assert_eq!(v["probabilities"], json!(probs));
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[tokio::test]
async fn get_endpoints_match_in_process_calls() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..PATIENTS {
        let class = rng.random_range(0..3);
        let m = fx.model("mixed");
        let (s, got) = fx.call("GET", &format!("/models/mixed/importance?class={class}"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(got, body(&m.importance(Some(class)).unwrap()));

        let d: u32 = rng.random_range(0..7);
        let (s, got) = fx.call("GET", &format!("/models/mixed/formula?decimals={d}"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(got, body(&m.formula(Some(d)).unwrap()));

        let t: f64 = rng.random_range(0.0..1.0);
        let bc = fx.model("bc");
        let (s, got) = fx.call("GET", &format!("/models/bc/prediction-bars?threshold={t}"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(got, body(&bc.prediction_bars(t).unwrap()));
    }
    let (s, got) = fx.call("GET", "/models", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(got, body(&fx.registry.list()));
    let v: Value = serde_json::from_slice(&got).unwrap();
    assert_eq!(v["models"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let fx = fixture();
    let m = fx.model("mixed");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let good = random_patient(m, &mut rng);

    let (s, _) = fx.call("POST", "/models/nope/predict", Some(body(&json!({"covariates": good})))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = fx.call("POST", "/models/mixed/predict", Some(b"{not json".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut unknown = good.clone();
    unknown.insert("height".into(), json!(1.8));
    let mut missing = good.clone();
    missing.remove("age");
    let mut wrong_kind = good.clone();
    wrong_kind.insert("age".into(), json!("old"));
    let mut bad_binary = good.clone();
    bad_binary.insert("smoker".into(), json!("sometimes"));
    for cov in [unknown, missing, wrong_kind, bad_binary] {
        let (s, b) = fx.call("POST", "/models/mixed/predict", Some(body(&json!({"covariates": cov})))).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{}", String::from_utf8_lossy(&b));
        let v: Value = serde_json::from_slice(&b).unwrap();
        assert!(v["error"].is_string());
    }
    let (s, _) = fx.call("POST", "/models/mixed/predict", Some(body(&json!({"covariate": good})))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) =
        fx.call("POST", "/models/mixed/explain/radar", Some(body(&json!({"covariates": good, "class": 7})))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = fx.call("GET", "/models/mixed/importance?class=x", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    // The baseline predicts but has no additive explanations or formula.
    let lr = fx.model("lr");
    let cov = random_patient(lr, &mut rng);
    let (s, _) = fx.call("POST", "/models/lr/predict", Some(body(&json!({"covariates": cov})))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = fx.call("POST", "/models/lr/explain/radar", Some(body(&json!({"covariates": cov})))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = fx.call("GET", "/models/lr/formula", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = fx.call("GET", "/models/lr/prediction-bars", None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn concurrent_requests_match_serial_ones() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let reqs: Vec<Vec<u8>> = (0..16)
        .map(|_| body(&json!({"covariates": random_patient(fx.model("mixed"), &mut rng), "neighbors": true})))
        .collect();
    let mut serial = Vec::new();
    for r in &reqs {
        serial.push(fx.call("POST", "/models/mixed/explain/radar", Some(r.clone())).await);
    }
    let handles: Vec<_> = reqs
        .iter()
        .cloned()
        .map(|r| tokio::spawn(async move { fx.call("POST", "/models/mixed/explain/radar", Some(r)).await }))
        .collect();
    for (h, s) in handles.into_iter().zip(serial) {
        assert_eq!(h.await.unwrap(), s);
    }
}

#[tokio::test]
async fn responses_validate_against_published_schemas() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dir = tempfile::tempdir().unwrap();
    let cov = random_patient(fx.model("mixed"), &mut rng);
    let post = body(&json!({"covariates": cov, "neighbors": true}));
    let calls: [(&str, &str, &str, Option<Vec<u8>>); 9] = [
        ("models", "GET", "/models", None),
        ("predict", "POST", "/models/mixed/predict", Some(post.clone())),
        ("radar", "POST", "/models/mixed/explain/radar", Some(post.clone())),
        ("pdp", "POST", "/models/mixed/explain/pdp", Some(post.clone())),
        ("neighbors", "POST", "/models/mixed/neighbors", Some(post.clone())),
        ("importance", "GET", "/models/mixed/importance?class=2", None),
        ("formula", "GET", "/models/mixed/formula?decimals=3", None),
        ("prediction-bars", "GET", "/models/bc/prediction-bars", None),
        ("error", "GET", "/models/nope/formula", None),
    ];
    let schemas = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas");
    let mut pairs = Vec::new();
    for (name, method, uri, b) in calls {
        let (_, got) = fx.call(method, uri, b).await;
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, got).unwrap();
        pairs.push(format!("{}={}", path.display(), schemas.join(format!("{name}.schema.json")).display()));
    }
    let script = "import json,sys,jsonschema\n\
                  for pair in sys.argv[1:]:\n    d, s = pair.split('=')\n    \
                  jsonschema.validate(json.load(open(d)), json.load(open(s)))";
    match std::process::Command::new("python3").arg("-c").arg(script).args(&pairs).output() {
        Ok(o) if o.status.success() => {}
        Ok(o) if String::from_utf8_lossy(&o.stderr).contains("No module named") => {
            eprintln!("python jsonschema unavailable; schema validation skipped");
        }
        Ok(o) => panic!("schema validation failed: {}", String::from_utf8_lossy(&o.stderr)),
        Err(_) => eprintln!("python3 unavailable; schema validation skipped"),
    }
}
