use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use heparin_app::config::AppConfig;
use heparin_app::service::{router, AppState};
use heparin_core::simulator::{synth_cohort, PatientTruth};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(cfg: AppConfig) -> Router {
    router(AppState::new(cfg).unwrap())
}

fn patient() -> PatientTruth {
    let cfg = AppConfig::default();
    let est = cfg.estimation();
    synth_cohort(1, 31, &cfg.ranges, &est.gammas, &est.domains).remove(0)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, text) = call_text(app, method, uri, body.map(|b| b.to_string())).await;
    let v = serde_json::from_str(&text).unwrap_or(Value::Null);
    (status, v)
}

async fn call_text(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn create(app: &Router, body: Value) -> String {
    let (s, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["schema"], "heparin.session/v1");
    v["session_id"].as_str().unwrap().to_string()
}

/// Posts the patient's charted doses up to `last_hour` and its first `readings` readings.
async fn chart_patient(app: &Router, id: &str, p: &PatientTruth, readings: usize) {
    let obs = &p.record.observations[..readings];
    let last_hour = obs.last().unwrap().0 - 1;
    for (h, &d) in p.record.doses[..=last_hour].iter().enumerate() {
        let (s, v) = call(app, "POST", &format!("/sessions/{id}/doses"), Some(json!({"hour": h, "dose": d}))).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
    }
    for &(t, y) in obs {
        let (s, v) = call(app, "POST", &format!("/sessions/{id}/observations"), Some(json!({"hour": t - 1, "aptt": y}))).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        assert!(v["weights"].is_array());
    }
}

fn weight_sum(v: &Value) -> f64 {
    v["weights"].as_array().unwrap().iter().map(|w| w["weight"].as_f64().unwrap()).sum()
}

#[tokio::test]
async fn happy_path_recommends_a_plan() {
    let app = app(AppConfig::default());
    let p = patient();
    let id = create(&app, json!({"patient_id": "bed-4", "weight_kg": p.weight_kg})).await;
    chart_patient(&app, &id, &p, 4).await;

    let (s, est) = call(&app, "GET", &format!("/sessions/{id}/estimate"), None).await;
    assert_eq!(s, StatusCode::OK, "{est}");
    assert_eq!(est["low_information"], false);
    assert!((weight_sum(&est) - 1.0).abs() < 1e-9);
    assert!(est["map"]["yb"].as_f64().unwrap() > 0.0);

    let (s, rec) = call(&app, "GET", &format!("/sessions/{id}/recommendation?horizon=4&loss=median"), None).await;
    assert_eq!(s, StatusCode::OK, "{rec}");
    assert_eq!(rec["schema"], "heparin.session/v1");
    assert_eq!(rec["low_information"], false);
    assert!((weight_sum(&rec) - 1.0).abs() < 1e-9);
    let doses = rec["plan"]["doses"].as_array().unwrap();
    assert_eq!(doses.len(), 4);
    let u_max = AppConfig::default().estimation().domains.u_max;
    assert!(doses.iter().all(|d| (0.0..=u_max).contains(&d.as_f64().unwrap())));
    let losses = rec["plan"]["scenario_losses"].as_array().unwrap();
    let (num, den) = losses.iter().fold((0.0, 0.0), |(n, d), l| {
        let w = l["weight"].as_f64().unwrap();
        (n + w * l["loss"].as_f64().unwrap(), d + w)
    });
    assert!((num / den - rec["plan"]["expected_loss"].as_f64().unwrap()).abs() < 1e-9);

    let (_, session) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let events = session["events"].as_array().unwrap();
    assert_eq!(events.last().unwrap()["event"], "recommendation");
    assert_eq!(events.last().unwrap()["doses"], rec["plan"]["doses"]);
}

#[tokio::test]
async fn recommendation_needs_three_readings() {
    let app = app(AppConfig::default());
    let p = patient();
    let id = create(&app, json!({})).await;
    let uri = format!("/sessions/{id}/recommendation");
    let (s, v) = call(&app, "GET", &uri, None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["code"], "low_information");
    chart_patient(&app, &id, &p, 2).await;
    let (s, v) = call(&app, "GET", &uri, None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["detail"]["low_information"], true);
    assert!(v["detail"]["weights"].is_array());
    let (t, y) = p.record.observations[2];
    call(&app, "POST", &format!("/sessions/{id}/observations"), Some(json!({"hour": t - 1, "aptt": y}))).await;
    let (s, v) = call(&app, "GET", &uri, None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
}

#[tokio::test]
async fn error_statuses() {
    let app = app(AppConfig::default());
    let (s, v) = call(&app, "GET", "/sessions/s999999/estimate", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["schema"], "heparin.error/v1");
    let (s, _) = call(&app, "POST", "/sessions/nope/doses", Some(json!({"hour": 0, "dose": 1}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let id = create(&app, json!({})).await;
    let obs = format!("/sessions/{id}/observations");
    let doses = format!("/sessions/{id}/doses");
    let (s, v) = call(&app, "GET", &format!("/sessions/{id}/estimate"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");

    let fields = |v: &Value| -> Vec<String> {
        v["error"]["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap().to_string()).collect()
    };
    let (s, v) = call(&app, "POST", &obs, Some(json!({"aptt": 40}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["hour"]);
    let (s, v) = call(&app, "POST", &obs, Some(json!({"hour": -1, "aptt": "x", "colour": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["colour"]);
    let (s, v) = call(&app, "POST", &obs, Some(json!({"hour": -1, "aptt": "x"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["hour", "aptt"]);
    let (s, v) = call(&app, "POST", &obs, Some(json!({"hour": 3, "aptt": 400}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["aptt"]);
    let (s, v) = call_text(&app, "POST", &doses, Some("{\"hour\": 1,".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
    let (s, v) = call(&app, "POST", &doses, Some(json!({"hour": 1, "dose": -5}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["dose"]);
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"loss": "quadratic"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", &format!("/sessions/{id}/trajectory?horizon=0"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    assert_eq!(call(&app, "POST", &obs, Some(json!({"hour": 5, "aptt": 40}))).await.0, StatusCode::CREATED);
    let (s, v) = call(&app, "POST", &obs, Some(json!({"hour": 5, "aptt": 41}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "out_of_order");
    assert_eq!(call(&app, "POST", &obs, Some(json!({"hour": 2, "aptt": 41}))).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "POST", &doses, Some(json!({"hour": 4, "dose": 100}))).await.0, StatusCode::CREATED);
    assert_eq!(call(&app, "POST", &doses, Some(json!({"hour": 4, "dose": 100}))).await.0, StatusCode::CONFLICT);
    // Rejected requests leave no trace.
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["events"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn corrections_supersede_without_erasing() {
    let app = app(AppConfig::default());
    let id = create(&app, json!({})).await;
    let obs = format!("/sessions/{id}/observations");
    let (_, first) = call(&app, "POST", &obs, Some(json!({"hour": 0, "aptt": 30}))).await;
    call(&app, "POST", &obs, Some(json!({"hour": 6, "aptt": 95}))).await;
    let seq = first["seq"].as_u64().unwrap();
    let (s, v) = call(&app, "POST", &obs, Some(json!({"hour": 0, "aptt": 32, "supersedes": seq}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["observations"], 2);
    let (s, _) = call(&app, "POST", &obs, Some(json!({"hour": 0, "aptt": 33, "supersedes": seq}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", &obs, Some(json!({"hour": 1, "aptt": 33, "supersedes": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (_, chart) = call_text(&app, "GET", &format!("/sessions/{id}/chart"), None).await;
    assert!(chart.contains("\n0,0,32\n"), "{chart}");
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let aptts: Vec<f64> = v["events"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["event"] == "observation")
        .map(|e| e["aptt"].as_f64().unwrap())
        .collect();
    assert_eq!(aptts, vec![30.0, 95.0, 32.0]);
}

#[tokio::test]
async fn zero_dose_whatif_is_the_trajectory() {
    let app = app(AppConfig::default());
    let p = patient();
    let id = create(&app, json!({})).await;
    chart_patient(&app, &id, &p, 4).await;
    let (s, traj) = call(&app, "GET", &format!("/sessions/{id}/trajectory?horizon=5"), None).await;
    assert_eq!(s, StatusCode::OK, "{traj}");
    let (s, what) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(json!({"doses": [0, 0, 0, 0, 0]}))).await;
    assert_eq!(s, StatusCode::OK, "{what}");
    assert_eq!(traj["rollout"], what["rollout"]);
    let r = &traj["rollout"];
    assert_eq!(r["hours"].as_array().unwrap().len(), 5);
    for i in 0..5 {
        let (lo, m, hi) = (r["lower"][i].as_f64().unwrap(), r["mean"][i].as_f64().unwrap(), r["upper"][i].as_f64().unwrap());
        assert!(lo <= m + 1e-9 && m <= hi + 1e-9);
    }
    let (s, other) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(json!({"doses": [1500, 1500]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert!(other["rollout"]["mean"][1].as_f64() > traj["rollout"]["mean"][1].as_f64());
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(json!({"doses": [1e9]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn overrunning_the_budget_returns_503() {
    let cfg = AppConfig {
        plan_budget_s: 0.0,
        ..AppConfig::default()
    };
    let app = app(cfg);
    let p = patient();
    let id = create(&app, json!({})).await;
    chart_patient(&app, &id, &p, 4).await;
    let (s, v) = call(&app, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{v}");
    assert_eq!(v["error"]["code"], "budget_exceeded");
    assert!(v["partial"]["stage"].is_string());
    let (_, session) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert!(session["events"].as_array().unwrap().iter().all(|e| e["event"] != "recommendation"));
}

#[tokio::test]
async fn sessions_replay_from_the_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AppConfig {
        log_dir: Some(dir.path().to_path_buf()),
        ..AppConfig::default()
    };
    let p = patient();
    let first = app(cfg.clone());
    let id = create(&first, json!({"bleed_risk": "high", "horizon": 3})).await;
    chart_patient(&first, &id, &p, 3).await;
    let (_, rec) = call(&first, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    let (_, before) = call(&first, "GET", &format!("/sessions/{id}"), None).await;
    let (_, est_before) = call(&first, "GET", &format!("/sessions/{id}/estimate"), None).await;

    let log = std::fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), before["events"].as_array().unwrap().len());
    for (line, event) in log.lines().zip(before["events"].as_array().unwrap()) {
        assert_eq!(&serde_json::from_str::<Value>(line).unwrap(), event);
    }

    let second = app(cfg);
    let (_, after) = call(&second, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(after["events"], before["events"]);
    assert_eq!(after["settings"], before["settings"]);
    let (_, est_after) = call(&second, "GET", &format!("/sessions/{id}/estimate"), None).await;
    assert_eq!(est_after["table"]["scenarios"], est_before["table"]["scenarios"]);
    let (_, rec2) = call(&second, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    assert_eq!(rec2["plan"], rec["plan"]);
    let next = create(&second, json!({})).await;
    assert_ne!(next, id);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn requests_on_one_session_are_serialized() {
    let app = app(AppConfig::default());
    let id = create(&app, json!({})).await;
    let mut tasks = Vec::new();
    for h in 0..16 {
        let (app, uri) = (app.clone(), format!("/sessions/{id}/doses"));
        tasks.push(tokio::spawn(async move {
            call(&app, "POST", &uri, Some(json!({"hour": h, "dose": 100}))).await
        }));
    }
    let mut accepted = Vec::new();
    for t in tasks {
        let (s, v) = t.await.unwrap();
        match s {
            StatusCode::CREATED => accepted.push(v["seq"].as_u64().unwrap()),
            StatusCode::CONFLICT => {}
            other => panic!("{other}: {v}"),
        }
    }
    accepted.sort_unstable();
    assert_eq!(accepted, (2..2 + accepted.len() as u64).collect::<Vec<_>>());
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let hours: Vec<u64> = v["events"].as_array().unwrap()[1..].iter().map(|e| e["hour"].as_u64().unwrap()).collect();
    assert!(hours.windows(2).all(|w| w[0] < w[1]));
}

#[tokio::test]
async fn served_plans_replay_offline_through_the_cli() {
    let app = app(AppConfig::default());
    let p = patient();
    let id = create(&app, json!({"weight_kg": p.weight_kg, "loss": "band"})).await;
    chart_patient(&app, &id, &p, 5).await;
    let (s, rec) = call(&app, "GET", &format!("/sessions/{id}/recommendation?horizon=5"), None).await;
    assert_eq!(s, StatusCode::OK, "{rec}");
    let (_, chart) = call_text(&app, "GET", &format!("/sessions/{id}/chart"), None).await;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chart.csv");
    std::fs::write(&path, chart).unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_heparin"))
        .args(["dose", path.to_str().unwrap(), "--policy", "ptc-sg10", "--loss", "band", "--horizon", "5"])
        .env_remove("HEPARIN_CONFIG")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["report"]["body"], rec["plan"]);
}
