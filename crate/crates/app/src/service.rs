//! HTTP/JSON recommendation service.
//!
//! Each session is an append-only list of events. With `log_dir` set, every
//! event is written as one JSON line to `<log_dir>/<session id>.jsonl` before it
//! is applied, and sessions are rebuilt from those files at startup.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use heparin_core::dosing::{BleedRisk, LossKind, LossSpec, PolicySpec};
use heparin_core::dynamics::PatientParams;
use heparin_core::estimation::{EstimationError, ScenarioTable};
use heparin_core::io::{write_chart, ChartRecord, ChartRow, APTT_MAX};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::{Mutex, RwLock};

use crate::config::AppConfig;
use crate::engine;
use crate::error::{AppError, ERROR_SCHEMA};

pub const SESSION_SCHEMA: &str = "heparin.session/v1";

/// Fixed per-session choices, set when the session is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSettings {
    pub patient_id: String,
    pub weight_kg: Option<f64>,
    pub bleed_risk: Option<BleedRisk>,
    pub policy: String,
    pub loss: LossKind,
    pub horizon: usize,
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    Created {
        seq: u64,
        session_id: String,
        settings: SessionSettings,
    },
    Observation {
        seq: u64,
        hour: usize,
        aptt: f64,
        /// `seq` of the reading this one corrects.
        supersedes: Option<u64>,
    },
    Dose {
        seq: u64,
        hour: usize,
        dose: f64,
    },
    Recommendation {
        seq: u64,
        revision: u64,
        policy: String,
        loss: LossKind,
        horizon: usize,
        doses: Vec<f64>,
        expected_loss: f64,
    },
}

impl Event {
    fn seq(&self) -> u64 {
        match self {
            Event::Created { seq, .. }
            | Event::Observation { seq, .. }
            | Event::Dose { seq, .. }
            | Event::Recommendation { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct FieldError {
    field: String,
    message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fields: Vec<FieldError>,
    extra: Option<(&'static str, Value)>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            fields: Vec::new(),
            extra: None,
        }
    }

    fn fields(fields: Vec<FieldError>) -> Self {
        Self {
            fields,
            ..Self::new(StatusCode::BAD_REQUEST, "invalid_request", "request body failed validation")
        }
    }

    fn field(name: &str, message: impl Into<String>) -> Self {
        Self::fields(vec![FieldError {
            field: name.into(),
            message: message.into(),
        }])
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session '{id}'"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn with(mut self, key: &'static str, value: Value) -> Self {
        self.extra = Some((key, value));
        self
    }
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        match &e {
            AppError::Usage(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
            AppError::Estimation(EstimationError::InvalidInput(_)) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "cannot_estimate", e.to_string())
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.code(), e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({
            "schema": ERROR_SCHEMA,
            "error": { "code": self.code, "message": self.message, "fields": self.fields },
        });
        if let Some((k, v)) = self.extra {
            body[k] = v;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

#[derive(Debug, Clone)]
struct Reading {
    seq: u64,
    hour: usize,
    aptt: f64,
    superseded_by: Option<u64>,
}

#[derive(Debug, Clone)]
struct Session {
    id: String,
    settings: SessionSettings,
    events: Vec<Event>,
    log: Option<PathBuf>,
    doses: BTreeMap<usize, f64>,
    readings: Vec<Reading>,
    /// Bumped by every reading or dose.
    revision: u64,
    table: Option<(u64, ScenarioTable<f64>)>,
}

impl Session {
    fn new(id: String, settings: SessionSettings, log: Option<PathBuf>) -> Self {
        Self {
            id,
            settings,
            events: Vec::new(),
            log,
            doses: BTreeMap::new(),
            readings: Vec::new(),
            revision: 0,
            table: None,
        }
    }

    fn next_seq(&self) -> u64 {
        self.events.len() as u64 + 1
    }

    fn active(&self) -> impl Iterator<Item = &Reading> {
        self.readings.iter().filter(|r| r.superseded_by.is_none())
    }

    fn n_readings(&self) -> usize {
        self.active().count()
    }

    /// Checks `event` against the session and applies it. Replay goes through
    /// here too, so a log that was accepted once is accepted again.
    fn apply(&mut self, event: Event, u_max: f64) -> Result<(), ApiError> {
        if event.seq() != self.next_seq() {
            return Err(ApiError::internal(format!(
                "event seq {} out of sequence (expected {})",
                event.seq(),
                self.next_seq()
            )));
        }
        match &event {
            Event::Created { .. } => {
                if !self.events.is_empty() {
                    return Err(ApiError::internal("session created twice"));
                }
            }
            Event::Observation {
                seq,
                hour,
                aptt,
                supersedes,
            } => {
                if !(*aptt > 0.0 && *aptt < APTT_MAX) {
                    return Err(ApiError::field("aptt", format!("must lie in (0, {APTT_MAX}) seconds")));
                }
                match supersedes {
                    Some(old) => {
                        let Some(r) = self.readings.iter_mut().find(|r| r.seq == *old) else {
                            return Err(ApiError::field("supersedes", format!("no reading with seq {old}")));
                        };
                        if r.superseded_by.is_some() {
                            return Err(ApiError::field("supersedes", format!("reading {old} is already superseded")));
                        }
                        if r.hour != *hour {
                            return Err(ApiError::field(
                                "supersedes",
                                format!("reading {old} is at hour {}, not {hour}", r.hour),
                            ));
                        }
                        r.superseded_by = Some(*seq);
                    }
                    None => {
                        if let Some(last) = self.active().map(|r| r.hour).max() {
                            if *hour <= last {
                                return Err(ApiError::new(
                                    StatusCode::CONFLICT,
                                    "out_of_order",
                                    format!("reading at hour {hour} is not after the last reading (hour {last})"),
                                ));
                            }
                        }
                    }
                }
                self.readings.push(Reading {
                    seq: *seq,
                    hour: *hour,
                    aptt: *aptt,
                    superseded_by: None,
                });
                self.revision += 1;
            }
            Event::Dose { hour, dose, .. } => {
                if !(*dose >= 0.0 && *dose <= u_max) {
                    return Err(ApiError::field("dose", format!("must lie in [0, {u_max}] IU")));
                }
                if let Some((&last, _)) = self.doses.last_key_value() {
                    if *hour <= last {
                        return Err(ApiError::new(
                            StatusCode::CONFLICT,
                            "out_of_order",
                            format!("dose at hour {hour} is not after the last dose (hour {last})"),
                        ));
                    }
                }
                self.doses.insert(*hour, *dose);
                self.revision += 1;
            }
            Event::Recommendation { .. } => {}
        }
        self.events.push(event);
        Ok(())
    }

    /// Validates, logs, then applies.
    fn record(&mut self, event: Event, u_max: f64) -> Result<(), ApiError> {
        let mut probe = Session {
            log: None,
            table: None,
            ..self.clone()
        };
        probe.apply(event.clone(), u_max)?;
        if let Some(path) = &self.log {
            append_line(path, &event).map_err(|e| ApiError::internal(format!("cannot write event log: {e}")))?;
        }
        self.apply(event, u_max)
    }

    /// The session as a chart; hours run from 0 to the latest dose or reading.
    fn chart(&self) -> ChartRecord {
        let last = self
            .doses
            .keys()
            .copied()
            .chain(self.active().map(|r| r.hour))
            .max();
        let mut rows: Vec<ChartRow> = match last {
            Some(h) => (0..=h)
                .map(|hour| ChartRow {
                    hour,
                    dose_iu: self.doses.get(&hour).copied().unwrap_or(0.0),
                    aptt_s: None,
                })
                .collect(),
            None => Vec::new(),
        };
        for r in self.active() {
            rows[r.hour].aptt_s = Some(r.aptt);
        }
        ChartRecord {
            patient_id: self.settings.patient_id.clone(),
            weight_kg: self.settings.weight_kg,
            bleed_risk: self.settings.bleed_risk,
            rows,
        }
    }

    fn low_information(&self, cfg: &AppConfig) -> bool {
        self.n_readings() < cfg.min_observations.max(3)
    }
}

fn append_line(path: &Path, event: &Event) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(event).map_err(std::io::Error::other)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

struct Inner {
    cfg: AppConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Replays every log in `cfg.log_dir`.
    pub fn new(cfg: AppConfig) -> Result<Self, AppError> {
        cfg.validate()?;
        let mut sessions = HashMap::new();
        let mut next = 1;
        if let Some(dir) = &cfg.log_dir {
            std::fs::create_dir_all(dir).map_err(|e| AppError::Config(format!("log_dir {}: {e}", dir.display())))?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| AppError::Config(format!("log_dir {}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            for path in files {
                let s = replay(&path, cfg.estimation().domains.u_max)?;
                if let Some(n) = s.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                    next = next.max(n + 1);
                }
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self(Arc::new(Inner {
            cfg,
            sessions: RwLock::new(sessions),
            next_id: AtomicU64::new(next),
        })))
    }

    pub fn config(&self) -> &AppConfig {
        &self.0.cfg
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.0
            .sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

/// Rebuilds one session from its log file.
fn replay(path: &Path, u_max: f64) -> Result<Session, AppError> {
    let bad = |line: usize, m: String| AppError::Config(format!("{} line {line}: {m}", path.display()));
    let f = File::open(path).map_err(|e| bad(0, e.to_string()))?;
    let mut session: Option<Session> = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| bad(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        let s = session.get_or_insert_with(|| match &event {
            Event::Created {
                session_id, settings, ..
            } => Session::new(session_id.clone(), settings.clone(), Some(path.to_path_buf())),
            _ => Session::new(String::new(), placeholder_settings(), None),
        });
        if s.id.is_empty() {
            return Err(bad(i + 1, "log does not start with a 'created' event".into()));
        }
        s.apply(event, u_max).map_err(|e| bad(i + 1, e.message))?;
    }
    session.ok_or_else(|| bad(0, "empty log".into()))
}

fn placeholder_settings() -> SessionSettings {
    SessionSettings {
        patient_id: String::new(),
        weight_kg: None,
        bleed_risk: None,
        policy: String::new(),
        loss: LossKind::MedianDeviation,
        horizon: 1,
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/chart", get(get_chart))
        .route("/sessions/{id}/observations", post(post_observation))
        .route("/sessions/{id}/doses", post(post_dose))
        .route("/sessions/{id}/estimate", get(get_estimate))
        .route("/sessions/{id}/recommendation", get(get_recommendation))
        .route("/sessions/{id}/whatif", post(post_whatif))
        .route("/sessions/{id}/trajectory", get(get_trajectory))
        .with_state(state)
}

/// Parses a JSON object body, rejecting keys outside `allowed`.
fn body_object(bytes: &Bytes, allowed: &[&str]) -> Result<Map<String, Value>, ApiError> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(Map::new());
    }
    let v: Value = serde_json::from_slice(bytes).map_err(|e| ApiError::field("body", format!("not valid JSON: {e}")))?;
    let Value::Object(map) = v else {
        return Err(ApiError::field("body", "must be a JSON object"));
    };
    let unknown: Vec<FieldError> = map
        .keys()
        .filter(|k| !allowed.contains(&k.as_str()))
        .map(|k| FieldError {
            field: k.clone(),
            message: "unknown field".into(),
        })
        .collect();
    if !unknown.is_empty() {
        return Err(ApiError::fields(unknown));
    }
    Ok(map)
}

struct Fields<'a> {
    map: &'a Map<String, Value>,
    errors: Vec<FieldError>,
}

impl<'a> Fields<'a> {
    fn new(map: &'a Map<String, Value>) -> Self {
        Self {
            map,
            errors: Vec::new(),
        }
    }

    fn fail(&mut self, field: &str, message: &str) {
        self.errors.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }

    fn get(&mut self, field: &str, required: bool) -> Option<&'a Value> {
        match self.map.get(field) {
            None | Some(Value::Null) => {
                if required {
                    self.fail(field, "is required");
                }
                None
            }
            Some(v) => Some(v),
        }
    }

    fn uint(&mut self, field: &str, required: bool) -> Option<u64> {
        let v = self.get(field, required)?;
        let r = v.as_u64();
        if r.is_none() {
            self.fail(field, "must be a nonnegative integer");
        }
        r
    }

    fn number(&mut self, field: &str, required: bool) -> Option<f64> {
        let v = self.get(field, required)?;
        let r = v.as_f64().filter(|x| x.is_finite());
        if r.is_none() {
            self.fail(field, "must be a finite number");
        }
        r
    }

    fn string(&mut self, field: &str) -> Option<&'a str> {
        let v = self.get(field, false)?;
        let r = v.as_str();
        if r.is_none() {
            self.fail(field, "must be a string");
        }
        r
    }

    fn numbers(&mut self, field: &str) -> Option<Vec<f64>> {
        let v = self.get(field, true)?;
        let r = v
            .as_array()
            .and_then(|a| a.iter().map(|x| x.as_f64().filter(|x| x.is_finite())).collect::<Option<Vec<f64>>>());
        if r.is_none() {
            self.fail(field, "must be an array of finite numbers");
        }
        r
    }

    fn finish(self) -> Result<(), ApiError> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(ApiError::fields(self.errors))
        }
    }
}

fn weights(table: &ScenarioTable<f64>) -> Value {
    table
        .scenarios
        .iter()
        .map(|e| json!({ "alpha": e.alpha, "b": e.b, "weight": e.weight }))
        .collect()
}

fn reply(status: StatusCode, session: &Session, cfg: &AppConfig, fields: Value) -> Response {
    let mut body = json!({
        "schema": SESSION_SCHEMA,
        "session_id": session.id,
        "revision": session.revision,
        "observations": session.n_readings(),
        "low_information": session.low_information(cfg),
        "weights": session.table.as_ref().filter(|(r, _)| *r == session.revision).map(|(_, t)| weights(t)),
    });
    if let (Value::Object(b), Value::Object(f)) = (&mut body, fields) {
        b.extend(f);
    }
    (status, Json(body)).into_response()
}

/// Fresh scenario weights for the current revision, or `None` without readings.
async fn refresh_table(state: &AppState, session: &mut Session) -> Result<Option<ScenarioTable<f64>>, ApiError> {
    if session.n_readings() == 0 {
        return Ok(None);
    }
    if let Some((r, t)) = &session.table {
        if *r == session.revision {
            return Ok(Some(t.clone()));
        }
    }
    let spec = state.config().policy(&session.settings.policy, Some(session.settings.loss))?;
    let chart = session.chart();
    let st = state.clone();
    let table = tokio::task::spawn_blocking(move || engine::scenarios(&chart.to_series(None), &spec, st.config()))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    session.table = Some((session.revision, table.clone()));
    Ok(Some(table))
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let map = body_object(&body, &["patient_id", "weight_kg", "bleed_risk", "policy", "loss", "horizon"])?;
    let cfg = state.config();
    let mut f = Fields::new(&map);
    let patient_id = f.string("patient_id").map(str::to_owned);
    let weight_kg = f.number("weight_kg", false);
    let bleed_risk = f.string("bleed_risk").and_then(|s| match s.parse::<BleedRisk>() {
        Ok(r) => Some(r),
        Err(m) => {
            f.fail("bleed_risk", &m);
            None
        }
    });
    let policy = f.string("policy").unwrap_or("ptc-sg10").to_owned();
    let loss = match f.string("loss").map(str::parse::<LossKind>) {
        Some(Ok(l)) => l,
        Some(Err(m)) => {
            f.fail("loss", &m);
            cfg.loss.kind
        }
        None => cfg.loss.kind,
    };
    let horizon = f.uint("horizon", false).map_or(cfg.planner.horizon, |h| h as usize);
    if horizon == 0 {
        f.fail("horizon", "must be at least 1");
    }
    if let Some(w) = weight_kg {
        if w <= 0.0 {
            f.fail("weight_kg", "must be positive");
        }
    }
    if let Err(e) = cfg.policy(&policy, Some(loss)) {
        f.fail("policy", &e.to_string());
    }
    f.finish()?;

    let n = state.0.next_id.fetch_add(1, Ordering::SeqCst);
    let id = format!("s{n:06}");
    let settings = SessionSettings {
        patient_id: patient_id.unwrap_or_else(|| id.clone()),
        weight_kg,
        bleed_risk,
        policy,
        loss,
        horizon,
    };
    let log = cfg.log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")));
    let mut session = Session::new(id.clone(), settings.clone(), log);
    session.record(
        Event::Created {
            seq: 1,
            session_id: id.clone(),
            settings: settings.clone(),
        },
        cfg.estimation().domains.u_max,
    )?;
    let resp = reply(StatusCode::CREATED, &session, cfg, json!({ "settings": settings }));
    state.0.sessions.write().await.insert(id, Arc::new(Mutex::new(session)));
    Ok(resp)
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let s = state.session(&id).await?;
    let s = s.lock().await;
    Ok(reply(
        StatusCode::OK,
        &s,
        state.config(),
        json!({ "settings": s.settings, "events": s.events }),
    ))
}

async fn get_chart(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let s = state.session(&id).await?;
    let s = s.lock().await;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], write_chart(&s.chart())).into_response())
}

async fn post_observation(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let s = state.session(&id).await?;
    let map = body_object(&body, &["hour", "aptt", "supersedes"])?;
    let mut f = Fields::new(&map);
    let hour = f.uint("hour", true);
    let aptt = f.number("aptt", true);
    let supersedes = f.uint("supersedes", false);
    f.finish()?;
    let mut s = s.lock().await;
    let seq = s.next_seq();
    let event = Event::Observation {
        seq,
        hour: hour.unwrap() as usize,
        aptt: aptt.unwrap(),
        supersedes,
    };
    s.record(event, state.config().estimation().domains.u_max)?;
    refresh_table(&state, &mut s).await?;
    Ok(reply(StatusCode::CREATED, &s, state.config(), json!({ "seq": seq })))
}

async fn post_dose(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let s = state.session(&id).await?;
    let map = body_object(&body, &["hour", "dose"])?;
    let mut f = Fields::new(&map);
    let hour = f.uint("hour", true);
    let dose = f.number("dose", true);
    f.finish()?;
    let mut s = s.lock().await;
    let seq = s.next_seq();
    let event = Event::Dose {
        seq,
        hour: hour.unwrap() as usize,
        dose: dose.unwrap(),
    };
    s.record(event, state.config().estimation().domains.u_max)?;
    refresh_table(&state, &mut s).await?;
    Ok(reply(StatusCode::CREATED, &s, state.config(), json!({ "seq": seq })))
}

fn no_readings() -> ApiError {
    ApiError::new(
        StatusCode::UNPROCESSABLE_ENTITY,
        "no_observations",
        "at least one aPTT reading is required",
    )
    .with("low_information", Value::Bool(true))
}

async fn get_estimate(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let s = state.session(&id).await?;
    let mut s = s.lock().await;
    let table = refresh_table(&state, &mut s).await?.ok_or_else(no_readings)?;
    let map: PatientParams<f64> = table.map_params();
    let obs = s.chart().to_series(None);
    Ok(reply(
        StatusCode::OK,
        &s,
        state.config(),
        json!({
            "noise_scale": obs.noise_scale,
            "map": map,
            "therapeutic_range": [1.5 * map.yb, 2.5 * map.yb],
            "table": table,
        }),
    ))
}

fn session_policy(state: &AppState, s: &Session, q: &HashMap<String, String>) -> Result<PolicySpec, ApiError> {
    let allowed = ["horizon", "loss"];
    let mut errors: Vec<FieldError> = q
        .keys()
        .filter(|k| !allowed.contains(&k.as_str()))
        .map(|k| FieldError {
            field: k.clone(),
            message: "unknown query parameter".into(),
        })
        .collect();
    let horizon = match q.get("horizon").map(|h| h.parse::<usize>()) {
        None => s.settings.horizon,
        Some(Ok(h)) if h >= 1 => h,
        Some(_) => {
            errors.push(FieldError {
                field: "horizon".into(),
                message: "must be a positive integer".into(),
            });
            1
        }
    };
    let loss = match q.get("loss").map(|l| l.parse::<LossKind>()) {
        None => s.settings.loss,
        Some(Ok(l)) => l,
        Some(Err(m)) => {
            errors.push(FieldError {
                field: "loss".into(),
                message: m,
            });
            s.settings.loss
        }
    };
    if !errors.is_empty() {
        return Err(ApiError::fields(errors));
    }
    let mut spec = state.config().policy(&s.settings.policy, Some(loss))?;
    spec.planner.horizon = horizon;
    spec.planner.validate().map_err(|e| ApiError::field("horizon", e.to_string()))?;
    Ok(spec)
}

#[derive(Default)]
struct Partial {
    stage: &'static str,
    table: Option<ScenarioTable<f64>>,
}

async fn get_recommendation(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let s = state.session(&id).await?;
    let mut s = s.lock().await;
    let spec = session_policy(&state, &s, &q)?;
    let cfg = state.config();
    if s.low_information(cfg) {
        let table = refresh_table(&state, &mut s).await?;
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "low_information",
            format!(
                "{} of {} required aPTT readings charted",
                s.n_readings(),
                cfg.min_observations.max(3)
            ),
        )
        .with(
            "detail",
            json!({ "low_information": true, "weights": table.as_ref().map(weights) }),
        ));
    }
    let chart = s.chart();
    let partial = Arc::new(std::sync::Mutex::new(Partial {
        stage: "estimation",
        table: None,
    }));
    let started = Instant::now();
    let task = {
        let (st, spec, partial) = (state.clone(), spec.clone(), partial.clone());
        tokio::task::spawn_blocking(move || -> Result<_, AppError> {
            let obs = chart.to_series(None);
            let table = engine::scenarios(&obs, &spec, st.config())?;
            {
                let mut p = partial.lock().unwrap();
                p.stage = "planning";
                p.table = Some(table.clone());
            }
            let plan = engine::plan(&chart, &obs, &table, &spec, st.config())?;
            Ok((obs.noise_scale, table, plan))
        })
    };
    let budget = Duration::from_secs_f64(cfg.plan_budget_s);
    let (noise_scale, table, plan) = match tokio::time::timeout(budget, task).await {
        Ok(joined) => joined.map_err(|e| ApiError::internal(e.to_string()))??,
        Err(_) => {
            let p = partial.lock().unwrap();
            return Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "budget_exceeded",
                format!("no plan within {} s", cfg.plan_budget_s),
            )
            .with(
                "partial",
                json!({
                    "stage": p.stage,
                    "elapsed_s": started.elapsed().as_secs_f64(),
                    "weights": p.table.as_ref().map(weights),
                    "diagnostics": p.table.as_ref().map(|t| &t.diagnostics),
                }),
            ));
        }
    };
    s.table = Some((s.revision, table.clone()));
    let seq = s.next_seq();
    let revision = s.revision;
    s.record(
        Event::Recommendation {
            seq,
            revision,
            policy: spec.name.clone(),
            loss: spec.loss.kind,
            horizon: spec.planner.horizon,
            doses: plan.doses.clone(),
            expected_loss: plan.expected_loss,
        },
        cfg.estimation().domains.u_max,
    )?;
    Ok(reply(
        StatusCode::OK,
        &s,
        cfg,
        json!({
            "seq": seq,
            "policy": spec.name,
            "loss": spec.loss.kind,
            "noise_scale": noise_scale,
            "elapsed_s": started.elapsed().as_secs_f64(),
            "plan": plan,
        }),
    ))
}

/// Shared by `/whatif` and `/trajectory`.
async fn whatif(state: &AppState, s: &mut Session, doses: Vec<f64>, loss: LossKind) -> ApiResult {
    let table = refresh_table(state, s).await?.ok_or_else(no_readings)?;
    let past = s.chart().to_series(None).doses;
    let r = engine::rollout(&table, &past, &doses, &LossSpec::new(loss), state.config())?;
    Ok(reply(
        StatusCode::OK,
        s,
        state.config(),
        json!({ "loss": loss, "rollout": r }),
    ))
}

async fn post_whatif(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let s = state.session(&id).await?;
    let map = body_object(&body, &["doses", "loss"])?;
    let mut f = Fields::new(&map);
    let doses = f.numbers("doses");
    let loss = f.string("loss").map(str::parse::<LossKind>);
    let u_max = state.config().estimation().domains.u_max;
    if let Some(d) = &doses {
        if d.is_empty() {
            f.fail("doses", "must not be empty");
        }
        if d.iter().any(|&x| !(0.0..=u_max).contains(&x)) {
            f.fail("doses", &format!("every dose must lie in [0, {u_max}] IU"));
        }
    }
    if let Some(Err(m)) = &loss {
        f.fail("loss", m);
    }
    f.finish()?;
    let mut s = s.lock().await;
    let loss = match loss {
        Some(Ok(l)) => l,
        _ => s.settings.loss,
    };
    whatif(&state, &mut s, doses.unwrap(), loss).await
}

async fn get_trajectory(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let s = state.session(&id).await?;
    let mut s = s.lock().await;
    let spec = session_policy(&state, &s, &q)?;
    whatif(&state, &mut s, vec![0.0; spec.planner.horizon], spec.loss.kind).await
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> Result<(), AppError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| AppError::Config(format!("cannot bind {addr}: {e}")))?;
    eprintln!("listening on {}", listener.local_addr().map_err(|e| AppError::Config(e.to_string()))?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| AppError::Config(e.to_string()))
}
