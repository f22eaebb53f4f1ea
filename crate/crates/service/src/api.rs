use std::sync::Arc;
use std::thread;

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use brickpad_core::motorctl::{MotorError, MotorHandle, MotorPort};
use brickpad_core::protocol::{format_hex, parse_hex, Telegram};
use brickpad_core::schema::{parse_named, run_schema, RunEvent, RunOptions};
use brickpad_core::session::{Phase, SessionError};
use brickpad_core::LinkEndpoint;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use crate::events::{run_state_name, EventType};
use crate::{ApiEvent, RunPhase, SchemaRun, Shared, MAX_SCHEMA_BYTES};

type Ctx = State<Arc<Shared>>;
type ApiResult = Result<Json<Value>, ApiError>;

pub(crate) fn routes(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/connect", post(connect))
        .route("/api/disconnect", post(disconnect))
        .route("/api/motor/:port/:action", post(motor))
        .route("/api/raw", post(raw))
        .route("/api/schema/run", post(schema_run))
        .route("/api/schema/stop", post(schema_stop))
        .route("/api/schema/status", get(schema_status))
        .route("/api/events", get(events))
        .with_state(shared)
}

#[derive(Debug)]
pub(crate) struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn unprocessable(message: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn conflict(message: impl ToString) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::NotConnected(_) | SessionError::AlreadyActive(_) => StatusCode::CONFLICT,
            SessionError::ConnectTimeout | SessionError::RequestTimeout => StatusCode::GATEWAY_TIMEOUT,
            SessionError::ReplyNotRequested | SessionError::ReplyRequested | SessionError::Protocol(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::BAD_GATEWAY,
        };
        Self::new(status, e)
    }
}

impl From<MotorError> for ApiError {
    fn from(e: MotorError) -> Self {
        match e {
            MotorError::Session(e) => e.into(),
            MotorError::NotBound => Self::conflict(e),
            MotorError::InvalidPower(_) | MotorError::InvalidSpeed(_) => Self::unprocessable(e),
        }
    }
}

/// Parse an optional JSON body; empty means absent.
fn body<T: DeserializeOwned>(bytes: &[u8]) -> Result<Option<T>, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(None);
    }
    serde_json::from_slice(bytes)
        .map(Some)
        .map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn required<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    body(bytes)?.ok_or_else(|| ApiError::bad_request("missing body"))
}

fn require_connected(shared: &Shared) -> Result<(), ApiError> {
    match shared.session.phase() {
        Phase::Connected => Ok(()),
        phase => Err(ApiError::conflict(format!("session is {phase}"))),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?
}

fn motor_json(m: &MotorHandle) -> Value {
    json!({
        "port": m.port(),
        "label": m.label,
        "power": m.power(),
        "is_running": m.is_running(),
    })
}

pub(crate) fn status_json(shared: &Shared) -> Value {
    let status = shared.session.status();
    let motors: Vec<Value> = {
        let motors = shared.motors.lock().unwrap();
        motors
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut v = motor_json(m);
                let sample = status.telemetry.as_ref().map(|t| t.motors[i]);
                v["tacho"] = json!(sample.map_or(0, |s| s.counters.tacho_count));
                v["block_tacho"] = json!(sample.map_or(0, |s| s.counters.block_tacho));
                v["run_state"] = json!(sample.map(|s| run_state_name(s.state.run_state)));
                v
            })
            .collect()
    };
    json!({
        "phase": status.phase,
        "endpoint": status.endpoint.map(|e| e.to_string()),
        "battery_mv": status.telemetry.as_ref().map(|t| t.battery_mv),
        "motors": motors,
        "keepalive_ms": status.keepalive_interval_ms,
        "sleep_limit_ms": status.sleep_limit_ms,
        "last_error": status.last_error,
    })
}

async fn status(State(shared): Ctx) -> Json<Value> {
    Json(status_json(&shared))
}

#[derive(Deserialize)]
struct ConnectBody {
    endpoint: Option<String>,
}

async fn connect(State(shared): Ctx, bytes: Bytes) -> ApiResult {
    let requested = body::<ConnectBody>(&bytes)?.and_then(|b| b.endpoint);
    let endpoint: LinkEndpoint = match requested {
        Some(text) => text.parse().map_err(ApiError::unprocessable)?,
        None => shared
            .session
            .endpoint()
            .ok_or_else(|| ApiError::unprocessable("no endpoint given"))?,
    };
    let phase = shared.session.phase();
    if phase != Phase::Disconnected {
        return Err(ApiError::conflict(format!("session is {phase}")));
    }
    let worker = shared.clone();
    blocking(move || Ok(worker.session.connect(endpoint)?)).await?;
    Ok(Json(status_json(&shared)))
}

async fn disconnect(State(shared): Ctx) -> Json<Value> {
    if let Some(run) = shared.schema.lock().unwrap().run.as_ref() {
        run.stop.stop();
    }
    let worker = shared.clone();
    let _ = blocking(move || {
        worker.session.disconnect();
        Ok(())
    })
    .await;
    Json(status_json(&shared))
}

#[derive(Deserialize)]
struct PowerBody {
    power: Option<i32>,
}

#[derive(Deserialize)]
struct TurnBody {
    power: i32,
    #[serde(default)]
    degrees: u32,
}

enum Action {
    Cw(Option<i32>),
    Ccw(Option<i32>),
    Stop,
    Relax,
    Turn(TurnBody),
}

fn parse_port(text: &str) -> Result<MotorPort, ApiError> {
    match text.to_ascii_uppercase().as_str() {
        "A" => Ok(MotorPort::A),
        "B" => Ok(MotorPort::B),
        "C" => Ok(MotorPort::C),
        _ => Err(ApiError::unprocessable(format!("unknown port {text:?}"))),
    }
}

async fn motor(State(shared): Ctx, Path((port, action)): Path<(String, String)>, bytes: Bytes) -> ApiResult {
    let port = parse_port(&port)?;
    let power = || body::<PowerBody>(&bytes).map(|b| b.and_then(|b| b.power));
    let action = match action.as_str() {
        "cw" => Action::Cw(power()?),
        "ccw" => Action::Ccw(power()?),
        "stop" => Action::Stop,
        "relax" => Action::Relax,
        "turn" => Action::Turn(required(&bytes)?),
        _ => return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown action {action:?}"))),
    };
    require_connected(&shared)?;
    let worker = shared.clone();
    let motor = blocking(move || {
        let mut motors = worker.motors.lock().unwrap();
        let m = &mut motors[usize::from(port.index())];
        match action {
            Action::Cw(power) | Action::Ccw(power) if power.is_some() => m.set_power(power.unwrap())?,
            _ => {}
        }
        match action {
            Action::Cw(_) => m.turn_cw()?,
            Action::Ccw(_) => m.turn_ccw()?,
            Action::Stop => m.stop()?,
            Action::Relax => m.relax()?,
            Action::Turn(t) => m.turn(t.power, t.degrees)?,
        }
        Ok(motor_json(m))
    })
    .await?;
    Ok(Json(motor))
}

#[derive(Deserialize)]
struct RawBody {
    hex: String,
}

async fn raw(State(shared): Ctx, bytes: Bytes) -> ApiResult {
    let RawBody { hex } = required(&bytes)?;
    let data = parse_hex(&hex).map_err(ApiError::bad_request)?;
    let telegram = Telegram::decode(&data).map_err(ApiError::bad_request)?;
    require_connected(&shared)?;
    let worker = shared.clone();
    let reply = blocking(move || {
        if telegram.wants_reply() {
            Ok(Some(format_hex(&worker.session.request_raw(&telegram)?)))
        } else {
            worker.session.send(&telegram)?;
            Ok(None)
        }
    })
    .await?;
    Ok(Json(json!({ "sent_hex": format_hex(&data), "reply_hex": reply })))
}

#[derive(Deserialize)]
struct SchemaBody {
    text: String,
    name: Option<String>,
}

async fn schema_run(State(shared): Ctx, bytes: Bytes) -> ApiResult {
    // JSON escaping can only grow the text, so the raw body bounds it too
    if bytes.len() > 2 * MAX_SCHEMA_BYTES + 1024 {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "schema text exceeds 64 KiB"));
    }
    let SchemaBody { text, name } = required(&bytes)?;
    if text.len() > MAX_SCHEMA_BYTES {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "schema text exceeds 64 KiB"));
    }
    let name = name.unwrap_or_else(|| "schema".into());
    let schema = parse_named(&name, &text).map_err(|e| ApiError {
        status: StatusCode::UNPROCESSABLE_ENTITY,
        body: json!({ "error": e.to_string(), "line": e.line }),
    })?;
    require_connected(&shared)?;

    let options = RunOptions {
        rate_deg_per_s_per_power: shared.options.schema_rate,
        ..RunOptions::default()
    };
    let id = {
        let mut slot = shared.schema.lock().unwrap();
        if matches!(&slot.run, Some(r) if r.phase == RunPhase::Running) {
            return Err(ApiError::conflict("a schema is already running"));
        }
        slot.next_id += 1;
        let id = slot.next_id;
        slot.run = Some(SchemaRun {
            id,
            name: schema.name.clone(),
            phase: RunPhase::Running,
            total: schema.expanded_len() as usize,
            current: None,
            stop: options.stop.clone(),
            report: None,
        });
        id
    };

    let worker = shared.clone();
    thread::Builder::new()
        .name(format!("schema-{id}"))
        .spawn(move || {
            let clock = worker.session.clock();
            let report = run_schema(&schema, &worker.session, &*clock, &options, &mut |event| match event {
                RunEvent::Started { total } => {
                    worker.emit(
                        EventType::Schema,
                        json!({ "run_id": id, "state": "started", "name": schema.name, "total": total }),
                    );
                }
                RunEvent::StepStarted { index, step } => {
                    if let Some(run) = worker.schema.lock().unwrap().run.as_mut() {
                        run.current = Some(index);
                    }
                    worker.emit(
                        EventType::Schema,
                        json!({ "run_id": id, "state": "step", "index": index, "step": step.to_string() }),
                    );
                }
                RunEvent::StepFinished(outcome) => {
                    worker.emit(
                        EventType::Schema,
                        json!({ "run_id": id, "state": "step_finished", "outcome": outcome }),
                    );
                }
                RunEvent::Finished(_) => {}
            });
            let phase = if report.is_complete() {
                RunPhase::Finished
            } else {
                // the interpreter coasted every port on the way out
                worker
                    .motors
                    .lock()
                    .unwrap()
                    .iter_mut()
                    .for_each(MotorHandle::clear_latch);
                RunPhase::Aborted
            };
            worker.emit(
                EventType::Schema,
                json!({ "run_id": id, "state": phase, "report": report }),
            );
            if let Some(run) = worker.schema.lock().unwrap().run.as_mut() {
                run.phase = phase;
                run.report = Some(report);
            }
        })
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;

    Ok(Json(json!({ "run_id": id })))
}

async fn schema_stop(State(shared): Ctx) -> ApiResult {
    let slot = shared.schema.lock().unwrap();
    match &slot.run {
        Some(run) if run.phase == RunPhase::Running => {
            run.stop.stop();
            Ok(Json(json!({ "run_id": run.id, "stopping": true })))
        }
        _ => Err(ApiError::conflict("no schema is running")),
    }
}

async fn schema_status(State(shared): Ctx) -> Json<Value> {
    let slot = shared.schema.lock().unwrap();
    Json(match &slot.run {
        None => json!({ "state": "idle", "run_id": null }),
        Some(run) => json!({
            "run_id": run.id,
            "name": run.name,
            "state": run.phase,
            "total": run.total,
            "current": run.current,
            "report": run.report,
        }),
    })
}

async fn events(State(shared): Ctx, ws: WebSocketUpgrade) -> Response {
    let rx = shared.events.subscribe();
    ws.on_upgrade(move |socket| pump_client(socket, rx))
}

async fn pump_client(mut socket: WebSocket, mut rx: tokio::sync::broadcast::Receiver<ApiEvent>) {
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => return,
                Some(Ok(_)) => {}
            },
            event = rx.recv() => match event {
                Ok(event) => {
                    let text = serde_json::to_string(&event).expect("events serialize");
                    if socket.send(Message::Text(text)).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(missed)) => {
                    log::warn!("event client fell {missed} events behind, dropping it");
                    let frame = CloseFrame {
                        code: 1008,
                        reason: "too slow, refetch /api/status".into(),
                    };
                    let _ = socket.send(Message::Close(Some(frame))).await;
                    return;
                }
                Err(RecvError::Closed) => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            },
        }
    }
}
