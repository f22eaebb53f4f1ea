//! Event stream: one ordered sequence of [`ApiEvent`]s fanned out to every
//! WebSocket client.

use brickpad_core::motorctl::MotorPort;
use brickpad_core::protocol::RunState;
use brickpad_core::session::{Phase, SessionEvent, Telemetry};
use serde::Serialize;
use serde_json::{json, Value};

/// Buffered events per client before it is dropped as too slow.
pub const CLIENT_BUFFER: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    Telemetry,
    Link,
    Schema,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiEvent {
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: EventType,
    pub payload: Value,
}

pub(crate) fn run_state_name(state: RunState) -> &'static str {
    match state {
        RunState::Idle => "Idle",
        RunState::RampUp => "RampUp",
        RunState::Running => "Running",
        RunState::RampDown => "RampDown",
    }
}

pub(crate) fn telemetry_payload(t: &Telemetry) -> Value {
    let motors: Vec<Value> = t
        .motors
        .iter()
        .zip(MotorPort::ALL)
        .map(|(m, port)| {
            json!({
                "port": port,
                "power": m.state.power,
                "mode": m.state.mode.bits(),
                "run_state": run_state_name(m.state.run_state),
                "tacho": m.counters.tacho_count,
                "block_tacho": m.counters.block_tacho,
                "rotation": m.counters.rotation_count,
            })
        })
        .collect();
    json!({
        "sample_time_ms": t.sample_time_ms,
        "battery_mv": t.battery_mv,
        "motors": motors,
    })
}

pub(crate) fn link_payload(phase: Phase, endpoint: Option<String>, error: Option<String>) -> Value {
    json!({ "phase": phase, "endpoint": endpoint, "error": error })
}

/// Session events as (type, payload).
pub(crate) fn from_session(event: &SessionEvent) -> (EventType, Value) {
    match event {
        SessionEvent::Phase { phase, endpoint, error } => (
            EventType::Link,
            link_payload(*phase, endpoint.as_ref().map(ToString::to_string), error.clone()),
        ),
        SessionEvent::Telemetry(t) => (EventType::Telemetry, telemetry_payload(t)),
        SessionEvent::KeepAlive { sleep_limit_ms } => (
            EventType::Log,
            json!({ "level": "debug", "message": format!("keep-alive, brick sleep limit {sleep_limit_ms} ms") }),
        ),
    }
}
