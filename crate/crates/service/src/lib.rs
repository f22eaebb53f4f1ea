//! HTTP + WebSocket control pad API over one robot session.

mod api;
pub mod events;
mod web;

use std::path::PathBuf;
use std::sync::{mpsc, Arc, Mutex};
use std::thread;

use axum::Router;
use brickpad_core::motorctl::{MotorHandle, MotorPort};
use brickpad_core::schema::{RunReport, StopToken};
use brickpad_core::session::{ListenerId, Phase, Session, SessionEvent};
use serde_json::Value;
use tokio::sync::broadcast;

pub use events::{ApiEvent, EventType, CLIENT_BUFFER};

/// Largest schema text accepted by `/api/schema/run`.
pub const MAX_SCHEMA_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// Motor power used by cw/ccw when the request has none.
    pub default_power: u8,
    pub brake_on_stop: bool,
    pub labels: [String; 3],
    /// Rate used to size schema turn timeouts.
    pub schema_rate: f64,
    /// Permissive CORS for a pad served from another origin.
    pub dev_cors: bool,
    /// Directory with the built pad, served for non-API paths.
    pub assets: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            default_power: brickpad_core::motorctl::DEFAULT_POWER,
            brake_on_stop: true,
            labels: MotorPort::ALL.map(|p| p.default_label().to_string()),
            schema_rate: 9.0,
            dev_cors: false,
            assets: None,
        }
    }
}

pub(crate) enum Pumped {
    Session(SessionEvent),
    Emit(EventType, Value),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub(crate) enum RunPhase {
    Running,
    Finished,
    Aborted,
}

pub(crate) struct SchemaRun {
    pub id: u64,
    pub name: String,
    pub phase: RunPhase,
    pub total: usize,
    pub current: Option<usize>,
    pub stop: StopToken,
    pub report: Option<RunReport>,
}

#[derive(Default)]
pub(crate) struct SchemaSlot {
    pub next_id: u64,
    pub run: Option<SchemaRun>,
}

pub(crate) struct Shared {
    pub session: Session,
    pub motors: Arc<Mutex<Vec<MotorHandle>>>,
    pub events: broadcast::Sender<ApiEvent>,
    pub pump: Mutex<mpsc::Sender<Pumped>>,
    pub schema: Mutex<SchemaSlot>,
    pub options: ServiceOptions,
    listener: ListenerId,
}

impl Shared {
    pub fn emit(&self, kind: EventType, payload: Value) {
        let _ = self.pump.lock().unwrap().send(Pumped::Emit(kind, payload));
    }
}

impl Drop for Shared {
    fn drop(&mut self) {
        self.session.unsubscribe(self.listener);
    }
}

/// The API bound to one session. Cheap to clone.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Shared>,
}

impl Service {
    pub fn new(session: Session, options: ServiceOptions) -> Self {
        let motors: Vec<MotorHandle> = MotorPort::ALL
            .iter()
            .zip(&options.labels)
            .map(|(&port, label)| {
                let mut m = MotorHandle::bound(port, session.clone());
                m.label = label.clone();
                m.brake_on_stop = options.brake_on_stop;
                let _ = m.set_power(options.default_power.into());
                m
            })
            .collect();
        let motors = Arc::new(Mutex::new(motors));
        let (events, _) = broadcast::channel(CLIENT_BUFFER);
        let (tx, rx) = mpsc::channel();

        let listener = {
            let tx = Mutex::new(tx.clone());
            session.subscribe(move |e| {
                let _ = tx.lock().unwrap().send(Pumped::Session(e.clone()));
            })
        };
        spawn_pump(rx, motors.clone(), events.clone());

        Self {
            shared: Arc::new(Shared {
                session,
                motors,
                events,
                pump: Mutex::new(tx),
                schema: Mutex::default(),
                options,
                listener,
            }),
        }
    }

    pub fn session(&self) -> &Session {
        &self.shared.session
    }

    /// A receiver for the event stream, as a WebSocket client would see it.
    pub fn subscribe(&self) -> broadcast::Receiver<ApiEvent> {
        self.shared.events.subscribe()
    }

    pub fn router(&self) -> Router {
        let router = api::routes(self.shared.clone());
        let router = match &self.shared.options.assets {
            Some(dir) => {
                let dir = dir.clone();
                router.fallback(move |method, uri| web::assets(dir.clone(), method, uri))
            }
            None => router,
        };
        if self.shared.options.dev_cors {
            router.layer(axum::middleware::from_fn(web::cors))
        } else {
            router
        }
    }
}

/// Single writer for the event stream: stamps `seq` and keeps motor latches
/// in step with telemetry.
fn spawn_pump(rx: mpsc::Receiver<Pumped>, motors: Arc<Mutex<Vec<MotorHandle>>>, out: broadcast::Sender<ApiEvent>) {
    thread::Builder::new()
        .name("brickpad-events".into())
        .spawn(move || {
            for (seq, item) in (1u64..).zip(rx) {
                let (kind, payload) = match item {
                    Pumped::Session(event) => {
                        match &event {
                            SessionEvent::Telemetry(t) => {
                                let mut motors = motors.lock().unwrap();
                                for (m, sample) in motors.iter_mut().zip(&t.motors) {
                                    m.observe(sample.state.run_state);
                                }
                            }
                            SessionEvent::Phase {
                                phase: Phase::Disconnected,
                                ..
                            } => motors.lock().unwrap().iter_mut().for_each(MotorHandle::clear_latch),
                            _ => {}
                        }
                        events::from_session(&event)
                    }
                    Pumped::Emit(kind, payload) => (kind, payload),
                };
                let _ = out.send(ApiEvent { seq, kind, payload });
            }
        })
        .expect("spawn event pump");
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Service,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, service.router())
        .with_graceful_shutdown(shutdown)
        .await
}
