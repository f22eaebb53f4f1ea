//! Connection lifecycle for one brick.
//!
//! A [`Session`] opens a link, learns the brick's sleep limit with a
//! KeepAlive handshake and then keeps the link alive. It can also poll
//! telemetry and send commands. The wire format carries no sequence numbers,
//! so replies are matched by opcode echo and at most one request is in
//! flight; callers queue in FIFO order.
//!
//! Phases only move along
//! `Disconnected -> Connecting -> Connected -> Disconnecting -> Disconnected`,
//! plus `Connecting -> Disconnected` when a connect fails.
//!
//! Periodic work (keep-alive, telemetry, reconnect) happens in
//! [`Session::tick`]. With `background` enabled a driver thread calls it
//! every 10 ms; otherwise the owner calls it, which is how virtual-time
//! tests stay deterministic.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread::{self, JoinHandle, ThreadId};
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::protocol::{
    self, decode_output_state_reply, encode_set_output_state, Opcode, OutputCounters, OutputState,
    ProtocolError, StatusCode, Telegram, MOTOR_PORT_COUNT,
};
use crate::transport::{self, LinkEndpoint, LinkOptions, SharedLink, TransportError};

const DRIVER_CADENCE: Duration = Duration::from_millis(10);
const HISTORY_LIMIT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Disconnected,
    Connecting,
    Connected,
    Disconnecting,
}

impl Phase {
    pub fn can_become(self, to: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, to),
            (Disconnected, Connecting)
                | (Connecting, Connected)
                | (Connecting, Disconnected)
                | (Connected, Disconnecting)
                | (Disconnecting, Disconnected)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub connect_timeout_ms: u64,
    pub request_timeout_ms: u64,
    /// Extra attempts for read-only queries after a timeout.
    pub query_retries: u32,
    pub poll_interval_ms: u64,
    /// Poll telemetry automatically every `poll_interval_ms`.
    pub polling: bool,
    pub keepalive: bool,
    /// Reconnect with exponential backoff after the link is lost.
    pub reconnect: bool,
    /// Run periodic work on a driver thread.
    pub background: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            connect_timeout_ms: 3000,
            request_timeout_ms: 1000,
            query_retries: 2,
            poll_interval_ms: 200,
            polling: true,
            keepalive: true,
            reconnect: false,
            background: true,
        }
    }
}

/// Keep-alive period for a brick that sleeps after `sleep_limit_ms` idle.
pub fn keepalive_interval_ms(sleep_limit_ms: u32) -> u64 {
    if sleep_limit_ms == 0 {
        30_000
    } else {
        (u64::from(sleep_limit_ms) / 2).max(1000)
    }
}

/// Doubling reconnect delay, 0.5 s up to 8 s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Backoff {
    next_ms: u64,
}

impl Backoff {
    pub const INITIAL_MS: u64 = 500;
    pub const MAX_MS: u64 = 8000;

    pub fn new() -> Self {
        Self {
            next_ms: Self::INITIAL_MS,
        }
    }

    pub fn next_delay(&mut self) -> u64 {
        let delay = self.next_ms;
        self.next_ms = (self.next_ms * 2).min(Self::MAX_MS);
        delay
    }

    pub fn reset(&mut self) {
        self.next_ms = Self::INITIAL_MS;
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session is {0}")]
    NotConnected(Phase),
    #[error("session is already {0}")]
    AlreadyActive(Phase),
    #[error("connect timed out")]
    ConnectTimeout,
    #[error("connect failed: {0}")]
    Connect(#[source] TransportError),
    #[error("handshake failed: {0}")]
    HandshakeFailed(String),
    #[error("request timed out")]
    RequestTimeout,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("link closed")]
    LinkClosed,
    #[error("telegram does not request a reply")]
    ReplyNotRequested,
    #[error("telegram requests a reply")]
    ReplyRequested,
    #[error("brick answered {0:?}")]
    Rejected(StatusCode),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub type Result<T, E = SessionError> = std::result::Result<T, E>;

/// Opens links for a session. Implemented for closures.
pub trait Connector: Send + Sync {
    fn open(&self, endpoint: &LinkEndpoint, timeout: Duration) -> transport::Result<SharedLink>;
}

impl<F> Connector for F
where
    F: Fn(&LinkEndpoint, Duration) -> transport::Result<SharedLink> + Send + Sync,
{
    fn open(&self, endpoint: &LinkEndpoint, timeout: Duration) -> transport::Result<SharedLink> {
        self(endpoint, timeout)
    }
}

/// Opens real links via [`transport::open_with`].
#[derive(Debug, Clone, Default)]
pub struct DefaultConnector {
    pub options: LinkOptions,
}

impl Connector for DefaultConnector {
    fn open(&self, endpoint: &LinkEndpoint, timeout: Duration) -> transport::Result<SharedLink> {
        transport::open_with(endpoint, timeout, &self.options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MotorTelemetry {
    pub state: OutputState,
    pub counters: OutputCounters,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Telemetry {
    pub motors: [MotorTelemetry; 3],
    pub battery_mv: u16,
    pub sample_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    Phase {
        phase: Phase,
        endpoint: Option<LinkEndpoint>,
        error: Option<String>,
    },
    Telemetry(Telemetry),
    KeepAlive {
        sleep_limit_ms: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionStatus {
    pub phase: Phase,
    pub endpoint: Option<LinkEndpoint>,
    pub sleep_limit_ms: Option<u32>,
    pub keepalive_interval_ms: Option<u64>,
    pub last_error: Option<String>,
    pub telemetry: Option<Telemetry>,
}

pub type ListenerId = u64;
type Listener = Arc<dyn Fn(&SessionEvent) + Send + Sync>;

/// Ticket lock: waiters are served in arrival order.
#[derive(Default)]
struct FifoLock {
    tickets: Mutex<(u64, u64)>,
    turn: Condvar,
}

struct FifoGuard<'a>(&'a FifoLock);

impl FifoLock {
    fn lock(&self) -> FifoGuard<'_> {
        let mut t = self.tickets.lock().unwrap();
        let mine = t.0;
        t.0 += 1;
        while t.1 != mine {
            t = self.turn.wait(t).unwrap();
        }
        FifoGuard(self)
    }

    fn try_lock(&self) -> Option<FifoGuard<'_>> {
        let mut t = self.tickets.lock().unwrap();
        if t.0 != t.1 {
            return None;
        }
        t.0 += 1;
        Some(FifoGuard(self))
    }
}

impl Drop for FifoGuard<'_> {
    fn drop(&mut self) {
        self.0.tickets.lock().unwrap().1 += 1;
        self.0.turn.notify_all();
    }
}

struct State {
    phase: Phase,
    endpoint: Option<LinkEndpoint>,
    link: Option<SharedLink>,
    sleep_limit_ms: Option<u32>,
    keepalive_interval_ms: Option<u64>,
    last_error: Option<String>,
    last_tx_ms: u64,
    last_poll_ms: u64,
    telemetry: Option<Telemetry>,
    history: Vec<(Phase, Phase)>,
    /// The user wants a live link; cleared by disconnect.
    want_connected: bool,
    reconnect_at_ms: Option<u64>,
    backoff: Backoff,
}

impl State {
    fn set_phase(&mut self, to: Phase, events: &mut Vec<SessionEvent>) {
        let from = self.phase;
        if from == to {
            return;
        }
        debug_assert!(from.can_become(to), "illegal transition {from} -> {to}");
        if self.history.len() == HISTORY_LIMIT {
            self.history.remove(0);
        }
        self.history.push((from, to));
        self.phase = to;
        events.push(SessionEvent::Phase {
            phase: to,
            endpoint: self.endpoint.clone(),
            error: self.last_error.clone(),
        });
    }
}

struct Driver {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<()>,
    thread: ThreadId,
}

struct Inner {
    config: SessionConfig,
    clock: Arc<dyn Clock>,
    connector: Arc<dyn Connector>,
    state: Mutex<State>,
    changed: Condvar,
    exchange: FifoLock,
    listeners: Mutex<Vec<(ListenerId, Listener)>>,
    next_listener: AtomicU64,
    driver: Mutex<Option<Driver>>,
}

/// Shared handle to one brick connection. Clones refer to the same session.
#[derive(Clone)]
pub struct Session {
    inner: Arc<Inner>,
}

/// Non-owning handle; does not keep the session alive.
#[derive(Clone)]
pub struct WeakSession(Weak<Inner>);

impl WeakSession {
    pub fn upgrade(&self) -> Option<Session> {
        self.0.upgrade().map(|inner| Session { inner })
    }
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let st = self.inner.state.lock().unwrap();
        f.debug_struct("Session")
            .field("phase", &st.phase)
            .field("endpoint", &st.endpoint)
            .finish()
    }
}

impl Session {
    /// A disconnected session using the wall clock and real links.
    pub fn new(config: SessionConfig) -> Self {
        Self::with_parts(config, Arc::new(SystemClock::new()), Arc::new(DefaultConnector::default()))
    }

    pub fn with_parts(config: SessionConfig, clock: Arc<dyn Clock>, connector: Arc<dyn Connector>) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                clock,
                connector,
                state: Mutex::new(State {
                    phase: Phase::Disconnected,
                    endpoint: None,
                    link: None,
                    sleep_limit_ms: None,
                    keepalive_interval_ms: None,
                    last_error: None,
                    last_tx_ms: 0,
                    last_poll_ms: 0,
                    telemetry: None,
                    history: Vec::new(),
                    want_connected: false,
                    reconnect_at_ms: None,
                    backoff: Backoff::new(),
                }),
                changed: Condvar::new(),
                exchange: FifoLock::default(),
                listeners: Mutex::new(Vec::new()),
                next_listener: AtomicU64::new(1),
                driver: Mutex::new(None),
            }),
        }
    }

    /// Create a session and connect it.
    pub fn open(endpoint: LinkEndpoint, config: SessionConfig) -> Result<Self> {
        let session = Self::new(config);
        session.connect(endpoint)?;
        Ok(session)
    }

    pub fn downgrade(&self) -> WeakSession {
        WeakSession(Arc::downgrade(&self.inner))
    }

    pub fn config(&self) -> &SessionConfig {
        &self.inner.config
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.inner.clock.clone()
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap()
    }

    pub fn phase(&self) -> Phase {
        self.state().phase
    }

    pub fn endpoint(&self) -> Option<LinkEndpoint> {
        self.state().endpoint.clone()
    }

    pub fn last_error(&self) -> Option<String> {
        self.state().last_error.clone()
    }

    pub fn keepalive_interval_ms(&self) -> Option<u64> {
        self.state().keepalive_interval_ms
    }

    pub fn sleep_limit_ms(&self) -> Option<u32> {
        self.state().sleep_limit_ms
    }

    /// Most recent telemetry sample, without touching the link.
    pub fn telemetry(&self) -> Option<Telemetry> {
        self.state().telemetry.clone()
    }

    /// Every phase transition so far, oldest first.
    pub fn transitions(&self) -> Vec<(Phase, Phase)> {
        self.state().history.clone()
    }

    pub fn status(&self) -> SessionStatus {
        let st = self.state();
        SessionStatus {
            phase: st.phase,
            endpoint: st.endpoint.clone(),
            sleep_limit_ms: st.sleep_limit_ms,
            keepalive_interval_ms: st.keepalive_interval_ms,
            last_error: st.last_error.clone(),
            telemetry: st.telemetry.clone(),
        }
    }

    /// Register a callback for session events.
    ///
    /// Callbacks run on whichever thread caused the event, sometimes while
    /// a request is in flight, so they must not call back into blocking
    /// session operations.
    pub fn subscribe(&self, listener: impl Fn(&SessionEvent) + Send + Sync + 'static) -> ListenerId {
        let id = self.inner.next_listener.fetch_add(1, Ordering::Relaxed);
        self.inner.listeners.lock().unwrap().push((id, Arc::new(listener)));
        id
    }

    pub fn unsubscribe(&self, id: ListenerId) {
        self.inner.listeners.lock().unwrap().retain(|(i, _)| *i != id);
    }

    fn emit(&self, events: Vec<SessionEvent>) {
        if events.is_empty() {
            return;
        }
        self.inner.changed.notify_all();
        let listeners: Vec<Listener> = self
            .inner
            .listeners
            .lock()
            .unwrap()
            .iter()
            .map(|(_, l)| l.clone())
            .collect();
        for event in &events {
            for listener in &listeners {
                listener(event);
            }
        }
    }

    /// Open the link and run the KeepAlive handshake.
    pub fn connect(&self, endpoint: LinkEndpoint) -> Result<()> {
        let mut events = Vec::new();
        {
            let mut st = self.state();
            if st.phase != Phase::Disconnected {
                return Err(SessionError::AlreadyActive(st.phase));
            }
            st.endpoint = Some(endpoint.clone());
            st.want_connected = true;
            st.reconnect_at_ms = None;
            st.backoff.reset();
            st.set_phase(Phase::Connecting, &mut events);
        }
        self.emit(events);
        let result = self.establish(&endpoint);
        if result.is_err() && !self.inner.config.reconnect {
            self.state().want_connected = false;
        }
        self.ensure_driver();
        result
    }

    /// Connecting -> Connected or Disconnected.
    fn establish(&self, endpoint: &LinkEndpoint) -> Result<()> {
        let config = &self.inner.config;
        let outcome = self
            .inner
            .connector
            .open(endpoint, Duration::from_millis(config.connect_timeout_ms))
            .map_err(|e| match e {
                TransportError::ConnectTimeout => SessionError::ConnectTimeout,
                other => SessionError::Connect(other),
            })
            .and_then(|link| match self.handshake(&link) {
                Ok(limit) => Ok((link, limit)),
                Err(e) => {
                    link.close();
                    Err(e)
                }
            });
        let mut events = Vec::new();
        let now = self.inner.clock.now_ms();
        let result = {
            let mut st = self.state();
            match outcome {
                Ok((link, sleep_limit)) => {
                    info!("connected to {endpoint}, brick sleep limit {sleep_limit} ms");
                    st.link = Some(link);
                    st.sleep_limit_ms = Some(sleep_limit);
                    st.keepalive_interval_ms = Some(keepalive_interval_ms(sleep_limit));
                    st.last_tx_ms = now;
                    st.last_poll_ms = now;
                    st.last_error = None;
                    st.reconnect_at_ms = None;
                    st.backoff.reset();
                    st.set_phase(Phase::Connected, &mut events);
                    Ok(())
                }
                Err(e) => {
                    warn!("connect to {endpoint} failed: {e}");
                    st.last_error = Some(e.to_string());
                    st.set_phase(Phase::Disconnected, &mut events);
                    if st.want_connected && self.inner.config.reconnect {
                        let delay = st.backoff.next_delay();
                        st.reconnect_at_ms = Some(now + delay);
                    }
                    Err(e)
                }
            }
        };
        self.emit(events);
        result
    }

    fn handshake(&self, link: &SharedLink) -> Result<u32> {
        let timeout = Duration::from_millis(self.inner.config.request_timeout_ms);
        let failed = |what: String| SessionError::HandshakeFailed(what);
        link.send_frame(&protocol::keep_alive(true).to_bytes())
            .map_err(|e| failed(e.to_string()))?;
        let reply = link.recv_frame(timeout).map_err(|e| failed(e.to_string()))?;
        let (status, payload) =
            protocol::decode_reply(&reply, Opcode::KeepAlive).map_err(|e| failed(e.to_string()))?;
        if !status.is_ok() {
            return Err(failed(format!("KeepAlive status {status:?}")));
        }
        protocol::decode_keep_alive_reply(&payload).map_err(|e| failed(e.to_string()))
    }

    fn connected_link(&self) -> Result<SharedLink> {
        let st = self.state();
        match (&st.link, st.phase) {
            (Some(link), Phase::Connected) => Ok(link.clone()),
            _ => Err(SessionError::NotConnected(st.phase)),
        }
    }

    fn note_tx(&self) {
        let now = self.inner.clock.now_ms();
        let mut st = self.state();
        st.last_tx_ms = st.last_tx_ms.max(now);
    }

    /// Send a with-reply telegram and wait for its reply. Returns the full
    /// reply bytes.
    pub fn request_raw(&self, telegram: &Telegram) -> Result<Vec<u8>> {
        if !telegram.wants_reply() {
            return Err(SessionError::ReplyNotRequested);
        }
        self.connected_link()?;
        let turn = self.inner.exchange.lock();
        self.exchange(turn, telegram)
    }

    /// Send a with-reply telegram and return the reply status and payload.
    pub fn request(&self, telegram: &Telegram) -> Result<(StatusCode, Vec<u8>)> {
        let reply = self.request_raw(telegram)?;
        Ok(split_reply(&reply))
    }

    /// Like [`Session::request`] but gives up at once if the link is busy.
    fn try_request(&self, telegram: &Telegram) -> Option<Result<(StatusCode, Vec<u8>)>> {
        let turn = self.inner.exchange.try_lock()?;
        Some(self.exchange(turn, telegram).map(|reply| split_reply(&reply)))
    }

    fn exchange(&self, _turn: FifoGuard<'_>, telegram: &Telegram) -> Result<Vec<u8>> {
        let link = self.connected_link()?;
        let bytes = telegram.to_bytes();
        let timeout = Duration::from_millis(self.inner.config.request_timeout_ms);
        let retries = match telegram.opcode() {
            Some(op) if op.is_idempotent() => self.inner.config.query_retries,
            _ => 0,
        };
        for attempt in 0..=retries {
            if attempt > 0 {
                debug!("retrying opcode 0x{:02X} (attempt {})", telegram.opcode_byte(), attempt + 1);
            }
            if let Err(e) = link.send_frame(&bytes) {
                return Err(self.lost(&link, e));
            }
            self.note_tx();
            match link.recv_frame(timeout) {
                Ok(reply) => {
                    return match protocol::decode_reply_for(&reply, telegram.opcode_byte()) {
                        Ok(_) => Ok(reply),
                        Err(e) => {
                            let reason = format!("{e} (reply {})", protocol::format_hex(&reply));
                            self.teardown(&link, format!("protocol violation: {reason}"));
                            Err(SessionError::ProtocolViolation(reason))
                        }
                    };
                }
                Err(TransportError::RecvTimeout) => continue,
                Err(e) => return Err(self.lost(&link, e)),
            }
        }
        Err(SessionError::RequestTimeout)
    }

    fn lost(&self, link: &SharedLink, err: TransportError) -> SessionError {
        self.teardown(link, format!("link lost: {err}"));
        SessionError::LinkClosed
    }

    /// Fire-and-forget a no-reply telegram.
    pub fn send(&self, telegram: &Telegram) -> Result<()> {
        if telegram.wants_reply() {
            return Err(SessionError::ReplyRequested);
        }
        self.connected_link()?;
        let _turn = self.inner.exchange.lock();
        let link = self.connected_link()?;
        link.send_frame(&telegram.to_bytes()).map_err(|e| self.lost(&link, e))?;
        self.note_tx();
        Ok(())
    }

    /// Drop a failed link. The caller holds the exchange turn.
    fn teardown(&self, link: &SharedLink, reason: String) {
        let mut events = Vec::new();
        {
            let mut st = self.state();
            let current = st.link.as_ref().is_some_and(|l| Arc::ptr_eq(l, link));
            if !current || st.phase != Phase::Connected {
                return;
            }
            warn!("{reason}");
            st.last_error = Some(reason);
            st.set_phase(Phase::Disconnecting, &mut events);
        }
        self.emit(events);
        if !link.is_closed() {
            coast_all(link);
        }
        link.close();
        let mut events = Vec::new();
        {
            let now = self.inner.clock.now_ms();
            let mut st = self.state();
            st.link = None;
            st.set_phase(Phase::Disconnected, &mut events);
            if st.want_connected && self.inner.config.reconnect {
                let delay = st.backoff.next_delay();
                st.reconnect_at_ms = Some(now + delay);
            } else {
                st.want_connected = false;
            }
        }
        self.emit(events);
    }

    /// Stop periodic work, coast every motor and close the link.
    /// Safe to call in any phase, any number of times.
    pub fn disconnect(&self) {
        let was_connected = {
            let mut st = self.state();
            while matches!(st.phase, Phase::Connecting | Phase::Disconnecting) {
                st = self
                    .inner
                    .changed
                    .wait_timeout(st, Duration::from_millis(50))
                    .unwrap()
                    .0;
            }
            st.want_connected = false;
            st.reconnect_at_ms = None;
            st.phase == Phase::Connected
        };
        self.stop_driver();
        if !was_connected {
            return;
        }
        let _turn = self.inner.exchange.lock();
        let mut events = Vec::new();
        let link = {
            let mut st = self.state();
            if st.phase != Phase::Connected {
                return;
            }
            st.set_phase(Phase::Disconnecting, &mut events);
            st.link.clone()
        };
        self.emit(events);
        if let Some(link) = link {
            coast_all(&link);
            link.close();
        }
        let mut events = Vec::new();
        {
            let mut st = self.state();
            st.link = None;
            st.set_phase(Phase::Disconnected, &mut events);
        }
        info!("disconnected");
        self.emit(events);
    }

    /// Read every motor and the battery, and publish the sample.
    pub fn poll_telemetry(&self) -> Result<Telemetry> {
        self.poll_with(|t| Some(self.request(t)))
            .expect("blocking poll always completes")
    }

    fn poll_with(
        &self,
        mut request: impl FnMut(&Telegram) -> Option<Result<(StatusCode, Vec<u8>)>>,
    ) -> Option<Result<Telemetry>> {
        let mut motors = [MotorTelemetry::default(); 3];
        for port in 0..MOTOR_PORT_COUNT {
            let telegram = protocol::get_output_state(port).expect("valid port");
            let result = request(&telegram)?.and_then(|(status, payload)| {
                ok_status(status)?;
                Ok(decode_output_state_reply(&payload)?)
            });
            match result {
                Ok((state, counters)) => motors[port as usize] = MotorTelemetry { state, counters },
                Err(e) => return Some(Err(e)),
            }
        }
        let battery = request(&protocol::get_battery_level())?.and_then(|(status, payload)| {
            ok_status(status)?;
            Ok(protocol::decode_battery_reply(&payload)?)
        });
        let battery_mv = match battery {
            Ok(mv) => mv,
            Err(e) => return Some(Err(e)),
        };
        let now = self.inner.clock.now_ms();
        let telemetry = {
            let mut st = self.state();
            let last = st.telemetry.as_ref().map_or(0, |t| t.sample_time_ms);
            let telemetry = Telemetry {
                motors,
                battery_mv,
                sample_time_ms: now.max(last),
            };
            st.telemetry = Some(telemetry.clone());
            st.last_poll_ms = now;
            telemetry
        };
        self.emit(vec![SessionEvent::Telemetry(telemetry.clone())]);
        Some(Ok(telemetry))
    }

    pub fn battery_mv(&self) -> Result<u16> {
        let (status, payload) = self.request(&protocol::get_battery_level())?;
        ok_status(status)?;
        Ok(protocol::decode_battery_reply(&payload)?)
    }

    pub fn output_state(&self, port: u8) -> Result<(OutputState, OutputCounters)> {
        let (status, payload) = self.request(&protocol::get_output_state(port)?)?;
        ok_status(status)?;
        Ok(decode_output_state_reply(&payload)?)
    }

    /// Run due periodic work: link-loss detection, keep-alive, telemetry
    /// and reconnect. Never blocks behind a pending request.
    pub fn tick(&self) {
        let now = self.inner.clock.now_ms();
        let config = &self.inner.config;
        let (phase, link, keepalive_due, poll_due, reconnect) = {
            let st = self.state();
            let keepalive_due = config.keepalive
                && st
                    .keepalive_interval_ms
                    .is_some_and(|interval| now.saturating_sub(st.last_tx_ms) >= interval);
            let poll_due = config.polling && now.saturating_sub(st.last_poll_ms) >= config.poll_interval_ms;
            let reconnect = match (st.want_connected, st.reconnect_at_ms, &st.endpoint) {
                (true, Some(at), Some(endpoint)) if now >= at => Some(endpoint.clone()),
                _ => None,
            };
            (st.phase, st.link.clone(), keepalive_due, poll_due, reconnect)
        };
        match (phase, link) {
            (Phase::Connected, Some(link)) => {
                if link.is_closed() {
                    if let Some(_turn) = self.inner.exchange.try_lock() {
                        self.teardown(&link, "link closed by peer".into());
                    }
                    return;
                }
                if keepalive_due {
                    if let Some(result) = self.try_request(&protocol::keep_alive(true)) {
                        match result.and_then(|(status, payload)| {
                            ok_status(status)?;
                            Ok(protocol::decode_keep_alive_reply(&payload)?)
                        }) {
                            Ok(limit) => {
                                {
                                    let mut st = self.state();
                                    st.sleep_limit_ms = Some(limit);
                                    st.keepalive_interval_ms = Some(keepalive_interval_ms(limit));
                                }
                                self.emit(vec![SessionEvent::KeepAlive { sleep_limit_ms: limit }]);
                            }
                            Err(e) => warn!("keep-alive failed: {e}"),
                        }
                    }
                }
                if poll_due && self.phase() == Phase::Connected {
                    if let Some(Err(e)) = self.poll_with(|t| self.try_request(t)) {
                        warn!("telemetry poll failed: {e}");
                    }
                }
            }
            (Phase::Disconnected, _) => {
                if let Some(endpoint) = reconnect {
                    let mut events = Vec::new();
                    {
                        let mut st = self.state();
                        if st.phase != Phase::Disconnected || !st.want_connected {
                            return;
                        }
                        st.reconnect_at_ms = None;
                        st.set_phase(Phase::Connecting, &mut events);
                    }
                    self.emit(events);
                    info!("reconnecting to {endpoint}");
                    let _ = self.establish(&endpoint);
                }
            }
            _ => {}
        }
    }

    fn ensure_driver(&self) {
        if !self.inner.config.background {
            return;
        }
        let mut driver = self.inner.driver.lock().unwrap();
        if driver.as_ref().is_some_and(|d| !d.handle.is_finished()) {
            return;
        }
        let stop = Arc::new(AtomicBool::new(false));
        let weak: Weak<Inner> = Arc::downgrade(&self.inner);
        let flag = stop.clone();
        let handle = thread::Builder::new()
            .name("session-driver".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    thread::sleep(DRIVER_CADENCE);
                    let Some(inner) = weak.upgrade() else { break };
                    Session { inner }.tick();
                }
            })
            .expect("spawn session driver");
        let thread = handle.thread().id();
        *driver = Some(Driver { stop, handle, thread });
    }

    fn stop_driver(&self) {
        let Some(driver) = self.inner.driver.lock().unwrap().take() else {
            return;
        };
        driver.stop.store(true, Ordering::SeqCst);
        if driver.thread != thread::current().id() {
            let _ = driver.handle.join();
        }
    }
}

fn split_reply(reply: &[u8]) -> (StatusCode, Vec<u8>) {
    (StatusCode::from_code(reply[2]), reply[3..].to_vec())
}

fn ok_status(status: StatusCode) -> Result<()> {
    if status.is_ok() {
        Ok(())
    } else {
        Err(SessionError::Rejected(status))
    }
}

/// Best-effort Coast image to every motor.
fn coast_all(link: &SharedLink) {
    for port in 0..MOTOR_PORT_COUNT {
        let telegram = encode_set_output_state(&OutputState::coast(port), false).expect("valid port");
        if let Err(e) = link.send_frame(&telegram.to_bytes()) {
            debug!("coast on port {port} not sent: {e}");
        }
    }
}
