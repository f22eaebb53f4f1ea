//! Deterministic virtual brick.
//!
//! [`VirtualBrick`] answers telegrams exactly as the codec expects and
//! simulates three motors, four scripted sensor ports, ten mailboxes, the
//! battery and the idle sleep timer. Time only moves through
//! [`VirtualBrick::step`], so identical schedules give identical snapshots.

mod motor;
mod server;
mod sim;

pub use server::{spawn_stepper, EmuServer, EventSink, Stepper};
pub use sim::SimClock;

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::protocol::{
    encode_output_state_reply, InputValues, Opcode, OutputCounters, OutputState, StatusCode,
    Telegram, TelegramKind, ALL_MOTORS, MAILBOX_COUNT, MESSAGE_READ_DATA_LEN, MOTOR_PORT_COUNT,
    SENSOR_PORT_COUNT,
};

use motor::VirtualMotor;

/// Brick shared between a stepping thread and link handlers.
pub type SharedBrick = Arc<Mutex<VirtualBrick>>;

const JOURNAL_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmulatorError {
    #[error("sensor trace times must be strictly increasing (point {0})")]
    UnsortedTrace(usize),
    #[error("no sensor port {0}")]
    BadPort(u8),
    #[error("bad sensor trace: {0}")]
    BadTrace(String),
}

/// Physical constants and defaults of the emulated brick.
#[derive(Debug, Clone, PartialEq)]
pub struct BrickConfig {
    /// Motor speed per unit of power, in degrees per second.
    pub deg_per_sec_per_power: f64,
    pub coast_time_constant_s: f64,
    /// Coasting speeds below this snap to zero.
    pub coast_cutoff_dps: f64,
    pub battery_mv: u16,
    /// Idle time before the brick sleeps; 0 disables sleeping.
    pub sleep_limit_ms: u32,
    pub subtick_ms: u64,
    pub mailbox_capacity: usize,
}

impl Default for BrickConfig {
    fn default() -> Self {
        Self {
            deg_per_sec_per_power: 9.0,
            coast_time_constant_s: 0.3,
            coast_cutoff_dps: 5.0,
            battery_mv: 7400,
            sleep_limit_ms: 600_000,
            subtick_ms: 10,
            mailbox_capacity: 5,
        }
    }
}

/// One scripted sensor sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TracePoint {
    pub time_ms: u64,
    pub raw: u16,
    pub scaled: i16,
}

/// Parse `time_ms,raw,scaled` lines. A non-numeric first line is taken as
/// a header.
pub fn parse_trace_csv(text: &str) -> Result<Vec<TracePoint>, EmulatorError> {
    let mut points = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [t, raw, scaled] => t
                .parse::<u64>()
                .ok()
                .zip(raw.parse::<u16>().ok())
                .zip(scaled.parse::<i16>().ok())
                .map(|((time_ms, raw), scaled)| TracePoint {
                    time_ms,
                    raw,
                    scaled,
                }),
            _ => None,
        };
        match parsed {
            Some(point) => points.push(point),
            None if index == 0 && points.is_empty() => continue,
            None => return Err(EmulatorError::BadTrace(format!("line {}: `{line}`", index + 1))),
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Default, PartialEq)]
struct SensorPort {
    sensor_type: u8,
    sensor_mode: u8,
    trace: Vec<TracePoint>,
}

/// Something that happened on the brick, stamped with virtual time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrickEvent {
    pub t: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", content = "details", rename_all = "snake_case")]
pub enum EventKind {
    OutputSet {
        port: u8,
        power: i8,
        mode: u8,
        regulation: u8,
        turn_ratio: i8,
        run_state: u8,
        tacho_limit: u32,
    },
    MotorHalted {
        port: u8,
        block_tacho: i32,
    },
    PositionReset {
        port: u8,
        relative: bool,
    },
    InputModeSet {
        port: u8,
        sensor_type: u8,
        sensor_mode: u8,
    },
    MessageWritten {
        mailbox: u8,
        len: usize,
        dropped_oldest: bool,
    },
    MessageTaken {
        mailbox: u8,
        len: usize,
    },
    Tone {
        frequency_hz: u16,
        duration_ms: u16,
    },
    KeepAlive,
    Rejected {
        opcode: u8,
        status: u8,
    },
    BrickSlept,
    BrickWoke,
}

impl BrickEvent {
    /// One JSON log line: `{"t":..,"event":..,"details":{..}}`.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotorSnapshot {
    pub state: OutputState,
    pub counters: OutputCounters,
    pub velocity: f64,
}

/// Immutable copy of brick state for assertions.
#[derive(Debug, Clone, PartialEq)]
pub struct BrickSnapshot {
    pub clock_ms: u64,
    pub motors: [MotorSnapshot; 3],
    pub mailboxes: Vec<Vec<Vec<u8>>>,
    pub battery_mv: u16,
    pub sleep_limit_ms: u32,
    pub asleep: bool,
    pub last_rx_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualBrick {
    config: BrickConfig,
    motors: [VirtualMotor; 3],
    sensors: [SensorPort; 4],
    mailboxes: Vec<VecDeque<Vec<u8>>>,
    clock_ms: u64,
    last_rx_ms: u64,
    asleep: bool,
    journal: VecDeque<BrickEvent>,
}

impl Default for VirtualBrick {
    fn default() -> Self {
        Self::new(BrickConfig::default())
    }
}

impl VirtualBrick {
    pub fn new(config: BrickConfig) -> Self {
        Self {
            config,
            motors: [VirtualMotor::new(0), VirtualMotor::new(1), VirtualMotor::new(2)],
            sensors: Default::default(),
            mailboxes: vec![VecDeque::new(); MAILBOX_COUNT as usize],
            clock_ms: 0,
            last_rx_ms: 0,
            asleep: false,
            journal: VecDeque::new(),
        }
    }

    pub fn shared(self) -> SharedBrick {
        Arc::new(Mutex::new(self))
    }

    pub fn config(&self) -> &BrickConfig {
        &self.config
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn is_asleep(&self) -> bool {
        self.asleep
    }

    pub fn set_sleep_limit(&mut self, ms: u32) {
        self.config.sleep_limit_ms = ms;
    }

    pub fn set_battery(&mut self, mv: u16) {
        self.config.battery_mv = mv;
    }

    /// Power the brick back up after it slept.
    pub fn wake(&mut self) {
        if self.asleep {
            self.asleep = false;
            self.last_rx_ms = self.clock_ms;
            self.record(EventKind::BrickWoke);
        }
    }

    fn record(&mut self, kind: EventKind) {
        if self.journal.len() == JOURNAL_CAPACITY {
            self.journal.pop_front();
        }
        self.journal.push_back(BrickEvent {
            t: self.clock_ms,
            kind,
        });
    }

    /// Drain every event recorded since the last call.
    pub fn take_events(&mut self) -> Vec<BrickEvent> {
        self.journal.drain(..).collect()
    }

    /// Events recorded and not yet drained.
    pub fn events(&self) -> impl Iterator<Item = &BrickEvent> {
        self.journal.iter()
    }

    pub fn load_sensor_trace(&mut self, port: u8, trace: Vec<TracePoint>) -> Result<(), EmulatorError> {
        if port >= SENSOR_PORT_COUNT {
            return Err(EmulatorError::BadPort(port));
        }
        if let Some(i) = trace.windows(2).position(|w| w[1].time_ms <= w[0].time_ms) {
            return Err(EmulatorError::UnsortedTrace(i + 1));
        }
        self.sensors[port as usize].trace = trace;
        Ok(())
    }

    fn input_values(&self, port: u8) -> InputValues {
        let sensor = &self.sensors[port as usize];
        let upto = sensor.trace.partition_point(|p| p.time_ms <= self.clock_ms);
        let mut values = InputValues {
            port,
            sensor_type: sensor.sensor_type,
            sensor_mode: sensor.sensor_mode,
            ..InputValues::default()
        };
        if let Some(point) = upto.checked_sub(1).map(|i| sensor.trace[i]) {
            values.valid = true;
            values.raw = point.raw;
            values.normalized = point.raw;
            values.scaled = point.scaled;
            values.calibrated_value = point.scaled;
        }
        values
    }

    pub fn snapshot(&self) -> BrickSnapshot {
        let motor = |m: &VirtualMotor| MotorSnapshot {
            state: m.state,
            counters: m.counters(),
            velocity: m.velocity(),
        };
        BrickSnapshot {
            clock_ms: self.clock_ms,
            motors: [motor(&self.motors[0]), motor(&self.motors[1]), motor(&self.motors[2])],
            mailboxes: self
                .mailboxes
                .iter()
                .map(|q| q.iter().cloned().collect())
                .collect(),
            battery_mv: self.config.battery_mv,
            sleep_limit_ms: self.config.sleep_limit_ms,
            asleep: self.asleep,
            last_rx_ms: self.last_rx_ms,
        }
    }

    /// Advance virtual time by `dt_ms`, in sub-ticks aligned to the
    /// sub-tick grid. Returns the events raised while stepping.
    pub fn step(&mut self, dt_ms: u64) -> Vec<BrickEvent> {
        let first = self.journal.len();
        let end = self.clock_ms + dt_ms;
        let grid = self.config.subtick_ms.max(1);
        while self.clock_ms < end {
            let next = ((self.clock_ms / grid + 1) * grid).min(end);
            let sub = next - self.clock_ms;
            for motor in &mut self.motors {
                motor.advance(sub, &self.config);
            }
            self.clock_ms = next;
            // limits and the sleep timer are evaluated on grid boundaries
            // only, so results do not depend on how time was split up
            if !next.is_multiple_of(grid) {
                continue;
            }
            for port in 0..self.motors.len() {
                if self.motors[port].check_limit() {
                    let block_tacho = self.motors[port].counters().block_tacho;
                    self.record(EventKind::MotorHalted {
                        port: port as u8,
                        block_tacho,
                    });
                }
            }
            let limit = u64::from(self.config.sleep_limit_ms);
            if limit > 0 && !self.asleep && self.clock_ms - self.last_rx_ms > limit {
                self.asleep = true;
                for motor in &mut self.motors {
                    motor.power_off();
                }
                self.record(EventKind::BrickSlept);
            }
        }
        self.journal.iter().skip(first).cloned().collect()
    }

    /// Execute one telegram. Returns reply bytes iff a reply was requested
    /// and the telegram could be parsed far enough to echo its opcode.
    pub fn handle_telegram(&mut self, bytes: &[u8]) -> Option<Vec<u8>> {
        self.last_rx_ms = self.clock_ms;
        if self.asleep {
            return None;
        }
        let telegram = Telegram::decode(bytes).ok()?;
        if telegram.kind() == TelegramKind::Reply {
            return None;
        }
        let (status, body) = match telegram.opcode() {
            Some(opcode) => self.execute(opcode, telegram.payload()),
            None => (StatusCode::UnknownCommand, Vec::new()),
        };
        if !status.is_ok() {
            self.record(EventKind::Rejected {
                opcode: telegram.opcode_byte(),
                status: status.code(),
            });
        }
        if !telegram.wants_reply() {
            return None;
        }
        let reply = Telegram::reply(telegram.opcode_byte(), status, &body).expect("reply fits");
        Some(reply.to_bytes())
    }

    fn execute(&mut self, opcode: Opcode, args: &[u8]) -> (StatusCode, Vec<u8>) {
        use StatusCode::{BadArguments, OutOfRange};

        if let Some(len) = opcode.request_len() {
            if args.len() != len {
                return (BadArguments, Vec::new());
            }
        }
        let ok = |body: Vec<u8>| (StatusCode::Ok, body);
        match opcode {
            Opcode::SetOutputState => {
                let Ok(state) = OutputState::from_bytes(args) else {
                    return (BadArguments, Vec::new());
                };
                if (state.port >= MOTOR_PORT_COUNT && state.port != ALL_MOTORS)
                    || !(-100..=100).contains(&state.power)
                    || !(-100..=100).contains(&state.turn_ratio)
                {
                    return (OutOfRange, Vec::new());
                }
                let ports = if state.port == ALL_MOTORS { 0..3 } else { state.port..state.port + 1 };
                for port in ports {
                    self.motors[port as usize].command(state, port);
                    self.record(EventKind::OutputSet {
                        port,
                        power: state.power,
                        mode: state.mode.bits(),
                        regulation: state.regulation as u8,
                        turn_ratio: state.turn_ratio,
                        run_state: state.run_state as u8,
                        tacho_limit: state.tacho_limit,
                    });
                }
                ok(Vec::new())
            }
            Opcode::GetOutputState => {
                let port = args[0];
                if port >= MOTOR_PORT_COUNT {
                    return (OutOfRange, Vec::new());
                }
                let motor = &self.motors[port as usize];
                ok(encode_output_state_reply(&motor.state, &motor.counters()).to_vec())
            }
            Opcode::SetInputMode => {
                let (port, sensor_type, sensor_mode) = (args[0], args[1], args[2]);
                if port >= SENSOR_PORT_COUNT {
                    return (OutOfRange, Vec::new());
                }
                let sensor = &mut self.sensors[port as usize];
                sensor.sensor_type = sensor_type;
                sensor.sensor_mode = sensor_mode;
                self.record(EventKind::InputModeSet {
                    port,
                    sensor_type,
                    sensor_mode,
                });
                ok(Vec::new())
            }
            Opcode::GetInputValues => {
                let port = args[0];
                if port >= SENSOR_PORT_COUNT {
                    return (OutOfRange, Vec::new());
                }
                ok(self.input_values(port).to_bytes().to_vec())
            }
            Opcode::MessageWrite => self.message_write(args),
            Opcode::MessageRead => {
                let (remote, local, remove) = (args[0], args[1], args[2]);
                if remote >= MAILBOX_COUNT || remove > 1 {
                    return (OutOfRange, Vec::new());
                }
                let queue = &mut self.mailboxes[remote as usize];
                let message = if remove == 1 { queue.pop_front() } else { queue.front().cloned() };
                let Some(message) = message else {
                    return (StatusCode::MailboxEmpty, Vec::new());
                };
                if remove == 1 {
                    self.record(EventKind::MessageTaken {
                        mailbox: remote,
                        len: message.len(),
                    });
                }
                let mut body = vec![0u8; 2 + MESSAGE_READ_DATA_LEN];
                body[0] = local;
                body[1] = message.len() as u8 + 1;
                body[2..2 + message.len()].copy_from_slice(&message);
                ok(body)
            }
            Opcode::ResetMotorPosition => {
                let (port, relative) = (args[0], args[1]);
                if port >= MOTOR_PORT_COUNT {
                    return (OutOfRange, Vec::new());
                }
                if relative > 1 {
                    return (BadArguments, Vec::new());
                }
                self.motors[port as usize].reset_position(relative == 1);
                self.record(EventKind::PositionReset {
                    port,
                    relative: relative == 1,
                });
                ok(Vec::new())
            }
            Opcode::GetBatteryLevel => ok(self.config.battery_mv.to_le_bytes().to_vec()),
            Opcode::KeepAlive => {
                self.record(EventKind::KeepAlive);
                ok(self.config.sleep_limit_ms.to_le_bytes().to_vec())
            }
            Opcode::PlayTone => {
                let frequency_hz = u16::from_le_bytes([args[0], args[1]]);
                let duration_ms = u16::from_le_bytes([args[2], args[3]]);
                self.record(EventKind::Tone {
                    frequency_hz,
                    duration_ms,
                });
                ok(Vec::new())
            }
        }
    }

    fn message_write(&mut self, args: &[u8]) -> (StatusCode, Vec<u8>) {
        let [mailbox, size, rest @ ..] = args else {
            return (StatusCode::BadArguments, Vec::new());
        };
        let size = *size as usize;
        if size == 0 || rest.len() != size || rest[size - 1] != 0 {
            return (StatusCode::BadArguments, Vec::new());
        }
        if *mailbox >= MAILBOX_COUNT {
            return (StatusCode::OutOfRange, Vec::new());
        }
        let data = rest[..size - 1].to_vec();
        let len = data.len();
        let queue = &mut self.mailboxes[*mailbox as usize];
        let dropped_oldest = queue.len() >= self.config.mailbox_capacity;
        if dropped_oldest {
            queue.pop_front();
        }
        queue.push_back(data);
        self.record(EventKind::MessageWritten {
            mailbox: *mailbox,
            len,
            dropped_oldest,
        });
        (StatusCode::Ok, Vec::new())
    }
}
