//! Direct-command telegrams exchanged with the brick.
//!
//! Every telegram on the wire is `[kind][opcode][payload...]`, at most 64
//! bytes in total. Multi-byte integers are little-endian and signed fields
//! are two's-complement.
//!
//! ```text
//! 0x00 <opcode> <args...>        direct command, reply requested
//! 0x80 <opcode> <args...>        direct command, no reply
//! 0x02 <opcode> <status> <...>   reply (opcode echoes the request)
//! ```
//!
//! Encoders only accept the opcodes in [`Opcode`]. [`Telegram::decode`]
//! accepts any opcode byte so that the emulator can answer unknown commands.

mod hex;

pub use hex::{format_hex, parse_hex};

use bitflags::bitflags;
use thiserror::Error;

/// Largest serialized telegram.
pub const MAX_TELEGRAM_LEN: usize = 64;

/// Largest payload after the kind and opcode bytes.
pub const MAX_PAYLOAD_LEN: usize = MAX_TELEGRAM_LEN - 2;

/// Largest MessageWrite body.
pub const MAX_MESSAGE_LEN: usize = 57;

/// Number of mailboxes on the brick (0..=9).
pub const MAILBOX_COUNT: u8 = 10;

/// Number of motor output ports (A, B, C).
pub const MOTOR_PORT_COUNT: u8 = 3;

/// Port value addressing every motor at once in SetOutputState.
pub const ALL_MOTORS: u8 = 0xFF;

/// Number of sensor input ports.
pub const SENSOR_PORT_COUNT: u8 = 4;

/// GetOutputState reply payload length (after the status byte).
pub const OUTPUT_STATE_REPLY_LEN: usize = 22;

/// GetInputValues reply payload length (after the status byte).
pub const INPUT_VALUES_REPLY_LEN: usize = 13;

/// Zero-padded data area of a MessageRead reply.
pub const MESSAGE_READ_DATA_LEN: usize = 59;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("message of {0} bytes exceeds the 57-byte limit")]
    MessageTooLong(usize),
    #[error("text is not 7-bit ASCII")]
    NonAsciiText,
    #[error("field `{field}` out of range: {value}")]
    OutOfRangeField { field: &'static str, value: i64 },
    #[error("{opcode:?} takes {expected} argument bytes, got {actual}")]
    ArgLengthMismatch {
        opcode: Opcode,
        expected: usize,
        actual: usize,
    },
    #[error("{0:?} is not a simple query")]
    NotASimpleQuery(Opcode),
    #[error("payload of {0} bytes does not fit in a telegram")]
    PayloadTooLong(usize),
    #[error("telegram truncated")]
    Truncated,
    #[error("unexpected trailing bytes: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unknown telegram kind 0x{0:02X}")]
    UnknownKind(u8),
    #[error("not a reply (kind byte 0x{0:02X})")]
    NotAReply(u8),
    #[error("reply opcode 0x{actual:02X} does not match request 0x{expected:02X}")]
    OpcodeMismatch { expected: u8, actual: u8 },
    #[error("invalid value 0x{value:02X} for `{field}`")]
    InvalidField { field: &'static str, value: u8 },
    #[error("empty line")]
    EmptyLine,
    #[error("bad hex token `{0}`")]
    BadHexToken(String),
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TelegramKind {
    DirectWithReply = 0x00,
    Reply = 0x02,
    DirectNoReply = 0x80,
}

impl TelegramKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x00 => Some(Self::DirectWithReply),
            0x02 => Some(Self::Reply),
            0x80 => Some(Self::DirectNoReply),
            _ => None,
        }
    }

    /// Kind for a direct command.
    pub fn direct(want_reply: bool) -> Self {
        if want_reply {
            Self::DirectWithReply
        } else {
            Self::DirectNoReply
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    PlayTone = 0x03,
    SetOutputState = 0x04,
    SetInputMode = 0x05,
    GetOutputState = 0x06,
    GetInputValues = 0x07,
    MessageWrite = 0x09,
    ResetMotorPosition = 0x0A,
    GetBatteryLevel = 0x0B,
    KeepAlive = 0x0D,
    MessageRead = 0x13,
}

impl Opcode {
    pub const ALL: [Opcode; 10] = [
        Opcode::PlayTone,
        Opcode::SetOutputState,
        Opcode::SetInputMode,
        Opcode::GetOutputState,
        Opcode::GetInputValues,
        Opcode::MessageWrite,
        Opcode::ResetMotorPosition,
        Opcode::GetBatteryLevel,
        Opcode::KeepAlive,
        Opcode::MessageRead,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.code() == code)
    }

    /// Fixed request argument length, for opcodes with a fixed layout.
    /// MessageWrite is variable and returns `None`.
    pub fn request_len(self) -> Option<usize> {
        match self {
            Opcode::PlayTone => Some(4),
            Opcode::SetOutputState => Some(10),
            Opcode::SetInputMode => Some(3),
            Opcode::GetOutputState => Some(1),
            Opcode::GetInputValues => Some(1),
            Opcode::MessageWrite => None,
            Opcode::ResetMotorPosition => Some(2),
            Opcode::GetBatteryLevel => Some(0),
            Opcode::KeepAlive => Some(0),
            Opcode::MessageRead => Some(3),
        }
    }

    /// Read-only queries that may be replayed safely.
    pub fn is_idempotent(self) -> bool {
        matches!(
            self,
            Opcode::GetOutputState
                | Opcode::GetInputValues
                | Opcode::GetBatteryLevel
                | Opcode::KeepAlive
        )
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct MotorMode: u8 {
        const MOTOR_ON = 0x01;
        const BRAKE = 0x02;
        const REGULATED = 0x04;
    }
}

impl MotorMode {
    pub const NONE: MotorMode = MotorMode::empty();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum RegulationMode {
    #[default]
    Idle = 0x00,
    MotorSpeed = 0x01,
    MotorSync = 0x02,
}

impl RegulationMode {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x00 => Some(Self::Idle),
            0x01 => Some(Self::MotorSpeed),
            0x02 => Some(Self::MotorSync),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum RunState {
    #[default]
    Idle = 0x00,
    RampUp = 0x10,
    Running = 0x20,
    RampDown = 0x40,
}

impl RunState {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x00 => Some(Self::Idle),
            0x10 => Some(Self::RampUp),
            0x20 => Some(Self::Running),
            0x40 => Some(Self::RampDown),
            _ => None,
        }
    }
}

/// Status byte carried as the first payload byte of every reply.
///
/// Codes outside the table are kept verbatim in `Other` so that replies from
/// real firmware still decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatusCode {
    Ok,
    Pending,
    MailboxEmpty,
    UnknownCommand,
    OutOfRange,
    BadArguments,
    Other(u8),
}

impl StatusCode {
    pub fn code(self) -> u8 {
        match self {
            StatusCode::Ok => 0x00,
            StatusCode::Pending => 0x20,
            StatusCode::MailboxEmpty => 0x40,
            StatusCode::UnknownCommand => 0xBE,
            StatusCode::OutOfRange => 0xC0,
            StatusCode::BadArguments => 0xFF,
            StatusCode::Other(code) => code,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            0x00 => StatusCode::Ok,
            0x20 => StatusCode::Pending,
            0x40 => StatusCode::MailboxEmpty,
            0xBE => StatusCode::UnknownCommand,
            0xC0 => StatusCode::OutOfRange,
            0xFF => StatusCode::BadArguments,
            other => StatusCode::Other(other),
        }
    }

    pub fn is_ok(self) -> bool {
        self == StatusCode::Ok
    }
}

/// Clamp an integer percentage into the signed-byte range [-100, 100].
pub fn clamp_percent(value: i32) -> i8 {
    value.clamp(-100, 100) as i8
}

/// Complete motor command state, as carried by SetOutputState.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OutputState {
    pub port: u8,
    pub power: i8,
    pub mode: MotorMode,
    pub regulation: RegulationMode,
    pub turn_ratio: i8,
    pub run_state: RunState,
    /// Degrees to rotate before stopping; 0 runs forever.
    pub tacho_limit: u32,
}

impl Default for OutputState {
    fn default() -> Self {
        Self::coast(0)
    }
}

impl OutputState {
    /// All-zero state: motor de-energized and free to spin down.
    pub const fn coast(port: u8) -> Self {
        Self {
            port,
            power: 0,
            mode: MotorMode::NONE,
            regulation: RegulationMode::Idle,
            turn_ratio: 0,
            run_state: RunState::Idle,
            tacho_limit: 0,
        }
    }

    /// Powered stop holding the shaft at zero speed.
    pub const fn brake(port: u8) -> Self {
        Self {
            port,
            power: 0,
            mode: MotorMode::MOTOR_ON
                .union(MotorMode::BRAKE)
                .union(MotorMode::REGULATED),
            regulation: RegulationMode::MotorSpeed,
            turn_ratio: 0,
            run_state: RunState::Running,
            tacho_limit: 0,
        }
    }

    /// Speed-regulated run at `power` for `degrees` (0 = unlimited).
    pub fn turn(port: u8, power: i32, degrees: u32) -> Self {
        Self {
            port,
            power: clamp_percent(power),
            mode: MotorMode::MOTOR_ON | MotorMode::REGULATED,
            regulation: RegulationMode::MotorSpeed,
            turn_ratio: 0,
            run_state: RunState::Running,
            tacho_limit: degrees,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.port >= MOTOR_PORT_COUNT && self.port != ALL_MOTORS {
            return Err(ProtocolError::OutOfRangeField {
                field: "port",
                value: self.port.into(),
            });
        }
        for (field, value) in [("power", self.power), ("turn_ratio", self.turn_ratio)] {
            if !(-100..=100).contains(&value) {
                return Err(ProtocolError::OutOfRangeField {
                    field,
                    value: value.into(),
                });
            }
        }
        Ok(())
    }

    /// The 10-byte SetOutputState body.
    pub fn to_bytes(&self) -> [u8; 10] {
        let limit = self.tacho_limit.to_le_bytes();
        [
            self.port,
            self.power as u8,
            self.mode.bits(),
            self.regulation as u8,
            self.turn_ratio as u8,
            self.run_state as u8,
            limit[0],
            limit[1],
            limit[2],
            limit[3],
        ]
    }

    /// Parse a SetOutputState body. Field values are checked against their
    /// enumerations; the port range is not.
    pub fn from_bytes(body: &[u8]) -> Result<Self> {
        exact_len(body, 10)?;
        let mode = MotorMode::from_bits(body[2]).ok_or(ProtocolError::InvalidField {
            field: "mode",
            value: body[2],
        })?;
        let regulation =
            RegulationMode::from_code(body[3]).ok_or(ProtocolError::InvalidField {
                field: "regulation",
                value: body[3],
            })?;
        let run_state = RunState::from_code(body[5]).ok_or(ProtocolError::InvalidField {
            field: "run_state",
            value: body[5],
        })?;
        Ok(Self {
            port: body[0],
            power: body[1] as i8,
            mode,
            regulation,
            turn_ratio: body[4] as i8,
            run_state,
            tacho_limit: u32::from_le_bytes([body[6], body[7], body[8], body[9]]),
        })
    }
}

/// Rotation counters reported alongside an [`OutputState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct OutputCounters {
    pub tacho_count: i32,
    pub block_tacho: i32,
    pub rotation_count: i32,
}

/// One sensor reading. When `valid` is false the readings are meaningless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct InputValues {
    pub port: u8,
    pub valid: bool,
    pub calibrated: bool,
    pub sensor_type: u8,
    pub sensor_mode: u8,
    pub raw: u16,
    pub normalized: u16,
    pub scaled: i16,
    pub calibrated_value: i16,
}

impl InputValues {
    pub fn to_bytes(&self) -> [u8; INPUT_VALUES_REPLY_LEN] {
        let mut out = [0u8; INPUT_VALUES_REPLY_LEN];
        out[0] = self.port;
        out[1] = self.valid as u8;
        out[2] = self.calibrated as u8;
        out[3] = self.sensor_type;
        out[4] = self.sensor_mode;
        out[5..7].copy_from_slice(&self.raw.to_le_bytes());
        out[7..9].copy_from_slice(&self.normalized.to_le_bytes());
        out[9..11].copy_from_slice(&self.scaled.to_le_bytes());
        out[11..13].copy_from_slice(&self.calibrated_value.to_le_bytes());
        out
    }
}

/// One telegram: kind, opcode byte and payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Telegram {
    kind: TelegramKind,
    opcode: u8,
    payload: Vec<u8>,
}

impl Telegram {
    pub fn new(kind: TelegramKind, opcode: Opcode, payload: Vec<u8>) -> Result<Self> {
        Self::with_opcode_byte(kind, opcode.code(), payload)
    }

    fn with_opcode_byte(kind: TelegramKind, opcode: u8, payload: Vec<u8>) -> Result<Self> {
        if payload.len() > MAX_PAYLOAD_LEN {
            return Err(ProtocolError::PayloadTooLong(payload.len()));
        }
        Ok(Self {
            kind,
            opcode,
            payload,
        })
    }

    /// Build a reply echoing `opcode`, with `status` as payload byte 0.
    pub fn reply(opcode: u8, status: StatusCode, body: &[u8]) -> Result<Self> {
        let mut payload = Vec::with_capacity(1 + body.len());
        payload.push(status.code());
        payload.extend_from_slice(body);
        Self::with_opcode_byte(TelegramKind::Reply, opcode, payload)
    }

    /// Parse wire bytes. The opcode byte is not checked against [`Opcode`].
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 {
            return Err(ProtocolError::Truncated);
        }
        if bytes.len() > MAX_TELEGRAM_LEN {
            return Err(ProtocolError::PayloadTooLong(bytes.len() - 2));
        }
        let kind = TelegramKind::from_code(bytes[0]).ok_or(ProtocolError::UnknownKind(bytes[0]))?;
        Ok(Self {
            kind,
            opcode: bytes[1],
            payload: bytes[2..].to_vec(),
        })
    }

    pub fn kind(&self) -> TelegramKind {
        self.kind
    }

    /// The opcode, if it is one this crate knows.
    pub fn opcode(&self) -> Option<Opcode> {
        Opcode::from_code(self.opcode)
    }

    pub fn opcode_byte(&self) -> u8 {
        self.opcode
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// The same direct command with the reply flag set or cleared.
    /// Replies are returned unchanged.
    pub fn requesting_reply(mut self, want_reply: bool) -> Self {
        if self.kind != TelegramKind::Reply {
            self.kind = TelegramKind::direct(want_reply);
        }
        self
    }

    pub fn wants_reply(&self) -> bool {
        self.kind == TelegramKind::DirectWithReply
    }

    pub fn len(&self) -> usize {
        2 + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.kind.code());
        out.push(self.opcode);
        out.extend_from_slice(&self.payload);
        out
    }
}

fn exact_len(bytes: &[u8], expected: usize) -> Result<()> {
    match bytes.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(ProtocolError::Truncated),
        std::cmp::Ordering::Equal => Ok(()),
        std::cmp::Ordering::Greater => Err(ProtocolError::LengthMismatch {
            expected,
            actual: bytes.len(),
        }),
    }
}

fn check_mailbox(mailbox: u8) -> Result<()> {
    if mailbox >= MAILBOX_COUNT {
        return Err(ProtocolError::OutOfRangeField {
            field: "mailbox",
            value: mailbox.into(),
        });
    }
    Ok(())
}

/// MessageWrite without reply: `[mailbox][len+1][data...][0x00]`.
pub fn encode_message_write(mailbox: u8, data: &[u8]) -> Result<Telegram> {
    if data.len() > MAX_MESSAGE_LEN {
        return Err(ProtocolError::MessageTooLong(data.len()));
    }
    check_mailbox(mailbox)?;
    let mut payload = Vec::with_capacity(3 + data.len());
    payload.push(mailbox);
    payload.push(data.len() as u8 + 1);
    payload.extend_from_slice(data);
    payload.push(0x00);
    Telegram::new(TelegramKind::DirectNoReply, Opcode::MessageWrite, payload)
}

/// MessageWrite of an ASCII string.
pub fn encode_message_write_text(mailbox: u8, text: &str) -> Result<Telegram> {
    if !text.is_ascii() {
        return Err(ProtocolError::NonAsciiText);
    }
    encode_message_write(mailbox, text.as_bytes())
}

pub fn encode_set_output_state(state: &OutputState, want_reply: bool) -> Result<Telegram> {
    state.validate()?;
    Telegram::new(
        TelegramKind::direct(want_reply),
        Opcode::SetOutputState,
        state.to_bytes().to_vec(),
    )
}

/// Any fixed-layout command other than SetOutputState and MessageWrite,
/// with caller-supplied argument bytes.
pub fn encode_simple_query(opcode: Opcode, args: &[u8], want_reply: bool) -> Result<Telegram> {
    if matches!(opcode, Opcode::SetOutputState | Opcode::MessageWrite) {
        return Err(ProtocolError::NotASimpleQuery(opcode));
    }
    let expected = opcode.request_len().unwrap_or_default();
    if args.len() != expected {
        return Err(ProtocolError::ArgLengthMismatch {
            opcode,
            expected,
            actual: args.len(),
        });
    }
    Telegram::new(TelegramKind::direct(want_reply), opcode, args.to_vec())
}

fn check_motor_port(port: u8) -> Result<()> {
    if port >= MOTOR_PORT_COUNT {
        return Err(ProtocolError::OutOfRangeField {
            field: "port",
            value: port.into(),
        });
    }
    Ok(())
}

fn check_sensor_port(port: u8) -> Result<()> {
    if port >= SENSOR_PORT_COUNT {
        return Err(ProtocolError::OutOfRangeField {
            field: "port",
            value: port.into(),
        });
    }
    Ok(())
}

pub fn get_output_state(port: u8) -> Result<Telegram> {
    check_motor_port(port)?;
    encode_simple_query(Opcode::GetOutputState, &[port], true)
}

pub fn get_input_values(port: u8) -> Result<Telegram> {
    check_sensor_port(port)?;
    encode_simple_query(Opcode::GetInputValues, &[port], true)
}

pub fn set_input_mode(port: u8, sensor_type: u8, sensor_mode: u8, want_reply: bool) -> Result<Telegram> {
    check_sensor_port(port)?;
    encode_simple_query(
        Opcode::SetInputMode,
        &[port, sensor_type, sensor_mode],
        want_reply,
    )
}

pub fn get_battery_level() -> Telegram {
    encode_simple_query(Opcode::GetBatteryLevel, &[], true).expect("fixed layout")
}

pub fn keep_alive(want_reply: bool) -> Telegram {
    encode_simple_query(Opcode::KeepAlive, &[], want_reply).expect("fixed layout")
}

pub fn reset_motor_position(port: u8, relative: bool, want_reply: bool) -> Result<Telegram> {
    check_motor_port(port)?;
    encode_simple_query(
        Opcode::ResetMotorPosition,
        &[port, relative as u8],
        want_reply,
    )
}

pub fn message_read(remote_inbox: u8, local_inbox: u8, remove: bool) -> Result<Telegram> {
    check_mailbox(remote_inbox)?;
    encode_simple_query(
        Opcode::MessageRead,
        &[remote_inbox, local_inbox, remove as u8],
        true,
    )
}

pub fn play_tone(frequency_hz: u16, duration_ms: u16, want_reply: bool) -> Telegram {
    let f = frequency_hz.to_le_bytes();
    let d = duration_ms.to_le_bytes();
    encode_simple_query(Opcode::PlayTone, &[f[0], f[1], d[0], d[1]], want_reply)
        .expect("fixed layout")
}

/// Check that `bytes` is a reply to `expected` and split off its status.
pub fn decode_reply(bytes: &[u8], expected: Opcode) -> Result<(StatusCode, Vec<u8>)> {
    decode_reply_for(bytes, expected.code())
}

/// Like [`decode_reply`] for a raw opcode byte, which need not be known.
pub fn decode_reply_for(bytes: &[u8], expected: u8) -> Result<(StatusCode, Vec<u8>)> {
    let Some(&kind) = bytes.first() else {
        return Err(ProtocolError::Truncated);
    };
    if kind != TelegramKind::Reply.code() {
        return Err(ProtocolError::NotAReply(kind));
    }
    let Some(&opcode) = bytes.get(1) else {
        return Err(ProtocolError::Truncated);
    };
    if opcode != expected {
        return Err(ProtocolError::OpcodeMismatch { expected, actual: opcode });
    }
    let Some(&status) = bytes.get(2) else {
        return Err(ProtocolError::Truncated);
    };
    Ok((StatusCode::from_code(status), bytes[3..].to_vec()))
}

pub fn decode_output_state_reply(payload: &[u8]) -> Result<(OutputState, OutputCounters)> {
    exact_len(payload, OUTPUT_STATE_REPLY_LEN)?;
    let state = OutputState::from_bytes(&payload[..10])?;
    let word = |at: usize| i32::from_le_bytes([payload[at], payload[at + 1], payload[at + 2], payload[at + 3]]);
    let counters = OutputCounters {
        tacho_count: word(10),
        block_tacho: word(14),
        rotation_count: word(18),
    };
    Ok((state, counters))
}

/// Inverse of [`decode_output_state_reply`].
pub fn encode_output_state_reply(state: &OutputState, counters: &OutputCounters) -> [u8; OUTPUT_STATE_REPLY_LEN] {
    let mut out = [0u8; OUTPUT_STATE_REPLY_LEN];
    out[..10].copy_from_slice(&state.to_bytes());
    out[10..14].copy_from_slice(&counters.tacho_count.to_le_bytes());
    out[14..18].copy_from_slice(&counters.block_tacho.to_le_bytes());
    out[18..22].copy_from_slice(&counters.rotation_count.to_le_bytes());
    out
}

pub fn decode_input_values_reply(payload: &[u8]) -> Result<InputValues> {
    exact_len(payload, INPUT_VALUES_REPLY_LEN)?;
    let u16_at = |at: usize| u16::from_le_bytes([payload[at], payload[at + 1]]);
    Ok(InputValues {
        port: payload[0],
        valid: payload[1] != 0,
        calibrated: payload[2] != 0,
        sensor_type: payload[3],
        sensor_mode: payload[4],
        raw: u16_at(5),
        normalized: u16_at(7),
        scaled: u16_at(9) as i16,
        calibrated_value: u16_at(11) as i16,
    })
}

/// Battery level in millivolts.
pub fn decode_battery_reply(payload: &[u8]) -> Result<u16> {
    exact_len(payload, 2)?;
    Ok(u16::from_le_bytes([payload[0], payload[1]]))
}

/// Sleep limit in milliseconds; 0 means the brick never sleeps.
pub fn decode_keep_alive_reply(payload: &[u8]) -> Result<u32> {
    exact_len(payload, 4)?;
    Ok(u32::from_le_bytes([payload[0], payload[1], payload[2], payload[3]]))
}

/// Returns the local inbox and the message bytes, without the trailing null.
pub fn decode_message_read_reply(payload: &[u8]) -> Result<(u8, Vec<u8>)> {
    exact_len(payload, 2 + MESSAGE_READ_DATA_LEN)?;
    let size = payload[1] as usize;
    if size > MESSAGE_READ_DATA_LEN {
        return Err(ProtocolError::InvalidField {
            field: "size",
            value: payload[1],
        });
    }
    let mut data = payload[2..2 + size].to_vec();
    if data.last() == Some(&0) {
        data.pop();
    }
    Ok((payload[0], data))
}
