//! Stored routines ("schemas"): a small line-oriented language and its
//! interpreter.
//!
//! ```text
//! # lift, grab, come back
//! motor B on 60 degrees 90
//! repeat 2
//!   motor C on -40 degrees 45
//!   wait 250
//! end
//! msg 0 "done"
//! send 80 03 B8 01 C8 00
//! ```

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use log::{debug, warn};
use serde::Serialize;
use thiserror::Error;

use crate::clock::Clock;
use crate::motorctl::MotorPort;
use crate::protocol::{
    encode_message_write_text, encode_set_output_state, format_hex, parse_hex, OutputState, RunState,
    StatusCode, Telegram, TelegramKind, MAILBOX_COUNT, MAX_MESSAGE_LEN, MOTOR_PORT_COUNT,
};
use crate::session::{Session, SessionError};

pub const MAX_REPEAT_DEPTH: usize = 8;
pub const MAX_EXPANDED_STEPS: u64 = 100_000;
/// Completion polling period for bounded turns.
pub const POLL_PERIOD_MS: u64 = 100;
/// Longest uninterrupted sleep; stop requests are seen at least this often.
pub const WAIT_SLICE_MS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    MotorOn { port: MotorPort, power: i8, degrees: u32 },
    MotorBrake(MotorPort),
    MotorCoast(MotorPort),
    Wait(u32),
    Msg { mailbox: u8, text: String },
    SendRaw(Vec<u8>),
    Repeat { count: u32, body: Vec<Step> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub name: String,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

fn err<T>(line: usize, reason: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        reason: reason.into(),
    })
}

/// Parse with the default name `schema`.
pub fn parse_schema(source: &str) -> Result<Schema, ParseError> {
    parse_named("schema", source)
}

pub fn parse_named(name: &str, source: &str) -> Result<Schema, ParseError> {
    // stack of open repeat blocks: (line, count, body)
    let mut stack: Vec<(usize, u32, Vec<Step>)> = Vec::new();
    let mut top: Vec<Step> = Vec::new();
    let mut last_line = 0;
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let text = strip_comment(raw);
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        let (keyword, rest) = split_word(text);
        let step = match keyword.to_ascii_lowercase().as_str() {
            "repeat" => {
                let count = parse_num::<u32>(line, rest.trim(), "repeat count")?;
                if count == 0 {
                    return err(line, "repeat count must be at least 1");
                }
                if stack.len() == MAX_REPEAT_DEPTH {
                    return err(line, format!("repeat nested deeper than {MAX_REPEAT_DEPTH}"));
                }
                stack.push((line, count, Vec::new()));
                continue;
            }
            "end" => {
                if !rest.trim().is_empty() {
                    return err(line, "unexpected text after `end`");
                }
                let Some((_, count, body)) = stack.pop() else {
                    return err(line, "`end` without `repeat`");
                };
                if body.is_empty() {
                    return err(line, "empty repeat body");
                }
                Step::Repeat { count, body }
            }
            "motor" => parse_motor(line, rest)?,
            "wait" => Step::Wait(parse_num(line, rest.trim(), "wait time")?),
            "msg" => parse_msg(line, rest)?,
            "send" => parse_send(line, rest)?,
            other => return err(line, format!("unknown keyword `{other}`")),
        };
        match stack.last_mut() {
            Some((_, _, body)) => body.push(step),
            None => top.push(step),
        }
    }
    if let Some((line, _, _)) = stack.pop() {
        return err(line, "unterminated repeat (missing `end`)");
    }
    if top.is_empty() {
        return err(last_line.max(1), "schema has no steps");
    }
    let schema = Schema {
        name: name.to_string(),
        steps: top,
    };
    if schema.expanded_len() > MAX_EXPANDED_STEPS {
        return err(1, format!("schema expands to more than {MAX_EXPANDED_STEPS} steps"));
    }
    Ok(schema)
}

/// Drop a `#` comment, ignoring `#` inside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if quoted => escaped = true,
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn split_word(text: &str) -> (&str, &str) {
    let text = text.trim_start();
    match text.find(char::is_whitespace) {
        Some(at) => (&text[..at], &text[at..]),
        None => (text, ""),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, word: &str, what: &str) -> Result<T, ParseError> {
    if word.is_empty() {
        return err(line, format!("missing {what}"));
    }
    word.parse().or_else(|_| err(line, format!("bad {what} `{word}`")))
}

fn parse_motor(line: usize, rest: &str) -> Result<Step, ParseError> {
    let words: Vec<&str> = rest.split_whitespace().collect();
    let Some(port) = words.first() else {
        return err(line, "missing motor port");
    };
    let port = match port.to_ascii_uppercase().as_str() {
        "A" => MotorPort::A,
        "B" => MotorPort::B,
        "C" => MotorPort::C,
        _ => return err(line, format!("bad port `{port}` (expected A, B or C)")),
    };
    let action = words.get(1).map(|w| w.to_ascii_lowercase());
    match (action.as_deref(), &words[2.min(words.len())..]) {
        (Some("brake"), []) => Ok(Step::MotorBrake(port)),
        (Some("coast"), []) => Ok(Step::MotorCoast(port)),
        (Some("on"), args) => {
            let Some(power) = args.first() else {
                return err(line, "missing power");
            };
            let power: i32 = parse_num(line, power, "power")?;
            if !(-100..=100).contains(&power) {
                return err(line, format!("power {power} out of range -100..100"));
            }
            let degrees = match &args[1..] {
                [] => 0,
                [kw, n] if kw.eq_ignore_ascii_case("degrees") => parse_num(line, n, "degrees")?,
                _ => return err(line, "expected `degrees <n>` after power"),
            };
            if power == 0 && degrees > 0 {
                return err(line, "a bounded turn needs non-zero power");
            }
            Ok(Step::MotorOn {
                port,
                power: power as i8,
                degrees,
            })
        }
        (Some("brake" | "coast"), _) => err(line, "unexpected text after motor action"),
        (Some(other), _) => err(line, format!("unknown motor action `{other}`")),
        (None, _) => err(line, "missing motor action (on, brake or coast)"),
    }
}

fn parse_msg(line: usize, rest: &str) -> Result<Step, ParseError> {
    let (mailbox, rest) = split_word(rest);
    let mailbox: u8 = parse_num(line, mailbox, "mailbox")?;
    if mailbox >= MAILBOX_COUNT {
        return err(line, format!("mailbox {mailbox} out of range 0..{}", MAILBOX_COUNT - 1));
    }
    let rest = rest.trim();
    let Some(body) = rest.strip_prefix('"') else {
        return err(line, "message text must be double-quoted");
    };
    let mut text = String::new();
    let mut chars = body.chars();
    loop {
        match chars.next() {
            None => return err(line, "unterminated string"),
            Some('"') => break,
            Some('\\') => match chars.next() {
                Some(c @ ('"' | '\\')) => text.push(c),
                Some(c) => return err(line, format!("unknown escape `\\{c}`")),
                None => return err(line, "unterminated string"),
            },
            Some(c) => text.push(c),
        }
    }
    if !chars.as_str().trim().is_empty() {
        return err(line, "unexpected text after message");
    }
    if !text.is_ascii() {
        return err(line, "message text must be ASCII");
    }
    if text.len() > MAX_MESSAGE_LEN {
        return err(line, format!("message longer than {MAX_MESSAGE_LEN} bytes"));
    }
    Ok(Step::Msg { mailbox, text })
}

fn parse_send(line: usize, rest: &str) -> Result<Step, ParseError> {
    let bytes = parse_hex(rest).or_else(|e| err(line, e.to_string()))?;
    match Telegram::decode(&bytes) {
        Ok(t) if t.kind() != TelegramKind::Reply => Ok(Step::SendRaw(bytes)),
        Ok(_) => err(line, "cannot send a reply telegram"),
        Err(e) => err(line, format!("not a telegram: {e}")),
    }
}

impl Step {
    fn expanded_len(&self) -> u64 {
        match self {
            Step::Repeat { count, body } => {
                u64::from(*count).saturating_mul(body.iter().map(Step::expanded_len).fold(0, u64::saturating_add))
            }
            _ => 1,
        }
    }

    fn fmt_indented(&self, f: &mut fmt::Formatter<'_>, depth: usize) -> fmt::Result {
        let pad = "  ".repeat(depth);
        match self {
            Step::Repeat { count, body } => {
                writeln!(f, "{pad}repeat {count}")?;
                for step in body {
                    step.fmt_indented(f, depth + 1)?;
                }
                writeln!(f, "{pad}end")
            }
            other => writeln!(f, "{pad}{other}"),
        }
    }
}

/// Canonical single-line form. A repeat prints its header only.
impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::MotorOn { port, power, degrees: 0 } => write!(f, "motor {port} on {power}"),
            Step::MotorOn { port, power, degrees } => write!(f, "motor {port} on {power} degrees {degrees}"),
            Step::MotorBrake(port) => write!(f, "motor {port} brake"),
            Step::MotorCoast(port) => write!(f, "motor {port} coast"),
            Step::Wait(ms) => write!(f, "wait {ms}"),
            Step::Msg { mailbox, text } => {
                let escaped = text.replace('\\', "\\\\").replace('"', "\\\"");
                write!(f, "msg {mailbox} \"{escaped}\"")
            }
            Step::SendRaw(bytes) => write!(f, "send {}", format_hex(bytes)),
            Step::Repeat { count, .. } => write!(f, "repeat {count}"),
        }
    }
}

impl Schema {
    /// Number of steps after unrolling every repeat.
    pub fn expanded_len(&self) -> u64 {
        self.steps.iter().map(Step::expanded_len).fold(0, u64::saturating_add)
    }
}

/// Canonical source text; parses back to the same steps.
impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for step in &self.steps {
            step.fmt_indented(f, 0)?;
        }
        Ok(())
    }
}

/// Unroll repeats into a flat list of primitive steps.
pub fn expand(schema: &Schema) -> Vec<Step> {
    fn walk(steps: &[Step], out: &mut Vec<Step>) {
        for step in steps {
            match step {
                Step::Repeat { count, body } => {
                    for _ in 0..*count {
                        walk(body, out);
                    }
                }
                other => out.push(other.clone()),
            }
        }
    }
    let mut out = Vec::new();
    walk(&schema.steps, &mut out);
    out
}

/// Cooperative cancellation for a running schema.
#[derive(Debug, Clone, Default)]
pub struct StopToken(Arc<AtomicBool>);

impl StopToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Degrees per second per power unit, used to size turn timeouts.
    pub rate_deg_per_s_per_power: f64,
    pub stop: StopToken,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            rate_deg_per_s_per_power: 9.0,
            stop: StopToken::new(),
        }
    }
}

/// How long a bounded turn may take before the step fails.
pub fn turn_timeout_ms(degrees: u32, power: i8, rate: f64) -> u64 {
    let speed = rate * f64::from(power.unsigned_abs());
    let expected_ms = if speed > 0.0 {
        f64::from(degrees) / speed * 1000.0
    } else {
        0.0
    };
    (expected_ms * 3.0).ceil() as u64 + 1000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepOutcome {
    /// Position in the expanded step list.
    pub index: usize,
    pub step: String,
    pub started_ms: u64,
    pub finished_ms: u64,
    /// Status byte from the brick, when a reply was requested.
    pub status: Option<String>,
    pub reply_hex: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AbortReason {
    #[error("step {index} failed: {cause}")]
    StepFailed { index: usize, cause: String },
    #[error("stopped by user")]
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub total_steps: usize,
    pub steps_executed: usize,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub outcomes: Vec<StepOutcome>,
    pub aborted: Option<AbortReason>,
}

impl RunReport {
    pub fn is_complete(&self) -> bool {
        self.aborted.is_none()
    }
}

/// Progress notifications from [`run_schema`].
#[derive(Debug, Clone, PartialEq)]
pub enum RunEvent<'a> {
    Started { total: usize },
    StepStarted { index: usize, step: &'a Step },
    StepFinished(&'a StepOutcome),
    Finished(&'a RunReport),
}

#[derive(Debug, Error)]
enum StepError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("brick answered {0:?}")]
    Status(StatusCode),
    #[error("turn did not finish within {0} ms")]
    TurnTimeout(u64),
    #[error("stopped")]
    Stopped,
}

struct Runner<'a> {
    session: &'a Session,
    clock: &'a dyn Clock,
    options: &'a RunOptions,
}

impl Runner<'_> {
    /// Sleep in slices, giving up early on a stop request.
    fn wait(&self, ms: u64) -> Result<(), StepError> {
        let mut left = ms;
        while left > 0 {
            if self.options.stop.is_stopped() {
                return Err(StepError::Stopped);
            }
            let slice = left.min(WAIT_SLICE_MS);
            self.clock.sleep_ms(slice);
            left -= slice;
        }
        Ok(())
    }

    fn request(&self, telegram: &Telegram, outcome: &mut StepOutcome) -> Result<(), StepError> {
        let reply = self.session.request_raw(telegram)?;
        let status = StatusCode::from_code(reply[2]);
        outcome.status = Some(format!("{status:?}"));
        outcome.reply_hex = Some(format_hex(&reply));
        if status.is_ok() {
            Ok(())
        } else {
            Err(StepError::Status(status))
        }
    }

    fn set_output(&self, state: OutputState, outcome: &mut StepOutcome) -> Result<(), StepError> {
        let telegram = encode_set_output_state(&state, true).expect("valid port");
        self.request(&telegram, outcome)
    }

    fn execute(&self, step: &Step, outcome: &mut StepOutcome) -> Result<(), StepError> {
        match step {
            Step::MotorOn { port, power, degrees } => {
                let state = OutputState::turn(port.index(), (*power).into(), *degrees);
                self.set_output(state, outcome)?;
                if *degrees > 0 {
                    self.await_idle(port.index(), turn_timeout_ms(*degrees, *power, self.options.rate_deg_per_s_per_power))?;
                }
                Ok(())
            }
            Step::MotorBrake(port) => self.set_output(OutputState::brake(port.index()), outcome),
            Step::MotorCoast(port) => self.set_output(OutputState::coast(port.index()), outcome),
            Step::Wait(ms) => self.wait((*ms).into()),
            Step::Msg { mailbox, text } => {
                let telegram = encode_message_write_text(*mailbox, text).expect("validated at parse");
                self.request(&telegram.requesting_reply(true), outcome)
            }
            Step::SendRaw(bytes) => {
                let telegram = Telegram::decode(bytes).expect("validated at parse");
                if telegram.wants_reply() {
                    self.request(&telegram, outcome)
                } else {
                    self.session.send(&telegram)?;
                    Ok(())
                }
            }
            Step::Repeat { .. } => unreachable!("expanded before execution"),
        }
    }

    fn await_idle(&self, port: u8, timeout_ms: u64) -> Result<(), StepError> {
        let deadline = self.clock.now_ms() + timeout_ms;
        loop {
            let (state, _) = self.session.output_state(port)?;
            if state.run_state == RunState::Idle {
                return Ok(());
            }
            if self.clock.now_ms() >= deadline {
                return Err(StepError::TurnTimeout(timeout_ms));
            }
            self.wait(POLL_PERIOD_MS)?;
        }
    }

    fn coast_all(&self) {
        for port in 0..MOTOR_PORT_COUNT {
            let telegram = encode_set_output_state(&OutputState::coast(port), false).expect("valid port");
            if let Err(e) = self.session.send(&telegram) {
                warn!("abort: coast on port {port} failed: {e}");
            }
        }
    }
}

/// Execute `schema` step by step on a connected session.
///
/// Stops at the first failure or stop request; either way every motor is
/// coasted before returning.
pub fn run_schema(
    schema: &Schema,
    session: &Session,
    clock: &dyn Clock,
    options: &RunOptions,
    observer: &mut dyn FnMut(RunEvent<'_>),
) -> RunReport {
    let runner = Runner { session, clock, options };
    let steps = expand(schema);
    let mut report = RunReport {
        name: schema.name.clone(),
        total_steps: steps.len(),
        steps_executed: 0,
        started_ms: clock.now_ms(),
        finished_ms: 0,
        outcomes: Vec::new(),
        aborted: None,
    };
    observer(RunEvent::Started { total: steps.len() });
    for (index, step) in steps.iter().enumerate() {
        if options.stop.is_stopped() {
            report.aborted = Some(AbortReason::Stopped);
            break;
        }
        observer(RunEvent::StepStarted { index, step });
        let mut outcome = StepOutcome {
            index,
            step: step.to_string(),
            started_ms: clock.now_ms(),
            finished_ms: 0,
            status: None,
            reply_hex: None,
        };
        let result = runner.execute(step, &mut outcome);
        outcome.finished_ms = clock.now_ms();
        observer(RunEvent::StepFinished(&outcome));
        report.outcomes.push(outcome);
        match result {
            Ok(()) => report.steps_executed += 1,
            Err(StepError::Stopped) => {
                report.aborted = Some(AbortReason::Stopped);
                break;
            }
            Err(e) => {
                debug!("schema step {index} failed: {e}");
                report.aborted = Some(AbortReason::StepFailed {
                    index,
                    cause: e.to_string(),
                });
                break;
            }
        }
    }
    if report.aborted.is_some() {
        runner.coast_all();
    }
    report.finished_ms = clock.now_ms();
    observer(RunEvent::Finished(&report));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(src: &str) -> Vec<Step> {
        parse_schema(src).unwrap().steps
    }

    fn line_of(src: &str) -> usize {
        parse_schema(src).unwrap_err().line
    }

    #[test]
    fn three_step_routine() {
        assert_eq!(
            parse("motor A on 75 degrees 360\nwait 1000\nmotor A coast"),
            [
                Step::MotorOn {
                    port: MotorPort::A,
                    power: 75,
                    degrees: 360
                },
                Step::Wait(1000),
                Step::MotorCoast(MotorPort::A),
            ]
        );
    }

    #[test]
    fn repeat_block() {
        assert_eq!(
            parse("repeat 2\nmsg 0 \"hi\"\nend"),
            [Step::Repeat {
                count: 2,
                body: vec![Step::Msg {
                    mailbox: 0,
                    text: "hi".into()
                }]
            }]
        );
    }

    #[test]
    fn keywords_ignore_case_and_comments() {
        assert_eq!(
            parse("# header\nMOTOR b On -20   # lower\n\n  Motor c BRAKE\nmsg 3 \"a#b \\\"q\\\" \\\\\""),
            [
                Step::MotorOn {
                    port: MotorPort::B,
                    power: -20,
                    degrees: 0
                },
                Step::MotorBrake(MotorPort::C),
                Step::Msg {
                    mailbox: 3,
                    text: "a#b \"q\" \\".into()
                },
            ]
        );
    }

    #[test]
    fn send_raw() {
        assert_eq!(parse("send 00 0b"), [Step::SendRaw(vec![0x00, 0x0B])]);
    }

    #[test]
    fn error_lines() {
        assert_eq!(line_of("motor D on 10"), 1);
        assert_eq!(line_of("wait 5\nmotor A on 101"), 2);
        assert_eq!(line_of("wait 5\njump 3"), 2);
        assert_eq!(line_of("repeat 2\nwait 1\n"), 1);
        assert_eq!(line_of("wait 1\nend"), 2);
        assert_eq!(line_of("repeat 2\nend"), 2);
        assert_eq!(line_of("repeat 0\nwait 1\nend"), 1);
        assert_eq!(line_of("motor A on 0 degrees 90"), 1);
        assert_eq!(line_of("msg 10 \"x\""), 1);
        assert_eq!(line_of("msg 1 \"caf\u{e9}\""), 1);
        assert_eq!(line_of(&format!("msg 1 \"{}\"", "x".repeat(58))), 1);
        assert_eq!(line_of("msg 1 \"open"), 1);
        assert_eq!(line_of("send 02 0B 00"), 1);
        assert_eq!(line_of("send 00"), 1);
        assert_eq!(line_of("send zz"), 1);
        assert_eq!(line_of("motor A spin"), 1);
        assert_eq!(line_of("motor A on 10 degrees"), 1);
        assert_eq!(line_of("# nothing\n\n"), 2);
    }

    #[test]
    fn nesting_limit() {
        let deep = |n: usize| format!("{}wait 1\n{}", "repeat 1\n".repeat(n), "end\n".repeat(n));
        assert!(parse_schema(&deep(8)).is_ok());
        assert_eq!(parse_schema(&deep(9)).unwrap_err().line, 9);
    }

    #[test]
    fn expansion_cap() {
        assert!(parse_schema("repeat 1000\nrepeat 100\nwait 1\nend\nend").is_ok());
        assert!(parse_schema("repeat 1000\nrepeat 101\nwait 1\nend\nend").is_err());
    }

    #[test]
    fn expand_unrolls() {
        let s = parse_schema("repeat 3\nwait 10\nend").unwrap();
        assert_eq!(expand(&s), vec![Step::Wait(10); 3]);
        let s = parse_schema("repeat 2\nrepeat 2\nmsg 0 \"x\"\nend\nend").unwrap();
        assert_eq!(expand(&s).len(), 4);
        assert_eq!(s.expanded_len(), 4);
    }

    #[test]
    fn canonical_print() {
        let src = "MOTOR a on 75 DEGREES 360\nrepeat 2\n motor b brake\n  msg 1 \"say \\\"hi\\\"\"\nend\nsend 80 0d";
        let s = parse_schema(src).unwrap();
        assert_eq!(
            s.to_string(),
            "motor A on 75 degrees 360\nrepeat 2\n  motor B brake\n  msg 1 \"say \\\"hi\\\"\"\nend\nsend 80 0D\n"
        );
        assert_eq!(parse_schema(&s.to_string()).unwrap(), s);
    }

    #[test]
    fn timeout_sizing() {
        // 360 deg at 50 power: 360 / 450 s = 800 ms expected
        assert_eq!(turn_timeout_ms(360, 50, 9.0), 3400);
        assert_eq!(turn_timeout_ms(360, -50, 9.0), 3400);
        assert_eq!(turn_timeout_ms(0, 0, 9.0), 1000);
    }
}
