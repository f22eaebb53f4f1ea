//! Raw hex console. No interpreter: hex in, hex out.

use std::io::{self, BufRead, Write};

use brickpad_core::protocol::{format_hex, parse_hex, Telegram};
use brickpad_core::{Phase, Session};

pub const NO_REPLY: &str = "(no reply requested)";

/// What one console line produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineResult {
    Reply(String),
    NoReply,
    Error(String),
    Quit,
    Empty,
}

pub fn eval_line(session: &Session, line: &str) -> LineResult {
    let line = line.trim();
    match line {
        "" => return LineResult::Empty,
        "quit" | "exit" => return LineResult::Quit,
        _ => {}
    }
    let bytes = match parse_hex(line) {
        Ok(b) => b,
        Err(e) => return LineResult::Error(e.to_string()),
    };
    let telegram = match Telegram::decode(&bytes) {
        Ok(t) => t,
        Err(e) => return LineResult::Error(e.to_string()),
    };
    if telegram.wants_reply() {
        match session.request_raw(&telegram) {
            Ok(reply) => LineResult::Reply(format_hex(&reply)),
            Err(e) => LineResult::Error(e.to_string()),
        }
    } else {
        match session.send(&telegram) {
            Ok(()) => LineResult::NoReply,
            Err(e) => LineResult::Error(e.to_string()),
        }
    }
}

/// Run until `quit`, end of input or the link dropping. Returns whether
/// the session was still connected at the end.
pub fn run(session: &Session, input: &mut dyn BufRead, out: &mut dyn Write, prompt: bool) -> io::Result<bool> {
    let mut buf = Vec::new();
    loop {
        if prompt {
            write!(out, "> ")?;
            out.flush()?;
        }
        buf.clear();
        if input.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        let line = String::from_utf8_lossy(&buf);
        match eval_line(session, &line) {
            LineResult::Reply(hex) => writeln!(out, "{hex}")?,
            LineResult::NoReply => writeln!(out, "{NO_REPLY}")?,
            LineResult::Error(e) => writeln!(out, "error: {e}")?,
            LineResult::Quit => break,
            LineResult::Empty => {}
        }
        out.flush()?;
        if session.phase() != Phase::Connected {
            writeln!(out, "error: link lost ({})", session.phase())?;
            return Ok(false);
        }
    }
    Ok(session.phase() == Phase::Connected)
}
