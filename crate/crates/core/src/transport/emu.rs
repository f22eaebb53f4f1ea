use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::emulator::{spawn_stepper, SharedBrick, Stepper, VirtualBrick};
use crate::protocol::MAX_TELEGRAM_LEN;

use super::{Link, Result, TransportError};

/// In-process link to a [`VirtualBrick`].
///
/// Telegrams are handled synchronously on send. The link closes when the
/// brick falls asleep.
pub struct EmuLink {
    brick: SharedBrick,
    replies: Mutex<VecDeque<Vec<u8>>>,
    ready: Condvar,
    closed: AtomicBool,
    _stepper: Option<Stepper>,
}

impl EmuLink {
    /// Attach to an existing brick. Nothing advances its clock; the caller
    /// owns time (see [`crate::emulator::SimClock`]).
    pub fn attach(brick: SharedBrick) -> Self {
        Self {
            brick,
            replies: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
            closed: AtomicBool::new(false),
            _stepper: None,
        }
    }

    /// A fresh default brick stepped in real time for as long as the link
    /// lives.
    pub fn spawn_default() -> Self {
        let brick = VirtualBrick::default().shared();
        let stepper = spawn_stepper(brick.clone(), None);
        Self {
            _stepper: Some(stepper),
            ..Self::attach(brick)
        }
    }

    pub fn brick(&self) -> &SharedBrick {
        &self.brick
    }

    fn check_open(&self) -> Result<()> {
        if self.is_closed() {
            Err(TransportError::LinkClosed)
        } else {
            Ok(())
        }
    }
}

impl Link for EmuLink {
    fn send_frame(&self, telegram: &[u8]) -> Result<()> {
        if telegram.is_empty() || telegram.len() > MAX_TELEGRAM_LEN {
            return Err(TransportError::OversizeTelegram(telegram.len()));
        }
        self.check_open()?;
        let reply = self.brick.lock().unwrap().handle_telegram(telegram);
        if let Some(reply) = reply {
            self.replies.lock().unwrap().push_back(reply);
            self.ready.notify_all();
        }
        Ok(())
    }

    fn recv_frame(&self, timeout: Duration) -> Result<Vec<u8>> {
        let deadline = Instant::now() + timeout;
        let mut replies = self.replies.lock().unwrap();
        loop {
            self.check_open()?;
            if let Some(reply) = replies.pop_front() {
                return Ok(reply);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::RecvTimeout);
            }
            let wait = (deadline - now).min(Duration::from_millis(10));
            replies = self.ready.wait_timeout(replies, wait).unwrap().0;
        }
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.ready.notify_all();
    }

    fn is_closed(&self) -> bool {
        if self.closed.load(Ordering::SeqCst) {
            return true;
        }
        if self.brick.lock().unwrap().is_asleep() {
            self.close();
            return true;
        }
        false
    }
}
