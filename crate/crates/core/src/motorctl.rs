//! Per-motor controls for the crane: rotate pad, lift arm and claw.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{encode_set_output_state, OutputState, RunState};
use crate::session::{Session, SessionError};

pub const DEFAULT_POWER: u8 = 75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotorPort {
    A,
    B,
    C,
}

impl MotorPort {
    pub const ALL: [MotorPort; 3] = [MotorPort::A, MotorPort::B, MotorPort::C];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(index: u8) -> Option<Self> {
        Self::ALL.get(index as usize).copied()
    }

    /// What the port drives on the crane.
    pub fn default_label(self) -> &'static str {
        match self {
            MotorPort::A => "Rotate",
            MotorPort::B => "Lift",
            MotorPort::C => "Claw",
        }
    }
}

impl fmt::Display for MotorPort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown motor port `{0}` (expected A, B or C)")]
pub struct BadPort(pub String);

impl FromStr for MotorPort {
    type Err = BadPort;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "0" => Ok(MotorPort::A),
            "B" | "1" => Ok(MotorPort::B),
            "C" | "2" => Ok(MotorPort::C),
            _ => Err(BadPort(s.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum MotorError {
    #[error("There is no motor connected to this control.")]
    NotBound,
    #[error("power {0} out of range 1..100")]
    InvalidPower(i32),
    #[error("speed {0} out of range -100..100")]
    InvalidSpeed(i32),
    #[error(transparent)]
    Session(#[from] SessionError),
}

pub type Result<T, E = MotorError> = std::result::Result<T, E>;

/// One motor block. Not internally synchronized.
#[derive(Debug, Clone)]
pub struct MotorHandle {
    port: MotorPort,
    pub label: String,
    power: u8,
    pub brake_on_stop: bool,
    running: bool,
    /// Latch clears itself when the brick reports the turn finished.
    bounded: bool,
    session: Option<Session>,
}

impl MotorHandle {
    pub fn new(port: MotorPort) -> Self {
        Self {
            port,
            label: port.default_label().to_string(),
            power: DEFAULT_POWER,
            brake_on_stop: true,
            running: false,
            bounded: false,
            session: None,
        }
    }

    pub fn bound(port: MotorPort, session: Session) -> Self {
        let mut handle = Self::new(port);
        handle.bind(session);
        handle
    }

    pub fn bind(&mut self, session: Session) {
        self.session = Some(session);
    }

    pub fn unbind(&mut self) {
        self.session = None;
        self.running = false;
        self.bounded = false;
    }

    pub fn is_bound(&self) -> bool {
        self.session.is_some()
    }

    pub fn port(&self) -> MotorPort {
        self.port
    }

    pub fn power(&self) -> u8 {
        self.power
    }

    pub fn set_power(&mut self, power: i32) -> Result<()> {
        if !(1..=100).contains(&power) {
            return Err(MotorError::InvalidPower(power));
        }
        self.power = power as u8;
        Ok(())
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    /// Forget the latch without sending anything, e.g. after the link dropped
    /// and the brick coasted on its own.
    pub fn clear_latch(&mut self) {
        self.running = false;
        self.bounded = false;
    }

    fn session(&self) -> Result<&Session> {
        self.session.as_ref().ok_or(MotorError::NotBound)
    }

    fn apply(&self, state: &OutputState) -> Result<()> {
        let session = self.session()?;
        let telegram = encode_set_output_state(state, false).expect("port in range");
        session.send(&telegram)?;
        Ok(())
    }

    /// Run clockwise (negative power) until stopped. No-op while running.
    pub fn turn_cw(&mut self) -> Result<()> {
        self.spin(-i32::from(self.power))
    }

    /// Run counter-clockwise (positive power) until stopped. No-op while running.
    pub fn turn_ccw(&mut self) -> Result<()> {
        self.spin(i32::from(self.power))
    }

    fn spin(&mut self, power: i32) -> Result<()> {
        self.session()?;
        if self.running {
            return Ok(());
        }
        self.apply(&OutputState::turn(self.port.index(), power, 0))?;
        self.running = true;
        self.bounded = false;
        Ok(())
    }

    /// Run at `speed` for `degrees` (0 = until stopped). Always sent.
    pub fn turn(&mut self, speed: i32, degrees: u32) -> Result<()> {
        self.session()?;
        if !(-100..=100).contains(&speed) {
            return Err(MotorError::InvalidSpeed(speed));
        }
        self.apply(&OutputState::turn(self.port.index(), speed, degrees))?;
        self.running = true;
        self.bounded = degrees > 0;
        Ok(())
    }

    /// Brake or coast, per `brake_on_stop`. No-op unless running.
    pub fn stop(&mut self) -> Result<()> {
        self.session()?;
        if !self.running {
            return Ok(());
        }
        self.halt()
    }

    /// Brake or coast whatever the latch says, for one-shot tools that
    /// never saw the motor start.
    pub fn halt(&mut self) -> Result<()> {
        let image = if self.brake_on_stop {
            OutputState::brake(self.port.index())
        } else {
            OutputState::coast(self.port.index())
        };
        self.apply(&image)?;
        self.clear_latch();
        Ok(())
    }

    /// Coast, whatever the latch says.
    pub fn relax(&mut self) -> Result<()> {
        self.apply(&OutputState::coast(self.port.index()))?;
        self.clear_latch();
        Ok(())
    }

    /// Feed a telemetry run state; a finished bounded turn clears the latch.
    pub fn observe(&mut self, run_state: RunState) {
        if self.bounded && run_state == RunState::Idle {
            self.clear_latch();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn port_parsing_and_labels() {
        assert_eq!("a".parse::<MotorPort>().unwrap(), MotorPort::A);
        assert_eq!(" C ".parse::<MotorPort>().unwrap(), MotorPort::C);
        assert!("D".parse::<MotorPort>().is_err());
        let labels: Vec<_> = MotorPort::ALL.iter().map(|p| p.default_label()).collect();
        assert_eq!(labels, ["Rotate", "Lift", "Claw"]);
        assert_eq!(MotorPort::from_index(1), Some(MotorPort::B));
        assert_eq!(MotorPort::from_index(3), None);
    }

    #[test]
    fn unbound_handle_refuses_everything() {
        let mut m = MotorHandle::new(MotorPort::A);
        assert!(matches!(m.turn_cw(), Err(MotorError::NotBound)));
        assert!(matches!(m.turn_ccw(), Err(MotorError::NotBound)));
        assert!(matches!(m.turn(50, 360), Err(MotorError::NotBound)));
        assert!(matches!(m.stop(), Err(MotorError::NotBound)));
        assert!(matches!(m.relax(), Err(MotorError::NotBound)));
        assert!(!m.is_running());
        assert_eq!(
            MotorError::NotBound.to_string(),
            "There is no motor connected to this control."
        );
    }

    #[test]
    fn power_range() {
        let mut m = MotorHandle::new(MotorPort::B);
        assert_eq!(m.power(), 75);
        assert!(m.brake_on_stop);
        assert!(matches!(m.set_power(0), Err(MotorError::InvalidPower(0))));
        assert!(matches!(m.set_power(101), Err(MotorError::InvalidPower(101))));
        m.set_power(100).unwrap();
        assert_eq!(m.power(), 100);
    }
}
