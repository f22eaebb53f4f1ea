//! Core of the brickpad robot-control stack.
//!
//! - [`protocol`]: direct-command telegram codec and hex console format
//! - [`transport`]: length-prefixed links (serial, TCP, in-process emulator)
//! - [`emulator`]: deterministic virtual brick used as the test oracle
//! - [`session`]: connection lifecycle, keep-alive and telemetry
//! - [`motorctl`]: per-motor turn/stop/relax controls
//! - [`schema`]: stored routine parser and interpreter
//! - [`rig`]: virtual brick, virtual clock and session wired together

pub mod clock;
pub mod emulator;
pub mod motorctl;
pub mod protocol;
pub mod rig;
pub mod schema;
pub mod session;
pub mod transport;

pub use clock::{Clock, SystemClock};
pub use protocol::{OutputCounters, OutputState, StatusCode, Telegram};
pub use session::{Phase, Session, SessionConfig};
pub use transport::LinkEndpoint;
