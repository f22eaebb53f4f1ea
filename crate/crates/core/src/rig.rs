//! A virtual brick, a virtual clock and a session wired together, for
//! deterministic runs in tests and demos.

use std::sync::{Arc, Mutex};

use crate::emulator::{BrickConfig, SharedBrick, SimClock, VirtualBrick};
use crate::session::{Session, SessionConfig, SessionError};
use crate::transport::{EmuLink, LinkEndpoint, SharedLink, TapLink, TapRecord};

pub struct SimRig {
    pub brick: SharedBrick,
    pub clock: SimClock,
    pub session: Session,
    tap: Arc<Mutex<Vec<TapRecord>>>,
}

impl SimRig {
    /// The session never runs a driver thread; its periodic work runs after
    /// every virtual sub-tick instead.
    pub fn new(brick: BrickConfig, mut config: SessionConfig) -> Self {
        config.background = false;
        let brick = VirtualBrick::new(brick).shared();
        let clock = SimClock::new(brick.clone());
        let tap: Arc<Mutex<Vec<TapRecord>>> = Arc::default();
        let connector = {
            let brick = brick.clone();
            let tap = tap.clone();
            move |_: &LinkEndpoint, _| {
                brick.lock().unwrap().wake();
                let link: SharedLink = Arc::new(EmuLink::attach(brick.clone()));
                Ok(Arc::new(TapLink::with_log(link, tap.clone())) as SharedLink)
            }
        };
        let session = Session::with_parts(config, Arc::new(clock.clone()), Arc::new(connector));
        let weak = session.downgrade();
        clock.on_advance(move |_| {
            if let Some(session) = weak.upgrade() {
                session.tick();
            }
        });
        Self {
            brick,
            clock,
            session,
            tap,
        }
    }

    pub fn with_defaults() -> Self {
        Self::new(BrickConfig::default(), SessionConfig::default())
    }

    pub fn connect(&self) -> Result<(), SessionError> {
        self.session.connect(LinkEndpoint::Emu)
    }

    pub fn advance(&self, ms: u64) {
        self.clock.advance(ms);
    }

    pub fn records(&self) -> Vec<TapRecord> {
        self.tap.lock().unwrap().clone()
    }

    /// Telegrams sent by the session, in wire order.
    pub fn sent(&self) -> Vec<Vec<u8>> {
        self.records()
            .into_iter()
            .filter_map(|r| match r {
                TapRecord::Sent(bytes) => Some(bytes),
                _ => None,
            })
            .collect()
    }

    pub fn clear_tap(&self) {
        self.tap.lock().unwrap().clear();
    }
}
