use std::sync::{Arc, Mutex};

use crate::clock::Clock;

use super::SharedBrick;

type AdvanceHook = Arc<dyn Fn(u64) + Send + Sync>;

/// Virtual clock driven by a brick: `now` is the brick's clock and
/// `sleep_ms` steps the brick.
///
/// Hooks run after every sub-tick with the new time, outside the brick lock,
/// which lets a test keep a session's periodic work in lockstep with the
/// brick.
#[derive(Clone)]
pub struct SimClock {
    brick: SharedBrick,
    hooks: Arc<Mutex<Vec<AdvanceHook>>>,
}

impl SimClock {
    pub fn new(brick: SharedBrick) -> Self {
        Self {
            brick,
            hooks: Arc::default(),
        }
    }

    pub fn brick(&self) -> &SharedBrick {
        &self.brick
    }

    pub fn on_advance(&self, hook: impl Fn(u64) + Send + Sync + 'static) {
        self.hooks.lock().unwrap().push(Arc::new(hook));
    }

    /// Advance `ms` of virtual time.
    pub fn advance(&self, ms: u64) {
        let grid = self.brick.lock().unwrap().config().subtick_ms.max(1);
        let mut left = ms;
        while left > 0 {
            let now = self.now_ms();
            let chunk = ((now / grid + 1) * grid - now).min(left);
            let now = {
                let mut brick = self.brick.lock().unwrap();
                brick.step(chunk);
                brick.clock_ms()
            };
            left -= chunk;
            let hooks = self.hooks.lock().unwrap().clone();
            for hook in hooks {
                hook(now);
            }
        }
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.brick.lock().unwrap().clock_ms()
    }

    fn sleep_ms(&self, ms: u64) {
        self.advance(ms);
    }
}

impl std::fmt::Debug for SimClock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimClock").field("now_ms", &self.now_ms()).finish()
    }
}
