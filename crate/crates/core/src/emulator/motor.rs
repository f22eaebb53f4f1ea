use crate::protocol::{MotorMode, OutputCounters, OutputState, RunState};

use super::BrickConfig;

/// One emulated servo.
///
/// Position is kept as a folded base plus a constant-velocity segment
/// measured in whole milliseconds, so a motor running at fixed power covers
/// exactly `velocity * elapsed` no matter how the elapsed time was split
/// into steps.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct VirtualMotor {
    pub(crate) state: OutputState,
    velocity: f64,
    segment_ms: u64,
    tacho: f64,
    block: f64,
    rotation: f64,
}

impl VirtualMotor {
    pub(crate) fn new(port: u8) -> Self {
        Self {
            state: OutputState::coast(port),
            velocity: 0.0,
            segment_ms: 0,
            tacho: 0.0,
            block: 0.0,
            rotation: 0.0,
        }
    }

    fn segment_distance(&self) -> f64 {
        self.velocity * self.segment_ms as f64 / 1000.0
    }

    fn fold(&mut self) {
        let d = self.segment_distance();
        self.tacho += d;
        self.block += d;
        self.rotation += d;
        self.segment_ms = 0;
    }

    fn set_velocity(&mut self, velocity: f64) {
        if velocity != self.velocity {
            self.fold();
            self.velocity = velocity;
        }
    }

    pub(crate) fn velocity(&self) -> f64 {
        self.velocity
    }

    fn driven(&self) -> bool {
        self.state.mode.contains(MotorMode::MOTOR_ON) && self.state.run_state != RunState::Idle
    }

    fn block_exact(&self) -> f64 {
        self.block + self.segment_distance()
    }

    pub(crate) fn counters(&self) -> OutputCounters {
        let d = self.segment_distance();
        OutputCounters {
            tacho_count: whole_degrees(self.tacho + d),
            block_tacho: whole_degrees(self.block + d),
            rotation_count: whole_degrees(self.rotation + d),
        }
    }

    /// Apply a new command. Drive commands restart the block counter;
    /// brake and coast leave it, so it still reports the last move.
    pub(crate) fn command(&mut self, state: OutputState, port: u8) {
        self.fold();
        if state.mode.contains(MotorMode::MOTOR_ON) && !state.mode.contains(MotorMode::BRAKE) {
            self.block = 0.0;
        }
        self.state = OutputState { port, ..state };
    }

    pub(crate) fn reset_position(&mut self, relative: bool) {
        self.fold();
        if relative {
            self.block = 0.0;
        } else {
            self.rotation = 0.0;
        }
    }

    /// Advance by one sub-tick of `ms` milliseconds.
    pub(crate) fn advance(&mut self, ms: u64, config: &BrickConfig) {
        if self.driven() {
            self.set_velocity(config.deg_per_sec_per_power * f64::from(self.state.power));
            self.segment_ms += ms;
        } else if !self.state.mode.contains(MotorMode::MOTOR_ON) && self.velocity != 0.0 {
            // free spin-down: v(t) = v0 * exp(-t / tau)
            self.fold();
            let tau = config.coast_time_constant_s;
            let dt = ms as f64 / 1000.0;
            let decay = (-dt / tau).exp();
            let distance = self.velocity * tau * (1.0 - decay);
            self.tacho += distance;
            self.block += distance;
            self.rotation += distance;
            self.velocity *= decay;
            if self.velocity.abs() < config.coast_cutoff_dps {
                self.velocity = 0.0;
            }
        } else {
            self.set_velocity(0.0);
        }
    }

    /// Stop a bounded turn once its block counter has reached the limit.
    /// Returns true when the motor halted on this call.
    pub(crate) fn check_limit(&mut self) -> bool {
        let limit = self.state.tacho_limit;
        if limit > 0 && self.driven() && self.block_exact().abs() >= f64::from(limit) {
            self.set_velocity(0.0);
            self.state.run_state = RunState::Idle;
            return true;
        }
        false
    }

    /// De-energize without touching the counters.
    pub(crate) fn power_off(&mut self) {
        let port = self.state.port;
        self.fold();
        self.state = OutputState::coast(port);
    }
}

/// Whole degrees passed, like an encoder count.
fn whole_degrees(value: f64) -> i32 {
    // tiny epsilon keeps 449.99999 from reading as 449
    (value + value.signum() * 1e-9).trunc().clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
}
