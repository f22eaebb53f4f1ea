use brickpad_core::emulator::BrickConfig;
use brickpad_core::motorctl::{MotorError, MotorHandle, MotorPort};
use brickpad_core::protocol::{MotorMode, RunState};
use brickpad_core::rig::SimRig;
use brickpad_core::session::SessionConfig;
use brickpad_core::transport::TapRecord;

fn rig() -> SimRig {
    let rig = SimRig::new(
        BrickConfig::default(),
        SessionConfig {
            polling: false,
            ..SessionConfig::default()
        },
    );
    rig.connect().unwrap();
    rig.clear_tap();
    rig
}

const BRAKE_A: [u8; 12] = [0x80, 0x04, 0x00, 0x00, 0x07, 0x01, 0x00, 0x20, 0x00, 0x00, 0x00, 0x00];
const COAST_A: [u8; 12] = [0x80, 0x04, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00];

#[test]
fn cw_sends_negative_power_once() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    m.turn_cw().unwrap();
    m.turn_cw().unwrap();
    assert_eq!(
        rig.sent(),
        [vec![0x80, 0x04, 0x00, 0xB5, 0x05, 0x01, 0x00, 0x20, 0x00, 0x00, 0x00, 0x00]]
    );
    assert!(m.is_running());
}

#[test]
fn ccw_sends_positive_power() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::B, rig.session.clone());
    m.turn_ccw().unwrap();
    assert_eq!(rig.sent()[0][2..4], [0x01, 0x4B]);
}

#[test]
fn direction_sign_for_every_power() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::C, rig.session.clone());
    for power in 1..=100 {
        m.set_power(power).unwrap();
        m.turn_cw().unwrap();
        m.relax().unwrap();
        m.turn_ccw().unwrap();
        m.relax().unwrap();
    }
    let powers: Vec<i8> = rig
        .sent()
        .iter()
        .filter(|t| t[5] != 0)
        .map(|t| t[3] as i8)
        .collect();
    assert_eq!(powers.len(), 200);
    for (i, pair) in powers.chunks(2).enumerate() {
        let p = i as i8 + 1;
        assert_eq!(pair, [-p, p]);
    }
}

#[test]
fn latch_counts_turns() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    // cw/ccw calls made while idle each emit one telegram; the rest are absorbed
    let script = ["cw", "cw", "ccw", "stop", "ccw", "cw", "relax", "cw", "stop", "stop", "ccw"];
    let mut expected = 0;
    for action in script {
        let idle = !m.is_running();
        match action {
            "cw" => m.turn_cw().unwrap(),
            "ccw" => m.turn_ccw().unwrap(),
            "stop" => m.stop().unwrap(),
            _ => m.relax().unwrap(),
        }
        if idle && (action == "cw" || action == "ccw") {
            expected += 1;
        }
    }
    let turns = rig.sent().iter().filter(|t| t[4] == 0x05).count();
    assert_eq!(turns, expected);
    assert_eq!(expected, 4);
}

#[test]
fn stop_brake_image_and_velocity() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    m.set_power(50).unwrap();
    m.turn_ccw().unwrap();
    rig.advance(200);
    rig.clear_tap();
    m.stop().unwrap();
    assert_eq!(rig.sent(), [BRAKE_A.to_vec()]);
    assert!(!m.is_running());
    rig.advance(10);
    assert_eq!(rig.brick.lock().unwrap().snapshot().motors[0].velocity, 0.0);
}

#[test]
fn stop_coast_image_and_spin_down() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    m.brake_on_stop = false;
    m.set_power(50).unwrap();
    m.turn_ccw().unwrap();
    rig.advance(200);
    rig.clear_tap();
    m.stop().unwrap();
    assert_eq!(rig.sent(), [COAST_A.to_vec()]);
    rig.advance(300);
    let v = rig.brick.lock().unwrap().snapshot().motors[0].velocity;
    assert!((v - 450.0 * (-1f64).exp()).abs() < 0.1, "velocity {v}");
}

#[test]
fn stop_while_idle_sends_nothing() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    m.stop().unwrap();
    assert!(rig.records().is_empty());
}

#[test]
fn relax_is_unconditional() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    m.relax().unwrap();
    m.turn_cw().unwrap();
    m.relax().unwrap();
    let sent = rig.sent();
    assert_eq!(sent.len(), 3);
    assert_eq!(sent[0], COAST_A);
    assert_eq!(sent[2], COAST_A);
    assert!(!m.is_running());
}

#[test]
fn bounded_turn_halts_both_ways() {
    for speed in [50, -50] {
        let rig = rig();
        let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
        m.turn(speed, 360).unwrap();
        assert!(m.is_running());
        rig.advance(1000);
        let (state, counters) = rig.session.output_state(0).unwrap();
        assert_eq!(state.run_state, RunState::Idle);
        let block = f64::from(counters.block_tacho) * f64::from(speed.signum());
        assert!((360.0..=364.5).contains(&block), "block {block}");
        m.observe(state.run_state);
        assert!(!m.is_running());
    }
}

#[test]
fn unbounded_turn_keeps_latch_on_idle_reports() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    m.turn(40, 0).unwrap();
    m.observe(RunState::Idle);
    assert!(m.is_running());
}

#[test]
fn zero_power_turn() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::B, rig.session.clone());
    m.turn(0, 0).unwrap();
    assert_eq!(rig.sent().len(), 1);
    rig.advance(100);
    let snap = rig.brick.lock().unwrap().snapshot();
    assert_eq!(snap.motors[1].velocity, 0.0);
    assert!(snap.motors[1].state.mode.contains(MotorMode::MOTOR_ON));
}

#[test]
fn cw_stop_ccw_reverses_counter() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    m.turn_cw().unwrap();
    rig.advance(500);
    let first = rig.session.output_state(0).unwrap().1.tacho_count;
    m.stop().unwrap();
    m.turn_ccw().unwrap();
    rig.advance(1000);
    let second = rig.session.output_state(0).unwrap().1.tacho_count;
    assert!(first < 0);
    assert!(second > first);
}

#[test]
fn disconnected_session_surfaces_error() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    rig.session.disconnect();
    assert!(matches!(m.turn_cw(), Err(MotorError::Session(_))));
    assert!(!m.is_running());
    assert!(matches!(
        rig.records().last(),
        Some(TapRecord::Closed)
    ));
}

#[test]
fn invalid_speed_is_rejected_before_sending() {
    let rig = rig();
    let mut m = MotorHandle::bound(MotorPort::A, rig.session.clone());
    assert!(matches!(m.turn(101, 0), Err(MotorError::InvalidSpeed(101))));
    assert!(rig.records().is_empty());
}
