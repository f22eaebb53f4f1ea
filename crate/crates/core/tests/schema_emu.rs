use std::sync::Arc;
use std::thread;

use brickpad_core::emulator::BrickConfig;
use brickpad_core::protocol::{MotorMode, OutputState};
use brickpad_core::rig::SimRig;
use brickpad_core::schema::{parse_schema, run_schema, AbortReason, RunEvent, RunOptions, RunReport};
use brickpad_core::session::SessionConfig;

fn rig() -> SimRig {
    let rig = SimRig::new(
        BrickConfig::default(),
        SessionConfig {
            polling: false,
            ..SessionConfig::default()
        },
    );
    rig.connect().unwrap();
    rig
}

fn run(rig: &SimRig, src: &str) -> RunReport {
    let schema = parse_schema(src).unwrap();
    run_schema(&schema, &rig.session, &rig.clock, &RunOptions::default(), &mut |_| {})
}

fn all_coasting(rig: &SimRig) -> bool {
    let snap = rig.brick.lock().unwrap().snapshot();
    snap.motors.iter().all(|m| m.state == OutputState::coast(m.state.port))
}

#[test]
fn crane_routine() {
    let rig = rig();
    let report = run(&rig, "motor A on 75 degrees 360\nwait 1000\nmotor A coast");
    assert!(report.is_complete(), "{:?}", report.aborted);
    assert_eq!(report.steps_executed, 3);
    assert_eq!(report.total_steps, 3);
    let snap = rig.brick.lock().unwrap().snapshot();
    let block = snap.motors[0].counters.block_tacho;
    assert!((360..=364).contains(&block), "block {block}");
    assert_eq!(snap.motors[0].state.mode, MotorMode::NONE);
    assert_eq!(report.outcomes[0].status.as_deref(), Some("Ok"));
}

#[test]
fn repeat_fills_mailbox() {
    let rig = rig();
    let report = run(&rig, "repeat 2\nmsg 0 \"hi\"\nend");
    assert_eq!(report.steps_executed, 2);
    let snap = rig.brick.lock().unwrap().snapshot();
    assert_eq!(snap.mailboxes[0], [b"hi".to_vec(), b"hi".to_vec()]);
}

#[test]
fn raw_send_records_reply() {
    let rig = rig();
    let report = run(&rig, "send 00 0B\nsend 80 0D");
    assert!(report.is_complete());
    assert_eq!(report.outcomes[0].status.as_deref(), Some("Ok"));
    assert_eq!(report.outcomes[0].reply_hex.as_deref(), Some("02 0B 00 E8 1C"));
    assert_eq!(report.outcomes[1].status, None);
}

#[test]
fn wait_uses_virtual_clock() {
    let rig = rig();
    let report = run(&rig, "wait 2500\nwait 250");
    assert_eq!(report.finished_ms - report.started_ms, 2750);
}

#[test]
fn rejected_step_aborts_and_coasts() {
    let rig = rig();
    // GetInputValues on port 9 is out of range
    let report = run(&rig, "motor B on 30\nsend 00 07 09\nwait 10");
    assert_eq!(report.steps_executed, 1);
    assert!(matches!(report.aborted, Some(AbortReason::StepFailed { index: 1, .. })));
    assert!(all_coasting(&rig));
}

#[test]
fn stop_mid_run_coasts_everything() {
    let rig = rig();
    let schema = parse_schema("motor A on 40\nmotor B on -40\nwait 60000\nmsg 0 \"late\"").unwrap();
    let options = RunOptions::default();
    let stop = options.stop.clone();
    let mut seen = 0;
    let report = run_schema(&schema, &rig.session, &rig.clock, &options, &mut |e| {
        if let RunEvent::StepStarted { index: 2, .. } = e {
            seen += 1;
            stop.stop();
        }
    });
    assert_eq!(seen, 1);
    assert_eq!(report.aborted, Some(AbortReason::Stopped));
    assert_eq!(report.steps_executed, 2);
    // stop honored at the first wait slice
    assert!(report.finished_ms - report.started_ms <= 100);
    assert!(all_coasting(&rig));
    assert!(rig.brick.lock().unwrap().snapshot().mailboxes[0].is_empty());
}

#[test]
fn stop_from_another_thread() {
    let rig = Arc::new(rig());
    let options = RunOptions::default();
    let stop = options.stop.clone();
    let worker = {
        let rig = rig.clone();
        thread::spawn(move || {
            let schema = parse_schema("motor C on 20\nrepeat 1000\nwait 100\nend").unwrap();
            run_schema(&schema, &rig.session, &rig.clock, &options, &mut |_| {})
        })
    };
    while rig.brick.lock().unwrap().clock_ms() < 500 {
        thread::yield_now();
    }
    stop.stop();
    let report = worker.join().unwrap();
    assert_eq!(report.aborted, Some(AbortReason::Stopped));
    assert!(all_coasting(&rig));
}

#[test]
fn stuck_turn_times_out() {
    let rig = rig();
    let schema = parse_schema("motor A on 50 degrees 360").unwrap();
    let options = RunOptions {
        rate_deg_per_s_per_power: 90.0,
        ..RunOptions::default()
    };
    // expected 80 ms -> timeout 1240 ms; real run takes 800 ms, so it passes
    let report = run_schema(&schema, &rig.session, &rig.clock, &options, &mut |_| {});
    assert!(report.is_complete());

    let schema = parse_schema("motor A on 1 degrees 3600").unwrap();
    // 400 s at power 1; allowed 3 * 4 s + 1 s with the wrong rate
    let options = RunOptions {
        rate_deg_per_s_per_power: 900.0,
        ..RunOptions::default()
    };
    let report = run_schema(&schema, &rig.session, &rig.clock, &options, &mut |_| {});
    match report.aborted {
        Some(AbortReason::StepFailed { index: 0, cause }) => assert!(cause.contains("did not finish"), "{cause}"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(all_coasting(&rig));
}

#[test]
fn not_connected_fails_first_step() {
    let rig = rig();
    rig.session.disconnect();
    let report = run(&rig, "wait 10\nmotor A brake");
    assert_eq!(report.steps_executed, 1);
    assert!(matches!(report.aborted, Some(AbortReason::StepFailed { index: 1, .. })));
}

#[test]
fn motion_matches_prediction() {
    let rig = rig();
    let report = run(
        &rig,
        "motor A on 50 degrees 90\nmotor A on -25 degrees 45\nmotor B on 100 degrees 720\nrepeat 3\nmotor C on 10 degrees 30\nend",
    );
    assert!(report.is_complete());
    let snap = rig.brick.lock().unwrap().snapshot();
    // each bounded turn overshoots by less than one sub-tick of travel
    let within = |actual: i32, target: i32, speed: f64| {
        let slack = (speed * 0.01).ceil() as i32;
        (actual - target).abs() <= slack
    };
    assert!(within(snap.motors[0].counters.tacho_count, 90 - 45, 450.0 + 225.0));
    assert!(within(snap.motors[1].counters.tacho_count, 720, 900.0));
    assert!(within(snap.motors[2].counters.tacho_count, 90, 3.0 * 90.0));
}

#[test]
fn observer_sees_every_step() {
    let rig = rig();
    let schema = parse_schema("repeat 3\nwait 10\nend").unwrap();
    let mut log = Vec::new();
    run_schema(&schema, &rig.session, &rig.clock, &RunOptions::default(), &mut |e| {
        log.push(match e {
            RunEvent::Started { total } => format!("start {total}"),
            RunEvent::StepStarted { index, step } => format!("{index}: {step}"),
            RunEvent::StepFinished(o) => format!("done {}", o.index),
            RunEvent::Finished(r) => format!("end {}", r.steps_executed),
        })
    });
    assert_eq!(
        log,
        ["start 3", "0: wait 10", "done 0", "1: wait 10", "done 1", "2: wait 10", "done 2", "end 3"]
    );
}
