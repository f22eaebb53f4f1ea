use std::sync::OnceLock;

use brickpad_cli::repl::{eval_line, LineResult};
use brickpad_core::session::{Session, SessionConfig};
use brickpad_core::{LinkEndpoint, Phase};
use proptest::prelude::*;

/// One session for every case, reopened if a case managed to drop it.
fn session() -> &'static Session {
    static SESSION: OnceLock<Session> = OnceLock::new();
    let s = SESSION.get_or_init(|| {
        Session::new(SessionConfig {
            polling: false,
            request_timeout_ms: 200,
            ..SessionConfig::default()
        })
    });
    if s.phase() != Phase::Connected {
        s.connect(LinkEndpoint::Emu).unwrap();
    }
    s
}

fn hexish() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            any::<u8>().prop_map(|b| format!("{b:02x}")),
            any::<u8>().prop_map(|b| format!("{b:02X}")),
            "[0-9a-zA-Z]{1,3}",
        ],
        0..70,
    )
    .prop_map(|tokens| tokens.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn arbitrary_lines_never_crash(line in prop_oneof!["\\PC{0,80}", hexish()]) {
        let s = session();
        let result = eval_line(s, &line);
        // anything short of a well-formed telegram is refused locally
        if !matches!(result, LineResult::Reply(_) | LineResult::NoReply) {
            prop_assert_eq!(s.phase(), Phase::Connected);
        }
    }
}
