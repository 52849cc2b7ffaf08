#![no_main]

use benchmate_core::session::{export_stepwise_protocol, parse_session_log, replay_session};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(log) = parse_session_log(text) {
        let _ = replay_session(&log);
        let _ = export_stepwise_protocol(&log);
    }
});
