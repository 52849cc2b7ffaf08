#![no_main]

use benchmate_core::perception::parse_trace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(trace) = parse_trace(text) {
        let again = parse_trace(&trace.to_ndjson()).expect("serialized trace parses");
        assert_eq!(again.records.len(), trace.records.len());
    }
});
