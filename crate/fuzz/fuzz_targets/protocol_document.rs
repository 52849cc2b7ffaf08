#![no_main]

use benchmate_core::protocol::{parse_protocol, to_document};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = parse_protocol(text) {
        let doc = to_document(&p);
        let again = parse_protocol(&doc).expect("canonical document parses");
        assert_eq!(to_document(&again), doc);
    }
});
