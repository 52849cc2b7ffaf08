#![no_main]

use benchmate_core::eval::parse_gold;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(gold) = parse_gold(text) {
        assert_eq!(
            parse_gold(&gold.to_ndjson()).expect("serialized annotation parses"),
            gold
        );
    }
});
