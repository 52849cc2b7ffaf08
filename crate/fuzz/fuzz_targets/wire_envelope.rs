#![no_main]

use benchmate_core::session::decode_envelope;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(env) = decode_envelope(line) {
        let again = decode_envelope(&env.encode()).expect("encoded envelope decodes");
        assert_eq!(again, env);
    }
});
