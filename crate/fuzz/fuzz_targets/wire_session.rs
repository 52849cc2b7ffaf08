#![no_main]

//! Arbitrary client line sequences against a live service.

use std::sync::Arc;

use benchmate_core::protocol::parse_protocol;
use benchmate_core::session::{
    LogFactory, MemoryLogFactory, ProtocolRegistry, ServiceContext, SessionService,
    TraceDirResolver,
};
use libfuzzer_sys::fuzz_target;

const PROTOCOL: &str = include_str!("../../samples/cell-passage.toml");

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut reg = ProtocolRegistry::new();
    reg.insert(parse_protocol(PROTOCOL).unwrap());
    let ctx = ServiceContext::new(
        reg,
        Arc::new(TraceDirResolver::new(None)),
        Arc::new(MemoryLogFactory::default()) as Arc<dyn LogFactory>,
    );
    let mut svc = SessionService::new(ctx);
    for line in text.lines() {
        svc.handle_line(line);
        if svc.is_closed() {
            break;
        }
    }
    svc.disconnect();
});
