//! Wire protocol, session lifecycle, session logs and replay.

pub mod envelope;
pub mod export;
pub mod log;
pub mod replay;
pub mod server;
pub mod service;
pub mod simulate;

pub use envelope::*;
pub use export::*;
pub use log::*;
pub use replay::*;
pub use service::*;
pub use simulate::*;
