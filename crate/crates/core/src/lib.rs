//! Real-time protocol conformance and guidance for wet-lab sessions.
//!
//! Perception observations stream in per video segment, are aligned online
//! against a gold-standard [`protocol::Protocol`], checked for deviations, and
//! turned into one structured feedback message per segment. Every session is
//! logged append-only and can be replayed byte-for-byte.

pub mod alignment;
pub mod eval;
pub mod monitor;
pub mod perception;
pub mod protocol;
pub mod session;
