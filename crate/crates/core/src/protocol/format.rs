//! Protocol documents are TOML. See `docs/protocol-format.md` for the grammar.
//!
//! Parsing happens in three passes: TOML syntax (errors carry line and
//! column), typed decoding with unknown keys rejected (errors carry the key
//! path), then the full invariant check from [`validate_protocol`]. A document
//! that parses is therefore always valid.

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{validate_protocol, Protocol};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

pub fn parse_protocol(document: &str) -> Result<Protocol, ProtocolError> {
    let table: toml::Table = toml::from_str(document).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_column(document, span.start))
            .unwrap_or((1, 1));
        ProtocolError::Syntax {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;

    let protocol: Protocol =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            ProtocolError::Schema {
                path: if path == "." { "<root>".into() } else { path },
                message: e.into_inner().message().to_string(),
            }
        })?;

    let report = validate_protocol(&protocol);
    if let Some(issue) = report.errors().next() {
        return Err(ProtocolError::Schema {
            path: issue.path.clone(),
            message: issue.message.clone(),
        });
    }
    Ok(protocol)
}

/// Canonical document text. Parsing the output yields an equal protocol and
/// re-serializing that protocol yields identical bytes.
pub fn to_document(p: &Protocol) -> String {
    toml::to_string(p).expect("protocol values always serialize to TOML")
}

/// Hex SHA-256 of the canonical document. Session logs reference protocols by
/// this value.
pub fn protocol_hash(p: &Protocol) -> String {
    hex::encode(Sha256::digest(to_document(p).as_bytes()))
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text.as_bytes()[..offset];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let line_start = before
        .iter()
        .rposition(|&b| b == b'\n')
        .map_or(0, |p| p + 1);
    let column = String::from_utf8_lossy(&before[line_start..])
        .chars()
        .count()
        + 1;
    (line, column)
}
