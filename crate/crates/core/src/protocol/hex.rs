//! Hex text form used by the raw console.

use super::{ProtocolError, Result};

/// Parse whitespace-separated two-digit hex tokens, case-insensitive.
pub fn parse_hex(line: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for token in line.split_whitespace() {
        if token.len() != 2 || !token.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ProtocolError::BadHexToken(token.to_string()));
        }
        out.push(u8::from_str_radix(token, 16).map_err(|_| ProtocolError::BadHexToken(token.to_string()))?);
    }
    if out.is_empty() {
        return Err(ProtocolError::EmptyLine);
    }
    Ok(out)
}

/// Uppercase two-digit tokens joined by single spaces.
pub fn format_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 3);
    for (i, b) in bytes.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{b:02X}"));
    }
    out
}
