//! Hashing and text-excerpt helpers shared across modules.

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// SHA-256 of the canonical JSON serialization of `value`.
///
/// Struct fields serialize in declaration order and maps used in hashed
/// values are `BTreeMap`s, so the encoding is stable.
pub fn canonical_digest<T: serde::Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory serialization cannot fail");
    sha256_hex(bytes)
}

pub const ELISION_MARKER: &str = "\n[... truncated ...]\n";

/// Caps `text` at `max_chars` characters, keeping the head and tail halves
/// around an elision marker.
pub fn truncate_middle(text: &str, max_chars: usize) -> String {
    let total = text.chars().count();
    if total <= max_chars {
        return text.to_string();
    }
    let marker_len = ELISION_MARKER.chars().count();
    let budget = max_chars.saturating_sub(marker_len);
    let head_len = budget / 2;
    let tail_len = budget - head_len;
    let head: String = text.chars().take(head_len).collect();
    let tail: String = text.chars().skip(total - tail_len).collect();
    format!("{head}{ELISION_MARKER}{tail}")
}

/// Rough token estimate used for budgeting (four characters per token).
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}
