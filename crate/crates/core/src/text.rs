//! Text canonicalisation shared by validation, matching and the mock backend.

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

/// Strips diacritics (`"tórax"` → `"torax"`, `"ñ"` → `"n"`).
pub fn fold_accents(s: &str) -> String {
    s.nfd().filter(|c| !is_combining_mark(*c)).nfc().collect()
}

/// Canonical comparison key: trimmed, lowercased, accent-folded, inner
/// whitespace collapsed to single spaces.
pub fn canonical_key(s: &str) -> String {
    let folded = fold_accents(&s.trim().to_lowercase());
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
