//! SHA-256 helpers shared by content hashes, cache keys and config fingerprints.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON encoding of `value`.
///
/// Struct fields serialize in declaration order and maps used for hashing are
/// `BTreeMap`s, so the encoding is stable for identical values.
pub fn json_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory JSON serialization cannot fail");
    sha256_hex(&bytes)
}

/// First eight bytes of a SHA-256 digest over the given parts, as an integer.
///
/// Parts are length-prefixed so `("ab", "c")` and `("a", "bc")` differ.
pub fn hash_u64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
