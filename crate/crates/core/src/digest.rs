//! Content digests used for prompt/response addressing and trace records.

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of a string.
pub fn sha256_hex(data: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data.as_bytes());
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Short (12 hex char) digest, used for stable identifiers.
pub fn short_id(data: &str) -> String {
    sha256_hex(data)[..12].to_string()
}
