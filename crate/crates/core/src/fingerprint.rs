// SPDX-License-Identifier: Apache-2.0

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn of_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short form used in cache file names.
pub fn short(fingerprint: &str) -> &str {
    &fingerprint[..fingerprint.len().min(12)]
}
