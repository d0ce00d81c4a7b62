//! Canonical JSON and content hashes for persisted artifacts.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Serializes with sorted object keys and shortest round-trip floats, so
/// equal values always produce equal bytes.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // `Value` objects are ordered maps; routing through it sorts the keys.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// Pretty variant of [`canonical_json`] for files meant to be read by people.
pub fn canonical_json_pretty<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_are_sorted() {
        let mut m = HashMap::new();
        m.insert("zeta", 1.0);
        m.insert("alpha", 0.1);
        m.insert("mid", 2.5e-17);
        assert_eq!(canonical_json(&m).unwrap(), r#"{"alpha":0.1,"mid":2.5e-17,"zeta":1.0}"#);
    }

    #[test]
    fn floats_round_trip() {
        let x = [0.1 + 0.2, 1.0 / 3.0, f64::MIN_POSITIVE];
        let s = canonical_json(&x).unwrap();
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, x);
    }
}
