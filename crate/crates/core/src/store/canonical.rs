//! Canonical JSON: object keys sorted, no insignificant whitespace, floats
//! in shortest round-trip form. Digests are SHA-256 over these bytes, so
//! they do not depend on field order or platform.

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

fn sorted(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in entries {
                out.insert(k, sorted(v));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

pub fn to_value<T: Serialize + ?Sized>(value: &T) -> Value {
    sorted(serde_json::to_value(value).expect("value serializes to JSON"))
}

/// Compact canonical form.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string(&to_value(value)).expect("JSON value serializes")
}

/// Indented canonical form with a trailing newline, for files people read.
pub fn to_pretty<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(&to_value(value)).expect("JSON value serializes");
    s.push('\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact canonical form.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(to_string(value).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn key_order_does_not_change_digest() {
        let a = json!({"b": 1, "a": {"y": [1, 2], "x": 0.5}});
        let b = json!({"a": {"x": 0.5, "y": [1, 2]}, "b": 1});
        assert_eq!(digest(&a), digest(&b));
        assert_eq!(to_string(&a), r#"{"a":{"x":0.5,"y":[1,2]},"b":1}"#);
    }

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
