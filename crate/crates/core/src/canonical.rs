//! Canonical structured text.
//!
//! Every hashed or signed document (whitelists, proofs, certificates,
//! attestation components, executor I/O) goes through this one encoder:
//! JSON with object keys sorted bytewise, no insignificant whitespace, UTF-8,
//! and integers only. Floats are rejected because their text rendering is
//! not a stable hashing surface.

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum CanonicalError {
    #[error("value cannot be represented as structured text: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("non-integer number at {path}")]
    NonIntegerNumber { path: String },
}

/// Serializes `value` in canonical form.
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let tree = serde_json::to_value(value)?;
    value_to_canonical_bytes(&tree)
}

/// Canonical form of an already-built JSON tree.
pub fn value_to_canonical_bytes(value: &Value) -> Result<Vec<u8>, CanonicalError> {
    check_numbers(value, &mut String::from("$"))?;
    // serde_json's Map is a BTreeMap (no `preserve_order`), so keys come out sorted.
    Ok(serde_json::to_vec(value)?)
}

fn check_numbers(value: &Value, path: &mut String) -> Result<(), CanonicalError> {
    match value {
        Value::Number(n) if n.is_f64() => {
            Err(CanonicalError::NonIntegerNumber { path: path.clone() })
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                check_numbers(item, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        Value::Object(map) => {
            for (k, v) in map {
                let len = path.len();
                path.push('.');
                path.push_str(k);
                check_numbers(v, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        _ => Ok(()),
    }
}
