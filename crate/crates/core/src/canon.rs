//! Canonical JSON: object keys in lexicographic order at every level,
//! no insignificant whitespace. Used as the signature base everywhere a
//! structure is signed, so two independent serializations of the same
//! value produce identical bytes.

use serde::Serialize;

/// Serializes `value` canonically. Panics only if `value` cannot be
/// represented as JSON, which never holds for the crate's own types.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    // serde_json::Value keeps object members in a BTreeMap, so routing
    // through Value sorts keys at every nesting level.
    let v = serde_json::to_value(value).expect("value converts to JSON");
    serde_json::to_vec(&v).expect("JSON value serializes")
}
