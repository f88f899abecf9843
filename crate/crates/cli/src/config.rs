//! JSON configs: strict parsing and canonical serialisation.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};

/// Parses a JSON file; unknown fields are rejected by the config types themselves.
pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// JSON value with object keys in sorted order.
pub fn canonical_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialise to JSON")
}

/// Compact JSON with sorted keys.
pub fn canonical<T: Serialize>(v: &T) -> String {
    canonical_value(v).to_string()
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(&canonical_value(v)).expect("JSON value");
    s.push('\n');
    s
}

pub fn write_pretty<T: Serialize>(path: impl AsRef<Path>, v: &T) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pretty(v)).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use symtrans_core::train::TrainConfig;

    #[test]
    fn canonical_is_sorted_and_round_trips() {
        let cfg = TrainConfig::default();
        let s = canonical(&cfg);
        let keys: Vec<&str> = ["\"data\"", "\"divergence_factor\"", "\"iterations\"", "\"loss\"", "\"model\"", "\"optimizer\"", "\"seed\""]
            .to_vec();
        let pos: Vec<usize> = keys.iter().map(|k| s.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{}", s);
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(canonical(&back), s);
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"iterations": 3, "lamda": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{}", err);
    }
}
