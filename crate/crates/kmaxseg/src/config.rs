use std::fs;
use std::path::Path;

use kmaxseg_core::trainer::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parses and validates a JSON training configuration. Missing fields take
/// their defaults; unknown fields are rejected.
pub fn parse_config(text: &str, origin: &Path) -> Result<TrainConfig> {
    let config: TrainConfig = serde_json::from_str(text).map_err(|e| {
        Error::format(origin, format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    config.validate().map_err(|e| Error::format(origin, e.to_string()))?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

/// Fully resolved configuration as pretty JSON.
pub fn config_json(config: &TrainConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes") + "\n"
}

/// SHA-256 of the resolved configuration's compact JSON form.
pub fn config_hash(config: &TrainConfig) -> String {
    let compact = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(compact))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let c = parse_config(r#"{"steps": 5, "model": {"base_width": 2}}"#, Path::new("c.json")).unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.model.base_width, 2);
        assert_eq!(c.tau, TrainConfig::default().tau);
    }

    #[test]
    fn errors_name_line_and_field() {
        let err = parse_config("{\n  \"steps\": 5,\n  \"stepz\": 1\n}", Path::new("c.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("stepz"), "{msg}");
        let err = parse_config(r#"{"tau": -1.0}"#, Path::new("c.json")).unwrap_err();
        assert!(err.to_string().contains("tau"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..TrainConfig::default() };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        let reparsed = parse_config(&config_json(&a), Path::new("c.json")).unwrap();
        assert_eq!(config_hash(&reparsed), config_hash(&a));
    }
}
