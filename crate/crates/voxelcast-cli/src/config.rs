//! Key = value configuration files, in the same plain-text shape as scene
//! files: one `key = value` pair per line, `#` comments, blank lines
//! ignored, duplicate or unknown keys rejected.

use std::path::Path;
use std::str::FromStr;

use crate::{io_err, PipelineError};

#[derive(Clone, Debug, Default)]
pub struct ConfigMap {
    entries: Vec<(String, String)>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap, PipelineError> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PipelineError::Invalid(format!(
                    "config line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(PipelineError::Invalid(format!("config line {}: empty key", lineno + 1)));
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(PipelineError::Invalid(format!("config: duplicate key '{key}'")));
            }
            entries.push((key, value));
        }
        Ok(ConfigMap { entries })
    }

    pub fn load(path: &Path) -> Result<ConfigMap, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        ConfigMap::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parse `key` into `T` if present; `Ok(None)` when absent.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, PipelineError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                PipelineError::Invalid(format!("config key '{key}': cannot parse '{v}'"))
            }),
        }
    }

    /// Overwrite `slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), PipelineError> {
        if let Some(v) = self.get_parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Reject keys outside the allowed set (typo guard).
    pub fn ensure_known(&self, allowed: &[&str]) -> Result<(), PipelineError> {
        for (k, _) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(PipelineError::Invalid(format!(
                    "config: unknown key '{k}' (allowed: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_skipping_comments_and_blanks() {
        let cfg = ConfigMap::parse("# a comment\n\nsteps = 20\n lr = 0.5 \n").unwrap();
        assert_eq!(cfg.get("steps"), Some("20"));
        assert_eq!(cfg.get_parsed::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(cfg.get("missing"), None);
        assert_eq!(cfg.get_parsed::<usize>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_duplicates_unknown_keys_and_malformed_lines() {
        assert!(ConfigMap::parse("a = 1\na = 2").is_err());
        assert!(ConfigMap::parse("just some words").is_err());
        assert!(ConfigMap::parse("= 3").is_err());
        let cfg = ConfigMap::parse("steps = 5\ntypo_key = 1").unwrap();
        assert!(cfg.ensure_known(&["steps"]).is_err());
        assert!(cfg.ensure_known(&["steps", "typo_key"]).is_ok());
    }

    #[test]
    fn apply_overwrites_only_when_present() {
        let cfg = ConfigMap::parse("batch_size = 8").unwrap();
        let mut batch = 4usize;
        let mut steps = 100usize;
        cfg.apply("batch_size", &mut batch).unwrap();
        cfg.apply("steps", &mut steps).unwrap();
        assert_eq!(batch, 8);
        assert_eq!(steps, 100);
        assert!(ConfigMap::parse("batch_size = pony").unwrap().apply("batch_size", &mut batch).is_err());
    }
}
