//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must be unique.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    MissingKey(String),
}

/// Parsed flat configuration. Keys are consumed as they are read so callers
/// can reject leftovers with [`KvConfig::finish`].
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(KvError::Syntax { line: idx + 1 })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(KvError::Syntax { line: idx + 1 });
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(KvError::DuplicateKey {
                    line: idx + 1,
                    key: key.to_string(),
                });
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, KvError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(value) => value.parse().map(Some).map_err(|_| KvError::BadValue {
                key: key.to_string(),
                value,
            }),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T, KvError> {
        self.take(key)?.ok_or_else(|| KvError::MissingKey(key.to_string()))
    }

    /// Comma-separated list; an absent key yields an empty list.
    pub fn take_list(&mut self, key: &str) -> Vec<String> {
        self.entries
            .remove(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(self) -> Result<(), KvError> {
        match self.entries.into_keys().next() {
            Some(key) => Err(KvError::UnknownKey(key)),
            None => Ok(()),
        }
    }
}
