//! `key = value` configuration files.
//!
//! Keys are dotted, `section.field`, and values are parsed as JSON when
//! possible and as bare strings otherwise. A section is applied on top of
//! any serde-serializable struct, so unknown fields are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    /// `#` starts a comment; blank lines are ignored; later keys win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected `key = value`, got `{line}`", i + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::InvalidArgument(format!("config line {}: empty key", i + 1)));
            }
            entries.insert(key.to_owned(), (i + 1, value.trim().to_owned()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Overrides fields of `base` from every `section.field` key.
    pub fn apply<T: Serialize + DeserializeOwned>(&self, section: &str, base: T) -> Result<T> {
        let mut value = serde_json::to_value(base)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("section `{section}` does not map to a struct")))?;
        let prefix = format!("{section}.");
        for (key, (line, raw)) in &self.entries {
            let Some(field) = key.strip_prefix(&prefix) else {
                continue;
            };
            if !obj.contains_key(field) {
                let known: Vec<&str> = obj.keys().map(String::as_str).collect();
                return Err(Error::InvalidArgument(format!(
                    "config line {line}: unknown key `{key}` (known: {})",
                    known.join(", ")
                )));
            }
            let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            obj.insert(field.to_owned(), parsed);
        }
        serde_json::from_value(value).map_err(|e| Error::InvalidArgument(format!("config section `{section}`: {e}")))
    }

    /// Fails on any key outside `sections`.
    pub fn check_sections(&self, sections: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            let section = key.split('.').next().unwrap_or("");
            if !key.contains('.') || !sections.contains(&section) {
                return Err(Error::InvalidArgument(format!(
                    "config line {line}: key `{key}` is not in any of [{}]",
                    sections.join(", ")
                )));
            }
        }
        Ok(())
    }
}
