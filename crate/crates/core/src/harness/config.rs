//! Flat `key = value` configuration with sectioned keys (`grid.H`, `flow.U`).
//!
//! Lines starting with `#` are comments. Every value read through a typed
//! getter, including defaults, is recorded so that the resolved set can be
//! echoed into run metadata. Keys that are never read are reported as errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", no + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", no + 1)));
            }
        }
        Ok(Self { values, resolved: BTreeMap::new() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Raw value without recording it.
    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse::<T>()
            .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
    }

    /// Typed value with a default; the resolved value is recorded.
    pub fn get<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T> {
        let v = match self.values.get(key) {
            Some(v) => Self::parse_value(key, v)?,
            None => default,
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Optional typed value; recorded only when present.
    pub fn opt<T: FromStr + ToString>(&mut self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            Some(v) => {
                let t: T = Self::parse_value(key, v)?;
                self.resolved.insert(key.to_string(), t.to_string());
                Ok(Some(t))
            }
            None => Ok(None),
        }
    }

    /// Comma-separated list of numbers.
    pub fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.values.get(key) else { return Ok(None) };
        let out = v
            .split(',')
            .map(|s| Self::parse_value::<f64>(key, s.trim()))
            .collect::<Result<Vec<_>>>()?;
        self.resolved.insert(key.to_string(), v.clone());
        Ok(Some(out))
    }

    /// Record a derived value for the metadata echo.
    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// Fail on keys that were never read.
    pub fn check_unused(&self) -> Result<()> {
        let unused: Vec<_> = self.values.keys().filter(|k| !self.resolved.contains_key(*k)).collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unused.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "))))
        }
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// Resolved values in the same `key = value` format.
    pub fn to_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_defaults() {
        let mut c = Config::parse("# comment\ngrid.H = 200\nflow.U=10\n\nscenario.name = bell\n").unwrap();
        assert_eq!(c.get("grid.H", 100.0).unwrap(), 200.0);
        assert_eq!(c.get("flow.N", 0.01).unwrap(), 0.01);
        assert_eq!(c.get::<String>("scenario.name", "flat".into()).unwrap(), "bell");
        assert!(c.check_unused().is_err());
        assert_eq!(c.get("flow.U", 0.0).unwrap(), 10.0);
        c.check_unused().unwrap();
        let text = c.to_text();
        assert!(text.contains("flow.N = 0.01"));
        let mut back = Config::parse(&text).unwrap();
        assert_eq!(back.get("grid.H", 0.0).unwrap(), 200.0);
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        assert!(Config::parse("novalue").unwrap_err().is_config());
        assert!(Config::parse("a = 1\na = 2").unwrap_err().is_config());
        let mut c = Config::parse("grid.H = abc").unwrap();
        assert!(c.get("grid.H", 1.0).unwrap_err().is_config());
    }
}
