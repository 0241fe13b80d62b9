//! Flat `name = value` text records used to checkpoint fitted parameters.
//!
//! One pair per line, `#` starts a comment, order is preserved. Floats are
//! written in Rust's shortest round-trip form so reloading is exact.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvRecord {
    entries: Vec<(String, String)>,
}

impl KvRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get_str(key)
            .ok_or_else(|| Error::Format(format!("record is missing `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("record field `{key}` has bad value `{raw}`")))
    }

    pub fn get_vec(&self, prefix: &str, count: usize) -> Result<Vec<f64>> {
        (1..=count).map(|i| self.get(&format!("{prefix}{i}"))).collect()
    }

    /// Fails unless `key` is present with value `expected`.
    pub fn expect(&self, key: &str, expected: &str) -> Result<()> {
        match self.get_str(key) {
            Some(v) if v == expected => Ok(()),
            other => Err(Error::Format(format!(
                "expected `{key} = {expected}`, found {other:?}"
            ))),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rec = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `name = value`", i + 1)))?;
            rec.entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(rec)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl Display for KvRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_reload_exactly() {
        let mut r = KvRecord::new();
        let x = 0.1 + 0.2;
        r.push("model", "demo").push("x", x).push("n", 3);
        let back = KvRecord::parse(&r.to_string()).unwrap();
        assert_eq!(back.get::<f64>("x").unwrap(), x);
        assert_eq!(back.get::<usize>("n").unwrap(), 3);
        assert!(back.expect("model", "demo").is_ok());
        assert!(back.get::<f64>("missing").is_err());
        assert!(KvRecord::parse("no equals sign").is_err());
    }
}
