//! Flat `key = value` text documents.
//!
//! One line per entry, `#` starts a comment, keys are dotted paths. This one
//! format backs run configs, resolved-config echoes, and checkpoints. Floats
//! are written with shortest round-trip formatting, so parse(write(x)) == x
//! bit for bit for finite values.

use crate::error::{Error, Result};

/// An ordered list of key-value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        KvDoc::default()
    }

    /// Parses a document, rejecting malformed lines and duplicate keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Parse { line: idx + 1, message: format!("expected `key = value`, got `{line}`") });
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse { line: idx + 1, message: "empty key".into() });
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(Error::Parse { line: idx + 1, message: format!("duplicate key `{key}`") });
            }
            entries.push((key, value));
        }
        Ok(KvDoc { entries })
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) {
        self.push(key, format_f64(value));
    }

    pub fn push_usize(&mut self, key: impl Into<String>, value: usize) {
        self.push(key, value.to_string());
    }

    pub fn push_u64(&mut self, key: impl Into<String>, value: u64) {
        self.push(key, value.to_string());
    }

    pub fn push_f64_list(&mut self, key: impl Into<String>, values: &[f64]) {
        let joined: Vec<String> = values.iter().map(|v| format_f64(*v)).collect();
        self.push(key, joined.join(","));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::MissingKey { key: key.to_string() })
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        parse_f64(self.require(key)?, key)
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let v = self.require(key)?;
        v.parse().map_err(|_| Error::Parse { line: 0, message: format!("key `{key}`: bad integer `{v}`") })
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse().map_err(|_| Error::Parse { line: 0, message: format!("key `{key}`: bad integer `{v}`") })
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.require(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|s| parse_f64(s.trim(), key)).collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Renders the document back to text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Shortest round-trip decimal formatting for f64.
pub fn format_f64(x: f64) -> String {
    // Rust's Display for f64 prints the minimal digits that reparse exactly,
    // except that it drops the ".0" distinction; parse accepts both.
    format!("{x}")
}

pub fn parse_f64(s: &str, key: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse { line: 0, message: format!("key `{key}`: bad number `{s}`") })
}
