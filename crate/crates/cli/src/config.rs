//! Flat `key = value` configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Values are raw
//! strings until an experiment reads them with a typed getter; lists are
//! comma separated.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

/// One schema violation, reported verbatim to the user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Violation {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Text,
    IntList,
    FloatList,
}

/// An accepted key and its type.
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
}

pub const fn key(name: &'static str, kind: Kind) -> Key {
    Key { name, kind }
}

/// Keys excluded from the digest.
pub const NON_SEMANTIC: [&str; 2] = ["output.dir", "workers"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, Violation> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Violation(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty()
                || !k
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
            {
                return Err(Violation(format!("line {}: malformed key {k:?}", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Violation(format!("duplicate key '{k}'")));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, k: &str, v: impl Into<String>) {
        self.entries.insert(k.to_string(), v.into());
    }

    pub fn has(&self, k: &str) -> bool {
        self.entries.contains_key(k)
    }

    pub fn raw(&self, k: &str) -> Option<&str> {
        self.entries.get(k).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// SHA-256 of the canonical `key=value` lines in key order, so comments
    /// and layout do not change it. Keys that cannot change any number
    /// (output location, worker count) are left out.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self
            .entries
            .iter()
            .filter(|e| !NON_SEMANTIC.contains(&e.0.as_str()))
        {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Keys missing from `schema` and values that do not parse as their
    /// declared kind, in key order.
    pub fn schema_violations(&self, schema: &[Key]) -> Vec<Violation> {
        let mut out = Vec::new();
        for (k, v) in &self.entries {
            let Some(spec) = schema.iter().find(|s| s.name == k) else {
                out.push(Violation(format!("unknown key '{k}'")));
                continue;
            };
            let ok = match spec.kind {
                Kind::Int => v.parse::<i64>().is_ok(),
                Kind::Float => v.parse::<f64>().is_ok_and(f64::is_finite),
                Kind::Text => !v.is_empty(),
                Kind::IntList => parse_list::<i64>(v).is_some(),
                Kind::FloatList => {
                    parse_list::<f64>(v).is_some_and(|l| l.iter().all(|x| x.is_finite()))
                }
            };
            if !ok {
                let what = match spec.kind {
                    Kind::Int => "an integer",
                    Kind::Float => "a number",
                    Kind::Text => "a non-empty string",
                    Kind::IntList => "a list of integers",
                    Kind::FloatList => "a list of numbers",
                };
                out.push(Violation(format!("key '{k}': cannot read {v:?} as {what}")));
            }
        }
        out
    }

    pub fn text(&self, k: &str, default: &str) -> String {
        self.raw(k).unwrap_or(default).to_string()
    }

    pub fn float(&self, k: &str) -> Option<f64> {
        self.raw(k).and_then(|v| v.parse().ok())
    }

    pub fn float_or(&self, k: &str, default: f64) -> f64 {
        self.float(k).unwrap_or(default)
    }

    /// A nonnegative integer.
    pub fn count(&self, k: &str, default: u64) -> Result<u64, Violation> {
        match self.raw(k) {
            None => Ok(default),
            Some(v) => v.parse::<u64>().map_err(|_| {
                Violation(format!(
                    "key '{k}': expected a nonnegative integer, got {v:?}"
                ))
            }),
        }
    }

    pub fn floats(&self, k: &str, default: &[f64]) -> Vec<f64> {
        self.raw(k)
            .and_then(parse_list)
            .unwrap_or_else(|| default.to_vec())
    }

    pub fn counts(&self, k: &str, default: &[usize]) -> Result<Vec<usize>, Violation> {
        match self.raw(k) {
            None => Ok(default.to_vec()),
            Some(v) => parse_list::<usize>(v).ok_or_else(|| {
                Violation(format!(
                    "key '{k}': expected nonnegative integers, got {v:?}"
                ))
            }),
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = v.split(',').map(|s| s.trim().parse().ok()).collect();
    items.filter(|l| !l.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_ignores_layout() {
        let a = Config::parse("# c\nseed = 4\n\ncalibration.n=1024\n").unwrap();
        let b = Config::parse("calibration.n = 1024\nseed=4").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        assert_eq!(a.count("seed", 0).unwrap(), 4);
        let mut c = a.clone();
        c.set("output.dir", "/tmp/x");
        assert_eq!(c.digest(), a.digest());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Config::parse("seed 4").is_err());
        assert!(Config::parse("seed = 1\nseed = 2").is_err());
        assert!(Config::parse("a b = 1").is_err());
    }

    #[test]
    fn schema_lists_problems_in_key_order() {
        let schema = [key("seed", Kind::Int), key("list", Kind::FloatList)];
        let c = Config::parse("seed = x").unwrap();
        assert!(c.schema_violations(&schema)[0].0.contains("seed"));
        let c = Config::parse("bogus = 1\nseed = y").unwrap();
        let v = c.schema_violations(&schema);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].0, "unknown key 'bogus'");
        let c = Config::parse("list = 1, 2.5,3").unwrap();
        assert!(c.schema_violations(&schema).is_empty());
        assert_eq!(c.floats("list", &[]), vec![1.0, 2.5, 3.0]);
    }
}
