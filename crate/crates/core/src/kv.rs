//! Line-oriented `key = value` files.
//!
//! Blank lines and lines starting with `#` are skipped. Keys must be unique
//! and every key must be consumed by the reader, so typos surface as errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvDoc {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse { line: idx + 1, msg: "empty key".into() });
            }
            if entries.insert(key.clone(), (idx + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse { line: idx + 1, msg: format!("duplicate key {key}") });
            }
        }
        Ok(Self { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (_, v))| (k.as_str(), v.as_str()))
    }

    /// Moves the listed keys, where present, into a new document.
    pub fn split_off(&mut self, keys: &[&str]) -> KvDoc {
        let entries = keys.iter().filter_map(|k| self.entries.remove_entry(*k)).collect();
        KvDoc { entries }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses a key.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Parse { line, msg: format!("{key}: {e}") }),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.take(key)?
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("missing key {key}") })
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Parse { line, msg: format!("unknown key {k}") });
        }
        Ok(())
    }
}

/// Writes `key = value` lines in the given order. Floats use the shortest
/// round-tripping representation.
#[derive(Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.out.push_str("# ");
        self.out.push_str(text);
        self.out.push('\n');
        self
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_leftovers() {
        let mut doc = KvDoc::parse("# c\na = 1.5\n\nb=two\n").unwrap();
        assert_eq!(doc.take::<f64>("a").unwrap(), Some(1.5));
        let err = doc.finish().unwrap_err();
        assert!(err.to_string().contains("unknown key b"));
    }

    #[test]
    fn duplicate_and_malformed_lines_fail() {
        assert!(KvDoc::parse("a = 1\na = 2").is_err());
        assert!(KvDoc::parse("just words").is_err());
        let mut doc = KvDoc::parse("n = x").unwrap();
        assert!(doc.take::<usize>("n").is_err());
    }

    #[test]
    fn float_display_round_trips() {
        let v = 0.1f64 + 0.2;
        let text = KvWriter::new().put("v", v).finish();
        let mut doc = KvDoc::parse(&text).unwrap();
        assert_eq!(doc.require::<f64>("v").unwrap(), v);
    }
}
