//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys override
//! earlier ones.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(KvError::Syntax { line: i + 1 })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(KvError::Syntax { line: i + 1 });
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Overwrites `target` when `key` is present.
    pub fn read<T: FromStr>(&self, key: &str, target: &mut T) -> Result<(), KvError> {
        if let Some(v) = self.entries.get(key) {
            *target = v.parse().map_err(|_| KvError::Value {
                key: key.to_string(),
                value: v.clone(),
            })?;
        }
        Ok(())
    }

    /// Reads a `low,high` pair.
    pub fn read_pair<T: FromStr>(&self, key: &str, target: &mut (T, T)) -> Result<(), KvError> {
        if let Some(v) = self.entries.get(key) {
            let err = || KvError::Value {
                key: key.to_string(),
                value: v.clone(),
            };
            let (a, b) = v.split_once(',').ok_or_else(err)?;
            *target = (
                a.trim().parse().map_err(|_| err())?,
                b.trim().parse().map_err(|_| err())?,
            );
        }
        Ok(())
    }

    /// Fails on the first key not accepted by `known`.
    pub fn reject_unknown(&self, known: impl Fn(&str) -> bool) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !known(k)) {
            Some(k) => Err(KvError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let kv = KvMap::parse("# comment\n a = 1\n\nb=x y\na = 2\nr = 0.5, 3\n").unwrap();
        let mut a = 0u32;
        kv.read("a", &mut a).unwrap();
        assert_eq!(a, 2);
        assert_eq!(kv.get_str("b"), Some("x y"));
        let mut r = (0.0, 0.0);
        kv.read_pair("r", &mut r).unwrap();
        assert_eq!(r, (0.5, 3.0));
        let mut untouched = 9u8;
        kv.read("missing", &mut untouched).unwrap();
        assert_eq!(untouched, 9);
    }

    #[test]
    fn reports_errors() {
        assert_eq!(KvMap::parse("novalue"), Err(KvError::Syntax { line: 1 }));
        let kv = KvMap::parse("a = nope").unwrap();
        let mut a = 0u32;
        assert!(matches!(kv.read("a", &mut a), Err(KvError::Value { .. })));
        assert_eq!(
            kv.reject_unknown(|k| k == "b"),
            Err(KvError::UnknownKey("a".into()))
        );
    }

    #[test]
    fn text_round_trip() {
        let mut kv = KvMap::default();
        kv.insert("x", 1.5);
        kv.insert("y", "a,b");
        assert_eq!(KvMap::parse(&kv.to_text()).unwrap(), kv);
    }
}
