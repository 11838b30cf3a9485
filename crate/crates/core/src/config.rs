//! Flat `key = value` configuration text.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Each
//! consumer takes the keys it knows; anything left over is reported by
//! [`KeyValues::finish`].

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    problems: Vec<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut problems = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`", n + 1));
                continue;
            };
            let key = k.trim().to_string();
            if entries
                .insert(key.clone(), (n + 1, v.trim().to_string()))
                .is_some()
            {
                problems.push(format!("line {}: duplicate key `{key}`", n + 1));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(KeyValues {
            entries,
            problems: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Removes `key` and parses it; parse failures are collected, not returned.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Option<V>
    where
        V::Err: Display,
    {
        let (line, raw) = self.entries.remove(key)?;
        match raw.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.problems
                    .push(format!("line {line}: `{key}` = `{raw}`: {e}"));
                None
            }
        }
    }

    pub fn take_list<V: FromStr>(&mut self, key: &str) -> Option<Vec<V>>
    where
        V::Err: Display,
    {
        let (line, raw) = self.entries.remove(key)?;
        let mut out = Vec::new();
        for part in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part.parse() {
                Ok(v) => out.push(v),
                Err(e) => {
                    self.problems
                        .push(format!("line {line}: `{key}` item `{part}`: {e}"));
                    return None;
                }
            }
        }
        Some(out)
    }

    /// Fails if any key was not consumed or any value failed to parse.
    pub fn finish(mut self) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            self.problems.push(format!("line {line}: unknown key `{key}`"));
        }
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.problems))
        }
    }
}

/// Parses `on`/`off` style switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switch(pub bool);

impl FromStr for Switch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "on" | "true" | "yes" | "1" => Ok(Switch(true)),
            "off" | "false" | "no" | "0" => Ok(Switch(false)),
            other => Err(format!("expected on|off, got `{other}`")),
        }
    }
}

impl Display for Switch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(if self.0 { "on" } else { "off" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_unknown_keys() {
        let mut kv = KeyValues::parse("# hi\na = 3\n\nb=1,2, 3 # trailing\nzzz = 1\n").unwrap();
        assert_eq!(kv.take::<usize>("a"), Some(3));
        assert_eq!(kv.take_list::<usize>("b"), Some(vec![1, 2, 3]));
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("zzz"), "{err}");
    }

    #[test]
    fn bad_values_reported() {
        let mut kv = KeyValues::parse("a = x\n").unwrap();
        assert_eq!(kv.take::<usize>("a"), None);
        assert!(kv.finish().is_err());
        assert!(KeyValues::parse("novalue\n").is_err());
        assert!(KeyValues::parse("a=1\na=2\n").is_err());
    }
}
