//! Flat `key = value` configuration files.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Keys are
//! unique. Consumers take the keys they know and must call
//! [`KvFile::finish`] so that misspelt keys are reported instead of silently
//! ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvFile {
    path: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: path.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(bad("empty key".into()));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(bad(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self {
            path: path.to_string(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn bad(&self, line: usize, msg: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg,
        }
    }

    /// Removes and returns the raw value of `key`.
    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| self.bad(line, format!("`{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma- or space-separated list; `-` or an empty value is the empty list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => parse_list(&v)
                .map(Some)
                .map_err(|e| self.bad(line, format!("`{key}`: {e}"))),
        }
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Parse {
                path: self.path,
                line,
                msg: format!("unknown key `{k}`"),
            });
        }
        Ok(())
    }
}

pub fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    let v = v.trim();
    if v.is_empty() || v == "-" {
        return Ok(vec![]);
    }
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| format!("cannot parse `{s}`: {e}")))
        .collect()
}

pub fn format_list<T: Display>(items: &[T]) -> String {
    if items.is_empty() {
        return "-".into();
    }
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let mut kv = KvFile::parse("# top\nlr = 0.01  # inline\n\nstages = 4, 5\nempty = -\r\n", "t").unwrap();
        assert_eq!(kv.take::<f64>("lr").unwrap(), Some(0.01));
        assert_eq!(kv.take_list::<u8>("stages").unwrap(), Some(vec![4, 5]));
        assert_eq!(kv.take_list::<u8>("empty").unwrap(), Some(vec![]));
        assert_eq!(kv.take_or("missing", 3usize).unwrap(), 3);
        kv.finish().unwrap();
    }

    #[test]
    fn reports_line_numbers() {
        let err = KvFile::parse("a = 1\nnonsense\n", "f.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let mut kv = KvFile::parse("a = x\n", "f").unwrap();
        assert!(matches!(kv.take::<f64>("a"), Err(Error::Parse { line: 1, .. })));
        let kv = KvFile::parse("\nstray = 1\n", "f").unwrap();
        assert!(matches!(kv.finish(), Err(Error::Parse { line: 2, .. })));
        assert!(KvFile::parse("a=1\na=2", "f").is_err());
    }
}
