//! Flat `key = value` configuration text.
//!
//! One assignment per line, `#` starts a comment, blank lines are skipped.
//! Keys are matched exactly; a key that no section recognizes is an error so
//! typos surface immediately.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!("line {}: `{key}` already set on line {}", i + 1, prev.line)));
        }
        out.push(Entry { line: i + 1, key: key.to_string(), value: value.to_string() });
    }
    Ok(out)
}

pub(crate) fn scalar<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

pub(crate) fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

/// Comma-separated list.
pub(crate) fn list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: Display,
{
    value.split(',').map(|v| scalar(key, v.trim())).collect()
}

pub(crate) fn fixed<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = list(key, value)?;
    v.try_into().map_err(|v: Vec<usize>| Error::Config(format!("{key}: expected {N} values, got {}", v.len())))
}

/// `HxW`, e.g. `64x64`.
pub fn parse_size(value: &str) -> Result<(usize, usize)> {
    let (h, w) = value.split_once(['x', 'X']).ok_or_else(|| Error::Config(format!("size {value:?}: expected HxW")))?;
    let h: usize = scalar("height", h.trim())?;
    let w: usize = scalar("width", w.trim())?;
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("size {value:?} has a zero side")));
    }
    Ok((h, w))
}

pub(crate) fn join<V: Display>(values: &[V]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
