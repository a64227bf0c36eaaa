//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys use the long
//! flag names with `-` or `_` as separator. A value from the command line
//! always overrides the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::ArgMatches;

use crate::container;
use crate::error::{Error, Result};

pub const KEYS: &[&str] = &[
    "b_hi",
    "b_lo",
    "buckets",
    "corpus",
    "corpus_passages",
    "corpus_ranges",
    "diagnostics",
    "dim",
    "ff",
    "format",
    "group_size",
    "heads",
    "hot_gain",
    "hot_layer",
    "hot_rank",
    "k",
    "layers",
    "logit_scale",
    "m",
    "m_range",
    "max_seq_len",
    "model",
    "out",
    "out_dir",
    "passages",
    "plan",
    "quantized",
    "seed",
    "threads",
    "vocab",
    "weights",
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}", n + 1), "expected key = value"))?;
            let key = key.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::config(key, "unknown config key"));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::config(key, "set twice"));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = container::read_file(path)?;
        Self::parse(&String::from_utf8_lossy(&bytes))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

/// Merges parsed flags with a config file.
pub struct Resolver<'a> {
    matches: &'a ArgMatches,
    file: &'a ConfigFile,
}

impl<'a> Resolver<'a> {
    pub fn new(matches: &'a ArgMatches, file: &'a ConfigFile) -> Self {
        Self { matches, file }
    }

    fn explicit(&self, id: &str) -> bool {
        matches!(self.matches.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
    }

    fn from_file<T: FromStr>(&self, id: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.file.get(id).map(|raw| raw.parse().map_err(|e| Error::config(id, e))).transpose()
    }

    /// Flag value if given explicitly, else the file's, else the flag default.
    pub fn value<T: FromStr>(&self, id: &str, flag: T) -> Result<T>
    where
        T::Err: Display,
    {
        if self.explicit(id) {
            return Ok(flag);
        }
        Ok(self.from_file(id)?.unwrap_or(flag))
    }

    pub fn optional<T: FromStr>(&self, id: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if flag.is_some() && self.explicit(id) {
            return Ok(flag);
        }
        Ok(self.from_file(id)?.or(flag))
    }

    pub fn required<T: FromStr>(&self, id: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.optional(id, flag)?
            .ok_or_else(|| Error::config(id, format!("required (pass --{} or set {id} in the config file)", id.replace('_', "-"))))
    }
}

fn parse_real(p: &str) -> std::result::Result<f64, String> {
    let p = p.trim();
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"));
    match p.split_once('/') {
        Some((a, b)) => Ok(num(a)? / num(b)?),
        None => num(p),
    }
}

/// `"a,b,c"` as three reals; each may be a fraction such as `1/3`.
pub fn parse_weights(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s.split(',').map(parse_real).collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated numbers, got {}", parts.len())),
    }
}

/// `"33-128,129-512"` as inclusive ranges.
pub fn parse_ranges(s: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    s.split(',')
        .map(|r| {
            let (a, b) = r.trim().split_once('-').ok_or_else(|| format!("{r:?}: expected MIN-MAX"))?;
            let a = a.trim().parse().map_err(|e| format!("{r:?}: {e}"))?;
            let b = b.trim().parse().map_err(|e| format!("{r:?}: {e}"))?;
            Ok((a, b))
        })
        .collect()
}

/// `"a..b"` inclusive.
pub fn parse_m_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("{s:?}: expected FIRST..LAST"))?;
    let a = a.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    if a > b {
        return Err(format!("{s:?}: first exceeds last"));
    }
    Ok((a, b))
}
