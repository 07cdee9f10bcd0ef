//! Flat `key = value` config files layered under command-line flags.
//!
//! Keys are the long flag names (`lambda-max`, `epochs`, ...). Blank lines
//! and lines starting with `#` are ignored. Precedence is flag, then file,
//! then built-in default; every resolved value is recorded for the run's
//! JSON sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::UsageError;

#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    /// Effective value of every setting, as text.
    pub effective: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, UsageError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| UsageError(format!("config line {}: expected key=value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(UsageError(format!("config line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(UsageError(format!("config key {k:?} given twice")));
        }
    }
    Ok(out)
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self, UsageError> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| UsageError(format!("config file {}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self { file, ..Self::default() })
    }

    /// The flag if given, else the file entry, else `None`.
    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, UsageError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => Some(v),
            (None, Some(text)) => {
                Some(text.parse().map_err(|e| UsageError(format!("config key {key}: invalid value {text:?}: {e}")))?)
            }
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.effective.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, UsageError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.optional(key, flag)?.unwrap_or(default);
        self.effective.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Records a value that has no file overlay (paths, for instance).
    pub fn record(&mut self, key: &str, value: impl Display) {
        self.effective.insert(key.to_string(), value.to_string());
    }

    /// Rejects config-file keys that the command never asked for.
    pub fn finish(&self) -> Result<(), UsageError> {
        match self.file.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(UsageError(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}
