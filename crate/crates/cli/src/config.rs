//! Flat key=value run-configuration files.
//!
//! One `key = value` pair per line, `#` comments allowed. Keys mirror the
//! long command-line flags; explicit flags always win over file values, so
//! a statistical run can be audited from the file plus the recorded
//! overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "input", "long", "out", "model", "estimand", "method", "m", "b", "weights", "seed", "preset",
    "n", "reps", "emit", "threads", "cdf-out",
];

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", lineno + 1))?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                bail!("config line {}: unknown key '{key}'", lineno + 1);
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key '{key}' = '{raw}': {e}")),
        }
    }

    pub fn get_flag(&self, key: &str) -> Result<bool> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => bail!("config key '{key}': expected a boolean, got '{other}'"),
        }
    }
}

/// `flag.or(config).unwrap_or(default)` with parse errors surfaced.
pub fn resolve<T: FromStr + Clone>(
    flag: Option<T>,
    cfg: &ConfigFile,
    key: &str,
    default: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    Ok(flag.or(cfg.get(key)?).unwrap_or(default))
}

/// Like [`resolve`] but the value is mandatory.
pub fn resolve_required<T: FromStr + Clone>(
    flag: Option<T>,
    cfg: &ConfigFile,
    key: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    flag.or(cfg.get(key)?)
        .ok_or_else(|| anyhow!("missing required option '--{key}' (flag or config)"))
}
