//! Flat `key = value` run configuration with layered overrides.
//!
//! Precedence from lowest to highest: built-in default, config file,
//! the `TEA_SEED` environment variable (seed only), command-line flag.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const SEED_ENV: &str = "TEA_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{key}: cannot parse {value:?} ({source_name})")]
    Value {
        key: String,
        value: String,
        source_name: &'static str,
    },
}

/// Parses `key = value` lines. `#` starts a comment line; keys may use `-`
/// or `_` interchangeably.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: idx + 1,
            message: format!("expected `key = value`, found {line:?}"),
        })?;
        let key = normalize_key(k.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: idx + 1,
                message: "empty key".into(),
            });
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Syntax {
                line: idx + 1,
                message: format!("duplicate key {key}"),
            });
        }
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

fn normalize_key(k: &str) -> String {
    k.replace('-', "_").to_ascii_lowercase()
}

/// Resolves settings and records every effective value for echoing.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    env_seed: Option<String>,
    effective: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(file: BTreeMap<String, String>, env_seed: Option<String>) -> Self {
        Resolver {
            file,
            env_seed,
            effective: BTreeMap::new(),
        }
    }

    /// Reads `TEA_SEED` from the process environment.
    pub fn from_env(file: BTreeMap<String, String>) -> Self {
        Self::new(file, std::env::var(SEED_ENV).ok().filter(|s| !s.trim().is_empty()))
    }

    fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
        value.trim().parse().map_err(|_| ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            source_name: std::any::type_name::<T>(),
        })
    }

    /// Effective value of `key`.
    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, ConfigError> {
        let value = match flag {
            Some(v) => v,
            None => {
                let env = if key == "seed" { self.env_seed.clone() } else { None };
                match env.or_else(|| self.file.get(key).cloned()) {
                    Some(s) => Self::parse(key, &s)?,
                    None => default,
                }
            }
        };
        self.effective.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`Resolver::get`] for settings without a default.
    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, ConfigError> {
        let value = match flag {
            Some(v) => Some(v),
            None => self.file.get(key).map(|s| Self::parse(key, s)).transpose()?,
        };
        if let Some(v) = &value {
            self.effective.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    /// Comma-separated list setting.
    pub fn get_list<T: FromStr + Display + Clone>(&mut self, key: &str, flag: Option<&str>, default: &[T]) -> Result<Vec<T>, ConfigError> {
        let text = flag.map(str::to_string).or_else(|| self.file.get(key).cloned());
        let values = match text {
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| Self::parse(key, p))
                .collect::<Result<Vec<T>, _>>()?,
            None => default.to_vec(),
        };
        let joined: Vec<String> = values.iter().map(ToString::to_string).collect();
        self.effective.insert(key.to_string(), joined.join(","));
        Ok(values)
    }

    /// Every resolved setting, keyed by name.
    pub fn effective(&self) -> &BTreeMap<String, String> {
        &self.effective
    }

    pub fn effective_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.effective).expect("string map serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_lines() {
        let c = parse_config("# run\nseed = 7\n\nbatch-size=128\n").unwrap();
        assert_eq!(c["seed"], "7");
        assert_eq!(c["batch_size"], "128");
        assert!(matches!(parse_config("seed 7"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse_config("a=1\na=2"), Err(ConfigError::Syntax { line: 2, .. })));
    }

    #[test]
    fn precedence_is_file_then_env_then_flag() {
        let file = parse_config("seed = 1\ndim = 8").unwrap();
        let mut r = Resolver::new(file.clone(), None);
        assert_eq!(r.get("seed", None, 0u64).unwrap(), 1);
        let mut r = Resolver::new(file.clone(), Some("2".into()));
        assert_eq!(r.get("seed", None, 0u64).unwrap(), 2);
        assert_eq!(r.get("seed", Some(3u64), 0).unwrap(), 3);
        assert_eq!(r.get("dim", None, 64usize).unwrap(), 8);
        assert_eq!(r.get("lr", None, 0.01f64).unwrap(), 0.01);
        assert_eq!(r.effective()["seed"], "3");
        assert_eq!(r.effective()["lr"], "0.01");
    }

    #[test]
    fn lists_and_bad_values() {
        let file = parse_config("k = 5, 10").unwrap();
        let mut r = Resolver::new(file, None);
        assert_eq!(r.get_list::<usize>("k", None, &[1]).unwrap(), vec![5, 10]);
        assert_eq!(r.get_list::<usize>("k", Some("7"), &[1]).unwrap(), vec![7]);
        assert_eq!(r.effective()["k"], "7");
        let mut r = Resolver::new(parse_config("dim = x").unwrap(), None);
        assert!(matches!(r.get("dim", None, 1usize), Err(ConfigError::Value { .. })));
    }
}
