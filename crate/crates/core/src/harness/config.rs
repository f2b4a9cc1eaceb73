//! Flat `key = value` files. `#` starts a comment; blank lines are skipped.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key} = {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Key/value pairs in file order. Later duplicates win when applied in order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv_file(path: &std::path::Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_kv(&text)
}

/// Parses `value` for `key`, mapping the parse error into a [`ConfigError`].
pub fn parse_value<T>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// Accepts plain integers and scientific notation with an integral value
/// (`1e8`, `2.5e3`).
pub fn parse_count(key: &str, value: &str) -> Result<u128, ConfigError> {
    let bad = |reason: &str| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    };
    let v = value.trim().replace('_', "");
    if let Ok(n) = v.parse::<u128>() {
        return Ok(n);
    }
    let f: f64 = v.parse().map_err(|_| bad("not a number"))?;
    if !(f >= 0.0) || f.fract() != 0.0 || f > u128::MAX as f64 {
        return Err(bad("not a non-negative integer"));
    }
    Ok(f as u128)
}
