//! `key = value` configuration files.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(origin, format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::format(origin, format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, path)
}

pub fn render_pairs(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::config(format!("invalid value `{value}` for `{key}`: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// Optional value written as `auto` when unset.
pub fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

pub fn render_auto<T: Display>(value: &Option<T>) -> String {
    value.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

/// A settings struct addressable by key.
pub trait Settings {
    /// Applies one key. Returns `Ok(false)` if the key is unknown.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Every key with its current value, in a fixed order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

/// Applies pairs to several settings groups; unknown keys are rejected.
pub fn apply_pairs(pairs: &[(String, String)], groups: &mut [&mut dyn Settings]) -> Result<()> {
    for (k, v) in pairs {
        let mut known = false;
        for g in groups.iter_mut() {
            known |= g.set(k, v)?;
        }
        if !known {
            return Err(Error::config(format!("unknown config key `{k}`")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let p = parse_pairs("# head\n a = 1 \n\nb=two # tail\n", Path::new("x")).unwrap();
        assert_eq!(p, vec![("a".into(), "1".into()), ("b".into(), "two".into())]);
        assert!(parse_pairs("novalue\n", Path::new("x")).is_err());
        assert!(parse_pairs(" = 3\n", Path::new("x")).is_err());
    }

    #[test]
    fn auto_values() {
        assert_eq!(parse_auto::<usize>("k", "auto").unwrap(), None);
        assert_eq!(parse_auto::<usize>("k", "3").unwrap(), Some(3));
        assert_eq!(render_auto(&Some(3)), "3");
        assert!(parse_bool("k", "maybe").is_err());
    }
}
