//! Flat `key = value` configuration text.
//!
//! Blank lines and `#` comments are ignored; every other line must contain
//! exactly one `=`. Keys may appear at most once.

use std::collections::BTreeSet;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Splits `text` into `(key, value)` pairs in file order.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Comma-separated list, e.g. `6, 6, 12`.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

/// Joins a list the way [`parse_list`] reads it.
pub fn format_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Round-trip float formatting (`{:?}` prints the shortest exact form).
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = parse_key_values("# header\n a = 1 \n\nb=2,3 # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "2,3".into())]);
        assert_eq!(parse_list::<usize>("b", &kv[1].1).unwrap(), vec![2, 3]);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_key_values("novalue").is_err());
        assert!(parse_key_values("=3").is_err());
        assert!(parse_key_values("a=1\na=2").is_err());
        assert!(parse_value::<usize>("a", "x").is_err());
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1e-7, 3.0, 1.0 / 3.0] {
            assert_eq!(format_float(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
