//! Flat `key = value` config files.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, which is
//! how command-line overrides are layered on top of a file.

use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// Comma-separated list; an empty string is an empty list.
pub fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

/// `none` or a number.
pub fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        Ok(None)
    } else {
        value(key, v).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_lists() {
        let kv = parse_kv("# header\nsteps = 10\n\nmilestones = 1, 2,3 # trailing\n").unwrap();
        assert_eq!(kv[0], ("steps".into(), "10".into()));
        assert_eq!(list::<u64>("m", &kv[1].1).unwrap(), vec![1, 2, 3]);
        assert!(parse_kv("oops").is_err());
        assert!(parse_kv(" = 3").is_err());
        assert_eq!(optional::<f64>("c", "none").unwrap(), None);
        assert_eq!(optional::<f64>("c", "2.5").unwrap(), Some(2.5));
        assert!(value::<u64>("steps", "ten").is_err());
    }
}
