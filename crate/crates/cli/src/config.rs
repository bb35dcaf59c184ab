//! Layered run configuration. Sources merge with fixed precedence: config
//! file lowest, then `EDM_*` environment (handled by the flag parser), then
//! explicit flags. Every run dumps the fully resolved map as JSON next to its
//! outputs, and that dump is itself accepted as a config file, so any run can
//! be reproduced from its artifacts alone.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use edmcast_core::rng::sha256_hex;

use crate::Failure;

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parse a config file. A leading `{` selects the JSON form (the resolved
    /// dump); anything else is read as `key = value` lines with optional
    /// `[section]` headers that prefix following keys as `section.key`.
    pub fn from_file(path: &Path) -> Result<RunConfig, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::user(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        if text.trim_start().starts_with('{') {
            let json: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
                .map_err(|e| Failure::user(format!("bad JSON config {}: {e}", path.display())))?;
            for (k, v) in json {
                let s = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                cfg.map.insert(k, s);
            }
            return Ok(cfg);
        }
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Failure::user(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    ln + 1
                )));
            };
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            cfg.map.insert(key, v.trim().to_string());
        }
        Ok(cfg)
    }

    /// Overlay one value; later layers win.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Overlay an optional flag value.
    pub fn set_opt<T: Display>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn require(&self, key: &str, flag: &str) -> Result<String, Failure> {
        self.get(key).map(str::to_string).ok_or_else(|| {
            Failure::user(format!("missing required setting `{key}` (flag {flag})"))
        })
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, Failure> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Failure::user(format!("setting `{key}`: `{s}` is not a number"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, Failure> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Failure::user(format!("setting `{key}`: `{s}` is not an integer"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, Failure> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Failure::user(format!("setting `{key}`: `{s}` is not an integer"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, Failure> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(s) => Err(Failure::user(format!("setting `{key}`: `{s}` is not a bool"))),
        }
    }

    /// Comma-separated list, e.g. `net.hidden = 16,16`.
    pub fn list_or<T: std::str::FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>, Failure>
    where
        T: Clone,
    {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<T>()
                        .map_err(|_| Failure::user(format!("setting `{key}`: bad element `{p}`")))
                })
                .collect(),
        }
    }

    pub fn path_or_none(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    /// Hash of the canonical `key=value` line dump; stamped into provenance.
    pub fn hash(&self) -> String {
        let canon: String =
            self.map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        sha256_hex(canon.as_bytes())
    }

    /// Write the resolved map as sorted JSON; returns the file path.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<PathBuf, Failure> {
        let path = out_dir.join("resolved_config.json");
        let json = serde_json::Value::Object(
            self.map
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        );
        let text = serde_json::to_string_pretty(&json)
            .map_err(|e| Failure::internal(format!("serialize resolved config: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| Failure::internal(format!("write {}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_prefix_keys_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, "seed = 7\n[net]\nhidden = 8,8\n# comment\n").unwrap();
        let mut cfg = RunConfig::from_file(&p).unwrap();
        assert_eq!(cfg.u64_or("seed", 0).unwrap(), 7);
        assert_eq!(cfg.list_or::<usize>("net.hidden", &[]).unwrap(), vec![8, 8]);
        cfg.set("seed", 9); // flag overlay
        assert_eq!(cfg.u64_or("seed", 0).unwrap(), 9);
    }

    #[test]
    fn resolved_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("num_steps", 18);
        cfg.set("net.hidden", "16,16");
        let path = cfg.write_resolved(dir.path()).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back.usize_or("num_steps", 0).unwrap(), 18);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn malformed_line_is_a_user_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.conf");
        std::fs::write(&p, "just words\n").unwrap();
        assert!(RunConfig::from_file(&p).is_err());
    }
}
