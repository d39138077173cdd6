//! Flat `key = value` config files: one pair per line, `#` comments,
//! blank lines ignored. Parse failures carry the 1-based line number.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default)]
pub struct Config {
    values: HashMap<String, String>,
    path: PathBuf,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&body)?;
        cfg.path = path.to_path_buf();
        Ok(cfg)
    }

    pub fn parse(body: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (idx, raw) in body.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let content = content.trim();
            if content.is_empty() {
                continue;
            }
            let Some(eq) = content.find('=') else {
                return Err(Error::Parse {
                    line,
                    message: format!("expected `key = value`, got {content:?}"),
                });
            };
            let key = content[..eq].trim();
            let value = content[eq + 1..].trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty key".into(),
                });
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Config {
            values,
            path: PathBuf::new(),
        })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("missing key {key:?} in {}", self.path.display())))
    }

    pub fn get_str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.values.get(key).map(String::as_str).unwrap_or(default)
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get_str(key)?
            .parse()
            .map_err(|_| Error::Config(format!("key {key:?} is not an integer")))
    }

    pub fn get_usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?} is not an integer"))),
        }
    }

    pub fn get_u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?} is not an integer"))),
        }
    }

    pub fn get_f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?} is not a number"))),
        }
    }

    /// Comma-separated list field.
    pub fn get_list(&self, key: &str) -> Result<Vec<String>> {
        Ok(self
            .get_str(key)?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect())
    }
}
