//! Checkpoint directories: a plain-text `manifest.txt` of `key = value`
//! lines next to one CPXA file per tensor.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("manifest is missing `{key}`")))
    }

    pub fn parse_num<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Config(format!("manifest key `{key}` has unparsable value `{raw}`")))
    }

    pub fn parse_list(&self, key: &str) -> Result<Vec<usize>> {
        self.require(key)?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad list entry in `{key}`"))))
            .collect()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {} is not `key = value`", n + 1)))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.txt"), self.to_text())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut m = Manifest::default();
        m.set("kind", "inr");
        m.set("widths", "256,8,2");
        m.set("kind", "denoiser");
        let back = Manifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.parse_list("widths").unwrap(), vec![256, 8, 2]);
        assert!(back.require("missing").is_err());
    }
}
