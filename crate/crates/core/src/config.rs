//! Flat `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are shared by
//! [`ModelConfig`](crate::model::ModelConfig),
//! [`TrainConfig`](crate::training::TrainConfig) and
//! [`RenderConfig`](crate::datagen::RenderConfig); a key none of them
//! recognizes is an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::RenderConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key=value, got {line:?}", n + 1))
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        if map.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!(
                "line {}: duplicate key {key}",
                n + 1
            )));
        }
    }
    Ok(map)
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

/// Everything a run needs, loadable from one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
}

impl ExperimentConfig {
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in map {
            let used = cfg.model.set(k, v)? || cfg.train.set(k, v)? || cfg.render.set(k, v)?;
            if !used {
                return Err(Error::config(format!("unknown key {k}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(&parse_kv(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.render
            .validate(self.model.image_height, self.model.image_width)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self
            .model
            .entries()
            .into_iter()
            .chain(self.train.entries())
            .chain(self.render.entries())
        {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
