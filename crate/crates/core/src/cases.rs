//! Bundled example configurations.

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};

const CASES: &[(&str, &str)] = &[
    ("case1.1b", include_str!("../cases/case1.1b.toml")),
    ("case1.8b", include_str!("../cases/case1.8b.toml")),
    ("case1.70b", include_str!("../cases/case1.70b.toml")),
    ("case1.405b", include_str!("../cases/case1.405b.toml")),
    ("case2.100k", include_str!("../cases/case2.100k.toml")),
    ("case2.1m", include_str!("../cases/case2.1m.toml")),
    ("case2.10m", include_str!("../cases/case2.10m.toml")),
    ("case3.2retr", include_str!("../cases/case3.2retr.toml")),
    ("case3.4retr", include_str!("../cases/case3.4retr.toml")),
    ("case3.8retr", include_str!("../cases/case3.8retr.toml")),
    ("case4", include_str!("../cases/case4.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|(n, _)| *n)
}

/// TOML source of a bundled case.
pub fn source(name: &str) -> Option<&'static str> {
    CASES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Parse a bundled case by name.
pub fn load(name: &str) -> Result<Config> {
    Config::parse(source(name).ok_or_else(|| Error::UnknownSpec(name.to_string()))?)
}

/// A bundled case name or a path to a TOML file.
pub fn resolve(name_or_path: &str) -> Result<Config> {
    match source(name_or_path) {
        Some(text) => Config::parse(text),
        None if Path::new(name_or_path).exists() => Config::from_path(Path::new(name_or_path)),
        None => Err(Error::UnknownSpec(name_or_path.to_string())),
    }
}

/// Source text for a bundled case name or a path.
pub fn resolve_text(name_or_path: &str) -> Result<String> {
    match source(name_or_path) {
        Some(text) => Ok(text.to_string()),
        None => Ok(std::fs::read_to_string(name_or_path)?),
    }
}
