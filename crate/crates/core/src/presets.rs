//! Named run configurations and `section.key=value` overrides.
//!
//! A preset name is looked up first in `$MACSIM_PRESET_DIR/<name>.toml`, then
//! among the built-in presets. Anything containing a path separator or
//! ending in `.toml` is read as a file.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::engine::RunConfig;
use crate::error::{Error, Result};

/// mmWave range giving 5.5 LOS neighbors on average at 125 vehicles/km.
pub const CALIBRATED_RANGE_125: f64 = 28.623;
/// Same calibration at 250 vehicles/km.
pub const CALIBRATED_RANGE_250: f64 = 16.3074;

pub const PRESET_DIR_VAR: &str = "MACSIM_PRESET_DIR";

const BUILTIN: [(&str, &str); 4] = [
    ("paper-highway-125", include_str!("../presets/paper-highway-125.toml")),
    ("paper-highway-250", include_str!("../presets/paper-highway-250.toml")),
    ("golden-fig2", include_str!("../presets/golden-fig2.toml")),
    ("golden-fig3", include_str!("../presets/golden-fig3.toml")),
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn looks_like_path(name: &str) -> bool {
    name.ends_with(".toml") || name.contains(std::path::MAIN_SEPARATOR) || name.contains('/')
}

/// File backing `name`, if any (built-in presets have none).
pub fn preset_path(name: &str) -> Option<PathBuf> {
    if looks_like_path(name) {
        return Some(PathBuf::from(name));
    }
    let dir = std::env::var_os(PRESET_DIR_VAR)?;
    let p = Path::new(&dir).join(format!("{name}.toml"));
    p.exists().then_some(p)
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(name: &str) -> Result<RunConfig> {
    if let Some(p) = preset_path(name) {
        let text = std::fs::read_to_string(&p)
            .map_err(|e| Error::config(format!("cannot read preset {}: {e}", p.display())))?;
        return parse(&text);
    }
    match builtin(name) {
        Some(text) => parse(text),
        None => Err(Error::config(format!(
            "unknown preset '{name}' (built-in: {})",
            builtin_names().collect::<Vec<_>>().join(", ")
        ))),
    }
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` overrides. Keys must exist in the schema and
/// values must have the key's type.
pub fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut table: Table = toml::from_str(&to_toml(cfg)?)?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{o}' is not key=value")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::config(format!("override key '{key}' must be section.key")))?;
        let sec = table
            .get_mut(section)
            .and_then(Value::as_table_mut)
            .ok_or_else(|| Error::config(format!("unknown section '{section}'")))?;
        let value = parse_value(raw.trim());
        match sec.get(field) {
            Some(old) if !same_type(old, &value) => {
                return Err(Error::config(format!(
                    "{key} expects a {}, got '{}'",
                    old.type_str(),
                    raw.trim()
                )))
            }
            Some(_) => {}
            // Optional keys are absent when unset; the typed parse below checks them.
            None if is_optional(section, field) => {}
            None => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        sec.insert(field.to_string(), value);
    }
    let cfg: RunConfig = toml::from_str(&toml::to_string(&table)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn is_optional(section: &str, field: &str) -> bool {
    section == "run" && field == "script"
}

fn same_type(old: &Value, new: &Value) -> bool {
    matches!(
        (old, new),
        (Value::Float(_), Value::Integer(_)) | (Value::Float(_), Value::Float(_))
    ) || std::mem::discriminant(old) == std::mem::discriminant(new)
}

/// Rewrites one key of a preset file in place (comments are not kept).
pub fn write_key(path: &Path, section: &str, field: &str, value: Value) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut table: Table = toml::from_str(&text)?;
    let sec = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    let sec = sec
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("'{section}' is not a section")))?;
    sec.insert(field.to_string(), value);
    std::fs::write(path, toml::to_string(&table)?)?;
    Ok(())
}
