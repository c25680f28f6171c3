//! Layered run configuration: built-in defaults, then an optional TOML or
//! JSON file, then command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Reads a config file. A top-level table named after the subcommand is
/// used when present, otherwise the whole file applies.
pub fn load_section(path: &Path, section: &str) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(match v.get(section) {
        Some(s) => s.clone(),
        None => v,
    })
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                if v.is_null() {
                    continue;
                }
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults of `T`, overlaid by the file section, overlaid by every flag
/// that was given (unset flags serialize as null and are skipped).
pub fn resolve<T, F>(section: &str, file: Option<&Path>, flags: &F) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut v = serde_json::to_value(T::default())?;
    if let Some(f) = file {
        merge(&mut v, load_section(f, section)?);
    }
    merge(&mut v, serde_json::to_value(flags)?);
    serde_json::from_value(v).context("invalid configuration")
}
