//! Config files: JSON or TOML, laid over the flag-resolved config.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub fn read_value(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let t: toml::Value =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(serde_json::to_value(t)?)
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Copy every key of `top` into `base`, recursing into tables. A key that
/// `base` does not have is an error naming its dotted path.
fn merge(base: &mut Value, top: Value, path: &str) -> Result<()> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let full = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| anyhow!("unknown config key `{full}`"))?;
                if slot.is_object() {
                    if !v.is_object() {
                        bail!("config key `{full}` must be a table");
                    }
                    merge(slot, v, &full)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        _ => bail!("config file must contain a table at the top level"),
    }
}

/// `base` with the keys from `file` overriding it.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, file: &Path) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, read_value(file)?, "")?;
    serde_json::from_value(v).with_context(|| format!("invalid config in {}", file.display()))
}

pub fn write_resolved<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}
