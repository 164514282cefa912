//! Run configuration: defaults, JSON config files and flat `key.path=value`
//! overrides, resolved into one content-addressed record per run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gvs_core::{config_hash, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RESOLVED_FILE: &str = "config.resolved.json";

/// Everything needed to rerun a subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub subcommand: String,
    /// Input paths by role (`data`, `checkpoint`, `runs`).
    pub inputs: BTreeMap<String, Value>,
    /// The subcommand's resolved module configuration.
    pub config: Value,
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Hash of subcommand, inputs and config. The output directory is
    /// excluded so a replay elsewhere keeps the hash.
    pub config_hash: String,
}

impl RunConfig {
    pub fn new(subcommand: &str, inputs: BTreeMap<String, Value>, config: Value, seed: Option<u64>, out: PathBuf) -> Result<Self> {
        let mut run = RunConfig {
            subcommand: subcommand.to_string(),
            inputs,
            config,
            seed,
            out,
            config_hash: String::new(),
        };
        run.config_hash = run.compute_hash()?;
        Ok(run)
    }

    pub fn compute_hash(&self) -> Result<String> {
        config_hash(&serde_json::json!({
            "subcommand": self.subcommand,
            "inputs": self.inputs,
            "config": self.config,
        }))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let run: RunConfig = serde_json::from_slice(&bytes)?;
        if run.compute_hash()? != run.config_hash {
            return Err(Error::InvalidConfig(format!(
                "{} was edited after resolution (hash mismatch)",
                path.display()
            )));
        }
        Ok(run)
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(RESOLVED_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn typed<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn input_path(&self, role: &str) -> Result<PathBuf> {
        match self.inputs.get(role) {
            Some(Value::String(s)) => Ok(PathBuf::from(s)),
            _ => Err(Error::InvalidInput(format!("missing input `{role}`"))),
        }
    }

    pub fn input_paths(&self, role: &str) -> Vec<PathBuf> {
        match self.inputs.get(role) {
            Some(Value::Array(v)) => v.iter().filter_map(Value::as_str).map(PathBuf::from).collect(),
            _ => Vec::new(),
        }
    }
}

/// Reads a config file. A previous `config.resolved.json` contributes only
/// its `config` section.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_slice(&bytes)?;
    match v {
        Value::Object(ref m) if m.contains_key("subcommand") && m.contains_key("config") => Ok(m["config"].clone()),
        Value::Object(_) => Ok(v),
        _ => Err(Error::InvalidConfig(format!("{} is not a JSON object", path.display()))),
    }
}

/// Recursively overlays `patch` onto `base`. Keys unknown to `base` are
/// rejected so typos fail loudly.
pub fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::InvalidConfig(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Parses `a.b.c=value` into a nested patch. The value is read as JSON when
/// it parses, otherwise as a plain string.
pub fn parse_override(s: &str) -> Result<Value> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{s}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::InvalidConfig(format!("bad override key `{key}`")));
    }
    let mut v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for part in key.rsplit('.') {
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

/// Defaults, then the config file, then each override in order; the result
/// is round-tripped through `T` so it carries every field.
pub fn resolve<T>(file: Option<&Path>, overrides: &[String]) -> Result<Value>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut v = serde_json::to_value(T::default())?;
    if let Some(p) = file {
        merge(&mut v, &read_config_file(p)?, "")?;
    }
    for o in overrides {
        merge(&mut v, &parse_override(o)?, "")?;
    }
    let typed: T = serde_json::from_value(v)?;
    Ok(serde_json::to_value(typed)?)
}

/// Reads the value at a dotted path.
pub fn get_path<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, k| cur.get(k))
}
