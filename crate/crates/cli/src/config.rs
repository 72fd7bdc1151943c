//! Layered run configuration: defaults, then a TOML/JSON file, then
//! `key=value` overrides on dotted paths.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mcse_core::network::{default_reference, ModelConfig};
use mcse_core::sim::SimConfig;
use mcse_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Governs model init, simulation and training order.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::desk(6),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

fn load_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let is_toml = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let v: toml::Value = toml::from_str(&text)
            .with_context(|| format!("{} is not valid TOML", path.display()))?;
        Ok(serde_json::to_value(v)?)
    } else {
        serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// JSON literal when it parses as one, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            bail!(
                "override `{key}`: `{}` is not a table",
                parts[..i].join(".")
            );
        };
        let Some(slot) = map.get_mut(*part) else {
            bail!("override `{key}`: unknown key `{}`", parts[..=i].join("."));
        };
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    let mut explicit_ref = false;
    if let Some(path) = file {
        let f = load_file(path)?;
        explicit_ref |= f.pointer("/model/reference_mic").is_some();
        merge(&mut v, f);
    }
    for o in overrides {
        let Some((k, raw)) = o.split_once('=') else {
            bail!("override `{o}` is not of the form key=value");
        };
        let k = k.trim();
        explicit_ref |= k == "model.reference_mic";
        set_path(&mut v, k, parse_value(raw.trim()))?;
    }
    let mut cfg: RunConfig = serde_json::from_value(v).context("invalid configuration")?;
    if !explicit_ref {
        cfg.model.reference_mic = default_reference(cfg.model.n_mics);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.sim.seed = cfg.seed;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.sim.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = resolve(
            None,
            &[
                "model.c_mid=8".into(),
                "train.loss_weights.time=0.5".into(),
                "model.n_mics=3".into(),
            ],
            Some(4),
        )
        .unwrap();
        assert_eq!(cfg.model.c_mid, 8);
        assert_eq!(cfg.train.loss_weights.time, 0.5);
        assert_eq!(cfg.model.reference_mic, 1);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.sim.seed), (4, 4, 4));
    }

    #[test]
    fn toml_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 9\n[train]\nepochs = 3\nlr = 0.001\n").unwrap();
        let cfg = resolve(Some(&p), &["train.epochs=5".into()], None).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.lr, 0.001);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(resolve(None, &["nonsense=1".into()], None).is_err());
        assert!(resolve(None, &["model.c_midd=3".into()], None).is_err());
        assert!(resolve(None, &["model.c_mid=0".into()], None).is_err());
        assert!(resolve(None, &["model".into()], None).is_err());
    }
}
