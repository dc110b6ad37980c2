use std::path::Path;

use epimask::evaluation::EvalOptions;
use epimask::geometry::RansacConfig;
use epimask::groundtruth::SceneConfig;
use epimask::matcher::MatcherConfig;
use epimask::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub top_k: usize,
    /// Squared 3D distance threshold of the world-point check.
    pub delta_3d: f64,
    pub thresholds: Vec<f64>,
    /// Width in degrees of the view and track angle bins.
    pub bin_width: f64,
    pub ransac: RansacConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self { top_k: o.top_k, delta_3d: o.delta_3d, thresholds: o.thresholds, bin_width: 10.0, ransac: o.ransac }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions { top_k: self.top_k, delta_3d: self.delta_3d, thresholds: self.thresholds.clone(), ransac: self.ransac }
    }
}

/// Every setting of every command in one versioned document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub schema: u32,
    pub matcher: MatcherConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Overlay `patch` onto `base`. Keys must already exist in `base`.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| CliError::config(&sub, "unknown field"))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// Apply one `a.b.c=value` override. The value is parsed as JSON, falling
/// back to a plain string.
pub fn apply_override(doc: &mut Value, item: &str) -> Result<(), CliError> {
    let (path, raw) = item.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{item}` is not path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *doc;
    for key in path.split('.') {
        slot = match slot {
            Value::Object(m) => m.get_mut(key).ok_or_else(|| CliError::config(path, "unknown field"))?,
            Value::Array(a) => {
                let i: usize = key.parse().map_err(|_| CliError::config(path, "array index expected"))?;
                a.get_mut(i).ok_or_else(|| CliError::config(path, "index out of range"))?
            }
            _ => return Err(CliError::config(path, "not a container")),
        };
    }
    *slot = value;
    Ok(())
}

fn section<T: DeserializeOwned>(doc: &Value, name: &str) -> Result<T, CliError> {
    T::deserialize(&doc[name]).map_err(|e| CliError::config(name, e.to_string()))
}

impl RunConfig {
    /// Defaults, overlaid by the optional config file, overlaid by `--set` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = serde_json::to_value(RunConfig { schema: SCHEMA, ..Default::default() }).expect("config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| CliError::config("", format!("{}: {e}", p.display())))?;
            merge(&mut doc, file, "")?;
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let schema: u32 = section(&doc, "schema")?;
        if schema != SCHEMA {
            return Err(CliError::config("schema", format!("expected {SCHEMA}, got {schema}")));
        }
        let cfg = RunConfig {
            schema,
            matcher: section(&doc, "matcher")?,
            scene: section(&doc, "scene")?,
            train: section(&doc, "train")?,
            eval: section(&doc, "eval")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.matcher.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        if !(self.eval.bin_width > 0.0) {
            return Err(CliError::config("eval.bin_width", "must be positive"));
        }
        if self.eval.thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(CliError::config("eval.thresholds", "must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_then_strings() {
        let cfg = RunConfig::load(None, &["matcher.gamma=0.6".into(), "train.stage=lora".into()]).unwrap();
        assert_eq!(cfg.matcher.gamma, 0.6);
        assert_eq!(cfg.train.stage, epimask::matcher::TrainStage::Lora);
    }

    #[test]
    fn errors_carry_the_field_path() {
        let e = RunConfig::load(None, &["matcher.gamma=1.5".into()]).unwrap_err();
        assert!(matches!(&e, CliError::Config { field, .. } if field == "matcher.gamma"), "{e}");
        let e = RunConfig::load(None, &["matcher.gama=0.5".into()]).unwrap_err();
        assert!(matches!(&e, CliError::Config { field, .. } if field == "matcher.gama"), "{e}");
        let e = RunConfig::load(None, &["scene.left_view.off_nadir=70".into()]).unwrap_err();
        assert!(matches!(&e, CliError::Config { field, .. } if field == "scene.left_view.off_nadir"), "{e}");
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"schema": 1, "scene": {"p": 32}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(cfg.scene.p, 32);
        assert_eq!(cfg.matcher, MatcherConfig::default());
        std::fs::write(&p, r#"{"schema": 2}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(CliError::Config { field, .. }) if field == "schema"));
    }
}
