//! Run configuration with flat `key=value` overrides.
//!
//! Keys are dotted paths into the JSON form of [`Config`], e.g.
//! `train.loss.mu_match=0` or `model.attention=nystrom`. Values are read as
//! JSON when they parse as such and as plain strings otherwise.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "PATHTREE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Drives initialization, shuffling, fold assignment and data generation.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticConfig,
}

impl Config {
    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        if key == "train.seed" || key == "synth.seed" {
            return Err(Error::Config(format!("{key} follows the top-level seed; set seed instead")));
        }
        let value = serde_json::from_str::<Value>(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut doc = serde_json::to_value(*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
        }
        if slot.is_object() {
            return Err(Error::Config(format!("{key:?} is a section, not a value")));
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        self.sync_seed();
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync_seed();
        self
    }

    fn sync_seed(&mut self) {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
    }

    /// Defaults, then the seed environment variable, then `overrides` in order.
    pub fn resolve(env_seed: Option<&str>, overrides: &[String]) -> Result<Config> {
        let mut c = Config::default();
        if let Some(s) = env_seed {
            let seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            c = c.with_seed(seed);
        }
        for o in overrides {
            c.set(o)?;
        }
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Flat `key=value` lines, one per leaf setting.
    pub fn to_kv(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut String) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                Value::String(s) => out.push_str(&format!("{prefix}={s}\n")),
                other => out.push_str(&format!("{prefix}={other}\n")),
            }
        }
        let mut out = String::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionVariant;
    use crate::slide_attention::PinvMode;

    #[test]
    fn overrides_apply_in_order() {
        let mut c = Config::default();
        c.set("train.loss.mu_match=0").unwrap();
        c.set("model.attention=nystrom").unwrap();
        c.set("model.nystrom.pinv=\"exact\"").unwrap();
        c.set("train.epochs=7").unwrap();
        c.set("seed=42").unwrap();
        assert_eq!(c.train.loss.mu_match, 0.0);
        assert_eq!(c.model.attention, AttentionVariant::Nystrom);
        assert_eq!(c.model.nystrom.pinv, PinvMode::Exact);
        assert_eq!(c.train.epochs, 7);
        assert_eq!((c.train.seed, c.synth.seed), (42, 42));
    }

    #[test]
    fn precedence() {
        let c = Config::resolve(Some("9"), &[]).unwrap();
        assert_eq!(c.seed, 9);
        let c = Config::resolve(Some("9"), &["seed=3".into()]).unwrap();
        assert_eq!(c.seed, 3);
        assert!(Config::resolve(Some("x"), &[]).is_err());
    }

    #[test]
    fn bad_overrides() {
        let mut c = Config::default();
        for bad in ["nokey", "train.nope=1", "train=1", "train.epochs=\"many\"", "train.seed=1", "model.attention=dense"] {
            assert!(matches!(c.set(bad), Err(Error::Config(_))), "{bad}");
        }
        assert_eq!(c, Config::default());
    }

    #[test]
    fn dumps_are_complete() {
        let c = Config::default();
        let kv = c.to_kv();
        assert!(kv.contains("train.adam.lr=0.0003\n"));
        assert!(kv.contains("train.loss.lambda_parent=0.002\n"));
        assert!(kv.contains("model.attention=gated\n"));
        let back: Config = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        for line in kv.lines() {
            let mut d = Config::default();
            if !line.starts_with("train.seed") && !line.starts_with("synth.seed") {
                d.set(line).unwrap();
                assert_eq!(d, c, "{line}");
            }
        }
    }
}
