//! Run settings from a TOML file with flat dotted keys.
//!
//! ```toml
//! training.tau = 0.1
//! training.iterations = 100
//! energy.lambda_pen = 0.1
//! ```
//!
//! Nested tables (`[training]`) are flattened to the same keys, so either
//! spelling works. Unknown keys are errors.

use std::collections::BTreeMap;

use toml::Value;

use crate::energy::EnergyConfig;
use crate::training::{DenominatorMode, Similarity, TrainingConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub training: TrainingConfig,
    pub energy: EnergyConfig,
}

/// Flattens nested tables into `a.b.c` keys.
pub fn flatten(text: &str) -> Result<BTreeMap<String, Value>> {
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
    let mut out = BTreeMap::new();
    fn walk(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(t) => walk(&key, t, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    walk("", &table, &mut out);
    Ok(out)
}

fn float(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("{key} expects a number, got {v}"))),
    }
}

fn count(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("{key} expects a non-negative integer, got {v}"))),
    }
}

fn seed(key: &str, v: &Value) -> Result<u64> {
    count(key, v).map(|c| c as u64)
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in flatten(text)? {
            s.set(&k, &v)?;
        }
        Ok(s)
    }

    /// Applies one `key=value` override; the value is read as a TOML value,
    /// falling back to a bare string.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(key.trim(), &value)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let t = &mut self.training;
        let e = &mut self.energy;
        match key {
            "training.tau" | "training.temperature" => t.temperature = float(key, v)?,
            "training.learning_rate" => t.learning_rate = float(key, v)?,
            "training.iterations" => t.iterations = count(key, v)?,
            "training.k_nn" => t.k_nn = count(key, v)?,
            "training.max_keypoints" => t.max_keypoints = count(key, v)?,
            "training.seed" => t.seed = seed(key, v)?,
            "training.heads" => t.heads = count(key, v)?,
            "training.head_dim" => t.head_dim = count(key, v)?,
            "training.layers" => t.layers = count(key, v)?,
            "training.epsilon" => t.epsilon = float(key, v)?,
            "training.mode" => {
                t.mode = match v.as_str() {
                    Some("exclusive") => DenominatorMode::Exclusive,
                    Some("standard") => DenominatorMode::Standard,
                    _ => return Err(Error::Config(format!("{key} must be \"exclusive\" or \"standard\", got {v}"))),
                }
            }
            "training.similarity" => {
                t.similarity = match v.as_str() {
                    Some("cosine") => Similarity::Cosine,
                    _ => return Err(Error::Config(format!("{key} must be \"cosine\", got {v}"))),
                }
            }
            "energy.lambda_pen" => e.lambda_pen = float(key, v)?,
            "energy.lambda_spen" => e.lambda_spen = float(key, v)?,
            "energy.lambda_pose" => e.lambda_pose = float(key, v)?,
            "energy.delta" => e.delta = float(key, v)?,
            "energy.steps" => e.steps = count(key, v)?,
            "energy.step_size" | "energy.learning_rate" => e.step_size = float(key, v)?,
            "energy.momentum" => e.momentum = float(key, v)?,
            "energy.restarts" => e.restarts = count(key, v)?,
            "energy.seed" => e.seed = seed(key, v)?,
            "energy.epsilon" => e.epsilon = float(key, v)?,
            "energy.init_inflation" => e.init_inflation = float(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.energy.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_and_nested_agree() {
        let a = Settings::from_toml("training.tau = 0.5\nenergy.restarts = 3\n").unwrap();
        let b = Settings::from_toml("[training]\ntau = 0.5\n[energy]\nrestarts = 3\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.training.temperature, 0.5);
        assert_eq!(a.energy.restarts, 3);
    }

    #[test]
    fn overrides_and_errors() {
        let mut s = Settings::default();
        s.set_str("training.mode = standard").unwrap();
        s.set_str("energy.lambda_pen=1").unwrap();
        assert_eq!(s.training.mode, DenominatorMode::Standard);
        assert_eq!(s.energy.lambda_pen, 1.0);
        assert!(s.set_str("energy.nope=1").is_err());
        assert!(s.set_str("training.iterations=-1").is_err());
        assert!(Settings::from_toml("training.tau = \"x\"").is_err());
    }
}
