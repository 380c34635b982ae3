//! Flat key=value config files mirroring the training, loss, and decode
//! settings. Precedence: CLI flag > file value > built-in default.
//!
//! ```text
//! # distill settings
//! steps = 2000
//! peak_lr = 1e-3
//! freeze_encoder = true
//! alpha_kl = 0.8
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::Context;
use serde_json::{Map, Value};

use distilkit_core::decode::DecodeConfig;
use distilkit_core::losses::{LossWeights, TrainConfig};

use crate::validation;

/// Parsed key=value pairs, order-independent.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(validation(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(validation(format!(
                    "{}:{}: duplicate key {key}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(FileConfig { values })
    }
}

/// The resolved training-side settings a command runs with.
#[derive(Debug, Clone, Copy)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub decode: DecodeConfig,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            decode: DecodeConfig::default(),
        }
    }
}

fn set<T: FromStr>(slot: &mut T, key: &str, value: &str) -> anyhow::Result<()> {
    *slot = value
        .parse()
        .map_err(|_| validation(format!("config key {key}: cannot parse {value:?}")))?;
    Ok(())
}

impl RunSettings {
    /// Applies every key of a config file; unknown keys are validation
    /// errors so typos cannot silently fall back to defaults.
    pub fn apply_file(&mut self, file: &FileConfig) -> anyhow::Result<()> {
        for (key, value) in &file.values {
            let (key, value) = (key.as_str(), value.as_str());
            match key {
                "steps" => set(&mut self.train.steps, key, value)?,
                "batch_size" => set(&mut self.train.batch_size, key, value)?,
                "warmup_steps" => set(&mut self.train.warmup_steps, key, value)?,
                "peak_lr" => set(&mut self.train.peak_lr, key, value)?,
                "beta1" => set(&mut self.train.beta1, key, value)?,
                "beta2" => set(&mut self.train.beta2, key, value)?,
                "epsilon" => set(&mut self.train.epsilon, key, value)?,
                "weight_decay" => set(&mut self.train.weight_decay, key, value)?,
                "max_grad_norm" => set(&mut self.train.max_grad_norm, key, value)?,
                "freeze_encoder" => set(&mut self.train.freeze_encoder, key, value)?,
                "seed" => set(&mut self.train.seed, key, value)?,
                "alpha_kl" => set(&mut self.weights.alpha_kl, key, value)?,
                "alpha_pl" => set(&mut self.weights.alpha_pl, key, value)?,
                "alpha_mse" => set(&mut self.weights.alpha_mse, key, value)?,
                "temperature" => set(&mut self.weights.temperature, key, value)?,
                "max_len" => set(&mut self.decode.max_len, key, value)?,
                _ => return Err(validation(format!("unknown config key {key}"))),
            }
        }
        Ok(())
    }

    /// JSON echo of the resolved settings; keys match the config-file keys,
    /// so an echo written back as `key = value` lines reproduces the run.
    pub fn echo(&self) -> Value {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| m.insert(k.to_string(), v);
        put("steps", self.train.steps.into());
        put("batch_size", self.train.batch_size.into());
        put("warmup_steps", self.train.warmup_steps.into());
        put("peak_lr", crate::report::num(self.train.peak_lr));
        put("beta1", crate::report::num(self.train.beta1));
        put("beta2", crate::report::num(self.train.beta2));
        put("epsilon", crate::report::num(self.train.epsilon));
        put("weight_decay", crate::report::num(self.train.weight_decay));
        put("max_grad_norm", crate::report::num(self.train.max_grad_norm));
        put("freeze_encoder", self.train.freeze_encoder.into());
        put("seed", self.train.seed.into());
        put("alpha_kl", crate::report::num(self.weights.alpha_kl));
        put("alpha_pl", crate::report::num(self.weights.alpha_pl));
        put("alpha_mse", crate::report::num(self.weights.alpha_mse));
        put("temperature", crate::report::num(self.weights.temperature));
        put("max_len", self.decode.max_len.into());
        Value::Object(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str) -> anyhow::Result<FileConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, text).unwrap();
        FileConfig::load(&path)
    }

    #[test]
    fn file_values_override_defaults_and_parse_types() {
        let file = load_str(
            "# comment\nsteps = 42\npeak_lr = 5e-4\nfreeze_encoder = true\nalpha_mse = 0.5\n",
        )
        .unwrap();
        let mut s = RunSettings::default();
        s.apply_file(&file).unwrap();
        assert_eq!(s.train.steps, 42);
        assert_eq!(s.train.peak_lr, 5e-4);
        assert!(s.train.freeze_encoder);
        assert_eq!(s.weights.alpha_mse, 0.5);
        // Untouched keys keep their defaults.
        assert_eq!(s.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_duplicates_and_bad_values_are_rejected() {
        let mut s = RunSettings::default();
        let file = load_str("stepz = 42\n").unwrap();
        let err = s.apply_file(&file).unwrap_err();
        assert!(err.to_string().contains("stepz"));
        assert_eq!(crate::exit_code(&err), 2);

        assert!(load_str("steps = 1\nsteps = 2\n").is_err());
        assert!(load_str("just words\n").is_err());

        let file = load_str("steps = many\n").unwrap();
        assert!(s.apply_file(&file).is_err());
    }

    #[test]
    fn echo_round_trips_through_a_config_file() {
        let mut s = RunSettings::default();
        s.train.steps = 7;
        s.weights.alpha_kl = 0.25;
        let echo = s.echo();
        let text: String = echo
            .as_object()
            .unwrap()
            .iter()
            .map(|(k, v)| format!("{k} = {}\n", v))
            .collect();
        let file = load_str(&text).unwrap();
        let mut back = RunSettings::default();
        back.apply_file(&file).unwrap();
        assert_eq!(back.train.steps, 7);
        assert_eq!(back.weights.alpha_kl, 0.25);
        assert_eq!(back.train.peak_lr, s.train.peak_lr);
    }
}
