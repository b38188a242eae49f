//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored.
//! Command-line flags use the same keys and are applied after the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mix::MixMode;
use crate::trainer::TrainConfig;

pub const KEYS: [&str; 15] = [
    "lr",
    "batch_size",
    "eval_interval",
    "lr_patience",
    "lr_factor",
    "stop_patience",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "max_steps",
    "proj_dim",
    "hidden_dim",
    "dropout",
    "mix_mode",
];

/// Training schedule plus the probe hyperparameters that are not fixed by the task.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub mix_mode: MixMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            proj_dim: 256,
            hidden_dim: 256,
            dropout: 0.3,
            mix_mode: MixMode::Learned,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "lr_patience" => t.lr_patience = parse(key, value)?,
            "lr_factor" => t.lr_factor = parse(key, value)?,
            "stop_patience" => t.stop_patience = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "proj_dim" => self.proj_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "mix_mode" => self.mix_mode = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let mix = match self.mix_mode {
            MixMode::Learned => "learned",
            MixMode::Uniform => "uniform",
        };
        let values = [
            t.lr.to_string(),
            t.batch_size.to_string(),
            t.eval_interval.to_string(),
            t.lr_patience.to_string(),
            t.lr_factor.to_string(),
            t.stop_patience.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.eps.to_string(),
            t.seed.to_string(),
            t.max_steps.to_string(),
            self.proj_dim.to_string(),
            self.hidden_dim.to_string(),
            self.dropout.to_string(),
            mix.to_string(),
        ];
        KEYS.into_iter().zip(values).collect()
    }
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_kv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let file =
            parse_kv("# schedule\nlr = 1e-3\nbatch_size=32\n\nmix_mode = uniform # ablation\n")
                .unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply(file.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .unwrap();
        cfg.apply([("lr", "2e-4")]).unwrap();
        assert_eq!(cfg.train.lr, 2e-4);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.mix_mode, MixMode::Uniform);
    }

    #[test]
    fn defaults_match_schedule() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lr, 5e-4);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.eval_interval, 1000);
        assert_eq!((cfg.train.lr_patience, cfg.train.stop_patience), (5, 20));
        assert_eq!(cfg.train.lr_factor, 0.5);
        assert_eq!((cfg.proj_dim, cfg.hidden_dim, cfg.dropout), (256, 256, 0.3));
    }

    #[test]
    fn errors() {
        assert!(parse_kv("lr 1e-3").is_err());
        assert!(parse_kv("lr=1\nlr=2").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply([("learning_rate", "1")]).is_err());
        assert!(cfg.apply([("lr", "fast")]).is_err());
        assert!(cfg.apply([("lr_factor", "2")]).is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply([("seed", "7"), ("dropout", "0.1")]).unwrap();
        let pairs = cfg.to_pairs();
        let mut back = RunConfig::default();
        back.apply(pairs.iter().map(|(k, v)| (*k, v.as_str())))
            .unwrap();
        assert_eq!(back, cfg);
    }
}
