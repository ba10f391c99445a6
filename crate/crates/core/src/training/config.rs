//! Training hyper-parameters, profiles, and flat key-value config resolution
//! (command line over file over profile defaults).

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ReverseVariant, DEFAULT_T};
use crate::error::{Error, Result};
use crate::llformer::Reduction;
use crate::model::{ModelConfig, Stage2Toggles};
use crate::training::optim::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("profile: expected desk or paper, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Self::F32 => DType::F32,
            Self::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub profile: Profile,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub lr_schedule: LrSchedule,
    pub reduction: Reduction,
    pub precision: Precision,
    /// Diffusion steps `T` for stage 2.
    pub t_steps: usize,
    pub variant: ReverseVariant,
    pub toggles: Stage2Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-size optimizer settings.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            epochs: 200,
            batch_size: 64,
            lr: 3.5e-4,
            weight_decay: 1e-4,
            seed: 0,
            max_steps: None,
            lr_schedule: LrSchedule::Constant,
            reduction: Reduction::Sum,
            precision: Precision::F32,
            t_steps: DEFAULT_T,
            variant: ReverseVariant::Paper,
            toggles: Stage2Toggles::default(),
        }
    }

    /// Short runs on the synthetic toy set.
    pub fn desk() -> Self {
        Self { profile: Profile::Desk, epochs: 30, batch_size: 16, lr: 3e-3, ..Self::paper() }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if self.t_steps == 0 {
            return Err(Error::Config("t_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies one key. Returns `false` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
            }
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_steps" => self.max_steps = Some(parse(key, value)?),
            "lr_schedule" => {
                self.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(Error::Config(format!("lr_schedule: expected constant or cosine, got {value:?}"))),
                }
            }
            "reduction" => self.reduction = value.parse()?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision: expected f32 or f64, got {value:?}"))),
                }
            }
            "T" | "t_steps" => self.t_steps = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "diffusion" => self.toggles.diffusion = flag(key, value)?,
            "total_loss" => self.toggles.total_loss = flag(key, value)?,
            "insert_noise" => self.toggles.insert_noise = flag(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Model keys accepted in config files; applied once the class list is known.
pub const MODEL_KEYS: [&str; 4] = ["c_epd", "d_embed", "llformer_channels", "denoiser_layers"];

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub train: TrainConfig,
    pub model_overrides: Vec<(String, String)>,
}

impl Settings {
    /// Profile defaults, then `file` entries, then `cli` entries.
    pub fn resolve(file: &[(String, String)], cli: &[(String, String)]) -> Result<Self> {
        let find = |kv: &[(String, String)]| kv.iter().rev().find(|(k, _)| k == "profile").map(|(_, v)| v.clone());
        let profile: Profile = match find(cli).or_else(|| find(file)) {
            Some(p) => p.parse()?,
            None => Profile::Desk,
        };
        let mut train = TrainConfig::for_profile(profile);
        let mut model_overrides = Vec::new();
        for (k, v) in file.iter().chain(cli) {
            if k == "profile" {
                continue;
            }
            if train.set(k, v)? {
                continue;
            }
            if MODEL_KEYS.contains(&k.as_str()) {
                model_overrides.push((k.clone(), v.clone()));
                continue;
            }
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        train.validate()?;
        Ok(Self { train, model_overrides })
    }

    /// Model config for the given classes with overrides applied.
    pub fn model_config(&self, class_names: &[String], landmark_count: usize) -> Result<ModelConfig> {
        let mut m = match self.train.profile {
            Profile::Desk => ModelConfig::desk(class_names, landmark_count),
            Profile::Paper => ModelConfig::paper_scale(class_names, landmark_count),
        };
        for (k, v) in &self.model_overrides {
            m.set(k, v)?;
        }
        m.validate()?;
        Ok(m)
    }
}

/// Parses a flat TOML document (`key = value` lines, no tables) into string pairs.
pub fn parse_flat_config(text: &str) -> Result<Vec<(String, String)>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(table.len());
    for (k, v) in table {
        let s = match v {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    toml::Value::Integer(n) => Ok(n.to_string()),
                    _ => Err(Error::Config(format!("`{k}`: arrays may only hold integers"))),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            _ => return Err(Error::Config(format!("`{k}`: nested values are not supported in the flat config"))),
        };
        out.push((k, s));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn precedence_matrix() {
        let d = TrainConfig::desk();
        // (file lr, cli lr) -> expected
        let cases: [(Option<&str>, Option<&str>, f64); 4] = [
            (None, None, d.lr),
            (Some("0.01"), None, 0.01),
            (None, Some("0.02"), 0.02),
            (Some("0.01"), Some("0.02"), 0.02),
        ];
        for (file, cli, expect) in cases {
            let f = file.map(|v| kv(&[("lr", v)])).unwrap_or_default();
            let c = cli.map(|v| kv(&[("lr", v)])).unwrap_or_default();
            assert_eq!(Settings::resolve(&f, &c).unwrap().train.lr, expect);
        }
        let s = Settings::resolve(&kv(&[("profile", "paper")]), &[]).unwrap();
        assert_eq!(s.train.epochs, 200);
        let s = Settings::resolve(&kv(&[("profile", "paper")]), &kv(&[("profile", "desk")])).unwrap();
        assert_eq!(s.train.profile, Profile::Desk);
    }

    #[test]
    fn paper_defaults() {
        let p = TrainConfig::paper();
        assert_eq!((p.lr, p.batch_size, p.weight_decay, p.epochs), (3.5e-4, 64, 1e-4, 200));
        assert_eq!(p.t_steps, 4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Settings::resolve(&kv(&[("learning_rate", "0.1")]), &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(Settings::resolve(&[], &kv(&[("epochs", "ten")])).unwrap_err().to_string().contains("epochs"));
    }

    #[test]
    fn flat_toml_parses_scalars() {
        let kvs = parse_flat_config(
            "epochs = 3\nlr = 0.5\ninsert_noise = false\nvariant = \"ddpm_bar\"\nllformer_channels = [8, 16]\n",
        )
        .unwrap();
        let s = Settings::resolve(&kvs, &[]).unwrap();
        assert_eq!(s.train.epochs, 3);
        assert_eq!(s.train.lr, 0.5);
        assert!(!s.train.toggles.insert_noise);
        assert_eq!(s.train.variant, ReverseVariant::DdpmBar);
        assert_eq!(s.model_overrides, kv(&[("llformer_channels", "8,16")]));
        assert!(parse_flat_config("[section]\na = 1\n").is_err());
    }
}
