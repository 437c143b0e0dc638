//! Run configuration: a JSON file with sections {data, model, train,
//! mask, ablation}, dotted-path command-line overrides, and an
//! environment seed override. Unknown keys anywhere are configuration
//! errors, not warnings.

use ibn_core::data::synthetic::SynthParams;
use ibn_core::model::{AblationFlags, ModelConfig};
use ibn_core::optim::AdamConfig;
use ibn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Raised for anything wrong with the configuration itself; maps to
/// exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub t: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_alpha() -> f64 {
    SynthParams::default().alpha
}

fn default_beta() -> f64 {
    SynthParams::default().beta
}

fn default_period() -> f64 {
    SynthParams::default().period
}

fn default_noise_std() -> f64 {
    SynthParams::default().noise_std
}

impl SynthSection {
    pub fn params(&self) -> SynthParams {
        SynthParams {
            alpha: self.alpha,
            beta: self.beta,
            period: self.period,
            noise_std: self.noise_std,
        }
    }
}

/// Where the series comes from: generated on the fly, or loaded from
/// CSV files. Exactly one of `synth` and `series` must be set.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synth: Option<SynthSection>,
    /// Series CSV path (header row of variable ids).
    pub series: Option<String>,
    /// Predefined adjacency CSV; required with `series`.
    pub adjacency: Option<String>,
    /// Optional coordinates CSV ("id,x,y"); used to rebuild the
    /// predefined graph when no adjacency file is given.
    pub coords: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub h: usize,
    pub l: usize,
    pub d: usize,
    pub embed_dim: usize,
    pub p: f64,
    pub s: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            h: m.h,
            l: m.l,
            d: m.d,
            embed_dim: m.embed_dim,
            p: m.p,
            s: m.s,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.adam.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            clip_norm: t.adam.clip_norm,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub rate: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection { rate: 0.5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub uai_to_ia: bool,
    pub ggcn_to_agcn: bool,
    pub bi_to_uni: bool,
    /// Seeds for the `ablate` subcommand; empty means three consecutive
    /// seeds starting at train.seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            uai_to_ia: false,
            ggcn_to_agcn: false,
            bi_to_uni: false,
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub mask: MaskSection,
    pub ablation: AblationSection,
}

impl Config {
    /// Model configuration for a series with `n` variables.
    pub fn model_config(&self, n: usize) -> ModelConfig {
        ModelConfig {
            n,
            h: self.model.h,
            l: self.model.l,
            c: 1,
            d: self.model.d,
            embed_dim: self.model.embed_dim,
            p: self.model.p,
            s: self.model.s,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.train.lr,
                clip_norm: self.train.clip_norm,
                ..AdamConfig::default()
            },
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            seed: self.train.seed,
        }
    }

    pub fn ablation_flags(&self) -> AblationFlags {
        AblationFlags {
            uai_to_ia: self.ablation.uai_to_ia,
            ggcn_to_agcn: self.ablation.ggcn_to_agcn,
            bi_to_uni: self.ablation.bi_to_uni,
        }
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            (0..3).map(|i| self.train.seed + i).collect()
        } else {
            self.ablation.seeds.clone()
        }
    }
}

/// Parse "--section.key value" pairs. Each override key must name an
/// existing config path; the value is parsed as JSON, falling back to a
/// string so paths need no extra quoting.
pub fn apply_overrides(
    value: &mut serde_json::Value,
    overrides: &[String],
) -> Result<(), ConfigError> {
    if overrides.len() % 2 != 0 {
        return Err(ConfigError(format!(
            "override list must be \"--section.key value\" pairs, got a dangling {:?}",
            overrides.last().expect("odd length implies non-empty")
        )));
    }
    for pair in overrides.chunks(2) {
        let raw_key = &pair[0];
        let key = raw_key
            .strip_prefix("--")
            .ok_or_else(|| ConfigError(format!("override key {raw_key:?} must start with --")))?;
        let parsed: serde_json::Value = serde_json::from_str(&pair[1])
            .unwrap_or_else(|_| serde_json::Value::String(pair[1].clone()));
        let mut cursor = &mut *value;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, ancestors) = parts.split_last().expect("split produces at least one part");
        for part in ancestors {
            cursor = cursor
                .as_object_mut()
                .ok_or_else(|| {
                    ConfigError(format!("override {key:?} descends into a non-object"))
                })?
                .entry((*part).to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        cursor
            .as_object_mut()
            .ok_or_else(|| ConfigError(format!("override {key:?} descends into a non-object")))?
            .insert((*last).to_string(), parsed);
    }
    Ok(())
}

/// Load a config file, apply dotted overrides, then let the environment
/// seed win over both.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("config {} is not valid JSON: {e}", path.display())))?;
    apply_overrides(&mut value, overrides)?;
    let mut config: Config = serde_json::from_value(value)
        .map_err(|e| ConfigError(format!("invalid config: {e}")))?;
    if let Ok(seed) = std::env::var("IBN_SEED") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| ConfigError(format!("IBN_SEED={seed:?} is not a valid seed")))?;
        config.train.seed = seed;
    }
    validate(&config)?;
    Ok(config)
}

fn validate(config: &Config) -> Result<(), ConfigError> {
    match (&config.data.synth, &config.data.series) {
        (Some(_), Some(_)) => {
            return Err(ConfigError(
                "data.synth and data.series are mutually exclusive".to_string(),
            ))
        }
        (None, None) => {
            return Err(ConfigError(
                "config needs either data.synth or data.series".to_string(),
            ))
        }
        (None, Some(_)) => {
            if config.data.adjacency.is_none() && config.data.coords.is_none() {
                return Err(ConfigError(
                    "data.series needs data.adjacency or data.coords for the predefined graph"
                        .to_string(),
                ));
            }
        }
        (Some(_), None) => {}
    }
    if !(0.0..1.0).contains(&config.mask.rate) {
        return Err(ConfigError(format!(
            "mask.rate {} must lie in [0, 1)",
            config.mask.rate
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
        let path = dir.join("config.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_synth_config_fills_defaults() {
        let dir = tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"data":{"synth":{"n":8,"t":200}}}"#);
        let config = load_config(&path, &[]).unwrap();
        assert_eq!(config.model.h, 12);
        assert_eq!(config.train.max_epochs, 200);
        assert_eq!(config.mask.rate, 0.5);
        assert_eq!(config.data.synth.as_ref().unwrap().alpha, 0.6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{"data":{"synth":{"n":8,"t":200}},"model":{"hidden":16}}"#,
        );
        let err = load_config(&path, &[]).unwrap_err();
        assert!(err.to_string().contains("hidden"), "got: {err}");
    }

    #[test]
    fn dotted_overrides_reach_nested_keys() {
        let dir = tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"data":{"synth":{"n":8,"t":200}}}"#);
        let overrides = vec![
            "--train.lr".to_string(),
            "0.01".to_string(),
            "--model.d".to_string(),
            "4".to_string(),
            "--data.synth.t".to_string(),
            "300".to_string(),
        ];
        let config = load_config(&path, &overrides).unwrap();
        assert_eq!(config.train.lr, 0.01);
        assert_eq!(config.model.d, 4);
        assert_eq!(config.data.synth.unwrap().t, 300);
    }

    #[test]
    fn override_with_unknown_key_is_rejected() {
        let dir = tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"data":{"synth":{"n":8,"t":200}}}"#);
        let overrides = vec!["--train.momentum".to_string(), "0.9".to_string()];
        let err = load_config(&path, &overrides).unwrap_err();
        assert!(err.to_string().contains("momentum"), "got: {err}");
    }

    #[test]
    fn dangling_override_is_rejected() {
        let dir = tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"data":{"synth":{"n":8,"t":200}}}"#);
        let overrides = vec!["--train.lr".to_string()];
        let err = load_config(&path, &overrides).unwrap_err();
        assert!(err.to_string().contains("pairs"), "got: {err}");
    }

    #[test]
    fn series_without_graph_source_is_rejected() {
        let dir = tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"data":{"series":"s.csv"}}"#);
        let err = load_config(&path, &[]).unwrap_err();
        assert!(err.to_string().contains("adjacency"), "got: {err}");
    }

    #[test]
    fn string_override_values_need_no_quoting() {
        let dir = tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{"data":{"series":"a.csv","adjacency":"adj.csv"}}"#,
        );
        let overrides = vec!["--data.series".to_string(), "other.csv".to_string()];
        let config = load_config(&path, &overrides).unwrap();
        assert_eq!(config.data.series.as_deref(), Some("other.csv"));
    }
}
