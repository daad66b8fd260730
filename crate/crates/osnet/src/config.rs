//! Run configurations read from JSON.
//!
//! Every field has a default, so a config file only lists what it changes.
//! Unknown keys are rejected and parse errors name the offending key path.

use std::fs;
use std::path::{Path, PathBuf};

use osnet_core::data::{Split, SynthConfig};
use osnet_core::nn::ModelSpec;
use osnet_core::train::{SearchConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: path.to_owned(),
        key: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_json(&text, path)
}

/// Reads `path` when given, otherwise returns the defaults.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    /// `num_classes` is replaced by the identity count of the training split.
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchRun {
    pub model: ModelSpec,
    pub search: SearchConfig,
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Images per forward pass during feature extraction.
    pub batch: usize,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun { checkpoint: None, data: None, batch: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActmapRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Split,
    /// Maps for the first this many images of the split.
    pub count: usize,
}

impl Default for ActmapRun {
    fn default() -> Self {
        ActmapRun { checkpoint: None, data: None, split: Split::Query, count: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeriveRun {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Block,
    Model,
    Supernet,
    #[default]
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckRun {
    pub scope: Scope,
    pub seed: u64,
}

/// Model accounting over a grid of width and resolution multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountRun {
    pub widths: Vec<f64>,
    pub resolutions: Vec<f64>,
    pub base_height: usize,
    pub base_width: usize,
}

impl Default for CountRun {
    fn default() -> Self {
        let spec = ModelSpec::default();
        CountRun { widths: vec![1.0], resolutions: vec![1.0], base_height: spec.base_height, base_width: spec.base_width }
    }
}

impl CountRun {
    /// Width multipliers at full resolution, then resolution multipliers at
    /// full width.
    pub fn table_grid() -> Vec<(f64, f64)> {
        let mut g: Vec<(f64, f64)> = [1.0, 0.75, 0.5, 0.25].iter().map(|&b| (b, 1.0)).collect();
        g.extend([0.75, 0.5, 0.25].iter().map(|&r| (1.0, r)));
        g
    }
}

/// Generator settings for `gen-data`.
pub type GenDataRun = SynthConfig;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_names_the_nested_key() {
        let text = r#"{"train": {"epochs": 3, "batch_size": "eight"}}"#;
        match parse_json::<TrainRun>(text, Path::new("run.json")) {
            Err(Error::Config { key, path, .. }) => {
                assert_eq!(key, "train.batch_size");
                assert_eq!(path, Path::new("run.json"));
            }
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"model": {"width_multiplier": 0.5, "widht": 1}}"#;
        let err = parse_json::<TrainRun>(text, Path::new("x.json")).unwrap_err();
        assert!(matches!(&err, Error::Config { key, message, .. } if key.starts_with("model") && message.contains("widht")));
    }

    #[test]
    fn schedule_fields_are_checked_per_kind() {
        let stray = r#"{"train": {"schedule": {"kind": "cosine", "decay": 0.1}}}"#;
        assert!(parse_json::<TrainRun>(stray, Path::new("x")).is_err());
        let step = r#"{"train": {"schedule": {"kind": "step", "milestones": [2], "decay": 0.1}}}"#;
        let run: TrainRun = parse_json(step, Path::new("x")).unwrap();
        assert_eq!(run.train.lr(2), 0.1 * run.train.base_lr);
    }

    #[test]
    fn partial_files_keep_defaults() {
        let run: TrainRun = parse_json(r#"{"train": {"epochs": 7}}"#, Path::new("x")).unwrap();
        assert_eq!(run.train.epochs, 7);
        assert_eq!(run.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(run.model, ModelSpec::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let run = SearchRun { data: Some("d".into()), ..SearchRun::default() };
        let text = serde_json::to_string(&run).unwrap();
        assert_eq!(parse_json::<SearchRun>(&text, Path::new("x")).unwrap(), run);
    }
}
