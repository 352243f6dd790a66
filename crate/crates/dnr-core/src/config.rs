//! Experiment configuration: one JSON document with data, retriever,
//! reranker and training sections, plus dotted-path overrides so single
//! values can be changed from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticParams;
use crate::error::{Error, Result};
use crate::objectives::DnrConfig;
use crate::reranker::RerankerConfig;
use crate::retriever::MfConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// when set, ingest this CSV instead of synthesizing a world
    pub csv_path: Option<String>,
    pub synthetic: SyntheticParams,
    pub min_interactions: usize,
    pub split_ratio: f64,
    /// candidate slate size handed to the reranker
    pub n: usize,
    /// held-out exposure window and metric cutoff
    pub k: usize,
    pub history_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv_path: None,
            synthetic: SyntheticParams::default(),
            min_interactions: 20,
            split_ratio: 0.8,
            n: 50,
            k: 6,
            history_len: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub retriever: MfConfig,
    pub reranker: RerankerConfig,
    pub dnr: DnrConfig,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            retriever: MfConfig::default(),
            reranker: RerankerConfig::default(),
            dnr: DnrConfig::default(),
            output_dir: "runs/lab".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dnr.validate()?;
        self.reranker.validate()?;
        self.data.synthetic.channel.validate()?;
        if self.data.n == 0 || self.data.k == 0 {
            return Err(Error::Config("data.n and data.k must be positive".into()));
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "data.split_ratio must lie in (0, 1], got {}",
                self.data.split_ratio
            )));
        }
        if !(self.retriever.lr > 0.0) || self.retriever.latent_dim == 0 {
            return Err(Error::Config("retriever needs a positive lr and latent_dim".into()));
        }
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Load from an optional JSON file and apply `section.key=value`
    /// overrides on top. With no file, overrides apply to the defaults.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base: ExperimentConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::MissingPrereq(format!("config file {}: {e}", p.display()))
                })?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize(de).map_err(|e| {
                    Error::Config(format!("{} at `{}`", e.inner(), e.path()))
                })?
            }
            None => ExperimentConfig::default(),
        };
        let cfg = apply_overrides(base, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Apply dotted-path assignments like `dnr.lambda_c=0.3`. A leading `--`
/// on each token is accepted so shell invocations read naturally.
pub fn apply_overrides(cfg: ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut tree = serde_json::to_value(&cfg)?;
    for token in overrides {
        let body = token.strip_prefix("--").unwrap_or(token);
        let (path, raw) = body.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{token}` must look like section.key=value"))
        })?;
        if path.is_empty() {
            return Err(Error::Config(format!("override `{token}` has an empty field path")));
        }
        // numbers, booleans and null parse as JSON; anything else is a string
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_path(&mut tree, path, value)?;
    }
    let de = tree;
    serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config(format!("{} at `{}`", e.inner(), e.path())))
}

fn set_path(tree: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cursor = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "config field `{}` is not a section",
                parts[..i].join(".")
            ))
        })?;
        if !map.contains_key(*part) {
            return Err(Error::Config(format!(
                "unknown config field `{}`",
                parts[..=i].join(".")
            )));
        }
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        cursor = map.get_mut(*part).expect("checked above");
    }
    unreachable!("loop always returns on the last part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseKind;
    use crate::reranker::Integration;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = apply_overrides(
            ExperimentConfig::default(),
            &[
                "--dnr.lambda_c=0.3".into(),
                "data.synthetic.users=77".into(),
                "dnr.heuristic.kind=beta".into(),
                "reranker.integration=denoise".into(),
                "dnr.mmd_bandwidth=median".into(),
                "output_dir=runs/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.dnr.lambda_c, 0.3);
        assert_eq!(cfg.data.synthetic.users, 77);
        assert_eq!(cfg.dnr.heuristic.kind, NoiseKind::Beta);
        assert_eq!(cfg.reranker.integration, Integration::Denoise);
        assert_eq!(cfg.output_dir, "runs/x");
    }

    #[test]
    fn unknown_field_names_the_path() {
        let err = apply_overrides(
            ExperimentConfig::default(),
            &["dnr.lambda_q=0.3".into()],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("dnr.lambda_q"), "{err}");

        let err = apply_overrides(
            ExperimentConfig::default(),
            &["dnr.lambda_c.x=1".into()],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("dnr.lambda_c"), "{err}");
    }

    #[test]
    fn type_errors_name_the_path() {
        let err = apply_overrides(
            ExperimentConfig::default(),
            &["dnr.epochs=soon".into()],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("dnr.epochs"), "{err}");
    }

    #[test]
    fn malformed_tokens_are_rejected() {
        for bad in ["dnr.lambda_c", "=0.3", "--=1"] {
            let err = apply_overrides(ExperimentConfig::default(), &[bad.to_string()]);
            assert!(err.is_err(), "expected `{bad}` to be rejected");
        }
    }

    #[test]
    fn validate_catches_bad_values_after_override() {
        let err = ExperimentConfig::resolve(None, &["data.split_ratio=1.5".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = std::env::temp_dir().join("dnr_cfg_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.json");
        let mut cfg = ExperimentConfig::default();
        cfg.dnr.lambda_m = 0.6;
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::resolve(Some(&path), &[]).unwrap();
        assert_eq!(back.dnr.lambda_m, 0.6);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_file_field_is_an_error() {
        let dir = std::env::temp_dir().join("dnr_cfg_unknown");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.json");
        std::fs::write(&path, r#"{"dnr": {"lambda_zz": 1.0}}"#).unwrap();
        let err = ExperimentConfig::resolve(Some(&path), &[]).unwrap_err().to_string();
        assert!(err.contains("lambda_zz"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
