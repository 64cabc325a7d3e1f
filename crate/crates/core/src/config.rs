//! Experiment configuration files.

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::StyleDiagConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub style: StyleDiagConfig,
}

/// A full experiment. Every field is optional in the file; unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parses and validates a JSON document. The stylizer's activation
    /// probability defaults per training mode when the file leaves it out.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let mut config: ExperimentConfig = serde_json::from_value(value.clone()).map_err(|e| Error::config(e.to_string()))?;
        if value.pointer("/train/stylizer/p").is_none() {
            config.train.stylizer.p = config.train.mode.default_probability();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()
    }

    /// The resolved configuration with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Stage;
    use crate::trainer::TrainMode;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.stylizer.p, 1.0);
    }

    #[test]
    fn aug_defaults_to_half_probability_unless_set() {
        let c = ExperimentConfig::from_json(r#"{"train": {"mode": "aug"}}"#).unwrap();
        assert_eq!(c.train.stylizer.p, 0.5);
        let c = ExperimentConfig::from_json(r#"{"train": {"mode": "aug", "stylizer": {"p": 1.0}}}"#).unwrap();
        assert_eq!(c.train.stylizer.p, 1.0);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for doc in [r#"{"trian": {}}"#, r#"{"train": {"epoch": 3}}"#, r#"{"train": {"stylizer": {"rh": 2}}}"#] {
            assert!(matches!(ExperimentConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
        assert!(matches!(ExperimentConfig::from_json(r#"{"train": {"insertion": "stage9"}}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"train": {"stylizer": {"p": 2}}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::from_json(r#"{"train": {"mode": "il_ffb", "insertion": "after_stage2", "epochs": 4}}"#)
            .unwrap();
        assert_eq!((c.train.mode, c.train.insertion, c.train.epochs), (TrainMode::IlFfb, Stage::AfterStage2, 4));
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
