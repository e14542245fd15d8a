//! Run configuration: one JSON document with a section per pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::gmf::{GmfConfig, SampleConfig, TrainConfig};
use crate::metrics::EvalConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub gmf: GmfConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parse and validate; missing keys take their defaults, unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.codec.validate()?;
        self.model.gmf.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.eval.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig::default();
        c.train.steps = 17;
        c.model.gmf.latent_shift = Some([1.0, 2.0, 3.0, 0.5]);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [r#"{"bogus": 1}"#, r#"{"train": {"stpes": 3}}"#, r#"{"model": {"gmf": {"unet": {"depth": 2}}}}"#] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            r#"{"data": {"size": 40}}"#,
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"sample": {"guidance_scale": -1.0}}"#,
            r#"{"eval": {"band_radius": 0}}"#,
            r#"{"model": {"gmf": {"schedule": {"steps": 200, "beta_start": 0.0001, "beta_end": 0.02}}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }
}
