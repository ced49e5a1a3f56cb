//! JSON run configuration shared by every batch command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::retriever::RetrieverConfig;
use crate::toy::ToyConfig;

/// Every section is optional and falls back to its defaults; unknown keys
/// anywhere are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub encoder: EncoderConfig,
    pub retriever: RetrieverConfig,
    pub fusion: FusionConfig,
    pub toy: ToyConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::arg(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::arg(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.toy.validate()?;
        if self.encoder.out_dim != self.toy.text.dim {
            return Err(Error::arg(format!(
                "encoder out_dim {} must equal the text embedding dim {}",
                self.encoder.out_dim, self.toy.text.dim
            )));
        }
        Ok(())
    }

    /// A command-line seed wins over the configured one; training commands
    /// need one of the two.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        cli.or(self.seed).ok_or_else(|| {
            Error::arg("a seed is required: pass --seed or set \"seed\" in the config")
        })
    }
}
