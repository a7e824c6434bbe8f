//! Strict JSON configuration loading.
//!
//! Both config schemas reject unknown keys with the offending key named in
//! the error, so a typoed ablation flag fails loudly instead of silently
//! running the wrong experiment.

use std::fs;
use std::path::Path;

use crate::datagen::SynthSpec;
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

/// Load and validate a pipeline configuration. Missing keys take their
/// defaults; unknown keys are an error.
pub fn load_pipeline_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let text = fs::read_to_string(&path)?;
    let config: PipelineConfig = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.as_ref().display())))?;
    config.validate()?;
    Ok(config)
}

pub fn save_pipeline_config(path: impl AsRef<Path>, config: &PipelineConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Load and validate a synthetic set specification. All keys are required;
/// unknown keys are an error.
pub fn load_synth_spec(path: impl AsRef<Path>) -> Result<SynthSpec> {
    let text = fs::read_to_string(&path)?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.as_ref().display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn save_synth_spec(path: impl AsRef<Path>, spec: &SynthSpec) -> Result<()> {
    let mut text = serde_json::to_string_pretty(spec)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
