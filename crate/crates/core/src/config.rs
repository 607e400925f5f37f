//! Run configuration and its TOML form.
//!
//! Values resolve in three layers: built-in defaults, then a config file,
//! then explicit overrides (command-line flags). Layers are TOML tables
//! merged key by key, so a file may set a single nested key such as
//! `freq.s` without restating the rest of `[freq]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Table;

use crate::error::{Error, Result};
use crate::freq::FreqConfig;
use crate::injection::InjectionConfig;
use crate::pipeline::StyleSource;

/// Every parameter that affects a run's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Content image (PNG).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Style prompt; empty means the unconditional prompt.
    pub prompt: String,
    /// Binary text mask PNG (nonzero = text). Takes precedence over `regions`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Region file (JSON) listing text boxes or polygons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<PathBuf>,
    /// External OCR command (program then arguments); used when neither
    /// `mask` nor `regions` is given. Empty selects the built-in contrast detector.
    pub ocr_command: Vec<String>,
    pub steps: usize,
    /// Width of the soft band around text, in pixels.
    pub distance: f64,
    /// Seed of the style path's initial noise.
    pub seed: u64,
    pub backend: String,
    /// Classifier-free guidance for the style and main paths.
    pub guidance: f32,
    /// Guidance for inversion and the content path.
    pub inversion_guidance: f32,
    /// Prompt used for inversion and the content path; empty is unconditional.
    pub inversion_prompt: String,
    pub style_source: StyleSource,
    pub out: PathBuf,
    pub dump_latents: bool,
    pub dump_packets: bool,
    pub injection: InjectionConfig,
    pub freq: FreqConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image: None,
            prompt: String::new(),
            mask: None,
            regions: None,
            ocr_command: Vec::new(),
            steps: 75,
            distance: crate::textmask::DEFAULT_DISTANCE,
            seed: 0,
            backend: "toy-unet".to_string(),
            guidance: 7.5,
            inversion_guidance: crate::inversion::INVERSION_GUIDANCE,
            inversion_prompt: String::new(),
            style_source: StyleSource::Noise,
            out: PathBuf::from("runs"),
            dump_latents: false,
            dump_packets: false,
            injection: InjectionConfig::default(),
            freq: FreqConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` (TOML text) and then `overrides`.
    pub fn resolve(file: Option<&str>, overrides: &Table) -> Result<Self> {
        let mut table = Table::try_from(Self::default()).map_err(|e| Error::format("config", e))?;
        if let Some(text) = file {
            let layer: Table = text.parse().map_err(|e| Error::format("config file", e))?;
            merge(&mut table, layer);
        }
        merge(&mut table, overrides.clone());
        let config: Self = table.try_into().map_err(|e: toml::de::Error| Error::format("config", e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &Table) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(Some(&text), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.distance >= 0.0 && self.distance.is_finite()) {
            return bad(format!("distance must be finite and ≥ 0, got {}", self.distance));
        }
        if !(self.guidance.is_finite() && self.inversion_guidance.is_finite()) {
            return bad("guidance scales must be finite".into());
        }
        self.injection.validate()?;
        self.freq.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig is representable as TOML")
    }
}

/// Recursively overlay `top` onto `base`; tables merge, other values replace.
pub fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
