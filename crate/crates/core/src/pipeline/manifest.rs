use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::textmask::MaskSource;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Output files, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub stylized: PathBuf,
    pub mask: PathBuf,
    pub distance: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packets: Option<PathBuf>,
}

impl Default for Artifacts {
    fn default() -> Self {
        Self {
            stylized: "stylized.png".into(),
            mask: "mask.png".into(),
            distance: "distance.png".into(),
            latents: None,
            packets: None,
        }
    }
}

/// Record of a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub mask_source: MaskSource,
    pub text_pixels: usize,
    pub duration_ms: u64,
    pub artifacts: Artifacts,
    pub backend: BackendDescriptor,
    /// The fully resolved configuration.
    pub config: RunConfig,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format("run manifest", e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format("run manifest", e))?;
        crate::io::atomic_write(path, text.as_bytes())
    }

    /// Referenced artifacts that do not exist under `run_dir`.
    pub fn missing_artifacts(&self, run_dir: &Path) -> Vec<PathBuf> {
        let a = &self.artifacts;
        [Some(&a.stylized), Some(&a.mask), Some(&a.distance), a.latents.as_ref(), a.packets.as_ref()]
            .into_iter()
            .flatten()
            .map(|p| run_dir.join(p))
            .filter(|p| !p.exists())
            .collect()
    }
}
