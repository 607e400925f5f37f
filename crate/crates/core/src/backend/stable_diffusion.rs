//! Adapter description for Stable Diffusion v2.1.
//!
//! The adapter resolves and validates a user-supplied weights directory and
//! publishes the model's [`BackendDescriptor`] (4 latent channels, 8× VAE
//! downscale, 16 self-attention layers, 22 ResBlocks and 4 decoder skip
//! stages, all in forward order). Running the network requires an inference
//! runtime that this crate does not bundle; [`StableDiffusionAdapter::load`]
//! reports that as [`Error::BackendUnavailable`] after validation, so
//! configuration mistakes surface first.
//!
//! Expected weights layout (diffusers format):
//!
//! ```text
//! $GLYPHSTYLE_WEIGHTS/stable-diffusion-2-1/
//!     unet/  vae/  text_encoder/  tokenizer/
//! ```

use std::path::{Path, PathBuf};

use super::{AlphaSchedule, BackendDescriptor, DdimSchedule, Precision};
use crate::error::{Error, Result};

pub const ID: &str = "sd21";

/// Environment variable naming the weights root directory.
pub const WEIGHTS_ENV: &str = "GLYPHSTYLE_WEIGHTS";

const MODEL_DIR: &str = "stable-diffusion-2-1";
const COMPONENTS: [&str; 4] = ["unet", "vae", "text_encoder", "tokenizer"];

/// Descriptor of Stable Diffusion v2.1 with a `steps`-step DDIM schedule.
pub fn descriptor(steps: usize) -> Result<BackendDescriptor> {
    let schedule = DdimSchedule::new(AlphaSchedule::ScaledLinear, steps)?;
    // Transformer blocks: 2 per down level (3 levels), 1 mid, 3 per up level.
    let attention_layer_downscale = vec![1, 1, 2, 2, 4, 4, 8, 4, 4, 4, 2, 2, 2, 1, 1, 1];
    let attention_heads = attention_layer_downscale
        .iter()
        .map(|&f| match f {
            1 => 5,
            2 => 10,
            _ => 20,
        })
        .collect();
    let d = BackendDescriptor {
        id: ID.to_string(),
        latent_channels: 4,
        spatial_downscale: 8,
        latent_multiple: 8,
        num_attention_layers: 16,
        num_resblock_layers: 22,
        num_skip_stages: 4,
        attention_layer_downscale,
        resblock_layer_downscale: vec![1, 1, 2, 2, 4, 4, 8, 8, 8, 8, 8, 8, 8, 4, 4, 4, 2, 2, 2, 1, 1, 1],
        skip_stage_downscale: vec![1, 2, 4, 8],
        attention_heads,
        embedding_dim: 77 * 1024,
        alpha_schedule: AlphaSchedule::ScaledLinear,
        timestep_domain: schedule.timesteps().to_vec(),
        deterministic: true,
        precision: Precision::F32,
        weights: None,
    };
    d.validate()?;
    Ok(d)
}

/// A validated weights location plus the descriptor it implies.
#[derive(Debug, Clone)]
pub struct StableDiffusionAdapter {
    pub descriptor: BackendDescriptor,
    pub model_dir: PathBuf,
}

impl StableDiffusionAdapter {
    /// Resolve the weights directory from `root` or, failing that, from
    /// `$GLYPHSTYLE_WEIGHTS`, and check that every model component exists.
    pub fn resolve(steps: usize, root: Option<&Path>) -> Result<Self> {
        let root = match root {
            Some(r) => r.to_path_buf(),
            None => std::env::var_os(WEIGHTS_ENV).map(PathBuf::from).ok_or_else(|| {
                Error::BackendUnavailable(format!("{ID}: set {WEIGHTS_ENV} to the weights root directory"))
            })?,
        };
        let model_dir = root.join(MODEL_DIR);
        for component in COMPONENTS {
            if !model_dir.join(component).is_dir() {
                return Err(Error::BackendUnavailable(format!(
                    "{ID}: missing `{component}` under {}",
                    model_dir.display()
                )));
            }
        }
        let mut descriptor = descriptor(steps)?;
        descriptor.weights = Some(model_dir.display().to_string());
        Ok(Self {
            descriptor,
            model_dir,
        })
    }

    /// Resolve, then hand over to an inference runtime. No runtime is
    /// compiled into this crate, so this always ends in
    /// [`Error::BackendUnavailable`].
    pub fn load(steps: usize, root: Option<&Path>) -> Result<std::convert::Infallible> {
        let adapter = Self::resolve(steps, root)?;
        Err(Error::BackendUnavailable(format!(
            "{ID}: weights found at {}, but this build has no Stable Diffusion inference runtime",
            adapter.model_dir.display()
        )))
    }
}
