//! The latent diffusion backend contract.
//!
//! A backend owns a VAE, a prompt encoder and a noise predictor whose
//! internals expose three kinds of hook points, enumerated in forward order:
//!
//! * ResBlock outputs (`resblock` layers) can be captured or overridden,
//! * self-attention layers can have Q/K/V and outputs captured, and the
//!   attention computation itself replaced by an [`AttentionTransform`],
//! * encoder→decoder skip features can be rewritten by a [`SkipTransform`]
//!   before the decoder consumes them (stage 0 is the highest resolution).
//!
//! [`DiffusionBackend::denoise_step`] wraps the predictor with classifier-free
//! guidance and a deterministic DDIM update. Two toy backends ship with the
//! crate; [`stable_diffusion`] describes the production adapter.

mod schedule;
pub mod stable_diffusion;
mod toy_unet;
mod toy_zero;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use schedule::{AlphaSchedule, DdimSchedule, TRAIN_TIMESTEPS};
pub use toy_unet::ToyUnetBackend;
pub use toy_zero::ZeroEpsilonBackend;

use crate::attention::scaled_dot_product;
use crate::error::{Error, Result};
use crate::injection::{self, AttentionFeatures, AttentionPacket, ResidualPacket};
use crate::tensor::{FeatureGrid, Image, Matrix, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    pub latent_channels: usize,
    /// Pixel → latent downscale factor.
    pub spatial_downscale: usize,
    /// Latent height and width must be multiples of this.
    pub latent_multiple: usize,
    pub num_attention_layers: usize,
    pub num_resblock_layers: usize,
    pub num_skip_stages: usize,
    /// Per attention layer: downscale of its token grid relative to the latent.
    pub attention_layer_downscale: Vec<usize>,
    pub resblock_layer_downscale: Vec<usize>,
    pub skip_stage_downscale: Vec<usize>,
    /// Per attention layer: number of heads the channels are split into.
    pub attention_heads: Vec<usize>,
    pub embedding_dim: usize,
    pub alpha_schedule: AlphaSchedule,
    /// Scheduler timesteps for the configured step count, strictly decreasing.
    pub timestep_domain: Vec<u32>,
    pub deterministic: bool,
    pub precision: Precision,
    /// Where weights were loaded from, if the backend has any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F16,
}

impl BackendDescriptor {
    pub fn steps(&self) -> usize {
        self.timestep_domain.len()
    }

    /// Latent `[C, H/f, W/f]` for an `H × W` image.
    pub fn latent_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        let pixel_multiple = self.spatial_downscale * self.latent_multiple;
        if height == 0 || width == 0 || height % pixel_multiple != 0 || width % pixel_multiple != 0 {
            return Err(Error::NonDivisibleDimensions {
                height,
                width,
                factor: pixel_multiple,
            });
        }
        Ok([
            self.latent_channels,
            height / self.spatial_downscale,
            width / self.spatial_downscale,
        ])
    }

    /// Number of attention tokens at `layer` for a latent of `height × width`.
    pub fn attention_tokens(&self, layer: usize, height: usize, width: usize) -> Option<usize> {
        let f = *self.attention_layer_downscale.get(layer)?;
        Some((height / f) * (width / f))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("backend `{}`: {m}", self.id)));
        if self.spatial_downscale == 0 || self.latent_multiple == 0 {
            return bad("downscale factors must be at least 1");
        }
        if !self.timestep_domain.windows(2).all(|w| w[0] > w[1]) {
            return bad("timestep domain must be strictly decreasing");
        }
        if self.attention_layer_downscale.len() != self.num_attention_layers
            || self.resblock_layer_downscale.len() != self.num_resblock_layers
            || self.skip_stage_downscale.len() != self.num_skip_stages
            || self.attention_heads.len() != self.num_attention_layers
        {
            return bad("per-layer resolution tables disagree with layer counts");
        }
        Ok(())
    }
}

/// A latent state with the scheduler timestep it belongs to (`None` for a
/// clean, fully denoised latent).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Tensor3,
    pub timestep: Option<u32>,
}

impl LatentTensor {
    pub fn new(data: Tensor3, timestep: Option<u32>) -> Result<Self> {
        if !data.is_finite() {
            return Err(Error::NonFiniteInput("latent"));
        }
        Ok(Self { data, timestep })
    }

    /// Standard Gaussian noise drawn from a seeded ChaCha8 stream.
    pub fn gaussian(shape: [usize; 3], seed: u64, timestep: Option<u32>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor3::from_fn(shape[0], shape[1], shape[2], |_, _, _| {
            StandardNormal.sample(&mut rng)
        });
        Self { data, timestep }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.data.shape()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prompt {
    Text(String),
    /// The unconditional prompt used for classifier-free guidance.
    Null,
}

impl Prompt {
    /// Empty or whitespace-only text maps to [`Prompt::Null`].
    pub fn from_optional(text: &str) -> Self {
        if text.trim().is_empty() {
            Prompt::Null
        } else {
            Prompt::Text(text.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub data: Vec<f32>,
}

/// Arguments of one self-attention evaluation handed to an
/// [`AttentionTransform`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionCall<'a> {
    pub layer: usize,
    pub timestep: u32,
    pub heads: usize,
    pub q: &'a Matrix,
    pub k: &'a Matrix,
    pub v: &'a Matrix,
}

/// Replaces the attention computation `softmax(QKᵀ/√d)V` on selected layers.
/// Implementations must be pure.
pub trait AttentionTransform: Send + Sync {
    fn layers(&self) -> &BTreeSet<usize>;
    fn apply(&self, call: &AttentionCall<'_>) -> Result<Matrix>;
}

/// Rewrites skip-connection features on selected stages. Must be pure.
pub trait SkipTransform: Send + Sync {
    fn stages(&self) -> &BTreeSet<usize>;
    fn apply(&self, stage: usize, features: &FeatureGrid) -> Result<FeatureGrid>;
}

/// ResBlock outputs to substitute on the listed layers.
#[derive(Debug, Clone)]
pub struct ResBlockOverride {
    pub layers: BTreeSet<usize>,
    pub packet: Arc<ResidualPacket>,
}

/// Everything a caller may capture or change during one denoising step.
#[derive(Clone, Default)]
pub struct HookBundle {
    pub resblock_capture: BTreeSet<usize>,
    pub attention_capture: BTreeSet<usize>,
    pub resblock_override: Option<ResBlockOverride>,
    pub attention_transform: Option<Arc<dyn AttentionTransform>>,
    pub skip_transform: Option<Arc<dyn SkipTransform>>,
}

impl fmt::Debug for HookBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookBundle")
            .field("resblock_capture", &self.resblock_capture)
            .field("attention_capture", &self.attention_capture)
            .field(
                "resblock_override",
                &self.resblock_override.as_ref().map(|o| &o.layers),
            )
            .field(
                "attention_transform",
                &self.attention_transform.as_ref().map(|t| t.layers()),
            )
            .field(
                "skip_transform",
                &self.skip_transform.as_ref().map(|t| t.stages()),
            )
            .finish()
    }
}

impl HookBundle {
    pub fn capture_attention(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            attention_capture: layers.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn capture_resblocks(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            resblock_capture: layers.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self, descriptor: &BackendDescriptor) -> Result<()> {
        let check = |kind: &'static str, set: &BTreeSet<usize>, count: usize| match set.last() {
            Some(&index) if index >= count => Err(Error::HookIndexOutOfRange { kind, index, count }),
            _ => Ok(()),
        };
        let attn = descriptor.num_attention_layers;
        let res = descriptor.num_resblock_layers;
        check("attention", &self.attention_capture, attn)?;
        check("resblock", &self.resblock_capture, res)?;
        if let Some(o) = &self.resblock_override {
            check("resblock", &o.layers, res)?;
        }
        if let Some(t) = &self.attention_transform {
            check("attention", t.layers(), attn)?;
        }
        if let Some(t) = &self.skip_transform {
            check("skip", t.stages(), descriptor.num_skip_stages)?;
        }
        Ok(())
    }
}

/// Features captured during one denoising step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepCapture {
    pub attention: AttentionPacket,
    pub residual: ResidualPacket,
}

/// Per-call hook state handed to a backend's noise predictor. Backends call
/// [`HookRuntime::resblock`], [`HookRuntime::attention`] and
/// [`HookRuntime::skip`] at the matching points of their forward pass.
pub struct HookRuntime<'a> {
    hooks: &'a HookBundle,
    timestep: u32,
    capturing: bool,
    capture: StepCapture,
}

impl<'a> HookRuntime<'a> {
    pub fn new(hooks: &'a HookBundle, timestep: u32, capturing: bool) -> Self {
        Self {
            hooks,
            timestep,
            capturing,
            capture: StepCapture {
                attention: AttentionPacket::new(Some(timestep)),
                residual: ResidualPacket::new(Some(timestep)),
            },
        }
    }

    pub fn timestep(&self) -> u32 {
        self.timestep
    }

    /// Whether anything observes or rewrites attention layer `layer`.
    pub fn touches_attention(&self, layer: usize) -> bool {
        self.hooks.attention_capture.contains(&layer)
            || self
                .hooks
                .attention_transform
                .as_ref()
                .is_some_and(|t| t.layers().contains(&layer))
    }

    pub fn resblock(&mut self, layer: usize, hidden: FeatureGrid) -> Result<FeatureGrid> {
        if self.capturing && self.hooks.resblock_capture.contains(&layer) {
            self.capture.residual.insert(layer, hidden.clone());
        }
        match &self.hooks.resblock_override {
            Some(o) => {
                if o.packet.timestep() != Some(self.timestep) {
                    return Err(Error::TimestepMismatch {
                        expected: Some(self.timestep),
                        found: o.packet.timestep(),
                    });
                }
                injection::replace_resblock(layer, hidden, &o.packet, &o.layers)
            }
            None => Ok(hidden),
        }
    }

    pub fn attention(&mut self, layer: usize, heads: usize, q: Matrix, k: Matrix, v: Matrix) -> Result<Matrix> {
        let transform = self
            .hooks
            .attention_transform
            .as_ref()
            .filter(|t| t.layers().contains(&layer));
        let output = match transform {
            Some(t) => t.apply(&AttentionCall {
                layer,
                timestep: self.timestep,
                heads,
                q: &q,
                k: &k,
                v: &v,
            })?,
            None => scaled_dot_product(&q, &k, &v, heads)?,
        };
        if self.capturing && self.hooks.attention_capture.contains(&layer) {
            self.capture.attention.insert(
                layer,
                AttentionFeatures {
                    q,
                    k,
                    v,
                    output: output.clone(),
                },
            );
        }
        Ok(output)
    }

    pub fn skip(&mut self, stage: usize, features: FeatureGrid) -> Result<FeatureGrid> {
        match &self.hooks.skip_transform {
            Some(t) if t.stages().contains(&stage) => t.apply(stage, &features),
            _ => Ok(features),
        }
    }

    pub fn finish(self) -> StepCapture {
        self.capture
    }
}

/// Output of [`DiffusionBackend::denoise_step`].
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub latent: LatentTensor,
    pub capture: StepCapture,
}

/// A latent diffusion model with hookable internals.
///
/// Instances run one request at a time; concurrent runs need separate
/// instances.
pub trait DiffusionBackend {
    fn descriptor(&self) -> &BackendDescriptor;

    fn schedule(&self) -> &DdimSchedule;

    /// Encode an `H × W × 3` image in `[0, 1]` to an untagged latent.
    fn encode_image(&self, image: &Image) -> Result<LatentTensor>;

    /// Decode a latent to pixels, clamped to `[0, 1]`.
    fn decode_latent(&self, latent: &LatentTensor) -> Result<Image>;

    fn embed_prompt(&self, prompt: &Prompt) -> Result<PromptEmbedding>;

    /// One evaluation of the noise predictor.
    fn predict_noise(
        &self,
        latent: &Tensor3,
        timestep: u32,
        embedding: &PromptEmbedding,
        hooks: &mut HookRuntime<'_>,
    ) -> Result<Tensor3>;

    /// Guided noise prediction. Captures come from the conditional pass;
    /// transforms apply to both passes. With `guidance_scale == 1` or a
    /// conditional embedding equal to the unconditional one, only a single
    /// pass runs.
    fn guided_noise(
        &self,
        latent: &LatentTensor,
        timestep: u32,
        embedding: &PromptEmbedding,
        hooks: &HookBundle,
        guidance_scale: f32,
    ) -> Result<(Tensor3, StepCapture)> {
        let descriptor = self.descriptor();
        if !descriptor.timestep_domain.contains(&timestep) {
            return Err(Error::UnknownTimestep(timestep));
        }
        hooks.validate(descriptor)?;
        if !latent.data.is_finite() {
            return Err(Error::NonFiniteInput("latent"));
        }

        let mut runtime = HookRuntime::new(hooks, timestep, true);
        let cond = self.predict_noise(&latent.data, timestep, embedding, &mut runtime)?;
        let capture = runtime.finish();
        if guidance_scale == 1.0 {
            return Ok((cond, capture));
        }
        let null = self.embed_prompt(&Prompt::Null)?;
        if null == *embedding {
            return Ok((cond, capture));
        }
        let mut runtime = HookRuntime::new(hooks, timestep, false);
        let uncond = self.predict_noise(&latent.data, timestep, &null, &mut runtime)?;
        let eps = uncond.zip_with(&cond, |u, c| u + guidance_scale * (c - u))?;
        Ok((eps, capture))
    }

    /// Deterministic DDIM step from `timestep` to the next scheduled
    /// timestep (or the clean end after the last one).
    fn denoise_step(
        &self,
        latent: &LatentTensor,
        timestep: u32,
        embedding: &PromptEmbedding,
        hooks: &HookBundle,
        guidance_scale: f32,
    ) -> Result<StepOutput> {
        if latent.timestep != Some(timestep) {
            return Err(Error::TimestepMismatch {
                expected: Some(timestep),
                found: latent.timestep,
            });
        }
        let (eps, capture) = self.guided_noise(latent, timestep, embedding, hooks, guidance_scale)?;
        let schedule = self.schedule();
        let index = schedule.index_of(timestep)?;
        let next = schedule.output_timestep(index);
        let data = schedule.transfer(&latent.data, &eps, Some(timestep), next)?;
        Ok(StepOutput {
            latent: LatentTensor::new(data, next)?,
            capture,
        })
    }
}

/// Build a backend by id. `weights_root` is consulted only by the
/// production adapter.
pub fn create_backend(
    id: &str,
    steps: usize,
    weights_root: Option<&std::path::Path>,
) -> Result<Box<dyn DiffusionBackend>> {
    match id {
        ZeroEpsilonBackend::ID => Ok(Box::new(ZeroEpsilonBackend::new(steps)?)),
        ToyUnetBackend::ID => Ok(Box::new(ToyUnetBackend::new(steps)?)),
        stable_diffusion::ID => match stable_diffusion::StableDiffusionAdapter::load(steps, weights_root)? {},
        other => Err(Error::UnknownBackend(other.to_string())),
    }
}

/// Backend ids accepted by [`create_backend`].
pub const BACKEND_IDS: [&str; 3] = [ZeroEpsilonBackend::ID, ToyUnetBackend::ID, stable_diffusion::ID];

/// Deterministic pseudo-embedding shared by the toy backends: each
/// lowercase alphanumeric word seeds a Gaussian vector and the prompt
/// embedding is their mean.
pub(crate) fn hashed_embedding(prompt: &Prompt, dim: usize) -> Result<PromptEmbedding> {
    let words: Vec<String> = match prompt {
        Prompt::Null => vec!["<|null|>".to_string()],
        Prompt::Text(text) => {
            let words: Vec<String> = text
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(str::to_lowercase)
                .collect();
            if words.is_empty() {
                return Err(Error::EmptyPrompt);
            }
            words
        }
    };
    let mut data = vec![0.0f32; dim];
    for word in &words {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
        for d in data.iter_mut() {
            let v: f32 = StandardNormal.sample(&mut rng);
            *d += v;
        }
    }
    let n = words.len() as f32;
    data.iter_mut().for_each(|d| *d /= n);
    Ok(PromptEmbedding { data })
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
