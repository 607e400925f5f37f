use super::{
    hashed_embedding, AlphaSchedule, BackendDescriptor, DdimSchedule, DiffusionBackend, HookRuntime,
    LatentTensor, Precision, Prompt, PromptEmbedding,
};
use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor3};

const ATTENTION_LAYERS: usize = 8;
const RESBLOCK_LAYERS: usize = 4;
const SKIP_STAGES: usize = 2;
const EMBEDDING_DIM: usize = 8;

/// Analytic backend whose noise prediction is identically zero.
///
/// The VAE is the identity (three latent channels, no downscaling) and the
/// schedule is [`AlphaSchedule::Dyadic`], so every DDIM step is an exact
/// power-of-two rescaling and inversion followed by sampling returns the
/// encoded latent bit for bit.
///
/// Hook points still exist so pipelines can run end to end: each ResBlock
/// and skip stage sees the latent grid itself, and each attention layer
/// attends over the latent's pixels (Q = K = V). None of it reaches the
/// output.
#[derive(Debug, Clone)]
pub struct ZeroEpsilonBackend {
    descriptor: BackendDescriptor,
    schedule: DdimSchedule,
}

impl ZeroEpsilonBackend {
    pub const ID: &'static str = "toy-zero";

    pub fn new(steps: usize) -> Result<Self> {
        let schedule = DdimSchedule::new(AlphaSchedule::Dyadic, steps)?;
        let descriptor = BackendDescriptor {
            id: Self::ID.to_string(),
            latent_channels: 3,
            spatial_downscale: 1,
            latent_multiple: 1,
            num_attention_layers: ATTENTION_LAYERS,
            num_resblock_layers: RESBLOCK_LAYERS,
            num_skip_stages: SKIP_STAGES,
            attention_layer_downscale: vec![1; ATTENTION_LAYERS],
            resblock_layer_downscale: vec![1; RESBLOCK_LAYERS],
            skip_stage_downscale: vec![1; SKIP_STAGES],
            attention_heads: vec![1; ATTENTION_LAYERS],
            embedding_dim: EMBEDDING_DIM,
            alpha_schedule: AlphaSchedule::Dyadic,
            timestep_domain: schedule.timesteps().to_vec(),
            deterministic: true,
            precision: Precision::F32,
            weights: None,
        };
        descriptor.validate()?;
        Ok(Self {
            descriptor,
            schedule,
        })
    }
}

impl DiffusionBackend for ZeroEpsilonBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn schedule(&self) -> &DdimSchedule {
        &self.schedule
    }

    fn encode_image(&self, image: &Image) -> Result<LatentTensor> {
        if !image.is_finite() {
            return Err(Error::NonFiniteInput("image"));
        }
        let [c, h, w] = self.descriptor.latent_shape(image.height(), image.width())?;
        LatentTensor::new(Tensor3::from_fn(c, h, w, |c, y, x| image.get(y, x, c)), None)
    }

    fn decode_latent(&self, latent: &LatentTensor) -> Result<Image> {
        let z = &latent.data;
        if !z.is_finite() {
            return Err(Error::NonFiniteInput("latent"));
        }
        if z.channels() != 3 {
            return Err(Error::ChannelMismatch {
                left: z.channels(),
                right: 3,
            });
        }
        Ok(Image::from_fn(z.height(), z.width(), |y, x| {
            [0, 1, 2].map(|c| z.get(c, y, x).clamp(0.0, 1.0))
        }))
    }

    fn embed_prompt(&self, prompt: &Prompt) -> Result<PromptEmbedding> {
        hashed_embedding(prompt, EMBEDDING_DIM)
    }

    fn predict_noise(
        &self,
        latent: &Tensor3,
        _timestep: u32,
        _embedding: &PromptEmbedding,
        hooks: &mut HookRuntime<'_>,
    ) -> Result<Tensor3> {
        let (h, w) = (latent.height(), latent.width());
        for layer in 0..RESBLOCK_LAYERS {
            hooks.resblock(layer, latent.clone())?;
        }
        for layer in 0..ATTENTION_LAYERS {
            // Attention is quadratic in pixels and never affects the output,
            // so skip it unless a hook observes or rewrites it.
            if hooks.touches_attention(layer) {
                let tokens = latent.to_tokens();
                let out = hooks.attention(layer, 1, tokens.clone(), tokens.clone(), tokens)?;
                Tensor3::from_tokens(&out, h, w)?;
            }
        }
        for stage in 0..SKIP_STAGES {
            hooks.skip(stage, latent.clone())?;
        }
        Ok(Tensor3::zeros(latent.channels(), h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::HookBundle;

    #[test]
    fn identity_vae() {
        let b = ZeroEpsilonBackend::new(10).unwrap();
        let img = Image::filled(4, 6, 0.5);
        let z = b.encode_image(&img).unwrap();
        assert_eq!(z.shape(), [3, 4, 6]);
        assert!(z.data.data().iter().all(|&v| v == 0.5));
        assert_eq!(b.decode_latent(&z).unwrap(), img);
    }

    #[test]
    fn decode_clamps() {
        let b = ZeroEpsilonBackend::new(10).unwrap();
        let z = LatentTensor::new(Tensor3::filled(3, 2, 2, 3.0), None).unwrap();
        assert!(b.decode_latent(&z).unwrap().data().iter().all(|&v| v == 1.0));
        let z = LatentTensor::new(Tensor3::filled(3, 2, 2, 0.25), None).unwrap();
        assert!(b.decode_latent(&z).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn encode_rejects_non_finite() {
        let b = ZeroEpsilonBackend::new(10).unwrap();
        let mut data = vec![0.0; 2 * 2 * 3];
        data[5] = f32::NAN;
        let img = Image::from_vec(2, 2, data).unwrap();
        assert!(matches!(b.encode_image(&img), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn step_rejects_unknown_timestep() {
        let b = ZeroEpsilonBackend::new(10).unwrap();
        let z = LatentTensor::new(Tensor3::zeros(3, 2, 2), Some(5)).unwrap();
        let emb = b.embed_prompt(&Prompt::Null).unwrap();
        let err = b.denoise_step(&z, 5, &emb, &HookBundle::default(), 1.0).unwrap_err();
        assert!(matches!(err, Error::UnknownTimestep(5)));
    }

    #[test]
    fn hook_index_out_of_range() {
        let b = ZeroEpsilonBackend::new(10).unwrap();
        let t = b.descriptor().timestep_domain[0];
        let z = LatentTensor::new(Tensor3::zeros(3, 2, 2), Some(t)).unwrap();
        let emb = b.embed_prompt(&Prompt::Null).unwrap();
        let hooks = HookBundle::capture_attention([8]);
        let err = b.denoise_step(&z, t, &emb, &hooks, 1.0).unwrap_err();
        assert!(matches!(
            err,
            Error::HookIndexOutOfRange {
                kind: "attention",
                index: 8,
                count: 8
            }
        ));
    }
}
