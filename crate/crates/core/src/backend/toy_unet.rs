//! A tiny random-weight UNet with the same hook topology as a real latent
//! diffusion denoiser, small enough to run thousands of steps on a CPU.
//!
//! ```text
//! conv_in ─ Res0 ──────────────────────────────────────── skip0 ─────────┐
//!   pool ─ Res1 ─ Attn0 ─ Attn1 ─────────────── skip1 ──┐                 │
//!     pool ─ Res2 ─ Attn2 ─ Attn3 ─ Attn4 ─ Attn5 ─ up ─ merge ─ Res3 ─ Attn6 ─ Attn7 ─ up ─ merge ─ conv_out
//! ```
//!
//! Attention runs at half and quarter latent resolution only, which keeps a
//! step cheap on a CPU. Skip stage 0 is the full-resolution skip, stage 1
//! the half-resolution one. The VAE is an exact pixel-unshuffle: each
//! 2×2×3 pixel block becomes 12 latent channels, rescaled from `[0, 1]` to
//! `[−1, 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{
    hashed_embedding, AlphaSchedule, BackendDescriptor, DdimSchedule, DiffusionBackend, HookRuntime,
    LatentTensor, Precision, Prompt, PromptEmbedding, TRAIN_TIMESTEPS,
};
use crate::error::{Error, Result};
use crate::tensor::{FeatureGrid, Image, Matrix, Tensor3};

const WEIGHT_SEED: u64 = 0x676c_7970_6873_7479;
const LATENT_CHANNELS: usize = 12;
const WIDTH: usize = 16;
const HEADS: usize = 2;
const EMBEDDING_DIM: usize = 16;
const TIME_DIM: usize = 16;
const COND_DIM: usize = 32;
/// Scale of the predicted noise. Small values keep the predictor smooth in
/// its input, which is what makes DDIM inversion accurate.
const OUTPUT_GAIN: f32 = 0.02;

struct Init(ChaCha8Rng);

impl Init {
    fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut self.0);
                v * std
            })
            .collect()
    }
}

struct Conv2d {
    cin: usize,
    cout: usize,
    kernel: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv2d {
    fn new(init: &mut Init, cin: usize, cout: usize, kernel: usize, gain: f32) -> Self {
        let fan_in = (cin * kernel * kernel) as f32;
        Self {
            cin,
            cout,
            kernel,
            weight: init.normal(cout * cin * kernel * kernel, gain / fan_in.sqrt()),
            bias: init.normal(cout, 0.02),
        }
    }

    fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels(), self.cin);
        let (h, w) = (x.height(), x.width());
        let k = self.kernel;
        let r = (k / 2) as isize;
        let mut out = vec![0.0f32; self.cout * h * w];
        out.par_chunks_mut(h * w).enumerate().for_each(|(o, plane)| {
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.cin {
                let src = x.channel(i);
                for dy in 0..k {
                    for dx in 0..k {
                        let wgt = self.weight[((o * self.cin + i) * k + dy) * k + dx];
                        let oy = dy as isize - r;
                        let ox = dx as isize - r;
                        let (x_lo, x_hi) = ((-ox).max(0) as usize, (w as isize - ox).min(w as isize).max(0) as usize);
                        for y in 0..h {
                            let sy = y as isize + oy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                            let dst_row = &mut plane[y * w..(y + 1) * w];
                            for xx in x_lo..x_hi {
                                dst_row[xx] += wgt * src_row[(xx as isize + ox) as usize];
                            }
                        }
                    }
                }
            }
        });
        Tensor3::from_vec(self.cout, h, w, out).expect("conv output shape")
    }
}

struct Linear {
    din: usize,
    dout: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Linear {
    fn new(init: &mut Init, din: usize, dout: usize, gain: f32) -> Self {
        Self {
            din,
            dout,
            weight: init.normal(din * dout, gain / (din as f32).sqrt()),
            bias: init.normal(dout, 0.02),
        }
    }

    fn forward(&self, x: &[f32]) -> Vec<f32> {
        (0..self.dout)
            .map(|o| {
                self.bias[o]
                    + self.weight[o * self.din..(o + 1) * self.din]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f32>()
            })
            .collect()
    }
}

fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    cond: Linear,
}

impl ResBlock {
    fn new(init: &mut Init) -> Self {
        Self {
            conv1: Conv2d::new(init, WIDTH, WIDTH, 3, 1.0),
            conv2: Conv2d::new(init, WIDTH, WIDTH, 3, 0.5),
            cond: Linear::new(init, COND_DIM, WIDTH, 0.5),
        }
    }

    fn forward(&self, x: &Tensor3, cond: &[f32]) -> Result<Tensor3> {
        let bias = self.cond.forward(cond);
        let mut h = self.conv1.forward(&x.map(silu));
        for (c, b) in bias.iter().enumerate() {
            h.channel_mut(c).iter_mut().for_each(|v| *v += b);
        }
        let h = self.conv2.forward(&h.map(silu));
        x.zip_with(&h, |a, b| a + b)
    }
}

struct SelfAttention {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

impl SelfAttention {
    fn new(init: &mut Init) -> Self {
        let std = 1.0 / (WIDTH as f32).sqrt();
        let mut m = |gain: f32| Matrix::from_vec(WIDTH, WIDTH, init.normal(WIDTH * WIDTH, gain * std)).unwrap();
        Self {
            wq: m(1.0),
            wk: m(1.0),
            wv: m(1.0),
            wo: m(0.5),
        }
    }

    fn forward(&self, layer: usize, x: &Tensor3, hooks: &mut HookRuntime<'_>) -> Result<Tensor3> {
        let tokens = layer_norm_rows(&x.to_tokens());
        let q = tokens.matmul(&self.wq)?;
        let k = tokens.matmul(&self.wk)?;
        let v = tokens.matmul(&self.wv)?;
        let attended = hooks.attention(layer, HEADS, q, k, v)?;
        let projected = Tensor3::from_tokens(&attended.matmul(&self.wo)?, x.height(), x.width())?;
        x.zip_with(&projected, |a, b| a + b)
    }
}

fn layer_norm_rows(m: &Matrix) -> Matrix {
    let n = m.cols() as f32;
    let stats: Vec<(f32, f32)> = (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mean = row.iter().sum::<f32>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
            (mean, (var + 1e-5).sqrt())
        })
        .collect();
    Matrix::from_fn(m.rows(), m.cols(), |r, c| (m.get(r, c) - stats[r].0) / stats[r].1)
}

/// Random-weight denoiser with four ResBlocks, eight self-attention layers
/// and two skip stages, on a scaled-linear DDIM schedule.
pub struct ToyUnetBackend {
    descriptor: BackendDescriptor,
    schedule: DdimSchedule,
    time: Linear,
    text: Linear,
    conv_in: Conv2d,
    resblocks: Vec<ResBlock>,
    attention: Vec<SelfAttention>,
    merge: [Conv2d; 2],
    conv_out: Conv2d,
}

impl ToyUnetBackend {
    pub const ID: &'static str = "toy-unet";

    pub fn new(steps: usize) -> Result<Self> {
        let schedule = DdimSchedule::new(AlphaSchedule::ScaledLinear, steps)?;
        let descriptor = BackendDescriptor {
            id: Self::ID.to_string(),
            latent_channels: LATENT_CHANNELS,
            spatial_downscale: 2,
            latent_multiple: 4,
            num_attention_layers: 8,
            num_resblock_layers: 4,
            num_skip_stages: 2,
            attention_layer_downscale: vec![2, 2, 4, 4, 4, 4, 2, 2],
            resblock_layer_downscale: vec![1, 2, 4, 2],
            skip_stage_downscale: vec![1, 2],
            attention_heads: vec![HEADS; 8],
            embedding_dim: EMBEDDING_DIM,
            alpha_schedule: AlphaSchedule::ScaledLinear,
            timestep_domain: schedule.timesteps().to_vec(),
            deterministic: true,
            precision: Precision::F32,
            weights: Some(format!("random:{WEIGHT_SEED:#x}")),
        };
        descriptor.validate()?;

        let mut init = Init(ChaCha8Rng::seed_from_u64(WEIGHT_SEED));
        Ok(Self {
            descriptor,
            schedule,
            time: Linear::new(&mut init, TIME_DIM, COND_DIM, 1.0),
            text: Linear::new(&mut init, EMBEDDING_DIM, COND_DIM, 1.0),
            conv_in: Conv2d::new(&mut init, LATENT_CHANNELS, WIDTH, 3, 1.0),
            resblocks: (0..4).map(|_| ResBlock::new(&mut init)).collect(),
            attention: (0..8).map(|_| SelfAttention::new(&mut init)).collect(),
            merge: [
                Conv2d::new(&mut init, 2 * WIDTH, WIDTH, 1, 1.0),
                Conv2d::new(&mut init, 2 * WIDTH, WIDTH, 1, 1.0),
            ],
            conv_out: Conv2d::new(&mut init, WIDTH, LATENT_CHANNELS, 3, 1.0),
        })
    }

    fn conditioning(&self, timestep: u32, embedding: &PromptEmbedding) -> Result<Vec<f32>> {
        if embedding.data.len() != EMBEDDING_DIM {
            return Err(Error::ShapeMismatch(format!(
                "embedding of length {} (expected {EMBEDDING_DIM})",
                embedding.data.len()
            )));
        }
        let half = TIME_DIM / 2;
        // Low frequencies only, over normalized time: the prediction must
        // vary slowly between neighbouring timesteps for inversion to hold.
        let t = timestep as f32 / TRAIN_TIMESTEPS as f32;
        let mut sinusoid = Vec::with_capacity(TIME_DIM);
        for j in 0..half {
            let freq = std::f32::consts::FRAC_PI_2 * (j + 1) as f32;
            sinusoid.push((t * freq).sin());
            sinusoid.push((t * freq).cos());
        }
        let time = self.time.forward(&sinusoid);
        let text = self.text.forward(&embedding.data);
        Ok(time.iter().zip(&text).map(|(a, b)| silu(*a) + b).collect())
    }

    fn resblock(&self, layer: usize, x: &Tensor3, cond: &[f32], hooks: &mut HookRuntime<'_>) -> Result<FeatureGrid> {
        let h = self.resblocks[layer].forward(x, cond)?;
        hooks.resblock(layer, h)
    }

    fn attend(&self, layer: usize, x: &Tensor3, hooks: &mut HookRuntime<'_>) -> Result<Tensor3> {
        self.attention[layer].forward(layer, x, hooks)
    }

    fn merge(&self, index: usize, up: &Tensor3, skip: &Tensor3) -> Result<Tensor3> {
        Ok(self.merge[index].forward(&up.concat_channels(skip)?))
    }
}

impl DiffusionBackend for ToyUnetBackend {
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
        let z = Tensor3::from_fn(c, h, w, |ch, y, x| {
            let (rgb, dy, dx) = (ch / 4, (ch / 2) % 2, ch % 2);
            2.0 * image.get(2 * y + dy, 2 * x + dx, rgb) - 1.0
        });
        LatentTensor::new(z, None)
    }

    fn decode_latent(&self, latent: &LatentTensor) -> Result<Image> {
        let z = &latent.data;
        if !z.is_finite() {
            return Err(Error::NonFiniteInput("latent"));
        }
        if z.channels() != LATENT_CHANNELS {
            return Err(Error::ChannelMismatch {
                left: z.channels(),
                right: LATENT_CHANNELS,
            });
        }
        Ok(Image::from_fn(2 * z.height(), 2 * z.width(), |y, x| {
            let base = (y % 2) * 2 + x % 2;
            [0, 1, 2].map(|rgb| ((z.get(rgb * 4 + base, y / 2, x / 2) + 1.0) * 0.5).clamp(0.0, 1.0))
        }))
    }

    fn embed_prompt(&self, prompt: &Prompt) -> Result<PromptEmbedding> {
        hashed_embedding(prompt, EMBEDDING_DIM)
    }

    fn predict_noise(
        &self,
        latent: &Tensor3,
        timestep: u32,
        embedding: &PromptEmbedding,
        hooks: &mut HookRuntime<'_>,
    ) -> Result<Tensor3> {
        if latent.channels() != LATENT_CHANNELS
            || latent.height() % self.descriptor.latent_multiple != 0
            || latent.width() % self.descriptor.latent_multiple != 0
        {
            return Err(Error::ShapeMismatch(format!(
                "toy-unet needs a {LATENT_CHANNELS}-channel latent with sides divisible by 4, got {:?}",
                latent.shape()
            )));
        }
        let cond = self.conditioning(timestep, embedding)?;

        let h = self.conv_in.forward(latent);
        let skip0 = self.resblock(0, &h, &cond, hooks)?;

        let h = self.resblock(1, &skip0.avg_pool2(), &cond, hooks)?;
        let h = self.attend(0, &h, hooks)?;
        let skip1 = self.attend(1, &h, hooks)?;

        let h = self.resblock(2, &skip1.avg_pool2(), &cond, hooks)?;
        let h = self.attend(2, &h, hooks)?;
        let h = self.attend(3, &h, hooks)?;
        let h = self.attend(4, &h, hooks)?;
        let h = self.attend(5, &h, hooks)?;

        let skip1 = hooks.skip(1, skip1)?;
        let h = self.merge(0, &h.upsample2(), &skip1)?;
        let h = self.resblock(3, &h, &cond, hooks)?;
        let h = self.attend(6, &h, hooks)?;
        let h = self.attend(7, &h, hooks)?;

        let skip0 = hooks.skip(0, skip0)?;
        let h = self.merge(1, &h.upsample2(), &skip0)?;

        Ok(self.conv_out.forward(&h.map(silu)).map(|v| OUTPUT_GAIN * v.tanh()))
    }
}
