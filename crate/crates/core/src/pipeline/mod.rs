//! Stylization: one inversion and three denoising paths run in lockstep.
//!
//! Per denoising step `i` at timestep `t`:
//!
//! 1. the **style** path denoises with the style prompt and captures
//!    self-attention Q/K/V;
//! 2. the **content** path denoises along the inverted content image and
//!    captures ResBlock outputs;
//! 3. the **main** path denoises with the content ResBlocks substituted, style
//!    attention injected with weight `λ_i`, and skip features sharpened;
//! 4. the main output is blended with the inverted content latent of the
//!    same noise level through the step mask, so the edit spreads from the
//!    text core outward as denoising proceeds;
//! 5. everything outside the soft text region is reset to the inverted
//!    content latent.

mod blend;
mod manifest;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use blend::{blend_latents, restore_background};
pub use manifest::{Artifacts, RunManifest, MANIFEST_FILE};

use crate::backend::{
    create_backend, DiffusionBackend, HookBundle, LatentTensor, Prompt, ResBlockOverride, StepCapture,
};
use crate::config::RunConfig;
use crate::dump::DumpWriter;
use crate::error::{Error, Result};
use crate::freq;
use crate::injection::{lambda_schedule, StyleInjection};
use crate::inversion::{invert_with_guidance, LatentTrajectory};
use crate::textmask::{
    build_binary_mask, build_distance_map, downsample_to_latent, step_mask, BinaryMask, ContrastTextDetector,
    DistanceMap, ExternalOcrAdapter, ExternalSegmentationAdapter, MaskSource, Region, RegionFileAdapter,
    TextRegionAdapter,
};
use crate::tensor::{Grid2, Image};

/// Where the style path starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleSource {
    /// Standard Gaussian noise drawn from the request seed.
    Noise,
    /// The top of the content image's inversion trajectory.
    ContentTrajectory,
}

/// How the text mask is obtained.
pub enum MaskInput {
    Mask(BinaryMask),
    Regions(Vec<Region>, MaskSource),
    Detector(Box<dyn TextRegionAdapter>),
    Segmentation(ExternalSegmentationAdapter),
}

impl MaskInput {
    /// Mask selection from a config: `mask`, then `regions`, then
    /// `ocr_command`, then the built-in contrast detector.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        if let Some(path) = &config.mask {
            let grid = crate::io::read_gray(path)?;
            return Ok(MaskInput::Mask(BinaryMask::from_grid(
                &grid.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                MaskSource::UserSupplied,
            )));
        }
        if let Some(path) = &config.regions {
            return Ok(MaskInput::Detector(Box::new(RegionFileAdapter { path: path.clone() })));
        }
        if let Some((program, args)) = config.ocr_command.split_first() {
            return Ok(MaskInput::Detector(Box::new(ExternalOcrAdapter {
                program: program.into(),
                args: args.to_vec(),
            })));
        }
        Ok(MaskInput::Detector(Box::new(ContrastTextDetector::default())))
    }

    pub fn resolve(&self, image: &Image) -> Result<BinaryMask> {
        let (h, w) = (image.height(), image.width());
        let mask = match self {
            MaskInput::Mask(m) => {
                if (m.grid.height(), m.grid.width()) != (h, w) {
                    return Err(Error::ShapeMismatch(format!(
                        "mask is {}x{}, image is {h}x{w}",
                        m.grid.height(),
                        m.grid.width()
                    )));
                }
                m.clone()
            }
            MaskInput::Regions(regions, source) => build_binary_mask(regions, h, w, *source)?,
            MaskInput::Detector(adapter) => build_binary_mask(&adapter.detect(image)?, h, w, adapter.source())?,
            MaskInput::Segmentation(adapter) => {
                let grid = adapter.segment(image)?;
                if (grid.height(), grid.width()) != (h, w) {
                    return Err(Error::ShapeMismatch("segmentation mask size differs from image".into()));
                }
                BinaryMask::from_grid(&grid.map(|v| if v > 0.0 { 1.0 } else { 0.0 }), MaskSource::SegmentationAdapter)
            }
        };
        if mask.is_empty() {
            return Err(Error::NoTextRegion);
        }
        Ok(mask)
    }
}

pub struct StylizationRequest {
    pub image: Image,
    pub mask: MaskInput,
    pub config: RunConfig,
}

impl StylizationRequest {
    /// Load the image and mask named by `config`.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        let path = config
            .image
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no content image given".into()))?;
        Ok(Self {
            image: crate::io::read_image(path)?,
            mask: MaskInput::from_config(&config)?,
            config,
        })
    }
}

/// State of one denoising step, handed to a [`StepObserver`].
pub struct StepRecord<'a> {
    pub index: usize,
    pub timestep: u32,
    pub style: &'a LatentTensor,
    pub content: &'a LatentTensor,
    /// Main path output before blending.
    pub main: &'a LatentTensor,
    /// Inverted content latent at the output noise level.
    pub inverted: &'a LatentTensor,
    pub step_mask: &'a Grid2,
    /// Main latent after blending and background restoration.
    pub output: &'a LatentTensor,
    pub style_capture: &'a StepCapture,
    pub content_capture: &'a StepCapture,
}

pub trait StepObserver {
    fn on_step(&mut self, record: &StepRecord<'_>) -> Result<()>;
}

impl<F: FnMut(&StepRecord<'_>) -> Result<()>> StepObserver for F {
    fn on_step(&mut self, record: &StepRecord<'_>) -> Result<()> {
        self(record)
    }
}

/// Everything an in-memory run produces.
#[derive(Debug, Clone)]
pub struct StylizationResult {
    pub image: Image,
    pub latent: LatentTensor,
    pub mask: BinaryMask,
    pub distance: DistanceMap,
    /// Distance map at latent resolution.
    pub latent_distance: Grid2,
    pub trajectory: LatentTrajectory,
    /// Final latent of the content path.
    pub content_latent: LatentTensor,
    pub style_latent: LatentTensor,
}

impl StylizationResult {
    pub fn content_reconstruction(&self, backend: &dyn DiffusionBackend) -> Result<Image> {
        backend.decode_latent(&self.content_latent)
    }
}

/// Run the full stylization in memory.
pub fn run(
    request: &StylizationRequest,
    backend: &dyn DiffusionBackend,
    observer: Option<&mut dyn StepObserver>,
) -> Result<StylizationResult> {
    let config = &request.config;
    config.validate()?;
    let descriptor = backend.descriptor();
    if config.steps != descriptor.steps() {
        return Err(Error::StepsMismatch {
            requested: config.steps,
            scheduled: descriptor.steps(),
        });
    }
    config.injection.validate_for(descriptor)?;
    let freq_hooks = freq::apply_to_backend(HookBundle::default(), &config.freq, descriptor)?;
    let image = &request.image;
    let shape = descriptor.latent_shape(image.height(), image.width())?;

    let mask = request.mask.resolve(image)?;
    let distance = build_distance_map(&mask, config.distance)?;
    let latent_distance = downsample_to_latent(&distance.grid, descriptor.spatial_downscale)?;

    let inversion_prompt = Prompt::from_optional(&config.inversion_prompt);
    let trajectory =
        invert_with_guidance(image, &inversion_prompt, backend, config.steps, config.inversion_guidance)?;
    let style_embedding = backend.embed_prompt(&Prompt::from_optional(&config.prompt))?;
    let content_embedding = backend.embed_prompt(&inversion_prompt)?;

    let timesteps = backend.schedule().timesteps().to_vec();
    let mut z_style = match config.style_source {
        StyleSource::Noise => LatentTensor::gaussian(shape, config.seed, Some(timesteps[0])),
        StyleSource::ContentTrajectory => trajectory.top().clone(),
    };
    let mut z_content = trajectory.top().clone();
    let mut z_main = trajectory.top().clone();
    let capture_style = HookBundle::capture_attention(config.injection.attention_layers.iter().copied());
    let capture_content = HookBundle::capture_resblocks(config.injection.resblock_layers.iter().copied());
    let mut observer = observer;

    for (i, &t) in timesteps.iter().enumerate() {
        let style = backend.denoise_step(&z_style, t, &style_embedding, &capture_style, config.guidance)?;
        let content =
            backend.denoise_step(&z_content, t, &content_embedding, &capture_content, config.inversion_guidance)?;

        let lambda = lambda_schedule(i, config.steps, &config.injection)?;
        let main_hooks = HookBundle {
            resblock_override: Some(ResBlockOverride {
                layers: config.injection.resblock_layers.clone(),
                packet: Arc::new(content.capture.residual.clone()),
            }),
            attention_transform: Some(Arc::new(StyleInjection::new(
                &config.injection,
                Arc::new(style.capture.attention.clone()),
                lambda,
            ))),
            ..freq_hooks.clone()
        };
        let main = backend.denoise_step(&z_main, t, &style_embedding, &main_hooks, config.guidance)?;

        let inverted = trajectory.after_step(i)?;
        let m = step_mask(&latent_distance, i, config.steps)?;
        let mixed = blend_latents(&main.latent, inverted, &m.grid)?;
        let output = restore_background(&mixed, inverted, &latent_distance)?;

        if let Some(obs) = observer.as_deref_mut() {
            obs.on_step(&StepRecord {
                index: i,
                timestep: t,
                style: &style.latent,
                content: &content.latent,
                main: &main.latent,
                inverted,
                step_mask: &m.grid,
                output: &output,
                style_capture: &style.capture,
                content_capture: &content.capture,
            })?;
        }
        z_style = style.latent;
        z_content = content.latent;
        z_main = output;
    }

    Ok(StylizationResult {
        image: backend.decode_latent(&z_main)?,
        latent: z_main,
        mask,
        distance,
        latent_distance,
        trajectory,
        content_latent: z_content,
        style_latent: z_style,
    })
}

struct Dumps<'o> {
    main: Option<DumpWriter>,
    packets: Option<DumpWriter>,
    progress: Option<&'o mut dyn StepObserver>,
}

impl StepObserver for Dumps<'_> {
    fn on_step(&mut self, r: &StepRecord<'_>) -> Result<()> {
        if let Some(p) = &mut self.progress {
            p.on_step(r)?;
        }
        if let Some(w) = &mut self.main {
            w.latent(r.index, r.output)?;
        }
        if let Some(w) = &mut self.packets {
            w.packets(r.index, &r.style_capture.attention, &r.content_capture.residual)?;
        }
        Ok(())
    }
}

/// Files created so far; removed again if the run fails.
#[derive(Default)]
struct Created(Vec<PathBuf>);

impl Created {
    fn add(&mut self, path: PathBuf) -> PathBuf {
        self.0.push(path.clone());
        path
    }

    fn remove_all(&self) {
        for p in self.0.iter().rev() {
            let _ = if p.is_dir() {
                std::fs::remove_dir_all(p)
            } else {
                std::fs::remove_file(p)
            };
        }
    }
}

/// Run, then write `stylized.png`, `mask.png`, `distance.png`, optional
/// dumps and finally `manifest.toml` into `config.out`. On failure, files
/// created by this call are removed. `progress` sees every step.
pub fn stylize(
    request: &StylizationRequest,
    backend: &dyn DiffusionBackend,
    progress: Option<&mut dyn StepObserver>,
) -> Result<(Image, RunManifest)> {
    let out = request.config.out.clone();
    let mut created = Created::default();
    if !out.exists() {
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        created.add(out.clone());
    }
    let result = stylize_into(request, backend, &out, &mut created, progress);
    if result.is_err() {
        created.remove_all();
    }
    result
}

fn stylize_into(
    request: &StylizationRequest,
    backend: &dyn DiffusionBackend,
    out: &Path,
    created: &mut Created,
    progress: Option<&mut dyn StepObserver>,
) -> Result<(Image, RunManifest)> {
    let started = Instant::now();
    let config = &request.config;
    let mut dumps = Dumps {
        main: None,
        packets: None,
        progress,
    };
    let mut artifacts = Artifacts::default();
    if config.dump_latents {
        let dir = created.add(out.join("latents"));
        dumps.main = Some(DumpWriter::create(&dir.join("main"))?);
        artifacts.latents = Some(PathBuf::from("latents"));
    }
    if config.dump_packets {
        let dir = created.add(out.join("packets"));
        dumps.packets = Some(DumpWriter::create(&dir)?);
        artifacts.packets = Some(PathBuf::from("packets"));
    }

    let result = run(request, backend, Some(&mut dumps))?;

    if let Some(w) = dumps.main.take() {
        w.finish()?;
        crate::dump::dump_trajectory(&out.join("latents").join("inversion"), &result.trajectory)?;
    }
    if let Some(w) = dumps.packets.take() {
        w.finish()?;
    }
    crate::io::write_image(&created.add(out.join(&artifacts.stylized)), &result.image)?;
    crate::io::write_gray8(&created.add(out.join(&artifacts.mask)), &result.mask.grid)?;
    crate::io::write_gray16(&created.add(out.join(&artifacts.distance)), &result.distance.grid)?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        mask_source: result.mask.source,
        text_pixels: result.mask.foreground_count(),
        duration_ms: started.elapsed().as_millis() as u64,
        artifacts,
        backend: backend.descriptor().clone(),
        config: config.clone(),
    };
    manifest.write(&created.add(out.join(MANIFEST_FILE)))?;
    Ok((result.image, manifest))
}

/// Build the backend named in `config.backend` and stylize.
pub fn stylize_with_config(config: RunConfig) -> Result<(Image, RunManifest)> {
    let backend = create_backend(&config.backend, config.steps, None)?;
    let request = StylizationRequest::from_config(config)?;
    stylize(&request, backend.as_ref(), None)
}
