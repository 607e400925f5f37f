//! Deterministic DDIM inversion of a content image.

use crate::backend::{DiffusionBackend, HookBundle, LatentTensor, Prompt};
use crate::error::{Error, Result};
use crate::tensor::Image;

/// Guidance scale used for inversion and content reconstruction.
pub const INVERSION_GUIDANCE: f32 = 1.0;

/// Latents visited by inversion, ordered from the noisiest scheduler
/// timestep down to the clean latent.
///
/// Entry `i < T` is tagged with the `i`-th scheduler timestep and is the
/// input of denoising step `i`; entry `T` is the clean latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    entries: Vec<LatentTensor>,
    pub prompt_used: String,
    pub guidance_scale_used: f32,
}

impl LatentTrajectory {
    /// Assemble a trajectory and check it against `timesteps`.
    pub fn new(
        entries: Vec<LatentTensor>,
        timesteps: &[u32],
        prompt_used: String,
        guidance_scale_used: f32,
    ) -> Result<Self> {
        let t = Self {
            entries,
            prompt_used,
            guidance_scale_used,
        };
        t.validate(timesteps)?;
        Ok(t)
    }

    /// Check completeness, ordering, shape agreement and finiteness.
    pub fn validate(&self, timesteps: &[u32]) -> Result<()> {
        if self.entries.len() != timesteps.len() + 1 {
            return Err(Error::IncompleteTrajectory(format!(
                "{} entries for a {}-step schedule",
                self.entries.len(),
                timesteps.len()
            )));
        }
        let expected = timesteps.iter().map(|&t| Some(t)).chain(std::iter::once(None));
        let shape = self.entries[0].shape();
        for (i, (entry, want)) in self.entries.iter().zip(expected).enumerate() {
            if entry.timestep != want {
                return Err(Error::IncompleteTrajectory(format!(
                    "entry {i} is tagged {:?}, expected {want:?}",
                    entry.timestep
                )));
            }
            if entry.shape() != shape {
                return Err(Error::IncompleteTrajectory(format!("entry {i} has a different shape")));
            }
            if !entry.data.is_finite() {
                return Err(Error::NonFiniteInput("trajectory entry"));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[LatentTensor] {
        &self.entries
    }

    /// The initial noise fed to the denoising paths.
    pub fn top(&self) -> &LatentTensor {
        &self.entries[0]
    }

    pub fn clean(&self) -> &LatentTensor {
        &self.entries[self.entries.len() - 1]
    }

    /// Input latent of denoising step `i`.
    pub fn at_step(&self, i: usize) -> Result<&LatentTensor> {
        self.entries.get(i).filter(|_| i < self.steps()).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.steps(),
        })
    }

    /// Latent reached after denoising step `i` (the clean latent for the last step).
    pub fn after_step(&self, i: usize) -> Result<&LatentTensor> {
        if i >= self.steps() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.steps(),
            });
        }
        Ok(&self.entries[i + 1])
    }
}

/// Invert `image` into a full trajectory with guidance scale 1.
pub fn invert(
    image: &Image,
    prompt: &Prompt,
    backend: &dyn DiffusionBackend,
    steps: usize,
) -> Result<LatentTrajectory> {
    invert_with_guidance(image, prompt, backend, steps, INVERSION_GUIDANCE)
}

pub fn invert_with_guidance(
    image: &Image,
    prompt: &Prompt,
    backend: &dyn DiffusionBackend,
    steps: usize,
    guidance_scale: f32,
) -> Result<LatentTrajectory> {
    let schedule = backend.schedule();
    if steps == 0 || steps != schedule.steps() {
        return Err(Error::StepsMismatch {
            requested: steps,
            scheduled: schedule.steps(),
        });
    }
    let embedding = backend.embed_prompt(prompt)?;
    let hooks = HookBundle::default();
    let mut z = backend.encode_image(image)?;
    let mut entries = vec![z.clone()];
    for i in (0..steps).rev() {
        let to = schedule.timesteps()[i];
        let from = schedule.output_timestep(i);
        // The noise at the target level is approximated by the prediction
        // from the current, less noisy latent.
        let (eps, _) = backend.guided_noise(&z, to, &embedding, &hooks, guidance_scale)?;
        z = LatentTensor::new(schedule.transfer(&z.data, &eps, from, Some(to))?, Some(to))?;
        entries.push(z.clone());
    }
    entries.reverse();
    let prompt_used = match prompt {
        Prompt::Text(t) => t.clone(),
        Prompt::Null => String::new(),
    };
    LatentTrajectory::new(entries, schedule.timesteps(), prompt_used, guidance_scale)
}

/// Denoise from the top of `trajectory` back to a clean latent with the
/// unconditional prompt and guidance scale 1.
pub fn resample(trajectory: &LatentTrajectory, backend: &dyn DiffusionBackend) -> Result<LatentTensor> {
    let schedule = backend.schedule();
    trajectory.validate(schedule.timesteps())?;
    let embedding = backend.embed_prompt(&Prompt::Null)?;
    let hooks = HookBundle::default();
    let mut z = trajectory.top().clone();
    for &t in schedule.timesteps() {
        z = backend.denoise_step(&z, t, &embedding, &hooks, INVERSION_GUIDANCE)?.latent;
    }
    Ok(z)
}

/// Decode the resampled clean latent.
pub fn reconstruct(trajectory: &LatentTrajectory, backend: &dyn DiffusionBackend) -> Result<Image> {
    backend.decode_latent(&resample(trajectory, backend)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ZeroEpsilonBackend;

    fn gradient(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| {
            [y as f32 / h as f32, x as f32 / w as f32, ((x + y) % 3) as f32 / 3.0]
        })
    }

    #[test]
    fn zero_eps_round_trip_is_exact() {
        let b = ZeroEpsilonBackend::new(20).unwrap();
        let img = gradient(6, 5);
        let traj = invert(&img, &Prompt::Null, &b, 20).unwrap();
        assert_eq!(traj.entries().len(), 21);
        assert_eq!(traj.clean(), &b.encode_image(&img).unwrap());
        assert_eq!(reconstruct(&traj, &b).unwrap(), img);
    }

    #[test]
    fn single_step_has_two_entries() {
        let b = ZeroEpsilonBackend::new(1).unwrap();
        let traj = invert(&gradient(2, 2), &Prompt::Null, &b, 1).unwrap();
        assert_eq!(traj.entries().len(), 2);
        assert_eq!(traj.top().timestep, Some(1));
    }

    #[test]
    fn steps_mismatch() {
        let b = ZeroEpsilonBackend::new(10).unwrap();
        let err = invert(&gradient(2, 2), &Prompt::Null, &b, 11).unwrap_err();
        assert!(matches!(err, Error::StepsMismatch { requested: 11, scheduled: 10 }));
    }

    #[test]
    fn truncated_trajectory_is_rejected() {
        let b = ZeroEpsilonBackend::new(5).unwrap();
        let traj = invert(&gradient(2, 2), &Prompt::Null, &b, 5).unwrap();
        let mut entries = traj.entries().to_vec();
        entries.remove(2);
        let broken = LatentTrajectory {
            entries,
            prompt_used: String::new(),
            guidance_scale_used: 1.0,
        };
        assert!(matches!(reconstruct(&broken, &b), Err(Error::IncompleteTrajectory(_))));
    }

    #[test]
    fn step_accessors() {
        let b = ZeroEpsilonBackend::new(3).unwrap();
        let traj = invert(&gradient(2, 2), &Prompt::Null, &b, 3).unwrap();
        assert_eq!(traj.at_step(0).unwrap(), traj.top());
        assert_eq!(traj.after_step(2).unwrap(), traj.clean());
        assert!(traj.at_step(3).is_err());
        assert!(traj.after_step(3).is_err());
    }
}
