//! Binary dumps of latents and captured features.
//!
//! Each tensor is one file:
//!
//! | bytes  | content                                        |
//! |--------|------------------------------------------------|
//! | 0..8   | magic `GLYPHLT1`                               |
//! | 8..20  | `u32` LE channels, height, width               |
//! | 20..24 | `i32` LE timestep, `-1` for a clean latent     |
//! | 24..   | `f32` LE values in C order (channel, row, col) |
//!
//! Matrices (attention Q/K/V/outputs) are stored as `1 × tokens × dims`.
//! A directory of dumps carries an `index.toml` listing every file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::LatentTensor;
use crate::error::{Error, Result};
use crate::injection::{AttentionPacket, ResidualPacket};
use crate::inversion::LatentTrajectory;
use crate::io::atomic_write;
use crate::tensor::{Matrix, Tensor3};

pub const MAGIC: &[u8; 8] = b"GLYPHLT1";
const HEADER_LEN: usize = 24;
pub const INDEX_FILE: &str = "index.toml";

pub fn encode(tensor: &Tensor3, timestep: Option<u32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tensor.data().len());
    out.extend_from_slice(MAGIC);
    for dim in tensor.shape() {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let t = timestep.map_or(-1, |t| t as i32);
    out.extend_from_slice(&t.to_le_bytes());
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor3, Option<u32>)> {
    let bad = |m: &str| Error::format("tensor dump", m);
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(bad("missing GLYPHLT1 header"));
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[8 + 4 * i..12 + 4 * i]).unwrap();
    let [c, h, w] = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)) as usize);
    let t = i32::from_le_bytes(word(3));
    let timestep = match t {
        -1 => None,
        t if t >= 0 => Some(t as u32),
        _ => return Err(bad("negative timestep")),
    };
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * c * h * w {
        return Err(bad("payload length disagrees with header shape"));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((Tensor3::from_vec(c, h, w, data)?, timestep))
}

pub fn write_tensor(path: &Path, tensor: &Tensor3, timestep: Option<u32>) -> Result<()> {
    atomic_write(path, &encode(tensor, timestep))
}

pub fn read_tensor(path: &Path) -> Result<(Tensor3, Option<u32>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn matrix_as_tensor(m: &Matrix) -> Tensor3 {
    Tensor3::from_vec(1, m.rows(), m.cols(), m.data().to_vec()).expect("matrix shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    /// Path relative to the index.
    pub file: String,
    /// `latent`, `attention-q`, `attention-k`, `attention-v`, `attention-out` or `resblock`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestep: Option<u32>,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DumpIndex {
    /// Prompt and guidance scale of a dumped trajectory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f32>,
    #[serde(default)]
    pub entries: Vec<DumpEntry>,
}

impl DumpIndex {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format("dump index", e))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(INDEX_FILE);
        let text = toml::to_string(self).map_err(|e| Error::format("dump index", e))?;
        atomic_write(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Incrementally writes tensors into a directory and keeps the index.
#[derive(Debug)]
pub struct DumpWriter {
    dir: PathBuf,
    index: DumpIndex,
}

impl DumpWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index: DumpIndex::default(),
        })
    }

    fn push(
        &mut self,
        file: String,
        kind: &str,
        step: Option<usize>,
        layer: Option<usize>,
        tensor: &Tensor3,
        timestep: Option<u32>,
    ) -> Result<()> {
        write_tensor(&self.dir.join(&file), tensor, timestep)?;
        self.index.entries.push(DumpEntry {
            file,
            kind: kind.to_string(),
            step,
            layer,
            timestep,
            shape: tensor.shape(),
        });
        Ok(())
    }

    /// Latent number `position` (its order within the dump).
    pub fn latent(&mut self, position: usize, latent: &LatentTensor) -> Result<()> {
        let tag = latent.timestep.map_or_else(|| "clean".to_string(), |t| format!("t{t:04}"));
        let file = format!("latent_{position:03}_{tag}.bin");
        self.push(file, "latent", Some(position), None, &latent.data, latent.timestep)
    }

    /// Packets captured at denoising step `step`.
    pub fn packets(&mut self, step: usize, attention: &AttentionPacket, residual: &ResidualPacket) -> Result<()> {
        for (layer, f) in attention.layers() {
            for (kind, m) in [("q", &f.q), ("k", &f.k), ("v", &f.v), ("out", &f.output)] {
                let file = format!("step{step:03}_attn{layer:02}_{kind}.bin");
                self.push(file, &format!("attention-{kind}"), Some(step), Some(layer), &matrix_as_tensor(m), attention.timestep())?;
            }
        }
        for (layer, hidden) in residual.layers() {
            let file = format!("step{step:03}_res{layer:02}.bin");
            self.push(file, "resblock", Some(step), Some(layer), hidden, residual.timestep())?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        self.index.write(&self.dir)
    }
}

/// Write every trajectory entry plus an index; returns the index path.
pub fn dump_trajectory(dir: &Path, trajectory: &LatentTrajectory) -> Result<PathBuf> {
    let mut w = DumpWriter::create(dir)?;
    for (i, entry) in trajectory.entries().iter().enumerate() {
        w.latent(i, entry)?;
    }
    w.index.prompt = Some(trajectory.prompt_used.clone());
    w.index.guidance_scale = Some(trajectory.guidance_scale_used);
    w.finish()
}

/// Load a trajectory written by [`dump_trajectory`] and check it against
/// `timesteps`.
pub fn load_trajectory(dir: &Path, timesteps: &[u32]) -> Result<LatentTrajectory> {
    let index = DumpIndex::read(dir)?;
    let mut latents: Vec<_> = index.entries.iter().filter(|e| e.kind == "latent").collect();
    latents.sort_by_key(|e| e.step);
    let entries = latents
        .iter()
        .map(|e| {
            let (data, timestep) = read_tensor(&dir.join(&e.file))?;
            LatentTensor::new(data, timestep)
        })
        .collect::<Result<Vec<_>>>()?;
    LatentTrajectory::new(
        entries,
        timesteps,
        index.prompt.clone().unwrap_or_default(),
        index.guidance_scale.unwrap_or(crate::inversion::INVERSION_GUIDANCE),
    )
}
