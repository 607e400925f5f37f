use crate::backend::LatentTensor;
use crate::error::{Error, Result};
use crate::tensor::{Grid2, Tensor3};

fn weighted(a: &Tensor3, b: &Tensor3, m: &Grid2) -> Result<Tensor3> {
    a.check_same_shape(b)?;
    if (m.height(), m.width()) != (a.height(), a.width()) {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs latent {}x{}",
            m.height(),
            m.width(),
            a.height(),
            a.width()
        )));
    }
    let plane = a.height() * a.width();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| {
            let w = m.data()[i % plane];
            // Exact at w ∈ {0, 1} and for equal operands.
            if w == 0.0 || x == y {
                y
            } else if w == 1.0 {
                x
            } else {
                x * w + y * (1.0 - w)
            }
        })
        .collect();
    Tensor3::from_vec(a.channels(), a.height(), a.width(), data)
}

/// `a ⊙ m + b ⊙ (1 − m)`, with `m` broadcast over channels.
pub fn blend_latents(a: &LatentTensor, b: &LatentTensor, m: &Grid2) -> Result<LatentTensor> {
    if a.timestep != b.timestep {
        return Err(Error::TimestepMismatch {
            expected: a.timestep,
            found: b.timestep,
        });
    }
    LatentTensor::new(weighted(&a.data, &b.data, m)?, a.timestep)
}

/// `z_main ⊙ D + z_content ⊙ (1 − D)`: wherever `D = 0` the content latent
/// passes through bit for bit.
pub fn restore_background(z_main: &LatentTensor, z_content: &LatentTensor, d_latent: &Grid2) -> Result<LatentTensor> {
    if z_main.timestep != z_content.timestep {
        return Err(Error::TimestepMismatch {
            expected: z_main.timestep,
            found: z_content.timestep,
        });
    }
    LatentTensor::new(weighted(&z_main.data, &z_content.data, d_latent)?, z_main.timestep)
}
