//! Multi-head scaled dot-product attention over head-merged matrices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `softmax(Q Kᵀ / √d) V`, computed independently for each of `heads`
/// equal column slices and concatenated back.
///
/// `q` is `[n_q × c]`, `k` and `v` are `[n_kv × c]`; the result is
/// `[n_q × c]`. Query and key token counts may differ.
pub fn scaled_dot_product(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    check_shapes(q, k, v, heads)?;
    let out = attend(&widen(q), &widen(k), &widen(v), q.cols(), heads);
    Matrix::from_vec(q.rows(), q.cols(), narrow(&out))
}

pub(crate) fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<()> {
    let channels = q.cols();
    if k.cols() != channels || v.cols() != channels {
        return Err(Error::ChannelMismatch {
            left: channels,
            right: if k.cols() != channels { k.cols() } else { v.cols() },
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} keys vs {} values",
            k.rows(),
            v.rows()
        )));
    }
    if heads == 0 || channels % heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{channels} channels cannot be split into {heads} heads"
        )));
    }
    Ok(())
}

pub(crate) fn widen(m: &Matrix) -> Vec<f64> {
    m.data().iter().map(|&v| f64::from(v)).collect()
}

pub(crate) fn narrow(data: &[f64]) -> Vec<f32> {
    data.iter().map(|&v| v as f32).collect()
}

/// Attention on row-major f64 buffers with `channels` columns; shapes are
/// assumed checked.
pub(crate) fn attend(q: &[f64], k: &[f64], v: &[f64], channels: usize, heads: usize) -> Vec<f64> {
    let head_dim = channels / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let n_kv = k.len() / channels;

    let mut out = vec![0.0f64; q.len()];
    out.par_chunks_mut(channels).zip(q.par_chunks(channels)).for_each_init(
        || vec![0.0f64; n_kv],
        |scores, (out_row, q_row)| {
            for h in 0..heads {
                let cols = h * head_dim..(h + 1) * head_dim;
                let qi = &q_row[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k[j * channels..][cols.clone()];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let acc = &mut out_row[cols.clone()];
                for (j, &w) in scores.iter().enumerate() {
                    for (a, vv) in acc.iter_mut().zip(&v[j * channels..][cols.clone()]) {
                        *a += w * vv;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= denom);
            }
        },
    );
    out
}
