//! Brute-force oracles and fixtures shared by the integration tests. The
//! oracles work in f64 on plain nested vectors and share no code with the
//! library.

#![allow(dead_code)]

use glyphstyle::tensor::{Image, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&v| v as f64).collect()).collect()
}

pub fn matrix(rows: &Rows) -> Matrix {
    let cols = rows.first().map_or(0, Vec::len);
    Matrix::from_vec(rows.len(), cols, rows.iter().flatten().map(|&v| v as f32).collect()).unwrap()
}

pub fn random_rows(rng: &mut impl Rng, n: usize, c: usize, scale: f64) -> Rows {
    (0..n).map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

/// Per-head softmax attention, one query at a time.
pub fn attention(q: &Rows, k: &Rows, v: &Rows, heads: usize) -> Rows {
    let c = q[0].len();
    let dh = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|d| qi[d] * kj[d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for d in cols.clone() {
                out[i][d] = weights.iter().zip(v).map(|(w, vj)| w * vj[d]).sum::<f64>() / total;
            }
        }
    }
    out
}

pub fn column_stats(m: &Rows, c: usize) -> (f64, f64) {
    let n = m.len() as f64;
    let mean = m.iter().map(|r| r[c]).sum::<f64>() / n;
    let var = m.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn adain(x: &Rows, y: &Rows, eps: f64) -> Rows {
    let c = x[0].len();
    let sx: Vec<_> = (0..c).map(|j| column_stats(x, j)).collect();
    let sy: Vec<_> = (0..c).map(|j| column_stats(y, j)).collect();
    x.iter()
        .map(|r| (0..c).map(|j| sy[j].1 * (r[j] - sx[j].0) / (sx[j].1 + eps) + sy[j].0).collect())
        .collect()
}

/// Injected attention output for main `(q, k, v)` and style `(ks, vs)`.
#[allow(clippy::too_many_arguments)]
pub fn injected(q: &Rows, k: &Rows, v: &Rows, ks: &Rows, vs: &Rows, lambda: f64, heads: usize, eps: f64) -> Rows {
    let k_mix = adain(ks, k, eps);
    let v_mix = adain(vs, v, eps);
    let base = attention(q, &k_mix, &v_mix, heads);
    let styled = adain(&attention(q, ks, vs, heads), &base, eps);
    base.iter()
        .zip(&styled)
        .map(|(b, s)| b.iter().zip(s).map(|(x, y)| x + lambda * y).collect())
        .collect()
}

/// Soft distance map by all-pairs search: half-pixel-offset signed
/// distance to the text boundary, mapped linearly onto `[0, 1]` over a
/// band of width `2d`.
pub fn distance_map(mask: &[bool], h: usize, w: usize, d: f64) -> Vec<f64> {
    if d == 0.0 {
        return mask.iter().map(|&b| b as u8 as f64).collect();
    }
    let nearest = |y: usize, x: usize, want: bool| {
        let mut best = f64::INFINITY;
        for yy in 0..h {
            for xx in 0..w {
                if mask[yy * w + xx] == want {
                    let dy = yy as f64 - y as f64;
                    let dx = xx as f64 - x as f64;
                    best = best.min((dy * dy + dx * dx).sqrt());
                }
            }
        }
        best
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let signed = if mask[i] {
                nearest(y, x, false) - 0.5
            } else {
                -(nearest(y, x, true) - 0.5)
            };
            (0.5 + signed / (2.0 * d)).clamp(0.0, 1.0)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Light gradient background with a dark striped block standing in for a word.
pub fn text_image(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |y, x| {
        let text = (h * 3 / 8..h * 5 / 8).contains(&y) && (w / 5..w * 4 / 5).contains(&x) && (x / 3) % 3 != 0;
        if text {
            [0.05, 0.05, 0.1]
        } else {
            [0.55 + 0.2 * (x as f32 / w as f32), 0.6, 0.5 + 0.3 * (y as f32 / h as f32)]
        }
    })
}

/// Smooth, textured content image without text.
pub fn scene_image(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |y, x| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        [
            0.5 + 0.3 * (6.0 * fx).sin() * (4.0 * fy).cos(),
            0.4 + 0.4 * fy,
            0.6 - 0.3 * fx + 0.1 * (9.0 * (fx + fy)).sin(),
        ]
    })
}
