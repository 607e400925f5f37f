//! Exact squared Euclidean distance transform (lower envelope of parabolas,
//! separable over rows and columns).

/// For every cell, the squared distance to the nearest cell where `seed` is
/// true, or `f64::INFINITY` if there is none.
pub(crate) fn squared_distance_to(seed: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut line = vec![0.0; height.max(width)];
    let mut out = vec![0.0; height.max(width)];
    for x in 0..width {
        for y in 0..height {
            line[y] = grid[y * width + x];
        }
        transform_1d(&line[..height], &mut out[..height]);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        line[..width].copy_from_slice(row);
        transform_1d(&line[..width], &mut out[..width]);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

/// `out[q] = min_p (q − p)² + f[p]`.
fn transform_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    // Vertices of the lower envelope and the boundaries between them.
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = intersection(f, p, q);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

fn intersection(f: &[f64], p: usize, q: usize) -> f64 {
    let (pf, qf) = (p as f64, q as f64);
    ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
}
