//! Text masks: the binary text mask, the soft distance map derived from it,
//! and the per-step mask that widens the edited area as denoising proceeds.
//!
//! The distance map uses the signed Euclidean distance between pixel centres,
//! with the text boundary placed halfway between the last text pixel and
//! the first background pixel:
//!
//! ```text
//! sdist(p) = +(distance to the nearest background pixel − ½)   p in text
//!            −(distance to the nearest text pixel − ½)         p in background
//! D(p)     = clamp(½ + sdist(p) / 2d, 0, 1)
//! ```
//!
//! So pixels at least `d + ½` inside the text are 1, pixels at least `d + ½`
//! outside are 0, and `d = 0` reproduces the binary mask.

mod distance;
mod regions;

use serde::{Deserialize, Serialize};

pub use regions::{
    box_iou, check_regions, ContrastTextDetector, ExternalOcrAdapter, ExternalSegmentationAdapter, Region,
    RegionFile, RegionFileAdapter, TextRegionAdapter,
};

use crate::error::{Error, Result};
use crate::tensor::Grid2;

/// Default width of the soft band, in pixels.
pub const DEFAULT_DISTANCE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    OcrBoxes,
    SegmentationAdapter,
    UserSupplied,
}

/// Text pixels are 1, everything else 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: Grid2,
    pub source: MaskSource,
}

impl BinaryMask {
    /// Threshold a grayscale grid at ½.
    pub fn from_grid(grid: &Grid2, source: MaskSource) -> Self {
        Self {
            grid: grid.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
            source,
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub grid: Grid2,
    /// Band half-width `d` in pixels.
    pub threshold: f64,
}

/// A distance map scheduled for one denoising step, at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMask {
    pub grid: Grid2,
    pub step: usize,
}

/// Union of the regions, rasterized at pixel centres.
pub fn build_binary_mask(regions: &[Region], height: usize, width: usize, source: MaskSource) -> Result<BinaryMask> {
    check_regions(regions, height, width)?;
    let grid = Grid2::from_fn(height, width, |y, x| {
        if regions.iter().any(|r| r.covers(y, x)) {
            1.0
        } else {
            0.0
        }
    });
    Ok(BinaryMask { grid, source })
}

pub fn build_distance_map(mask: &BinaryMask, d: f64) -> Result<DistanceMap> {
    if !(d >= 0.0 && d.is_finite()) {
        return Err(Error::InvalidConfig(format!("distance must be a finite value ≥ 0, got {d}")));
    }
    let (h, w) = (mask.grid.height(), mask.grid.width());
    let inside: Vec<bool> = mask.grid.data().iter().map(|&v| v > 0.0).collect();
    if d == 0.0 || h * w == 0 {
        return Ok(DistanceMap {
            grid: mask.grid.clone(),
            threshold: d,
        });
    }
    let outside: Vec<bool> = inside.iter().map(|&b| !b).collect();
    let to_outside = distance::squared_distance_to(&outside, h, w);
    let to_inside = distance::squared_distance_to(&inside, h, w);
    let data = (0..h * w)
        .map(|i| {
            let sdist = if inside[i] {
                to_outside[i].sqrt() - 0.5
            } else {
                0.5 - to_inside[i].sqrt()
            };
            (0.5 + sdist / (2.0 * d)).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(DistanceMap {
        grid: Grid2::from_vec(h, w, data)?,
        threshold: d,
    })
}

/// Fraction of the distance map released at step `i` of `steps`:
/// `min(i / (steps − i), 1)`, so 0 at the first step and 1 from the midpoint on.
pub fn step_fraction(i: usize, steps: usize) -> Result<f64> {
    if i >= steps {
        return Err(Error::IndexOutOfRange { index: i, len: steps });
    }
    let remaining = (steps - i).max(1);
    Ok((i as f64 / remaining as f64).clamp(0.0, 1.0))
}

/// Scale an already downsampled distance map by [`step_fraction`].
pub fn step_mask(latent_distance: &Grid2, i: usize, steps: usize) -> Result<StepMask> {
    let phi = step_fraction(i, steps)? as f32;
    Ok(StepMask {
        grid: latent_distance.map(|v| v * phi),
        step: i,
    })
}

/// Area-average pooling by `factor`.
pub fn downsample_to_latent(grid: &Grid2, factor: usize) -> Result<Grid2> {
    let (h, w) = (grid.height(), grid.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::NonDivisibleDimensions { height: h, width: w, factor });
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let area = (factor * factor) as f64;
    Ok(Grid2::from_fn(h / factor, w / factor, |y, x| {
        let mut sum = 0.0f64;
        for dy in 0..factor {
            for dx in 0..factor {
                sum += grid.get(y * factor + dy, x * factor + dx) as f64;
            }
        }
        ((sum / area) as f32).clamp(0.0, 1.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(n: usize, lo: usize, hi: usize) -> BinaryMask {
        let grid = Grid2::from_fn(n, n, |y, x| ((lo..hi).contains(&y) && (lo..hi).contains(&x)) as u8 as f32);
        BinaryMask {
            grid,
            source: MaskSource::UserSupplied,
        }
    }

    #[test]
    fn full_frame_box_and_empty_list() {
        let m = build_binary_mask(&[Region::Box([0.0, 0.0, 5.0, 3.0])], 3, 5, MaskSource::OcrBoxes).unwrap();
        assert_eq!(m.foreground_count(), 15);
        let m = build_binary_mask(&[], 3, 5, MaskSource::OcrBoxes).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn disjoint_boxes_add_up() {
        let regions = [Region::Box([0.0, 0.0, 2.0, 3.0]), Region::Box([4.0, 1.0, 7.0, 5.0])];
        let m = build_binary_mask(&regions, 6, 8, MaskSource::OcrBoxes).unwrap();
        assert_eq!(m.foreground_count(), 6 + 12);
    }

    #[test]
    fn distance_map_edge_cases() {
        let empty = square_mask(6, 0, 0);
        assert!(build_distance_map(&empty, 3.0).unwrap().grid.data().iter().all(|&v| v == 0.0));
        let full = square_mask(6, 0, 6);
        assert!(build_distance_map(&full, 3.0).unwrap().grid.data().iter().all(|&v| v == 1.0));
        let sq = square_mask(9, 3, 6);
        assert_eq!(build_distance_map(&sq, 0.0).unwrap().grid, sq.grid);
        assert!(build_distance_map(&sq, -1.0).is_err());
    }

    #[test]
    fn centred_square_hand_values() {
        let sq = square_mask(9, 3, 6);
        let dm = build_distance_map(&sq, 2.0).unwrap().grid;
        // Centre: 2 px to background → sdist 1.5 → 0.5 + 1.5/4.
        assert!((dm.get(4, 4) - 0.875).abs() < 1e-6);
        // Edge pixel inside: sdist 0.5.
        assert!((dm.get(3, 4) - 0.625).abs() < 1e-6);
        // One pixel outside: sdist −0.5.
        assert!((dm.get(2, 4) - 0.375).abs() < 1e-6);
        // Far corner.
        assert_eq!(dm.get(0, 0), 0.0);
    }

    #[test]
    fn step_fraction_values() {
        assert_eq!(step_fraction(0, 75).unwrap(), 0.0);
        assert_eq!(step_fraction(38, 75).unwrap(), 1.0);
        assert!((step_fraction(37, 75).unwrap() - 37.0 / 38.0).abs() < 1e-12);
        assert_eq!(step_fraction(0, 1).unwrap(), 0.0);
        assert!(matches!(step_fraction(75, 75), Err(Error::IndexOutOfRange { index: 75, len: 75 })));
    }

    #[test]
    fn checkerboard_pools_to_half() {
        let g = Grid2::from_fn(4, 4, |y, x| ((x + y) % 2) as f32);
        let d = downsample_to_latent(&g, 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.5));
        assert_eq!(downsample_to_latent(&g, 1).unwrap(), g);
        assert!(matches!(
            downsample_to_latent(&g, 3),
            Err(Error::NonDivisibleDimensions { factor: 3, .. })
        ));
    }
}
