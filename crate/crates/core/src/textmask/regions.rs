use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::MaskSource;
use crate::error::{Error, Result};
use crate::tensor::{Grid2, Image};

/// A text region in pixel coordinates (x to the right, y down, pixel
/// `(x, y)` covering `[x, x+1) × [y, y+1)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// `[x0, y0, x1, y1]`, half-open.
    Box([f64; 4]),
    /// Vertices `[x, y]` of a simple polygon.
    Polygon(Vec<[f64; 2]>),
}

impl Region {
    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        let ok = |x: f64, y: f64| x.is_finite() && y.is_finite() && (0.0..=width as f64).contains(&x) && (0.0..=height as f64).contains(&y);
        match self {
            Region::Box([x0, y0, x1, y1]) => ok(*x0, *y0) && ok(*x1, *y1) && x0 <= x1 && y0 <= y1,
            Region::Polygon(points) => points.len() >= 3 && points.iter().all(|p| ok(p[0], p[1])),
        }
    }

    /// Whether the pixel centred at `(x + 0.5, y + 0.5)` lies inside.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match self {
            Region::Box([x0, y0, x1, y1]) => px >= *x0 && px < *x1 && py >= *y0 && py < *y1,
            Region::Polygon(points) => {
                // Even-odd crossing count.
                let mut inside = false;
                let n = points.len();
                for i in 0..n {
                    let [xi, yi] = points[i];
                    let [xj, yj] = points[(i + n - 1) % n];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    pub fn bounding_box(&self) -> [f64; 4] {
        match self {
            Region::Box(b) => *b,
            Region::Polygon(points) => points.iter().fold(
                [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
                |[x0, y0, x1, y1], p| [x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1])],
            ),
        }
    }
}

/// Intersection over union of two `[x0, y0, x1, y1]` boxes.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let inter = area([a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// On-disk region list: `{"regions": [{"box": [...]}, {"polygon": [[x, y], ...]}]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionFile {
    pub regions: Vec<Region>,
}

impl RegionFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("region file", e))
    }
}

/// Source of text regions for an image.
pub trait TextRegionAdapter {
    fn source(&self) -> MaskSource;
    fn detect(&self, image: &Image) -> Result<Vec<Region>>;
}

/// Validate that every region lies inside an `height × width` frame.
pub fn check_regions(regions: &[Region], height: usize, width: usize) -> Result<()> {
    match regions.iter().position(|r| !r.in_bounds(height, width)) {
        Some(index) => Err(Error::OutOfBoundsRegion { index, width, height }),
        None => Ok(()),
    }
}

/// Regions read from a user-supplied file, passed through after bounds checks.
#[derive(Debug, Clone)]
pub struct RegionFileAdapter {
    pub path: PathBuf,
}

impl TextRegionAdapter for RegionFileAdapter {
    fn source(&self) -> MaskSource {
        MaskSource::UserSupplied
    }

    fn detect(&self, image: &Image) -> Result<Vec<Region>> {
        if !self.path.is_file() {
            return Err(Error::AdapterUnavailable(format!("region file {} not found", self.path.display())));
        }
        let regions = RegionFile::read(&self.path)?.regions;
        check_regions(&regions, image.height(), image.width())?;
        Ok(regions)
    }
}

/// Heuristic detector for text drawn on a mostly uniform background:
/// pixels whose luma departs from the median by more than `threshold` are
/// grouped into 8-connected components, and component boxes closer than
/// `merge_gap` pixels are merged into word boxes.
#[derive(Debug, Clone)]
pub struct ContrastTextDetector {
    pub threshold: f32,
    pub merge_gap: f64,
    /// Components with fewer pixels are treated as noise.
    pub min_pixels: usize,
}

impl Default for ContrastTextDetector {
    fn default() -> Self {
        Self {
            threshold: 0.25,
            merge_gap: 3.0,
            min_pixels: 4,
        }
    }
}

impl TextRegionAdapter for ContrastTextDetector {
    fn source(&self) -> MaskSource {
        MaskSource::OcrBoxes
    }

    fn detect(&self, image: &Image) -> Result<Vec<Region>> {
        let luma = image.luma();
        let (h, w) = (luma.height(), luma.width());
        if h * w == 0 {
            return Ok(Vec::new());
        }
        let mut sorted = luma.data().to_vec();
        sorted.sort_by(f32::total_cmp);
        let median = sorted[sorted.len() / 2];
        let fg: Vec<bool> = luma.data().iter().map(|v| (v - median).abs() > self.threshold).collect();

        let mut boxes = Vec::new();
        let mut seen = vec![false; h * w];
        let mut stack = Vec::new();
        for start in 0..h * w {
            if !fg[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let (mut x0, mut y0, mut x1, mut y1, mut count) = (w, h, 0, 0, 0);
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                count += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        let j = ny * w + nx;
                        if fg[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            if count >= self.min_pixels {
                boxes.push([x0 as f64, y0 as f64, x1 as f64, y1 as f64]);
            }
        }
        Ok(merge_boxes(boxes, self.merge_gap).into_iter().map(Region::Box).collect())
    }
}

fn merge_boxes(mut boxes: Vec<[f64; 4]>, gap: f64) -> Vec<[f64; 4]> {
    let near = |a: &[f64; 4], b: &[f64; 4]| {
        a[0] - gap <= b[2] && b[0] - gap <= a[2] && a[1] - gap <= b[3] && b[1] - gap <= a[3]
    };
    loop {
        let mut merged = false;
        'outer: for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if near(&boxes[i], &boxes[j]) {
                    let b = boxes.swap_remove(j);
                    let a = &mut boxes[i];
                    *a = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    boxes.sort_by(|a, b| a[1].total_cmp(&b[1]).then(a[0].total_cmp(&b[0])));
    boxes
}

/// Runs an external OCR program as `<program> <args...> <image.png>` and
/// reads a region file from its standard output.
#[derive(Debug, Clone)]
pub struct ExternalOcrAdapter {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl TextRegionAdapter for ExternalOcrAdapter {
    fn source(&self) -> MaskSource {
        MaskSource::OcrBoxes
    }

    fn detect(&self, image: &Image) -> Result<Vec<Region>> {
        let dir = std::env::temp_dir().join(format!("glyphstyle-ocr-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let input = dir.join("input.png");
        crate::io::write_image(&input, image)?;
        let output = Command::new(&self.program).args(&self.args).arg(&input).output();
        let _ = std::fs::remove_dir_all(&dir);
        let output = output
            .map_err(|e| Error::AdapterUnavailable(format!("cannot run {}: {e}", self.program.display())))?;
        if !output.status.success() {
            return Err(Error::AdapterUnavailable(format!(
                "{} exited with {}: {}",
                self.program.display(),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let file: RegionFile =
            serde_json::from_slice(&output.stdout).map_err(|e| Error::format("OCR output", e))?;
        check_regions(&file.regions, image.height(), image.width())?;
        Ok(file.regions)
    }
}

/// Runs an external segmentation program as
/// `<program> <args...> <image.png> <mask.png>` and reads back the mask it
/// writes (nonzero = text).
#[derive(Debug, Clone)]
pub struct ExternalSegmentationAdapter {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExternalSegmentationAdapter {
    pub fn segment(&self, image: &Image) -> Result<Grid2> {
        let dir = std::env::temp_dir().join(format!("glyphstyle-seg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let input = dir.join("input.png");
        let mask = dir.join("mask.png");
        let result = crate::io::write_image(&input, image).and_then(|_| {
            let status = Command::new(&self.program)
                .args(&self.args)
                .arg(&input)
                .arg(&mask)
                .status()
                .map_err(|e| Error::AdapterUnavailable(format!("cannot run {}: {e}", self.program.display())))?;
            if !status.success() {
                return Err(Error::AdapterUnavailable(format!("{} exited with {status}", self.program.display())));
            }
            crate::io::read_gray(&mask)
        });
        let _ = std::fs::remove_dir_all(&dir);
        result
    }
}
