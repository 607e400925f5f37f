//! PNG reading and writing, plus atomic file writes.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Grid2, Image};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Load an RGB(A) or grayscale PNG as an `[0, 1]` RGB image.
pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::from_vec(h as usize, w as usize, data)
}

/// Save an image as 8-bit RGB, rounding and clamping each channel.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let raw = image.data().iter().map(|&v| to_u8(v)).collect();
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, raw)
        .expect("buffer length matches dimensions");
    atomic_write_with(path, |tmp| buf.save_with_format(tmp, image::ImageFormat::Png).map_err(image_err(tmp)))
}

/// Read a grayscale PNG (any bit depth) as values in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Grid2> {
    let gray = image::open(path).map_err(image_err(path))?.to_luma16();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Grid2::from_vec(h as usize, w as usize, data)
}

pub fn write_gray8(path: &Path, grid: &Grid2) -> Result<()> {
    let raw = grid.data().iter().map(|&v| to_u8(v)).collect();
    let buf = GrayImage::from_raw(grid.width() as u32, grid.height() as u32, raw)
        .expect("buffer length matches dimensions");
    atomic_write_with(path, |tmp| buf.save_with_format(tmp, image::ImageFormat::Png).map_err(image_err(tmp)))
}

/// 16-bit grayscale, storing `round(65535 · v)`.
pub fn write_gray16(path: &Path, grid: &Grid2) -> Result<()> {
    let raw: Vec<u16> = grid
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(grid.width() as u32, grid.height() as u32, raw).expect("buffer length matches dimensions");
    atomic_write_with(path, |tmp| buf.save_with_format(tmp, image::ImageFormat::Png).map_err(image_err(tmp)))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `bytes` to a sibling temporary file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write_with(path, |tmp| fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e)))
}

fn atomic_write_with(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = temp_sibling(path);
    if let Err(e) = write(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    // Keep the extension last so format detection still works.
    path.with_file_name(format!(".tmp-{}-{name}", std::process::id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray16_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let g = Grid2::from_fn(3, 4, |y, x| (y * 4 + x) as f32 / 11.0);
        write_gray16(&p, &g).unwrap();
        let back = read_gray(&p).unwrap();
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = Image::from_fn(2, 3, |y, x| [y as f32, x as f32 / 2.0, 0.2]);
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert!(back.mean_abs_diff(&img).unwrap() < 1.0 / 255.0);
        assert!(!dir.path().read_dir().unwrap().any(|e| e
            .unwrap()
            .file_name()
            .to_string_lossy()
            .starts_with(".tmp")));
    }
}
