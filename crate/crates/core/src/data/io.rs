//! Image, mask and probability-map files (PNG and binary PPM/PGM).

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageReader, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::format(path, e.to_string()))
}

fn is_wide(img: &DynamicImage) -> bool {
    img.color().bytes_per_pixel() > img.color().channel_count()
}

/// Format from the extension; PNG, PPM, PGM and PNM are accepted.
fn check_extension(path: &Path, allowed: &[&str]) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if allowed.contains(&ext.as_str()) {
        Ok(())
    } else {
        Err(Error::format(
            path,
            format!("unsupported extension {ext:?}; expected one of {allowed:?}"),
        ))
    }
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

/// `[3, H, W]` in `[0, 1]`. Gray files are replicated to three channels; 16-bit files
/// keep their full precision. Nothing is resized.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (data, scale): (Vec<f64>, f64) = if is_wide(&img) {
        (img.into_rgb16().into_raw().into_iter().map(f64::from).collect(), 65535.0)
    } else {
        (img.into_rgb8().into_raw().into_iter().map(f64::from).collect(), 255.0)
    };
    let plane = h * w;
    Tensor::new(&[3, h, w], (0..3 * plane).map(|i| data[(i % plane) * 3 + i / plane] / scale).collect())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[3, H, W]` as 8-bit RGB (`.png`, `.ppm`, `.pnm`).
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    check_extension(path, &["png", "ppm", "pnm"])?;
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("save_image", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let raw: Vec<u8> = (0..3 * plane).map(|i| to_u8(image.data()[(i % 3) * plane + i / 3])).collect();
    let buf = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
    save(DynamicImage::ImageRgb8(buf), path)
}

/// Binary mask `[H, W]` with values 0/1. The file must hold only 0 and full white.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (vals, full): (Vec<u32>, u32) = if is_wide(&img) {
        (img.into_luma16().into_raw().into_iter().map(u32::from).collect(), 65535)
    } else {
        (img.into_luma8().into_raw().into_iter().map(u32::from).collect(), 255)
    };
    if let Some((i, v)) = vals.iter().enumerate().find(|(_, &v)| v != 0 && v != full) {
        return Err(Error::format(
            path,
            format!(
                "mask value {v} at row {}, column {} is not 0 or {full}; masks must be bilevel",
                i / w,
                i % w
            ),
        ));
    }
    Tensor::new(&[h, w], vals.into_iter().map(|v| if v == full { 1.0 } else { 0.0 }).collect())
}

fn plane_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::dim(op, s, &[0, 0])),
    }
}

/// Writes a 0/1 mask as 8-bit 0/255 gray (`.png`, `.pgm`, `.pnm`).
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    check_extension(path, &["png", "pgm", "pnm"])?;
    let (h, w) = plane_dims("save_mask", mask)?;
    let raw = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
    save(DynamicImage::ImageLuma8(buf), path)
}

/// Writes probabilities `[H, W]` as 16-bit gray, `round(p · 65535)`.
pub fn save_prob_map(path: &Path, prob: &Tensor) -> Result<()> {
    check_extension(path, &["png", "pgm", "pnm"])?;
    let (h, w) = plane_dims("save_prob_map", prob)?;
    let raw = prob.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
    save(DynamicImage::ImageLuma16(buf), path)
}

/// Gray file as `[H, W]` in `[0, 1]` (8- or 16-bit).
pub fn load_prob_map(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_wide(&img) {
        img.into_luma16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()
    } else {
        img.into_luma8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()
    };
    Tensor::new(&[h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_extension_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = save_image(&dir.path().join("x.bmp"), &Tensor::zeros(&[3, 2, 2])).unwrap_err();
        assert!(matches!(e, Error::Format { .. }));
    }

    #[test]
    fn prob_map_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.pgm");
        let prob = Tensor::from_fn(&[3, 5], |i| i as f64 / 14.0);
        save_prob_map(&p, &prob).unwrap();
        let back = load_prob_map(&p).unwrap();
        assert!(back.max_abs_diff(&prob) <= 0.5 / 65535.0 + 1e-12);
    }
}
