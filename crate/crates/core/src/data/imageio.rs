use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat};

use crate::error::{CtsError, Result};
use crate::metrics::LabelMap;
use crate::tensor::io::read_tensor;
use crate::tensor::Tensor;

fn image_err(path: &Path, e: image::ImageError) -> CtsError {
    CtsError::data(format!("{}: {}", path.display(), e))
}

/// Loads an image as `[C, H, W]` values in `[0, 1]`.
///
/// 8-bit PNG: grayscale gives one channel, colour gives three (alpha is
/// dropped). A `.ctst` file is read as a raw `[C, H, W]` f32 tensor.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    if path.extension().is_some_and(|e| e == "ctst") {
        let t = read_tensor::<f32>(path)?;
        if t.rank() != 3 {
            return Err(CtsError::data(format!("{}: tensor image must be [C, H, W], got {:?}", path.display(), t.shape())));
        }
        return Ok(t);
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = |v: u8| v as f32 / 255.0;
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            Ok(Tensor::new(&[1, h, w], g.into_raw().into_iter().map(scale).collect())?)
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8().into_raw();
            let mut data = vec![0.0; 3 * h * w];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = scale(px[c]);
                }
            }
            Ok(Tensor::new(&[3, h, w], data)?)
        }
        other => Err(CtsError::data(format!(
            "{}: unsupported pixel format {:?}; expected 8-bit grayscale or colour",
            path.display(),
            other.color()
        ))),
    }
}

/// Loads an 8-bit grayscale mask whose pixel values are class labels.
pub fn load_mask(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => LabelMap::new(w, h, g.into_raw()),
        other => Err(CtsError::data(format!(
            "{}: mask must be 8-bit grayscale, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Writes a single-channel `[1, H, W]` or `[H, W]` image in `[0, 1]` as an
/// 8-bit PNG (values rounded).
pub fn save_gray_png(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    save_u8_png(path, width, height, bytes)
}

pub fn save_mask_png(path: &Path, mask: &LabelMap) -> Result<()> {
    save_u8_png(path, mask.width, mask.height, mask.labels.clone())
}

fn save_u8_png(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| CtsError::data(format!("{}: pixel buffer does not match {}x{}", path.display(), width, height)))?;
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}
