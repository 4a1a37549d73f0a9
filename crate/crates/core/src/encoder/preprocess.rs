//! Image preprocessing matching the CLIP reference pipeline.

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, DynamicImage};

use crate::error::Result;

pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// Resizes the short side to `resolution`, center-crops, and returns RGB
/// values in `[0, 1]` as a `(3, resolution, resolution)` row-major buffer.
pub fn to_unit_rgb(img: &DynamicImage, resolution: usize) -> Vec<f32> {
    let res = resolution as u32;
    let (w, h) = (img.width(), img.height());
    let rgb = if w == res && h == res {
        img.to_rgb8()
    } else {
        let scale = res as f32 / w.min(h) as f32;
        let nw = ((w as f32 * scale).round() as u32).max(res);
        let nh = ((h as f32 * scale).round() as u32).max(res);
        let resized = img.resize_exact(nw, nh, FilterType::CatmullRom);
        resized
            .crop_imm((nw - res) / 2, (nh - res) / 2, res, res)
            .to_rgb8()
    };
    let plane = resolution * resolution;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    out
}

/// Applies the backbone's mean/std normalization to a unit-range buffer.
pub fn normalize(unit: &[f32], resolution: usize) -> Vec<f32> {
    let plane = resolution * resolution;
    unit.iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i / plane;
            (v - CLIP_MEAN[c]) / CLIP_STD[c]
        })
        .collect()
}

/// Model-ready `(3, r, r)` tensor for one image.
pub fn image_tensor(
    img: &DynamicImage,
    resolution: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let data = normalize(&to_unit_rgb(img, resolution), resolution);
    Ok(Tensor::from_vec(data, (3, resolution, resolution), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn white_pixel_normalizes_per_channel() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(4, 4, Rgb([255, 255, 255])));
        let unit = to_unit_rgb(&img, 4);
        assert!(unit.iter().all(|v| *v == 1.0));
        let n = normalize(&unit, 4);
        assert!((n[0] - (1.0 - CLIP_MEAN[0]) / CLIP_STD[0]).abs() < 1e-6);
        assert!((n[16] - (1.0 - CLIP_MEAN[1]) / CLIP_STD[1]).abs() < 1e-6);
    }

    #[test]
    fn non_square_input_is_cropped_to_resolution() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(40, 20, Rgb([10, 20, 30])));
        assert_eq!(to_unit_rgb(&img, 8).len(), 3 * 64);
    }

    #[test]
    fn preprocessing_is_idempotent_on_reload() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_fn(5, 7, |x, y| {
            Rgb([x as u8 * 30, y as u8 * 20, 7])
        }));
        assert_eq!(to_unit_rgb(&img, 4), to_unit_rgb(&img, 4));
    }
}
