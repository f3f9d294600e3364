//! PNG decode/encode, bilinear resizing and the geometric augmentations.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{DecodeReason, Error, Result};
use crate::tensor::Tensor;

/// File extensions treated as images when scanning directories.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Decodes an 8-bit image into `[3, H, W]` with channels in `[0, 1]`.
/// Grayscale is replicated and alpha dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn decode_image(bytes: &[u8]) -> std::result::Result<Tensor, DecodeReason> {
    let img = image::load_from_memory(bytes).map_err(|e| DecodeReason::Malformed(e.to_string()))?;
    let rgb = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img.to_rgb8(),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => return Err(DecodeReason::UnsupportedBitDepth(16)),
        _ => return Err(DecodeReason::UnsupportedBitDepth(32)),
    };
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            d[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    t
}

/// Quantizes to 8 bits after clamping every value to `[0, 1]`.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("save_image", format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            let v = d[(ch * h + y as usize) * w + x as usize];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            (v * 255.0).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    }))
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let rgb = tensor_to_rgb(image)?;
    let mut out = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Numeric(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Writes `image` as PNG.
pub fn save_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(image)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let axis = |o: usize, scale: f32, n: usize| {
        let p = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f32)
    };
    let d = out.data_mut();
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, sx, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(ch * h + y) * w + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                d[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentOp {
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
        AugmentOp::FlipH,
        AugmentOp::FlipV,
    ];
}

/// Exact dihedral transform of a `[C, H, W]` image. Rotations are
/// counter-clockwise.
pub fn traditional_augment(image: &Tensor, op: AugmentOp) -> Tensor {
    let (c, h, w) = image.dims3().expect("augment expects [C,H,W]");
    let (oh, ow) = match op {
        AugmentOp::Rot90 | AugmentOp::Rot270 => (w, h),
        _ => (h, w),
    };
    let src = image.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = match op {
                    AugmentOp::Rot90 => (x, w - 1 - y),
                    AugmentOp::Rot180 => (h - 1 - y, w - 1 - x),
                    AugmentOp::Rot270 => (h - 1 - x, y),
                    AugmentOp::FlipH => (y, w - 1 - x),
                    AugmentOp::FlipV => (h - 1 - y, x),
                };
                d[(ch * oh + y) * ow + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}
