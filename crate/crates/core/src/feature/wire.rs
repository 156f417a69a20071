//! Encoding helpers for the provider HTTP protocol: images travel as
//! base64-encoded 8-bit PNG, masks as single-channel PNG with values 0/255.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{GrayImage, ImageFormat, Luma, RgbImage};

use super::{BinaryMask, FeatureError};

fn protocol(e: impl std::fmt::Display) -> FeatureError {
    FeatureError::ProviderProtocol(e.to_string())
}

pub fn encode_png_b64(image: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    STANDARD.encode(buf.into_inner())
}

pub fn decode_png_b64(data: &str) -> Result<RgbImage, FeatureError> {
    let bytes = STANDARD.decode(data).map_err(protocol)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(protocol)?;
    Ok(img.to_rgb8())
}

pub fn encode_mask_b64(mask: &BinaryMask) -> String {
    let gray = GrayImage::from_fn(mask.width, mask.height, |x, y| Luma([if mask.get(x, y) { 255 } else { 0 }]));
    let mut buf = Cursor::new(Vec::new());
    gray.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    STANDARD.encode(buf.into_inner())
}

/// Pixels above 127 count as set.
pub fn decode_mask_b64(data: &str) -> Result<BinaryMask, FeatureError> {
    let bytes = STANDARD.decode(data).map_err(protocol)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(protocol)?
        .to_luma8();
    Ok(BinaryMask {
        width: img.width(),
        height: img.height(),
        data: img.pixels().map(|p| p.0[0] > 127).collect(),
    })
}
