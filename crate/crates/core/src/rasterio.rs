//! Lossless PNG persistence: RGB images as 8-bit RGB, masks as 8-bit
//! grayscale with values 0 and 255.

use std::path::Path;

use image::{ExtendedColorType, ImageFormat};

use crate::error::{Error, Result};
use crate::maskops::{BinaryMask, RgbImage};

fn encode(
    path: &Path,
    bytes: &[u8],
    width: usize,
    height: usize,
    color: ExtendedColorType,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(
        path,
        bytes,
        width as u32,
        height as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Corrupt {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    encode(
        path,
        &img.to_rgb8(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
    )
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = decode(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_rgb8(w as usize, h as usize, img.as_raw())
}

/// Writes a mask after thresholding at 0.5.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bytes: Vec<u8> = mask.bits().map(|b| if b { 255 } else { 0 }).collect();
    encode(
        path,
        &bytes,
        mask.width(),
        mask.height(),
        ExtendedColorType::L8,
    )
}

/// Writes a soft mask quantized to 8 bits.
pub fn save_soft_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    encode(
        path,
        &bytes,
        mask.width(),
        mask.height(),
        ExtendedColorType::L8,
    )
}

/// Reads a hard mask; any gray level other than 0 or 255 is rejected.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = decode(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity(img.as_raw().len());
    for &v in img.as_raw() {
        match v {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    msg: format!("mask value {other} is neither 0 nor 255"),
                })
            }
        }
    }
    BinaryMask::new(w as usize, h as usize, data)
}

/// Reads any grayscale PNG as a soft mask in `[0, 1]`.
pub fn load_soft_mask(path: &Path) -> Result<BinaryMask> {
    let img = decode(path)?.into_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::new(
        w as usize,
        h as usize,
        img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect(),
    )
}

/// Places equally sized images side by side.
pub fn hstack(images: &[&RgbImage]) -> Result<RgbImage> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidValue("nothing to stack".into()));
    };
    let (w, h) = first.dims();
    if let Some(bad) = images.iter().find(|i| i.dims() != (w, h)) {
        return Err(Error::ShapeMismatch {
            expected: (w, h),
            actual: bad.dims(),
        });
    }
    Ok(RgbImage::from_fn(w * images.len(), h, |x, y| {
        images[x / w].get(x % w, y)
    }))
}

/// Stacks rows of equal width vertically.
pub fn vstack(rows: &[RgbImage]) -> Result<RgbImage> {
    let Some(first) = rows.first() else {
        return Err(Error::InvalidValue("nothing to stack".into()));
    };
    let (w, h) = first.dims();
    if let Some(bad) = rows.iter().find(|i| i.dims() != (w, h)) {
        return Err(Error::ShapeMismatch {
            expected: (w, h),
            actual: bad.dims(),
        });
    }
    Ok(RgbImage::from_fn(w, h * rows.len(), |x, y| {
        rows[y / h].get(x, y % h)
    }))
}

pub fn mask_to_rgb(mask: &BinaryMask) -> RgbImage {
    RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
        let v = mask.get(x, y);
        [v, v, v]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_rgb8(
            3,
            2,
            &[
                0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 255, 1, 2, 3, 4, 5, 6,
            ],
        )
        .unwrap();
        let p = dir.path().join("a/img.png");
        save_rgb(&p, &img).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), img);

        let m = BinaryMask::from_fn(5, 4, |x, y| (x + y) % 3 == 0);
        let p = dir.path().join("m.png");
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn gray_levels_are_not_hard_masks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("soft.png");
        save_soft_mask(&p, &BinaryMask::filled(2, 2, 0.5)).unwrap();
        assert!(matches!(load_mask(&p), Err(Error::Corrupt { .. })));
        assert!((load_soft_mask(&p).unwrap().get(0, 0) - 128.0 / 255.0).abs() < 1e-6);
        assert!(matches!(
            load_mask(&dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }
}
