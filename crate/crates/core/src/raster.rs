//! Raster I/O and resampling.
//!
//! Slide images are stored as 8-bit RGB PNG, class masks as 8-bit grayscale
//! PNG whose pixel value is the class id.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use crate::data::ClassMask;
use crate::error::{Error, Result};

fn raster_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Raster {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let img = image::open(path).map_err(|e| raster_err(path, e))?;
    Ok(img.to_rgb8())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| raster_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<ClassMask> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let img = image::open(path).map_err(|e| raster_err(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(raster_err(
                path,
                format!("expected single-channel mask, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = gray.dimensions();
    ClassMask::new(w as usize, h as usize, gray.into_raw())
}

pub fn write_mask(path: &Path, mask: &ClassMask) -> Result<()> {
    let gray = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.as_slice().to_vec())
        .expect("mask buffer length matches its dimensions");
    gray.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| raster_err(path, e))
}

/// Width and height read from the file header only.
pub fn dimensions(path: &Path) -> Result<(usize, usize)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let (w, h) = image::image_dimensions(path).map_err(|e| raster_err(path, e))?;
    Ok((w as usize, h as usize))
}

/// Bilinear resize; returns a clone when the size already matches.
pub fn resize_rgb(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if img.width() as usize == width && img.height() as usize == height {
        return img.clone();
    }
    image::imageops::resize(img, width as u32, height as u32, FilterType::Triangle)
}

/// Nearest-neighbour resize of a class mask. Destination pixel `(x, y)`
/// samples source pixel `(floor(x * w / w'), floor(y * h / h'))`, so class ids
/// are never interpolated and a factor-two downscale keeps the top-left
/// pixel of every 2x2 block.
pub fn resize_mask(mask: &ClassMask, width: usize, height: usize) -> ClassMask {
    if mask.width() == width && mask.height() == height {
        return mask.clone();
    }
    let (sw, sh) = (mask.width(), mask.height());
    let xs: Vec<usize> = (0..width).map(|x| x * sw / width).collect();
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = y * sh / height;
        let row = &mask.as_slice()[sy * sw..(sy + 1) * sw];
        data.extend(xs.iter().map(|&sx| row[sx]));
    }
    ClassMask::from_raw_unchecked(width, height, data)
}

/// Copy of the `size x size` window at `(x, y)`, padding out-of-bounds pixels
/// with `fill`.
pub fn crop_rgb_padded(img: &RgbImage, x: usize, y: usize, size: usize, fill: [u8; 3]) -> RgbImage {
    let mut out = RgbImage::from_pixel(size as u32, size as u32, image::Rgb(fill));
    let (w, h) = (img.width() as usize, img.height() as usize);
    for dy in 0..size.min(h.saturating_sub(y)) {
        for dx in 0..size.min(w.saturating_sub(x)) {
            out.put_pixel(dx as u32, dy as u32, *img.get_pixel((x + dx) as u32, (y + dy) as u32));
        }
    }
    out
}
