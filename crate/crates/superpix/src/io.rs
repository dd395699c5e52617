//! Image and label-map files, plus construction of the network input.
//!
//! Images are PNG/JPEG, decoded to RGB in `[0,1]`. Label maps are stored as
//! 16-bit grayscale PNG (IDs verbatim in the gray value) or as plain CSV
//! grids; both round-trip exactly for IDs below 2^16. Boundary overlays are
//! written as 8-bit RGB PNG.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::metrics;
use crate::tensor::{ImageTensor, LabelMap, Scalar, Tensor};
use crate::{Error, Result};

/// Decodes a PNG or JPEG into an RGB tensor with values in `[0,1]`.
///
/// Images smaller than 3×3 are rejected up front: every consumer of a loaded
/// image (edge responses, boundary metrics, the network) assumes at least
/// that much spatial extent.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    if h < 3 || w < 3 {
        return Err(Error::Config(format!(
            "image {} is {w}×{h}; at least 3×3 is required",
            path.display()
        )));
    }
    Ok(Tensor::from_vec(h as usize, w as usize, 3, img.into_raw()))
}

/// Writes an RGB tensor as an 8-bit PNG, clamping values to `[0,1]`.
pub fn save_image(image: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w, c) = image.shape();
    assert_eq!(c, 3, "expected an RGB tensor");
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let src = image.pixel(y as usize, x as usize);
        for (out, &v) in px.0.iter_mut().zip(src) {
            *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Reads a label map, either a 16-bit grayscale PNG (gray value = ID) or a
/// CSV grid of non-negative integers.
pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    if path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false)
    {
        return load_label_map_csv(path);
    }
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels: Vec<u32> = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::Config(format!(
                "{}: label maps must be grayscale PNG, got {:?} pixels",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(LabelMap::from_vec(h, w, labels))
}

fn load_label_map_csv(path: &Path) -> Result<LabelMap> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut labels = Vec::new();
    let mut width = None;
    let mut height = 0usize;
    for record in reader.records() {
        let record = record?;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Config(format!(
                    "{}: row {} has {} columns, expected {}",
                    path.display(),
                    height,
                    record.len(),
                    w
                )))
            }
            _ => {}
        }
        for field in record.iter() {
            let value: i64 = field.parse().map_err(|_| {
                Error::Config(format!(
                    "{}: {field:?} is not an integer label",
                    path.display()
                ))
            })?;
            if !(0..=i64::from(u32::MAX)).contains(&value) {
                return Err(Error::Config(format!(
                    "{}: label {value} out of range",
                    path.display()
                )));
            }
            labels.push(value as u32);
        }
        height += 1;
    }
    let width = width.unwrap_or(0);
    if height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "{}: empty label grid",
            path.display()
        )));
    }
    Ok(LabelMap::from_vec(height, width, labels))
}

/// Writes a label map as a 16-bit grayscale PNG. IDs must fit in 16 bits.
pub fn save_label_map(labels: &LabelMap, path: &Path) -> Result<()> {
    let max = labels.max_label();
    if max > u32::from(u16::MAX) {
        return Err(Error::Config(format!(
            "label ID {max} does not fit the 16-bit PNG encoding"
        )));
    }
    let (h, w) = labels.shape();
    let mut buf = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        px.0[0] = labels.at(y as usize, x as usize) as u16;
    }
    buf.save(path)?;
    Ok(())
}

/// Builds the 5-channel network input: RGB plus the pixel column (`x`) and
/// row (`y`) coordinates, every channel independently standardized to mean 0
/// and variance 1. Channels with zero variance become all zeros.
pub fn build_network_input<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = image.shape();
    assert_eq!(c, 3, "expected an RGB tensor");
    let mut input = Tensor::zeros(h, w, 5);
    for y in 0..h {
        for x in 0..w {
            let src = image.pixel(y, x);
            let dst = input.pixel_mut(y, x);
            dst[..3].copy_from_slice(src);
            dst[3] = T::from_f64(x as f64);
            dst[4] = T::from_f64(y as f64);
        }
    }
    for ch in 0..5 {
        standardize_channel(&mut input, ch);
    }
    input
}

fn standardize_channel<T: Scalar>(t: &mut Tensor<T>, ch: usize) {
    let mean = t.channel_mean(ch);
    let var = t.channel_variance(ch);
    let c = t.channels();
    if var <= 0.0 {
        for px in t.data_mut().chunks_exact_mut(c) {
            px[ch] = T::zero();
        }
        return;
    }
    let inv_std = 1.0 / var.sqrt();
    for px in t.data_mut().chunks_exact_mut(c) {
        px[ch] = T::from_f64((px[ch].into_f64() - mean) * inv_std);
    }
}

/// Copy of the image with label boundaries (right/bottom neighbor differs)
/// painted pure red.
pub fn render_boundary_overlay(image: &ImageTensor, labels: &LabelMap) -> Result<ImageTensor> {
    let (h, w, _) = image.shape();
    if (h, w) != labels.shape() {
        return Err(Error::ShapeMismatch {
            what: format!("image is {:?}, labels are {:?}", (h, w), labels.shape()),
        });
    }
    let mask = metrics::boundary_map(labels);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                out.pixel_mut(y, x).copy_from_slice(&[1.0, 0.0, 0.0]);
            }
        }
    }
    Ok(out)
}
