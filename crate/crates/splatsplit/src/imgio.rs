//! PNG round trips between `[h,w,3]` / `[h,w]` float tensors in [0,1] and
//! 8-bit files. Quantization is round-to-nearest; loading maps byte b to
//! b/255, so save-then-load is the identity on already quantized data.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snap a float image to the 8-bit grid it would survive a PNG round trip
/// as. Generated datasets store these values so in-memory training targets
/// equal the files on disk bit for bit.
pub fn quantized(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| quantize(v) as f32 / 255.0)
}

pub fn save_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "rgb image tensor must be [h,w,3]");
    assert_eq!(shape[2], 3);
    let (h, w) = (shape[0], shape[1]);
    let bytes: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes).unwrap();
    img.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.into(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(&[h, w, 3], data))
}

/// Binary or soft `[h,w]` map; values quantize like color channels.
pub fn save_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let shape = t.shape();
    assert_eq!(shape.len(), 2, "gray image tensor must be [h,w]");
    let (h, w) = (shape[0], shape[1]);
    let bytes: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).unwrap();
    img.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.into(), source })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(&[h, w], data))
}

/// Load a gray PNG as a hard 0/1 mask.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    Ok(load_gray(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn rgb_round_trip_is_identity_on_quantized_data() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let t = quantized(&Tensor::from_fn(&[5, 7, 3], |i| (i as f32 * 0.37).sin().abs()));
        save_rgb(&path, &t).unwrap();
        assert_eq!(load_rgb(&path).unwrap(), t);
    }

    #[test]
    fn gray_round_trip_and_mask_binarization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.png");
        let t = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.2, 0.8]);
        save_gray(&path, &t).unwrap();
        let soft = load_gray(&path).unwrap();
        assert_eq!(soft.data()[0], 0.0);
        assert_eq!(soft.data()[1], 1.0);
        let hard = load_mask(&path).unwrap();
        assert_eq!(hard.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn quantize_rounds_and_clamps() {
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0 / 255.0), 1);
    }
}
