//! PNG/PGM images, masks and dataset directories.
//!
//! A dataset directory holds `images/<stem>.png` and `masks/<stem>.png`
//! with matching stems, plus an optional `categories.txt` of
//! `<stem> <category>` lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::data::{Category, ShadowSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest accepted side length.
pub const MAX_SIDE: u32 = 8192;
pub const MASK_THRESHOLD: u8 = 128;

fn image_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let (w, h) = reader.into_dimensions().map_err(|e| image_err(path, e))?;
    if w > MAX_SIDE || h > MAX_SIDE || w == 0 || h == 0 {
        return Err(image_err(path, format!("{w}x{h} exceeds the {MAX_SIDE} pixel limit")));
    }
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// RGB image as `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for k in 0..3 {
            data[k * h * w + y as usize * w + x as usize] = px[k] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Single-channel mask as `[1, H, W]`; gray values `>= 128` become 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let gray = open(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.pixels().map(|p| (p[0] >= MASK_THRESHOLD) as u8 as f64).collect();
    Tensor::new([1, h, w], data)
}

fn hw(t: &Tensor, channels: usize, path: &Path) -> Result<(u32, u32)> {
    match t.shape() {
        &[c, h, w] if c == channels => Ok((h as u32, w as u32)),
        s => Err(image_err(path, format!("cannot write tensor of shape {s:?}"))),
    }
}

fn save_gray(path: &Path, img: GrayImage) -> Result<()> {
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes a binary `[1, H, W]` mask as 0/255 (PNG or PGM by extension).
pub fn save_mask(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = hw(mask, 1, path)?;
    if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(image_err(path, "mask must be binary"));
    }
    let img = ImageBuffer::from_fn(w, h, |x, y| Luma([if mask.data()[(y * w + x) as usize] == 1.0 { 255 } else { 0 }]));
    save_gray(path, img)
}

/// Writes a `[1, H, W]` map of values in `[0, 1]` as 8-bit gray.
pub fn save_gray_map(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = hw(map, 1, path)?;
    let img = ImageBuffer::from_fn(w, h, |x, y| {
        Luma([(map.data()[(y * w + x) as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save_gray(path, img)
}

/// Writes a `[3, H, W]` image in `[0, 1]` as 8-bit RGB.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = hw(image, 3, path)?;
    let plane = (h * w) as usize;
    let d = image.data();
    let img: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        Rgb(std::array::from_fn(|k| (d[k * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| image_err(path, e))
}

const CATEGORIES: &str = "categories.txt";

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Loads every image/mask pair of a dataset directory, sorted by stem.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<ShadowSample>> {
    let dir = dir.as_ref();
    let images = stems(&dir.join("images"))?;
    let masks = stems(&dir.join("masks"))?;
    let mut categories = BTreeMap::new();
    let cat_path = dir.join(CATEGORIES);
    if cat_path.exists() {
        let text = std::fs::read_to_string(&cat_path).map_err(|e| Error::io(&cat_path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (stem, cat) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| image_err(&cat_path, format!("malformed line `{line}`")))?;
            categories.insert(stem.to_string(), cat.trim().parse::<Category>()?);
        }
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let mask_path = masks
            .get(stem)
            .ok_or_else(|| image_err(img_path, "no mask with a matching name"))?;
        let image = load_image(img_path)?;
        let mask = load_mask(mask_path)?;
        let sample = ShadowSample::new(image, mask, categories.get(stem).copied(), stem.clone())
            .map_err(|e| image_err(img_path, e))?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(image_err(dir, "dataset contains no images"));
    }
    Ok(out)
}

/// Writes samples as a dataset directory.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[ShadowSample]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut cats = String::new();
    for s in samples {
        save_image(dir.join("images").join(format!("{}.png", s.name)), &s.image)?;
        save_mask(dir.join("masks").join(format!("{}.png", s.name)), &s.mask)?;
        if let Some(c) = s.category {
            cats.push_str(&format!("{} {c}\n", s.name));
        }
    }
    if !cats.is_empty() {
        let p = dir.join(CATEGORIES);
        std::fs::write(&p, cats).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Quantizes a `[3, H, W]` image to the 8-bit grid used on disk.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_dataset;

    #[test]
    fn black_mask_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        GrayImage::new(5, 4).save(&p).unwrap();
        let m = load_mask(&p).unwrap();
        assert_eq!(m.shape(), &[1, 4, 5]);
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn binarization_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let img = ImageBuffer::from_fn(2, 1, |x, _| Luma([if x == 0 { 127u8 } else { 128 }]));
        img.save(&p).unwrap();
        assert_eq!(load_mask(&p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn mask_round_trip_png_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::from_fn([1, 7, 9], |i| ((i * 7919) % 3 == 0) as u8 as f64);
        for name in ["m.png", "m.pgm"] {
            let p = dir.path().join(name);
            save_mask(&p, &m).unwrap();
            assert!(load_mask(&p).unwrap().bitwise_eq(&m));
        }
    }

    #[test]
    fn missing_files_name_their_path() {
        let err = load_image("/nonexistent/x.png").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.png"), "{err}");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(3, 0, 3, 32);
        write_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.category, b.category);
            assert!(a.mask.bitwise_eq(&b.mask));
            assert!(quantize(&a.image).max_abs_diff(&b.image).unwrap() < 1e-12);
        }
    }
}
