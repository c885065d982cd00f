//! Grayscale image I/O, bilinear resizing and per-image normalization.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, TensorSet};
use crate::error::{Error, Result};

pub const MIN_TARGET_SIZE: usize = 8;

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|source| Error::Image {
        path: "<png>".into(),
        source,
    })?;
    Ok(out.into_inner())
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with half-pixel centres: output pixel `i` samples
/// source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the image.
pub fn resize_bilinear(src: &[f32], (h, w): (usize, usize), (th, tw): (usize, usize)) -> Vec<f32> {
    assert_eq!(src.len(), h * w, "source buffer does not match {h}x{w}");
    let axis = |inn: usize, out: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inn - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, th), axis(w, tw));
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Zero mean, unit (population) variance; constant inputs become zeros.
pub fn normalize(values: &mut [f32]) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-12 {
        values.fill(0.0);
        return;
    }
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = ((*v as f64 - mean) / sd) as f32;
    }
}

pub fn flip_horizontal(values: &mut [f32], width: usize) {
    for row in values.chunks_mut(width) {
        row.reverse();
    }
}

/// Resize to `target x target`, normalize, and mirror when `flip` is set.
pub fn preprocess(img: &GrayImage, target: usize, flip: bool) -> Result<Vec<f32>> {
    if target < MIN_TARGET_SIZE {
        return Err(Error::invalid(
            "preprocess",
            format!("target size {target} below {MIN_TARGET_SIZE}"),
        ));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = img.as_raw().iter().map(|&p| p as f32 / 255.0).collect();
    let mut out = resize_bilinear(&pixels, (h, w), (target, target));
    normalize(&mut out);
    if flip {
        flip_horizontal(&mut out, target);
    }
    Ok(out)
}

/// [`preprocess`] with a seeded coin flip of probability `flip_prob`.
pub fn preprocess_augmented(img: &GrayImage, target: usize, flip_prob: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let flip = flip_prob > 0.0 && rng.random_bool(flip_prob.min(1.0));
    preprocess(img, target, flip)
}

/// Preprocesses in-memory images (one per manifest record, in order).
pub fn tensor_set(manifest: &DatasetManifest, images: &[GrayImage], target: usize) -> Result<TensorSet> {
    if images.len() != manifest.len() {
        return Err(Error::invalid(
            "tensor_set",
            format!("{} images for {} records", images.len(), manifest.len()),
        ));
    }
    let mut set = TensorSet {
        size: target,
        num_labels: manifest.num_classes(),
        images: Vec::with_capacity(images.len() * target * target),
        labels: Vec::with_capacity(manifest.len() * manifest.num_classes()),
    };
    for (r, img) in manifest.records.iter().zip(images) {
        set.images.extend(preprocess(img, target, false)?);
        set.labels.extend(&r.labels);
    }
    Ok(set)
}

/// Reads every record's image from `root` and preprocesses it.
pub fn load_tensor_set(manifest: &DatasetManifest, root: &Path, target: usize) -> Result<TensorSet> {
    let images = load_images(manifest, root)?;
    tensor_set(manifest, &images, target)
}

pub fn load_images(manifest: &DatasetManifest, root: &Path) -> Result<Vec<GrayImage>> {
    manifest.records.iter().map(|r| load_gray(&root.join(&r.locator))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_upsample_matches_hand_interpolation() {
        let src = [0.0, 10.0, 20.0, 30.0];
        let out = resize_bilinear(&src, (2, 2), (4, 4));
        // Sample coordinates per axis: -0.25 -> 0, 0.25, 0.75, 1.25 -> 1.
        let row = |base: f32| [base, base + 2.5, base + 7.5, base + 10.0];
        let expected: Vec<f32> = [0.0, 5.0, 15.0, 20.0].iter().flat_map(|&b| row(b)).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn identity_resize_and_downsample() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear(&src, (4, 4), (4, 4)), src);
        // 4 -> 2 samples at 0.5 and 2.5: the mean of each 2x2 block.
        assert_eq!(resize_bilinear(&src, (4, 4), (2, 2)), vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let img = GrayImage::from_pixel(10, 12, image::Luma([77]));
        assert!(preprocess(&img, 16, false).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_moments() {
        let img = GrayImage::from_fn(9, 9, |x, y| image::Luma([(x * 20 + y * 3) as u8]));
        let v = preprocess(&img, 12, false).unwrap();
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5, "{mean} {var}");
    }

    #[test]
    fn flips_and_determinism() {
        let img = GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * 30 + y) as u8]));
        let a = preprocess(&img, 8, false).unwrap();
        assert_eq!(a, preprocess(&img, 8, false).unwrap());
        let mut b = preprocess(&img, 8, true).unwrap();
        flip_horizontal(&mut b, 8);
        assert_eq!(a, b);
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        assert_eq!(preprocess_augmented(&img, 8, 0.0, &mut rng).unwrap(), a);
        assert!(preprocess(&img, 4, false).is_err());
    }

    #[test]
    fn unreadable_locator_is_an_image_error() {
        let err = load_gray(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::Image { .. }), "{err:?}");
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let img = GrayImage::from_fn(7, 5, |x, y| image::Luma([(x * 37 + y * 11) as u8]));
        let bytes = encode_png(&img).unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert_eq!(back, img);
        assert_eq!(encode_png(&back).unwrap(), bytes);
    }
}
