//! Image folders and random patch sampling.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::image::read_image;
use crate::metrics::{bicubic_resize, ImageU8, Scale};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "ppm", "pnm"];

/// Image files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads every image in `dir`; an empty folder is an error.
pub fn load_images(dir: &Path) -> Result<Vec<ImageU8>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    paths.iter().map(|p| read_image(p)).collect()
}

/// Crops to multiples of `scale` and downsamples bicubically.
pub fn downsample(img: &ImageU8, scale: usize) -> Result<ImageU8> {
    if scale == 1 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width() / scale * scale, img.height() / scale * scale);
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than the scale factor {scale}",
            img.width(),
            img.height()
        )));
    }
    let cropped = ImageU8::from_fn(w, h, |y, x, c| img.pixel(y, x, c));
    bicubic_resize(&cropped, Scale::Down(scale as u32))
}

/// `count` uniformly placed `patch × patch` crops of uniformly chosen
/// images, as `[3, p, p]` tensors. Images smaller than the patch are used
/// whole along the short side.
pub fn random_crops<R: Rng>(images: &[ImageU8], count: usize, patch: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    if images.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let img = &images[rng.random_range(0..images.len())];
        let (ph, pw) = (patch.min(img.height()), patch.min(img.width()));
        let y0 = rng.random_range(0..=img.height() - ph);
        let x0 = rng.random_range(0..=img.width() - pw);
        out.push(Tensor::from_fn(&[3, ph, pw], |i| {
            let (c, p) = (i / (ph * pw), i % (ph * pw));
            img.pixel(y0 + p / pw, x0 + p % pw, c) as f32 / 255.0
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crops_are_deterministic_and_sized() {
        let imgs = vec![ImageU8::from_fn(20, 12, |y, x, c| (y + x + c) as u8), ImageU8::from_fn(6, 6, |_, _, _| 9)];
        let a = random_crops(&imgs, 8, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = random_crops(&imgs, 8, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert!(t.shape() == [3, 8, 8] || t.shape() == [3, 6, 6]);
        }
    }

    #[test]
    fn empty_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert!(matches!(load_images(dir.path()), Err(Error::EmptyCalibration)));
    }
}
