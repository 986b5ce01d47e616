//! Bicubic resampling in the convention of MATLAB's `imresize`: cubic
//! kernel with a = −0.5, kernel widened for antialiasing when shrinking,
//! symmetric border extension, rows resized before columns.

use crate::error::{Error, Result};
use crate::metrics::image::ImageU8;

/// Supported resize factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Up(u32),
    Down(u32),
}

impl Scale {
    pub fn factor(self) -> f64 {
        match self {
            Scale::Up(k) => k as f64,
            Scale::Down(k) => 1.0 / k as f64,
        }
    }

    fn check(self) -> Result<()> {
        match self {
            Scale::Up(2..=4) | Scale::Down(2..=4) => Ok(()),
            _ => Err(Error::InvalidArgument(format!("unsupported resize factor {self:?}"))),
        }
    }

    fn output_len(self, n: usize) -> usize {
        match self {
            Scale::Up(k) => n * k as usize,
            Scale::Down(k) => n.div_ceil(k as usize),
        }
    }
}

pub fn cubic(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        1.5 * a * a * a - 2.5 * a * a + 1.0
    } else if a <= 2.0 {
        -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Source indices and normalized weights for each output position.
pub fn contributions(in_len: usize, out_len: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let antialias = scale < 1.0;
    let width = if antialias { 4.0 / scale } else { 4.0 };
    let taps = width.ceil() as isize + 2;
    (1..=out_len)
        .map(|i| {
            let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let mut w: Vec<(usize, f64)> = (0..taps)
                .map(|t| {
                    let idx = left + t;
                    let d = u - idx as f64;
                    let k = if antialias { scale * cubic(scale * d) } else { cubic(d) };
                    (mirror(idx - 1, in_len), k)
                })
                .collect();
            let s: f64 = w.iter().map(|p| p.1).sum();
            w.iter_mut().for_each(|p| p.1 /= s);
            w
        })
        .collect()
}

/// Zero-based symmetric extension: `…, 1, 0, 0, 1, …, n−1, n−1, n−2, …`.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Resizes by `scale`; output sides are `ceil(side · scale)`.
pub fn bicubic_resize(img: &ImageU8, scale: Scale) -> Result<ImageU8> {
    scale.check()?;
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = (scale.output_len(h), scale.output_len(w));
    let s = scale.factor();
    let rows = contributions(h, oh, s);
    let cols = contributions(w, ow, s);
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    // Height first.
    let mut mid = vec![0.0f64; oh * w * 3];
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..w {
            for c in 0..3 {
                mid[(y * w + x) * 3 + c] = taps.iter().map(|&(sy, k)| k * src[(sy * w + x) * 3 + c]).sum();
            }
        }
    }
    Ok(ImageU8::from_fn(ow, oh, |y, x, c| {
        let v: f64 = cols[x].iter().map(|&(sx, k)| k * mid[(y * w + sx) * 3 + c]).sum();
        v.round().clamp(0.0, 255.0) as u8
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_partition_of_unity() {
        for t in [0.0, 0.25, 0.5, 0.9] {
            let s: f64 = (-3..=3).map(|k| cubic(t + k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageU8::from_fn(7, 5, |_, _, c| [10, 128, 250][c]);
        for scale in [Scale::Up(2), Scale::Up(3), Scale::Down(2), Scale::Down(3)] {
            let out = bicubic_resize(&img, scale).unwrap();
            assert!(out.data().chunks(3).all(|p| p == [10, 128, 250]));
        }
    }

    #[test]
    fn output_sizes() {
        let img = ImageU8::from_fn(10, 7, |_, _, _| 0);
        let up = bicubic_resize(&img, Scale::Up(2)).unwrap();
        assert_eq!((up.width(), up.height()), (20, 14));
        let down = bicubic_resize(&img, Scale::Down(3)).unwrap();
        assert_eq!((down.width(), down.height()), (4, 3));
        assert!(bicubic_resize(&img, Scale::Up(5)).is_err());
    }

    #[test]
    fn mirror_extension() {
        let idx: Vec<usize> = (-3..7).map(|i| mirror(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }
}
