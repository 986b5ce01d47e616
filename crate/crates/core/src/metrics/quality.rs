//! Luminance PSNR and SSIM.

use crate::error::{Error, Result};
use crate::metrics::image::ImageU8;
use crate::tensor::Tensor;

/// Text output replaces an infinite PSNR with this value.
pub const PSNR_CAP_DB: f64 = 100.0;

/// BT.601 studio-swing luma of 8-bit-scaled RGB in `[0, 1]`.
fn luma(r: f64, g: f64, b: f64) -> f64 {
    16.0 + 65.481 * r + 128.553 * g + 24.966 * b
}

/// Luma plane of an image, in `[16, 235]`.
pub fn rgb_to_y(img: &ImageU8) -> Tensor {
    let plane = y_plane(img);
    Tensor::from_fn(&[img.height(), img.width()], |i| plane[i] as f32)
}

fn y_plane(img: &ImageU8) -> Vec<f64> {
    img.data()
        .chunks(3)
        .map(|p| luma(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
        .collect()
}

/// Luma plane of a `[3, H, W]` float image clamped to `[0, 1]`, without
/// 8-bit rounding.
fn y_plane_tensor(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidArgument(format!("expected a [3, H, W] tensor, got {s:?}")));
    }
    let hw = s[1] * s[2];
    let d = t.data();
    let c = |v: f32| v.clamp(0.0, 1.0) as f64;
    let plane = (0..hw).map(|p| luma(c(d[p]), c(d[hw + p]), c(d[2 * hw + p]))).collect();
    Ok((plane, s[1], s[2]))
}

struct Plane<'a> {
    data: &'a [f64],
    height: usize,
    width: usize,
}

fn cropped<'a>(a: Plane<'a>, b: Plane<'a>, crop: usize, min_side: usize) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape("image comparison", &[a.height, a.width], &[b.height, b.width]));
    }
    let (h, w) = (a.height, a.width);
    if h < 2 * crop + min_side || w < 2 * crop + min_side {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image too small for crop border {crop}"
        )));
    }
    let (ch, cw) = (h - 2 * crop, w - 2 * crop);
    let take = |p: &[f64]| {
        (crop..h - crop)
            .flat_map(|y| p[y * w + crop..y * w + w - crop].to_vec())
            .collect::<Vec<f64>>()
    };
    Ok((take(a.data), take(b.data), ch, cw))
}

fn psnr_planes(a: Plane, b: Plane, crop: usize) -> Result<f64> {
    let (a, b, _, _) = cropped(a, b, crop, 1)?;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// PSNR of two row-major `height × width` planes on the 0–255 scale.
pub fn psnr_plane(a: &[f64], b: &[f64], height: usize, width: usize, crop: usize) -> Result<f64> {
    if a.len() != height * width || b.len() != height * width {
        return Err(Error::shape("psnr_plane", &[a.len(), b.len()], &[height, width]));
    }
    psnr_planes(Plane { data: a, height, width }, Plane { data: b, height, width }, crop)
}

/// PSNR on luma after removing `crop` pixels at each border. Identical
/// inputs give `+∞`.
pub fn psnr_y(a: &ImageU8, b: &ImageU8, crop: usize) -> Result<f64> {
    let (pa, pb) = (y_plane(a), y_plane(b));
    psnr_planes(
        Plane { data: &pa, height: a.height(), width: a.width() },
        Plane { data: &pb, height: b.height(), width: b.width() },
        crop,
    )
}

/// [`psnr_y`] on float `[3, H, W]` images.
pub fn psnr_y_tensor(a: &Tensor, b: &Tensor, crop: usize) -> Result<f64> {
    let (pa, ha, wa) = y_plane_tensor(a)?;
    let (pb, hb, wb) = y_plane_tensor(b)?;
    psnr_planes(
        Plane { data: &pa, height: ha, width: wa },
        Plane { data: &pb, height: hb, width: wb },
        crop,
    )
}

/// Formats a PSNR for display, capping infinity.
pub fn format_psnr(db: f64) -> String {
    format!("{:.4}", db.min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; 121] {
    let sigma = 1.5f64;
    let mut g = [0.0f64; 11];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    let mut w = [0.0f64; 121];
    for y in 0..11 {
        for x in 0..11 {
            w[y * 11 + x] = g[y] * g[x];
        }
    }
    w
}

/// Valid-mode 11×11 filtering.
fn filter_valid(p: &[f64], h: usize, w: usize, win: &[f64; 121]) -> Vec<f64> {
    let (oh, ow) = (h - 10, w - 10);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for ky in 0..11 {
                let row = &p[(y + ky) * w + x..(y + ky) * w + x + 11];
                let wr = &win[ky * 11..ky * 11 + 11];
                acc += row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_planes(a: Plane, b: Plane, crop: usize) -> Result<f64> {
    let (a, b, h, w) = cropped(a, b, crop, 11)?;
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let win = gaussian_window();
    let f = |p: &[f64]| filter_valid(p, h, w, &win);
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let (mu1, mu2) = (f(&a), f(&b));
    let (s11, s22, s12) = (f(&sq(&a, &a)), f(&sq(&b, &b)), f(&sq(&a, &b)));
    let n = mu1.len();
    let mut total = 0.0;
    for i in 0..n {
        let (m1, m2) = (mu1[i], mu2[i]);
        let v1 = s11[i] - m1 * m1;
        let v2 = s22[i] - m2 * m2;
        let cov = s12[i] - m1 * m2;
        total += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
    }
    Ok(total / n as f64)
}

/// Mean SSIM on luma with an 11×11 Gaussian window (σ = 1.5) over the valid
/// region after cropping.
pub fn ssim_y(a: &ImageU8, b: &ImageU8, crop: usize) -> Result<f64> {
    let (pa, pb) = (y_plane(a), y_plane(b));
    ssim_planes(
        Plane { data: &pa, height: a.height(), width: a.width() },
        Plane { data: &pb, height: b.height(), width: b.width() },
        crop,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(w: usize, h: usize, rgb: [u8; 3]) -> ImageU8 {
        ImageU8::from_fn(w, h, |_, _, c| rgb[c])
    }

    #[test]
    fn luma_reference_points() {
        let y = |rgb| rgb_to_y(&solid(1, 1, rgb)).data()[0] as f64;
        assert!((y([0, 0, 0]) - 16.0).abs() < 1e-6);
        assert!((y([255, 255, 255]) - 235.0).abs() < 1e-3);
        assert!((y([0, 255, 0]) - 144.553).abs() < 1e-4);
    }

    #[test]
    fn identical_images_are_infinite() {
        let a = solid(8, 8, [10, 20, 30]);
        assert_eq!(psnr_y(&a, &a, 2).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(f64::INFINITY), "100.0000");
    }

    #[test]
    fn unit_luma_offset() {
        let p = [1.0f64; 16];
        let q = [2.0f64; 16];
        let v = psnr_planes(
            Plane { data: &p, height: 4, width: 4 },
            Plane { data: &q, height: 4, width: 4 },
            0,
        )
        .unwrap();
        assert!((v - 48.1308).abs() < 1e-3, "{v}");
    }

    #[test]
    fn dimension_mismatch() {
        assert!(psnr_y(&solid(4, 4, [0; 3]), &solid(5, 4, [0; 3]), 0).is_err());
        assert!(ssim_y(&solid(12, 12, [0; 3]), &solid(12, 12, [1; 3]), 1).is_err());
    }

    #[test]
    fn ssim_constant_images_luminance_term() {
        let (a, b) = (solid(16, 16, [50, 50, 50]), solid(16, 16, [120, 120, 120]));
        let (ya, yb) = (y_plane(&a)[0], y_plane(&b)[0]);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expect = (2.0 * ya * yb + c1) / (ya * ya + yb * yb + c1);
        let s = ssim_y(&a, &b, 0).unwrap();
        assert!((s - expect).abs() < 1e-9, "{s} vs {expect}");
    }
}
