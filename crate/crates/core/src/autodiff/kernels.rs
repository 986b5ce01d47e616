//! Raw numeric kernels shared by the tape operators and the integer path.

/// Strided view of a row-major-ish matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f32],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Strided<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The same buffer read as its transpose.
    pub fn transposed(self) -> Self {
        Self {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        let r = (rows.saturating_sub(1) as isize) * self.rs;
        let c = (cols.saturating_sub(1) as isize) * self.cs;
        (r + c) as usize
    }
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product; `c` is contiguous `m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Strided, b: Strided, c: &mut [f32], beta: f32) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.rs >= 0 && a.cs >= 0 && b.rs >= 0 && b.cs >= 0);
    assert!(a.max_offset(m, k) < a.data.len());
    assert!(b.max_offset(k, n) < b.data.len());
    // SAFETY: bounds of every operand were checked above against the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `[cin, h, w]` image into `[cin*9, h*w]` columns for a 3×3, pad-1 convolution.
pub(crate) fn im2col3x3(x: &[f32], cin: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut col = vec![0.0f32; cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[y * w + xx] = plane[sy * w + sx as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3x3`]: folds column gradients back into an image gradient.
pub(crate) fn col2im3x3(col: &[f32], cin: usize, h: usize, w: usize, out: &mut [f32]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        plane[sy * w + sx as usize] += row[y * w + xx];
                    }
                }
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub(crate) fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (x * normal_cdf(x)) as f32
}

/// d/dx of exact GELU: `Φ(x) + x·φ(x)`.
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (normal_cdf(x) + x * pdf) as f32
}

/// Gather map for depth-to-space: output `[c, h*r, w*r]` from input `[c*r*r, h, w]`.
pub fn pixel_shuffle_index(channels_out: usize, h: usize, w: usize, r: usize) -> Vec<u32> {
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(channels_out * oh * ow);
    for c in 0..channels_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, i) = (oy / r, oy % r);
                let (x, j) = (ox / r, ox % r);
                let src_c = c * r * r + i * r + j;
                idx.push(((src_c * h + y) * w + x) as u32);
            }
        }
    }
    idx
}

/// Inverse permutation of a bijective gather map.
pub fn invert_permutation(idx: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; idx.len()];
    for (dst, &src) in idx.iter().enumerate() {
        inv[src as usize] = dst as u32;
    }
    inv
}
