//! Integer matrix products over quantization codes.
//!
//! With `v = l + s·k` for code `k`, a dot product of two quantized vectors
//! of length `K` expands to
//!
//! ```text
//! Σ va·vb = sa·sb·Σ ka·kb + sa·lb·Σ ka + la·sb·Σ kb + K·la·lb
//! ```
//!
//! The code products accumulate exactly in integers; only the three affine
//! corrections and the final scaling use floating point.

use crate::error::{Error, Result};
use crate::quant::fake::QuantGrid;
use crate::quant::pack::PackedIntTensor;
use crate::tensor::Tensor;

/// A strided `rows × cols` matrix of codes sharing one quantization grid.
#[derive(Clone, Copy, Debug)]
pub struct CodeMatrix<'a> {
    pub codes: &'a [u8],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
    pub grid: QuantGrid,
}

impl<'a> CodeMatrix<'a> {
    pub fn row_major(codes: &'a [u8], rows: usize, cols: usize, grid: QuantGrid) -> Self {
        Self {
            codes,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
            grid,
        }
    }

    pub fn transposed(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn at(&self, r: usize, c: usize) -> u8 {
        self.codes[r * self.row_stride + c * self.col_stride]
    }
}

fn affine(grid: &QuantGrid) -> (f64, f64) {
    let (l, u) = (grid.lower as f64, grid.upper as f64);
    (l, (u - l) / grid.levels() as f64)
}

/// `out = dequant(a) · dequant(b)` for `a: m×k`, `b: k×n`; `out` is row-major `m×n`.
pub fn int_matmul(a: &CodeMatrix, b: &CodeMatrix, out: &mut [f32]) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::shape("int_matmul", &[a.rows, a.cols], &[b.rows, b.cols]));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if out.len() != m * n {
        return Err(Error::shape("int_matmul output", &[out.len()], &[m, n]));
    }
    // Contiguous rows of a and columns of b for the inner loop.
    let a_rows: Vec<u8> = (0..m).flat_map(|r| (0..k).map(move |c| a.at(r, c))).collect();
    let b_cols: Vec<u8> = (0..n).flat_map(|c| (0..k).map(move |r| b.at(r, c))).collect();
    let sum_a: Vec<i64> = a_rows.chunks(k.max(1)).map(|r| r.iter().map(|&v| v as i64).sum()).collect();
    let sum_b: Vec<i64> = b_cols.chunks(k.max(1)).map(|c| c.iter().map(|&v| v as i64).sum()).collect();
    let (la, sa) = affine(&a.grid);
    let (lb, sb) = affine(&b.grid);
    let constant = k as f64 * la * lb;
    for i in 0..m {
        let ar = &a_rows[i * k..(i + 1) * k];
        for j in 0..n {
            let bc = &b_cols[j * k..(j + 1) * k];
            let acc: i64 = ar.iter().zip(bc).map(|(&x, &y)| x as i64 * y as i64).sum();
            let v = sa * sb * acc as f64
                + sa * lb * sum_a[i] as f64
                + la * sb * sum_b[j] as f64
                + constant;
            out[i * n + j] = v as f32;
        }
    }
    Ok(())
}

/// Linear layer over packed operands: `x: [rows, in]`, `w: [out, in]`.
pub fn int_linear(x: &PackedIntTensor, w: &PackedIntTensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("int_linear", xs, ws));
    }
    if let Some(b) = bias {
        if b.len() != ws[0] {
            return Err(Error::shape("int_linear bias", &[b.len()], &[ws[0]]));
        }
    }
    let (xg, wg) = (x.grid()?, w.grid()?);
    let (xc, wc) = (x.unpack(), w.unpack());
    let a = CodeMatrix::row_major(&xc, xs[0], xs[1], xg);
    let b = CodeMatrix::row_major(&wc, ws[0], ws[1], wg).transposed();
    let mut out = vec![0.0f32; xs[0] * ws[0]];
    int_matmul(&a, &b, &mut out)?;
    if let Some(bias) = bias {
        for row in out.chunks_mut(ws[0]) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
    }
    Tensor::new(vec![xs[0], ws[0]], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_codes_leave_only_the_affine_constant() {
        let x = PackedIntTensor::pack(&[0; 6], &[2, 3], 4, -0.5, 1.0).unwrap();
        let w = PackedIntTensor::pack(&[0; 12], &[4, 3], 4, -2.0, 2.0).unwrap();
        let bias = [0.1, 0.2, 0.3, 0.4];
        let y = int_linear(&x, &w, Some(&bias)).unwrap();
        for (j, v) in y.data().iter().enumerate() {
            let expected = 3.0 * (-0.5) * (-2.0) + bias[j % 4];
            assert!((v - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_inner_dimension_mismatch() {
        let x = PackedIntTensor::pack(&[0; 6], &[2, 3], 4, 0.0, 1.0).unwrap();
        let w = PackedIntTensor::pack(&[0; 8], &[4, 2], 4, 0.0, 1.0).unwrap();
        assert!(int_linear(&x, &w, None).is_err());
    }
}
