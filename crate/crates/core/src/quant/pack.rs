//! Bit-packed storage for sub-byte integer codes.
//!
//! Code `i` occupies stream bits `[i·N, (i+1)·N)`; stream bit `j` is bit
//! `j % 8` of byte `j / 8` (little-endian within each byte). Unused bits of
//! the final byte are zero.

use crate::error::{Error, Result};
use crate::quant::fake::QuantGrid;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PackedIntTensor {
    shape: Vec<usize>,
    bits: u8,
    payload: Vec<u8>,
    lower: f32,
    upper: f32,
}

pub fn payload_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

impl PackedIntTensor {
    /// Packs `codes` (each in `[0, 2^bits − 1]`).
    pub fn pack(codes: &[u32], shape: &[usize], bits: u8, lower: f32, upper: f32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!("cannot pack {bits}-bit codes")));
        }
        let count: usize = shape.iter().product();
        if count != codes.len() {
            return Err(Error::shape("pack", &[codes.len()], shape));
        }
        let max = (1u32 << bits) - 1;
        let mut payload = vec![0u8; payload_len(count, bits)];
        for (i, &c) in codes.iter().enumerate() {
            if c > max {
                return Err(Error::CodeOutOfRange { code: c, bits });
            }
            let mut bit = i * bits as usize;
            for b in 0..bits {
                if c >> b & 1 == 1 {
                    payload[bit / 8] |= 1 << (bit % 8);
                }
                bit += 1;
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            bits,
            payload,
            lower,
            upper,
        })
    }

    /// Quantizes a tensor with `grid` and packs the resulting codes.
    pub fn quantize(t: &Tensor, grid: &QuantGrid) -> Result<Self> {
        t.ensure_finite("packing input")?;
        let codes: Vec<u32> = t.data().iter().map(|&v| grid.code(v)).collect();
        Self::pack(&codes, t.shape(), grid.bits, grid.lower, grid.upper)
    }

    /// Rebuilds from serialized parts, validating payload size and padding.
    pub fn from_parts(shape: Vec<usize>, bits: u8, payload: Vec<u8>, lower: f32, upper: f32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::Format(format!("packed tensor with {bits} bits")));
        }
        let count: usize = shape.iter().product();
        if payload.len() != payload_len(count, bits) {
            return Err(Error::Format(format!(
                "packed payload has {} bytes, {count} {bits}-bit codes need {}",
                payload.len(),
                payload_len(count, bits)
            )));
        }
        let used = count * bits as usize;
        if used % 8 != 0 {
            let last = *payload.last().unwrap();
            if last >> (used % 8) != 0 {
                return Err(Error::Format("nonzero padding bits in packed payload".into()));
            }
        }
        QuantGrid::new(lower, upper, bits).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            shape,
            bits,
            payload,
            lower,
            upper,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn bounds(&self) -> (f32, f32) {
        (self.lower, self.upper)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn grid(&self) -> Result<QuantGrid> {
        QuantGrid::new(self.lower, self.upper, self.bits)
    }

    pub fn unpack(&self) -> Vec<u8> {
        let n = self.bits as usize;
        let mask = (1u16 << n) - 1;
        (0..self.numel())
            .map(|i| {
                let bit = i * n;
                let (byte, off) = (bit / 8, bit % 8);
                let lo = self.payload[byte] as u16;
                let hi = self.payload.get(byte + 1).copied().unwrap_or(0) as u16;
                (((lo | hi << 8) >> off) & mask) as u8
            })
            .collect()
    }

    /// Grid values of the stored codes.
    pub fn dequantize(&self) -> Result<Tensor> {
        let grid = self.grid()?;
        let data = self.unpack().into_iter().map(|k| grid.level(k as u32)).collect();
        Tensor::new(self.shape.clone(), data)
    }
}
