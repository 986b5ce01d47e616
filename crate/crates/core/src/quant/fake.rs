//! Fake quantization with learnable clipping bounds and its STE gradients.
//!
//! Forward, for bits `N`, `n = 2^N - 1`:
//!
//! ```text
//! v_c = clip(v, l, u)
//! v_r = round((v_c - l) * (n / (u - l)))      half away from zero
//! v_q = l + v_r * ((u - l) / n)                v_q = u when v_r = n
//! ```
//!
//! Every consumer (packing, DOBI, the integer kernels) goes through
//! [`QuantGrid`] so the arithmetic above is evaluated in exactly one place.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether a quantizer acts on a weight tensor or on an activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Activation,
}

/// Bound search strategy chosen from the shape of the data distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Bell-shaped data: both bounds move inward together.
    Symmetric,
    /// Exponential-like data: lower bound pinned at the minimum.
    FixedLower,
}

/// Bit widths accepted for model quantizers.
pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

pub fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}"
        )))
    }
}

/// One quantizer: bit width, clipping bounds and bookkeeping flags.
///
/// An inactive quantizer is an identity map; it is installed for tensors
/// whose calibration data is constant, where the bounds are undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub bits: u8,
    pub lower: f32,
    pub upper: f32,
    pub role: Role,
    pub mode: SearchMode,
    pub trainable: bool,
    pub active: bool,
}

impl QuantizerState {
    pub fn new(bits: u8, lower: f32, upper: f32, role: Role, mode: SearchMode) -> Result<Self> {
        check_bits(bits)?;
        QuantGrid::new(lower, upper, bits)?;
        Ok(Self {
            bits,
            lower,
            upper,
            role,
            mode,
            trainable: true,
            active: true,
        })
    }

    /// Pass-through quantizer for degenerate (constant) data.
    pub fn identity(bits: u8, role: Role, mode: SearchMode) -> Self {
        Self {
            bits,
            lower: 0.0,
            upper: 0.0,
            role,
            mode,
            trainable: false,
            active: false,
        }
    }

    pub fn levels(&self) -> u32 {
        levels(self.bits)
    }

    pub fn grid(&self) -> Result<QuantGrid> {
        QuantGrid::new(self.lower, self.upper, self.bits)
    }
}

pub fn levels(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Precomputed constants for evaluating the quantizer on scalars.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantGrid {
    pub lower: f32,
    pub upper: f32,
    pub bits: u8,
    levels: u32,
    /// `n / (u - l)`
    scale: f32,
    /// `(u - l) / n`
    step: f32,
}

impl QuantGrid {
    pub fn new(lower: f32, upper: f32, bits: u8) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit width {bits} out of range")));
        }
        if !lower.is_finite() || !upper.is_finite() {
            return Err(Error::NonFinite("quantizer bounds".into()));
        }
        if upper <= lower {
            return Err(Error::DegenerateBounds { lower, upper });
        }
        let levels = levels(bits);
        let range = upper - lower;
        Ok(Self {
            lower,
            upper,
            bits,
            levels,
            scale: levels as f32 / range,
            step: range / levels as f32,
        })
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn step(&self) -> f32 {
        self.step
    }

    pub fn clip(&self, v: f32) -> f32 {
        v.max(self.lower).min(self.upper)
    }

    /// Position of `clip(v)` on the continuous grid, in `[0, n]`.
    pub fn scaled(&self, v: f32) -> f32 {
        (self.clip(v) - self.lower) * self.scale
    }

    /// Integer code `v_r` in `[0, n]`.
    pub fn code(&self, v: f32) -> u32 {
        // `f32::round` rounds half away from zero.
        (self.scaled(v).round() as u32).min(self.levels)
    }

    /// Dequantized value of code `k`.
    pub fn level(&self, k: u32) -> f32 {
        if k >= self.levels {
            self.upper
        } else {
            self.lower + k as f32 * self.step
        }
    }

    pub fn quantize(&self, v: f32) -> f32 {
        self.level(self.code(v))
    }

    /// Value of the rounding surrogate `l + r * step` for a real-valued code `r`.
    pub fn surrogate(&self, r: f32) -> f32 {
        self.lower + r * self.step
    }
}

/// Partial derivatives `(∂v_q/∂l, ∂v_q/∂u)` of one element under STE.
///
/// `code` is `v_r` (possibly real-valued under a frozen-rounding surrogate)
/// and `levels` is `2^N - 1`. The clip derivatives are `∂v_c/∂u = 1` iff
/// `v > u` and `∂v_c/∂l = 1` iff `v < l`.
pub fn ste_bound_partials(v: f64, lower: f64, upper: f64, levels: f64, code: f64) -> (f64, f64) {
    let vc = v.max(lower).min(upper);
    let frac = (vc - lower) / (upper - lower);
    let above = if v > upper { 1.0 } else { 0.0 };
    let below = if v < lower { 1.0 } else { 0.0 };
    let du = above + code / levels - frac;
    let dl = below - code / levels + frac;
    (dl, du)
}

/// Applies the quantizer to every element of `v`.
pub fn fake_quantize(v: &Tensor, q: &QuantizerState) -> Result<Tensor> {
    v.ensure_finite("fake_quantize input")?;
    if !q.active {
        return Ok(v.clone());
    }
    let grid = q.grid()?;
    let data = v.data().iter().map(|&x| grid.quantize(x)).collect();
    Tensor::new(v.shape().to_vec(), data)
}

/// STE backward: returns `(grad_v, grad_l, grad_u)` for an upstream gradient.
pub fn fake_quantize_backward(
    v: &Tensor,
    q: &QuantizerState,
    upstream: &Tensor,
) -> Result<(Tensor, f32, f32)> {
    if v.shape() != upstream.shape() {
        return Err(Error::shape("fake_quantize_backward", v.shape(), upstream.shape()));
    }
    v.ensure_finite("fake_quantize input")?;
    let grid = q.grid()?;
    let (l, u) = (q.lower as f64, q.upper as f64);
    let n = grid.levels() as f64;
    let mut grad_v = Vec::with_capacity(v.numel());
    let (mut gl, mut gu) = (0.0f64, 0.0f64);
    for (&x, &g) in v.data().iter().zip(upstream.data()) {
        grad_v.push(if x >= q.lower && x <= q.upper { g } else { 0.0 });
        let (dl, du) = ste_bound_partials(x as f64, l, u, n, grid.code(x) as f64);
        gl += g as f64 * dl;
        gu += g as f64 * du;
    }
    Ok((Tensor::new(v.shape().to_vec(), grad_v)?, gl as f32, gu as f32))
}
