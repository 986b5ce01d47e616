//! Parameter and operation accounting, and the bit-cost model behind the
//! compression and speedup ratios.
//!
//! Operations are multiply–accumulates. Two conventions are available: the
//! one used by the reference SwinIR implementation's own counter (linear,
//! batched matmul, convolution and LayerNorm terms, with its shorthand for
//! the body convolution and reconstruction layer), and an exact count of
//! every layer including softmax, GELU and residual additions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tensor_specs, ModelConfig, ParamKind};
use crate::quant::check_bits;

/// Accounting resolution (low-resolution input side) used by default.
pub const DEFAULT_ACCOUNTING_SIDE: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub count: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub entries: Vec<ParamEntry>,
}

impl ParamTable {
    fn sum(&self, f: impl Fn(ParamKind) -> bool) -> usize {
        self.entries.iter().filter(|e| f(e.kind)).map(|e| e.count).sum()
    }

    pub fn quantizable(&self) -> usize {
        self.sum(|k| k == ParamKind::Quantizable)
    }

    pub fn fp_resident(&self) -> usize {
        self.sum(|k| k == ParamKind::FpResident)
    }

    pub fn position_bias(&self) -> usize {
        self.sum(|k| k == ParamKind::PositionBias)
    }

    /// Headline parameter count: every tensor except the position bias
    /// tables, which published model sizes leave out.
    pub fn headline(&self) -> usize {
        self.quantizable() + self.fp_resident()
    }

    pub fn total_with_position_bias(&self) -> usize {
        self.headline() + self.position_bias()
    }
}

/// Exact parameter count of every named tensor.
pub fn count_params(config: &ModelConfig) -> Result<ParamTable> {
    config.validate()?;
    Ok(ParamTable {
        entries: tensor_specs(config)
            .into_iter()
            .map(|s| ParamEntry { count: s.numel(), name: s.name, kind: s.kind })
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    LinearBmm,
    Conv,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    Reference,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopEntry {
    pub module: String,
    pub class: OpClass,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopTable {
    pub convention: FlopConvention,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<FlopEntry>,
}

impl FlopTable {
    pub fn class_total(&self, class: OpClass) -> u64 {
        self.entries.iter().filter(|e| e.class == class).map(|e| e.macs).sum()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// Share of operations executed by quantized layers.
    pub fn quantized_fraction(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.class_total(OpClass::LinearBmm) as f64 / t as f64
        }
    }
}

/// Operation count for one `height × width` low-resolution input, padded up
/// to window multiples.
pub fn count_flops(config: &ModelConfig, height: usize, width: usize, convention: FlopConvention) -> Result<FlopTable> {
    config.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("resolution {height}x{width} is empty")));
    }
    let (hp, wp) = (config.padded_extent(height), config.padded_extent(width));
    let t = (hp * wp) as u64;
    let c = config.embed_dim as u64;
    let hidden = config.mlp_hidden() as u64;
    let n = config.window_tokens() as u64;
    let heads = config.num_heads as u64;
    let d = config.head_dim() as u64;
    let cin = config.in_chans as u64;
    let r2 = (config.upscale * config.upscale) as u64;
    let exact = convention == FlopConvention::Exact;

    let mut entries = Vec::new();
    let mut push = |module: String, class: OpClass, macs: u64| entries.push(FlopEntry { module, class, macs });
    push("conv_first".into(), OpClass::Conv, t * cin * c * 9);
    push("patch_embed.norm".into(), OpClass::Other, t * c);
    for i in 0..config.num_rstb {
        for j in 0..config.stl_per_rstb {
            let p = crate::model::sites::block_prefix(i, j);
            push(format!("{p}.norm1"), OpClass::Other, t * c);
            push(format!("{p}.attn.qkv"), OpClass::LinearBmm, t * c * 3 * c);
            push(format!("{p}.attn.qk"), OpClass::LinearBmm, t * heads * n * d);
            push(format!("{p}.attn.av"), OpClass::LinearBmm, t * heads * n * d);
            push(format!("{p}.attn.proj"), OpClass::LinearBmm, t * c * c);
            push(format!("{p}.norm2"), OpClass::Other, t * c);
            push(format!("{p}.mlp.fc1"), OpClass::LinearBmm, t * c * hidden);
            push(format!("{p}.mlp.fc2"), OpClass::LinearBmm, t * hidden * c);
            if exact {
                push(format!("{p}.attn.softmax"), OpClass::Other, t * heads * n);
                push(format!("{p}.attn.bias"), OpClass::Other, t * heads * n);
                push(format!("{p}.mlp.gelu"), OpClass::Other, t * hidden);
                push(format!("{p}.residual"), OpClass::Other, 2 * t * c);
            }
        }
        push(format!("layers.{i}.conv"), OpClass::Conv, t * c * c * 9);
        if exact {
            push(format!("layers.{i}.residual"), OpClass::Other, t * c);
        }
    }
    if exact {
        push("norm".into(), OpClass::Other, t * c);
        push("conv_after_body".into(), OpClass::Conv, t * c * c * 9);
        push("upsample.0".into(), OpClass::Conv, t * c * cin * r2 * 9);
    } else {
        // The reference counter books these two layers as `3·C²` and
        // `9·3·C` per pixel and omits the final norm.
        push("conv_after_body".into(), OpClass::Conv, t * 3 * c * c);
        push("upsample.0".into(), OpClass::Conv, t * c * 3 * 9);
    }
    Ok(FlopTable { convention, height: hp, width: wp, entries })
}

fn cost_ratio(total: f64, quantized: f64, bits: u8) -> Result<f64> {
    check_bits(bits)?;
    let denom = (total - quantized) + quantized * bits as f64 / 32.0;
    if denom <= 0.0 {
        return Err(Error::InvalidArgument("empty accounting table".into()));
    }
    Ok(total / denom)
}

/// FP32 size over the size with quantizable tensors stored at `bits`.
pub fn compression_ratio(params: &ParamTable, bits: u8) -> Result<f64> {
    cost_ratio(params.headline() as f64, params.quantizable() as f64, bits)
}

/// Operation cost ratio when quantized layers cost `bits / 32` of FP.
pub fn speedup_ratio(flops: &FlopTable, bits: u8) -> Result<f64> {
    cost_ratio(flops.total() as f64, flops.class_total(OpClass::LinearBmm) as f64, bits)
}

const MIB: f64 = 1024.0 * 1024.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub bits: u8,
    pub params_headline: usize,
    pub params_quantizable: usize,
    pub params_fp_resident: usize,
    pub params_position_bias: usize,
    pub size_fp_mb: f64,
    pub size_quantized_mb: f64,
    pub quantized_param_fraction: f64,
    pub flop_convention: FlopConvention,
    pub accounting_resolution: (usize, usize),
    pub gmacs_total: f64,
    pub gmacs_linear_bmm: f64,
    pub gmacs_conv: f64,
    pub gmacs_other: f64,
    pub quantized_flop_fraction: f64,
    pub compression_ratio: f64,
    pub speedup_ratio: f64,
}

pub fn complexity_report(
    config: &ModelConfig,
    bits: u8,
    height: usize,
    width: usize,
    convention: FlopConvention,
) -> Result<ComplexityReport> {
    let params = count_params(config)?;
    let flops = count_flops(config, height, width, convention)?;
    let g = |v: u64| v as f64 / 1e9;
    let q = params.quantizable() as f64;
    Ok(ComplexityReport {
        bits,
        params_headline: params.headline(),
        params_quantizable: params.quantizable(),
        params_fp_resident: params.fp_resident(),
        params_position_bias: params.position_bias(),
        size_fp_mb: params.headline() as f64 * 4.0 / MIB,
        size_quantized_mb: (params.fp_resident() as f64 * 4.0 + q * bits as f64 / 8.0) / MIB,
        quantized_param_fraction: q / params.headline() as f64,
        flop_convention: convention,
        accounting_resolution: (flops.height, flops.width),
        gmacs_total: g(flops.total()),
        gmacs_linear_bmm: g(flops.class_total(OpClass::LinearBmm)),
        gmacs_conv: g(flops.class_total(OpClass::Conv)),
        gmacs_other: g(flops.class_total(OpClass::Other)),
        quantized_flop_fraction: flops.quantized_fraction(),
        compression_ratio: compression_ratio(&params, bits)?,
        speedup_ratio: speedup_ratio(&flops, bits)?,
    })
}

impl ComplexityReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (h, w) = self.accounting_resolution;
        let pct = |v: f64| 100.0 * v / self.gmacs_total;
        let _ = writeln!(s, "accounting resolution {h}x{w} (LR), {:?} convention, {}-bit", self.flop_convention, self.bits);
        let _ = writeln!(s, "{:<16}{:>12}{:>10}", "Module", "GMACs", "Ratio %");
        for (name, v) in [
            ("Linear & BMM", self.gmacs_linear_bmm),
            ("Conv", self.gmacs_conv),
            ("Other", self.gmacs_other),
            ("Total", self.gmacs_total),
        ] {
            let _ = writeln!(s, "{name:<16}{v:>12.2}{:>10.2}", pct(v));
        }
        let _ = writeln!(
            s,
            "params {} ({:.2} MB FP32, {:.2} MB quantized); position bias {} not included",
            self.params_headline, self.size_fp_mb, self.size_quantized_mb, self.params_position_bias
        );
        let _ = writeln!(s, "compression {:.2}x  speedup {:.2}x", self.compression_ratio, self.speedup_ratio);
        s
    }
}
