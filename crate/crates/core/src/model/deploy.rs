//! Integer execution of the quantized layers.

use rayon::prelude::*;

use crate::autodiff::kernels::{gemm, Strided};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::sites::{quantizer_sites, QuantizerSet};
use crate::model::weights::ModelWeights;
use crate::quant::{int_matmul, CodeMatrix, PackedIntTensor, QuantGrid, Role};
use crate::tensor::Tensor;

struct WeightCodes {
    packed: PackedIntTensor,
    codes: Vec<u8>,
    grid: QuantGrid,
}

/// Packed weights and activation grids for every active quantizer site.
pub struct PackedModel {
    weights: Vec<Option<WeightCodes>>,
    activations: Vec<Option<QuantGrid>>,
}

/// One matmul operand: codes on a grid, or plain floats when its quantizer
/// is inactive.
enum Operand<'a> {
    Codes(std::borrow::Cow<'a, [u8]>, QuantGrid),
    Float(&'a [f32]),
}

impl PackedModel {
    /// Quantizes and packs every active weight site of `weights`.
    pub fn new(weights: &ModelWeights, qset: &QuantizerSet) -> Result<Self> {
        let mut packed = Vec::with_capacity(qset.len());
        for (site, state) in qset.iter() {
            packed.push(match site.weight_name() {
                Some(name) if state.active => {
                    Some(PackedIntTensor::quantize(weights.get(&name)?, &state.grid()?)?)
                }
                _ => None,
            });
        }
        Self::from_packed(weights.config(), qset, packed)
    }

    /// Assembles from already-packed weights aligned with the site list.
    pub fn from_packed(
        config: &ModelConfig,
        qset: &QuantizerSet,
        packed: Vec<Option<PackedIntTensor>>,
    ) -> Result<Self> {
        let sites = quantizer_sites(config);
        if packed.len() != sites.len() || qset.len() != sites.len() {
            return Err(Error::InvalidArgument("packed weights do not match the site list".into()));
        }
        let mut weights = Vec::with_capacity(sites.len());
        let mut activations = Vec::with_capacity(sites.len());
        for ((site, state), p) in sites.iter().zip(qset.states()).zip(packed) {
            match site.role() {
                Role::Weight => {
                    if state.active != p.is_some() {
                        return Err(Error::Format(format!(
                            "packed payload presence disagrees with quantizer `{}`",
                            site.id
                        )));
                    }
                    weights.push(match p {
                        Some(packed) => {
                            let grid = packed.grid()?;
                            if packed.bits() != state.bits || packed.bounds() != (state.lower, state.upper) {
                                return Err(Error::Format(format!(
                                    "packed weight `{}` disagrees with its quantizer bounds",
                                    site.id
                                )));
                            }
                            let codes = packed.unpack();
                            Some(WeightCodes { packed, codes, grid })
                        }
                        None => None,
                    });
                    activations.push(None);
                }
                Role::Activation => {
                    if p.is_some() {
                        return Err(Error::Format(format!("activation site `{}` has a payload", site.id)));
                    }
                    weights.push(None);
                    activations.push(if state.active { Some(state.grid()?) } else { None });
                }
            }
        }
        Ok(Self { weights, activations })
    }

    pub fn packed_weight(&self, site: usize) -> Option<&PackedIntTensor> {
        self.weights[site].as_ref().map(|w| &w.packed)
    }

    fn activation<'a>(&self, site: usize, values: &'a [f32]) -> Operand<'a> {
        match self.activations[site] {
            Some(g) => Operand::Codes(values.iter().map(|&v| g.code(v) as u8).collect(), g),
            None => Operand::Float(values),
        }
    }

    fn weight<'a>(&'a self, site: usize, fp: &'a [f32]) -> Operand<'a> {
        match &self.weights[site] {
            Some(w) => Operand::Codes(std::borrow::Cow::Borrowed(&w.codes), w.grid),
            None => Operand::Float(fp),
        }
    }

    /// `x · wᵀ + bias` with `x: [rows, in]`, `w: [out, in]`.
    pub fn linear(
        &self,
        x: &Tensor,
        x_site: usize,
        w: &Tensor,
        w_site: usize,
        bias: &Tensor,
    ) -> Result<Tensor> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bias.numel() != ws[0] {
            return Err(Error::shape("packed linear", xs, ws));
        }
        let (rows, k, n) = (xs[0], xs[1], ws[0]);
        let a = self.activation(x_site, x.data());
        let b = self.weight(w_site, w.data());
        let mut out = vec![0.0f32; rows * n];
        // Rows are independent; split them for parallelism.
        let chunk = rows.div_ceil(rayon::current_num_threads().max(1)).max(16);
        out.par_chunks_mut(chunk * n)
            .enumerate()
            .try_for_each(|(ci, dst)| {
                let r0 = ci * chunk;
                let r = dst.len() / n;
                product(&a.slice(r0 * k, r * k), &b, r, k, n, true, dst)
            })?;
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bias.data()).for_each(|(o, b)| *o += b);
        }
        Tensor::new(vec![rows, n], out)
    }

    /// Batched `a · b` (or `a · bᵀ`) over activation operands.
    pub fn batched_matmul(
        &self,
        a: &Tensor,
        a_site: usize,
        b: &Tensor,
        b_site: usize,
        b_transposed: bool,
    ) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("packed batched matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if b_transposed { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("packed batched matmul", sa, sb));
        }
        let qa = self.activation(a_site, a.data());
        let qb = self.activation(b_site, b.data());
        let mut out = vec![0.0f32; batch * m * n];
        out.par_chunks_mut(m * n).enumerate().try_for_each(|(i, dst)| {
            product(
                &qa.slice(i * m * k, m * k),
                &qb.slice(i * k * n, k * n),
                m,
                k,
                n,
                b_transposed,
                dst,
            )
        })?;
        Tensor::new(vec![batch, m, n], out)
    }
}

impl Operand<'_> {
    fn slice(&self, start: usize, len: usize) -> Operand<'_> {
        match self {
            Operand::Codes(c, g) => Operand::Codes(std::borrow::Cow::Borrowed(&c[start..start + len]), *g),
            Operand::Float(f) => Operand::Float(&f[start..start + len]),
        }
    }

    fn dequantized(&self) -> std::borrow::Cow<'_, [f32]> {
        match self {
            Operand::Codes(c, g) => c.iter().map(|&k| g.level(k as u32)).collect(),
            Operand::Float(f) => std::borrow::Cow::Borrowed(f),
        }
    }
}

/// `out = a · b` for row-major `a: m×k`; `b` is `k×n`, or `n×k` when
/// `b_transposed`. Integer accumulation when both operands carry codes,
/// otherwise a float product of the dequantized values.
fn product(a: &Operand, b: &Operand, m: usize, k: usize, n: usize, b_transposed: bool, out: &mut [f32]) -> Result<()> {
    match (a, b) {
        (Operand::Codes(ca, ga), Operand::Codes(cb, gb)) => {
            let ma = CodeMatrix::row_major(ca, m, k, *ga);
            let mb = if b_transposed {
                CodeMatrix::row_major(cb, n, k, *gb).transposed()
            } else {
                CodeMatrix::row_major(cb, k, n, *gb)
            };
            int_matmul(&ma, &mb, out)
        }
        _ => {
            let (da, db) = (a.dequantized(), b.dequantized());
            let sb = if b_transposed {
                Strided::row_major(&db, k).transposed()
            } else {
                Strided::row_major(&db, n)
            };
            gemm(m, k, n, Strided::row_major(&da, k), sb, out, 0.0);
            Ok(())
        }
    }
}
