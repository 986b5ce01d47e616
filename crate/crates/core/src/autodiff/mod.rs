//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operator appends one node to the [`Tape`]; nodes are therefore in
//! topological order and [`Tape::backward`] visits each exactly once, in
//! reverse. Only leaves created with `requires_grad` accumulate gradients,
//! and operators skip the adjoint work for inputs that cannot reach one.

pub mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quant::fake::{ste_bound_partials, QuantGrid};
use crate::quant::int_gemm::{int_matmul, CodeMatrix};
use crate::tensor::Tensor;
use kernels::{gemm, Strided};

pub use kernels::{invert_permutation, pixel_shuffle_index};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulSpec {
    a: Var,
    b: Var,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    /// `b` is stored as `[.., n, k]` and read transposed.
    b_transposed: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddConst(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul(MatMulSpec),
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Conv3x3 {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Gather {
        x: Var,
        index: Arc<[u32]>,
    },
    FakeQuant {
        x: Var,
        lower: Var,
        upper: Var,
        levels: u32,
        codes: Vec<f32>,
        /// Codes are exact integers (not a replayed surrogate).
        integral: bool,
    },
    Sum(Var),
    MeanAbsDiff {
        x: Var,
        target: Arc<Tensor>,
    },
    FeatureDistance {
        x: Var,
        target_unit: Vec<f32>,
        x_norm: f64,
        distance: f64,
    },
}

struct Node {
    value: Option<Arc<Tensor>>,
    op: Op,
    requires_grad: bool,
}

/// How the fake-quantization operator rounds.
///
/// `Record` and `Replay` support finite-difference checks of the STE
/// gradients: replaying frozen residuals `round(x) - x` turns every
/// quantizer into the smooth surrogate whose exact derivative is the
/// STE gradient.
enum Rounding {
    Exact,
    Record(Vec<Vec<f32>>),
    Replay { residuals: Vec<Vec<f32>>, cursor: usize },
}

/// Recording of a differentiable computation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
    rounding: Rounding,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            rounding: Rounding::Exact,
        }
    }

    /// Inference tape: no leaf may require gradients and intermediate values
    /// may be released with [`Tape::release_since`].
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── rounding surrogate control ──────────────────────────────────────

    pub fn record_rounding(&mut self) {
        self.rounding = Rounding::Record(Vec::new());
    }

    pub fn take_rounding_record(&mut self) -> Vec<Vec<f32>> {
        match std::mem::replace(&mut self.rounding, Rounding::Exact) {
            Rounding::Record(r) => r,
            Rounding::Replay { residuals, .. } => residuals,
            Rounding::Exact => Vec::new(),
        }
    }

    pub fn replay_rounding(&mut self, residuals: Vec<Vec<f32>>) {
        self.rounding = Rounding::Replay {
            residuals,
            cursor: 0,
        };
    }

    // ── node access ─────────────────────────────────────────────────────

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0]
            .value
            .as_deref()
            .expect("value of a released tape node")
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        self.nodes[v.0]
            .value
            .clone()
            .expect("value of a released tape node")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Index of the next node to be created.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// On a no-grad tape, drops the values of nodes created since `mark`
    /// except those in `keep`. Has no effect when gradients are enabled.
    pub fn release_since(&mut self, mark: usize, keep: &[Var]) {
        if self.grad_enabled {
            return;
        }
        for i in mark..self.nodes.len() {
            if !keep.iter().any(|k| k.0 == i) {
                self.nodes[i].value = None;
                self.nodes[i].op = Op::Leaf;
            }
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn leaf_arc(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f32, requires_grad: bool) -> Var {
        self.leaf(Tensor::scalar(value), requires_grad)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(Error::shape("add_const", ta.shape(), c.shape()));
        }
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + c.data()[i]);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddConst(a), rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = *tx.shape().last().unwrap();
        if tb.numel() != cols {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + tb.data()[i % cols]);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    // ── matrix products ─────────────────────────────────────────────────

    fn matmul_spec(&self, a: Var, b: Var, b_transposed: bool) -> Result<MatMulSpec> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if b_transposed {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let ba: usize = sa[..sa.len() - 2].iter().product();
        let bb: usize = sb[..sb.len() - 2].iter().product();
        let batch = ba.max(bb);
        let same_lead = sa[..sa.len() - 2] == sb[..sb.len() - 2];
        if !(same_lead || ba == 1 || bb == 1) {
            return Err(Error::shape("matmul", sa, sb));
        }
        Ok(MatMulSpec {
            a,
            b,
            batch,
            m,
            k,
            n,
            a_batched: ba > 1,
            b_batched: bb > 1,
            b_transposed,
        })
    }

    /// Codes and grids of two fake-quantized operands. Their product is then
    /// evaluated with the integer kernel, so the simulated forward matches
    /// integer deployment bit for bit.
    fn integral_codes(&self, a: Var, b: Var) -> Option<((Vec<u8>, QuantGrid), (Vec<u8>, QuantGrid))> {
        let codes = |v: Var| match &self.nodes[v.0].op {
            Op::FakeQuant {
                lower,
                upper,
                levels,
                codes,
                integral: true,
                ..
            } => {
                let bits = (levels + 1).trailing_zeros() as u8;
                let grid = QuantGrid::new(self.value(*lower).item(), self.value(*upper).item(), bits).ok()?;
                Some((codes.iter().map(|&c| c as u8).collect(), grid))
            }
            _ => None,
        };
        Some((codes(a)?, codes(b)?))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let spec = self.matmul_spec(a, b, b_transposed)?;
        let MatMulSpec { batch, m, k, n, .. } = spec;
        let (ta, tb) = (self.value(a), self.value(b));
        let lead = if ta.ndim() >= tb.ndim() {
            &ta.shape()[..ta.ndim() - 2]
        } else {
            &tb.shape()[..tb.ndim() - 2]
        };
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0f32; batch * m * n];
        if let Some((ca, cb)) = self.integral_codes(a, b) {
            for bi in 0..batch {
                let a_off = if spec.a_batched { bi * m * k } else { 0 };
                let b_off = if spec.b_batched { bi * k * n } else { 0 };
                let ma = CodeMatrix::row_major(&ca.0[a_off..a_off + m * k], m, k, ca.1);
                let mb = if b_transposed {
                    CodeMatrix::row_major(&cb.0[b_off..b_off + k * n], n, k, cb.1).transposed()
                } else {
                    CodeMatrix::row_major(&cb.0[b_off..b_off + k * n], k, n, cb.1)
                };
                int_matmul(&ma, &mb, &mut out[bi * m * n..(bi + 1) * m * n])?;
            }
            let out = Tensor::new(shape, out)?;
            let rg = self.rg(&[a, b]);
            return Ok(self.push(out, Op::MatMul(spec), rg));
        }
        for bi in 0..batch {
            let a_off = if spec.a_batched { bi * m * k } else { 0 };
            let b_off = if spec.b_batched { bi * k * n } else { 0 };
            let av = Strided::row_major(&ta.data()[a_off..a_off + m * k], k);
            let bv = if b_transposed {
                Strided::row_major(&tb.data()[b_off..b_off + k * n], k).transposed()
            } else {
                Strided::row_major(&tb.data()[b_off..b_off + k * n], n)
            };
            gemm(m, k, n, av, bv, &mut out[bi * m * n..(bi + 1) * m * n], 0.0);
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(spec), rg))
    }

    /// Batched `a · b` with shapes `[.., m, k]` and `[.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` with `b` stored as `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x · wᵀ + bias` for `x: [rows, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ── nonlinearities and normalization ────────────────────────────────

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_fn(tx.shape(), |i| kernels::gelu(tx.data()[i]));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape().last().unwrap();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0f32; tx.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Same-resolution 3×3 convolution with zero padding 1.
    ///
    /// `x: [cin, h, w]`, `weight: [cout, cin, 3, 3]`, `bias: [cout]`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape("conv3x3", xs, ws));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv3x3 bias", ws, self.shape(b)));
            }
        }
        let col = kernels::im2col3x3(tx.data(), cin, h, w);
        let mut out = vec![0.0f32; cout * h * w];
        if let Some(b) = bias {
            let tb = self.value(b);
            for (c, plane) in out.chunks_mut(h * w).enumerate() {
                plane.fill(tb.data()[c]);
            }
        }
        gemm(
            cout,
            cin * 9,
            h * w,
            Strided::row_major(tw.data(), cin * 9),
            Strided::row_major(&col, h * w),
            &mut out,
            1.0,
        );
        let out = Tensor::new(vec![cout, h, w], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(out, Op::Conv3x3 { x, weight, bias }, rg))
    }

    // ── data movement ───────────────────────────────────────────────────

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape("gather", &[index.len()], shape));
        }
        if index.iter().any(|&i| i as usize >= tx.numel()) {
            return Err(Error::InvalidArgument("gather index out of range".into()));
        }
        let data = index.iter().map(|&i| tx.data()[i as usize]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        let index: Arc<[u32]> = (0..n as u32).collect();
        self.gather(x, index, shape)
    }

    /// Depth-to-space: `[c·r², h, w]` to `[c, r·h, r·w]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || r == 0 || s[0] % (r * r) != 0 {
            return Err(Error::InvalidArgument(format!(
                "pixel_shuffle: {s:?} channels not divisible by r²={}",
                r * r
            )));
        }
        let c = s[0] / (r * r);
        let index: Arc<[u32]> = pixel_shuffle_index(c, s[1], s[2], r).into();
        self.gather(x, index, &[c, s[1] * r, s[2] * r])
    }

    // ── quantization ────────────────────────────────────────────────────

    /// Fake quantization with scalar bound nodes `lower` and `upper`.
    pub fn fake_quant(&mut self, x: Var, lower: Var, upper: Var, bits: u8) -> Result<Var> {
        let (l, u) = (self.value(lower).item(), self.value(upper).item());
        let grid = QuantGrid::new(l, u, bits)?;
        let tx = self.value_arc(x);
        tx.ensure_finite("fake_quant input")?;
        let mut codes = Vec::with_capacity(tx.numel());
        let mut out = Vec::with_capacity(tx.numel());
        match &mut self.rounding {
            Rounding::Exact => {
                for &v in tx.data() {
                    let k = grid.code(v);
                    codes.push(k as f32);
                    out.push(grid.level(k));
                }
            }
            Rounding::Record(rec) => {
                let mut res = Vec::with_capacity(tx.numel());
                for &v in tx.data() {
                    let k = grid.code(v);
                    res.push(k as f32 - grid.scaled(v));
                    codes.push(k as f32);
                    out.push(grid.level(k));
                }
                rec.push(res);
            }
            Rounding::Replay { residuals, cursor } => {
                let res = residuals.get(*cursor).ok_or_else(|| {
                    Error::InvalidArgument("rounding replay ran past the record".into())
                })?;
                if res.len() != tx.numel() {
                    return Err(Error::shape("rounding replay", &[res.len()], tx.shape()));
                }
                *cursor += 1;
                // `clip(v) + c·step` in f64, so that a bound perturbation is
                // not swamped by rounding shared across the tensor
                let (l, u) = (grid.lower as f64, grid.upper as f64);
                let n = grid.levels() as f64;
                for (&v, &c) in tx.data().iter().zip(res) {
                    let vc = grid.clip(v) as f64;
                    codes.push(((vc - l) * n / (u - l) + c as f64) as f32);
                    out.push((vc + c as f64 * (u - l) / n) as f32);
                }
            }
        }
        let integral = !matches!(self.rounding, Rounding::Replay { .. });
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, lower, upper]);
        Ok(self.push(
            out,
            Op::FakeQuant {
                x,
                lower,
                upper,
                levels: grid.levels(),
                codes,
                integral,
            },
            rg,
        ))
    }

    // ── reductions and losses ───────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    /// `Σ|x − target| / numel`.
    pub fn mean_abs_diff(&mut self, x: Var, target: Arc<Tensor>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != target.shape() {
            return Err(Error::shape("mean_abs_diff", tx.shape(), target.shape()));
        }
        let s: f64 = tx
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        let value = s / tx.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(value as f32),
            Op::MeanAbsDiff { x, target },
            rg,
        ))
    }

    /// `‖x/‖x‖ − t/‖t‖‖₂ / numel` against a constant target.
    ///
    /// `id` tags the [`Error::DegenerateFeature`] raised for zero-norm inputs.
    pub fn feature_distance(&mut self, x: Var, target: &Tensor, id: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != target.shape() {
            return Err(Error::shape("feature_distance", tx.shape(), target.shape()));
        }
        let norm = |d: &[f32]| d.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let (xn, tn) = (norm(tx.data()), norm(target.data()));
        if xn == 0.0 || tn == 0.0 || !xn.is_finite() || !tn.is_finite() {
            return Err(Error::DegenerateFeature(id));
        }
        let target_unit: Vec<f32> = target.data().iter().map(|&v| (v as f64 / tn) as f32).collect();
        let distance = tx
            .data()
            .iter()
            .zip(&target_unit)
            .map(|(&a, &b)| {
                let d = a as f64 / xn - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let value = distance / tx.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(value as f32),
            Op::FeatureDistance {
                x,
                target_unit,
                x_norm: xn,
                distance,
            },
            rg,
        ))
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Propagates d`loss` to every leaf that requires gradients, adding to
    /// any gradient already accumulated there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut g: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(out_grad) = g[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&out_grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(out_grad),
                }
                continue;
            }
            self.node_backward(i, &out_grad, &mut g);
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, og: &[f32], g: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_deref().expect("released node on grad tape");
        // Adjoint buffer for an input, or None if no gradient is needed there.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = val(v).numel();
                    Some(g[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(og).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(og).for_each(|(x, y)| *x += y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data().to_vec(), val(*b).data().to_vec());
                if let Some(ga) = slot!(*a) {
                    for j in 0..og.len() {
                        ga[j] += og[j] * tb[j];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for j in 0..og.len() {
                        gb[j] += og[j] * ta[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(og).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(og).for_each(|(x, y)| *x += y);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(og).for_each(|(a, b)| *a += b);
                }
                let cols = val(*bias).numel();
                if let Some(gb) = slot!(*bias) {
                    for (j, v) in og.iter().enumerate() {
                        gb[j % cols] += v;
                    }
                }
            }
            Op::MatMul(spec) => matmul_backward(spec, val(spec.a), val(spec.b), og, nodes, g),
            Op::Softmax(x) => {
                let y = nodes[i].value.as_deref().unwrap();
                let d = *y.shape().last().unwrap();
                if let Some(gx) = slot!(*x) {
                    for ((yr, gr), xr) in y.data().chunks(d).zip(og.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = val(*x);
                if let Some(gx) = slot!(*x) {
                    for j in 0..og.len() {
                        gx[j] += og[j] * kernels::gelu_grad(tx.data()[j]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data().to_vec();
                if let Some(gg) = slot!(*gamma) {
                    for (j, (o, h)) in og.iter().zip(xhat).enumerate() {
                        gg[j % d] += o * h;
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for (j, o) in og.iter().enumerate() {
                        gb[j % d] += o;
                    }
                }
                if let Some(gx) = slot!(*x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let o = &og[r * d..(r + 1) * d];
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = (o[j] * gam[j]) as f64;
                            mean_dh += dh;
                            mean_dh_h += dh * h[j] as f64;
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = (o[j] * gam[j]) as f64;
                            gx[r * d + j] +=
                                (rs as f64 * (dh - mean_dh - h[j] as f64 * mean_dh_h)) as f32;
                        }
                    }
                }
            }
            Op::Conv3x3 { x, weight, bias } => {
                let (tx, tw) = (val(*x), val(*weight));
                let (cin, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let cout = tw.shape()[0];
                let hw = h * w;
                if let Some(b) = bias {
                    if let Some(gb) = slot!(*b) {
                        for (c, plane) in og.chunks(hw).enumerate() {
                            gb[c] += plane.iter().sum::<f32>();
                        }
                    }
                }
                let need_w = nodes[weight.0].requires_grad;
                let need_x = nodes[x.0].requires_grad;
                if need_w {
                    let col = kernels::im2col3x3(tx.data(), cin, h, w);
                    let gw = slot!(*weight).unwrap();
                    gemm(
                        cout,
                        hw,
                        cin * 9,
                        Strided::row_major(og, hw),
                        Strided::row_major(&col, hw).transposed(),
                        gw,
                        1.0,
                    );
                }
                if need_x {
                    let mut dcol = vec![0.0f32; cin * 9 * hw];
                    gemm(
                        cin * 9,
                        cout,
                        hw,
                        Strided::row_major(tw.data(), cin * 9).transposed(),
                        Strided::row_major(og, hw),
                        &mut dcol,
                        0.0,
                    );
                    let gx = slot!(*x).unwrap();
                    kernels::col2im3x3(&dcol, cin, h, w, gx);
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = slot!(*x) {
                    for (o, &src) in og.iter().zip(index.iter()) {
                        gx[src as usize] += o;
                    }
                }
            }
            Op::FakeQuant {
                x,
                lower,
                upper,
                levels,
                codes,
                ..
            } => {
                let tx = val(*x);
                let (l, u) = (val(*lower).item(), val(*upper).item());
                if let Some(gx) = slot!(*x) {
                    for (j, &v) in tx.data().iter().enumerate() {
                        if v >= l && v <= u {
                            gx[j] += og[j];
                        }
                    }
                }
                let need_l = nodes[lower.0].requires_grad;
                let need_u = nodes[upper.0].requires_grad;
                if need_l || need_u {
                    let (mut sl, mut su) = (0.0f64, 0.0f64);
                    let n = *levels as f64;
                    for ((&v, &k), &o) in tx.data().iter().zip(codes).zip(og) {
                        let (dl, du) = ste_bound_partials(v as f64, l as f64, u as f64, n, k as f64);
                        sl += o as f64 * dl;
                        su += o as f64 * du;
                    }
                    if let Some(gl) = slot!(*lower) {
                        gl[0] += sl as f32;
                    }
                    if let Some(gu) = slot!(*upper) {
                        gu[0] += su as f32;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|v| *v += og[0]);
                }
            }
            Op::MeanAbsDiff { x, target } => {
                let tx = val(*x);
                let scale = og[0] / tx.numel() as f32;
                if let Some(gx) = slot!(*x) {
                    for (j, (&a, &b)) in tx.data().iter().zip(target.data()).enumerate() {
                        let d = a - b;
                        if d > 0.0 {
                            gx[j] += scale;
                        } else if d < 0.0 {
                            gx[j] -= scale;
                        }
                    }
                }
            }
            Op::FeatureDistance {
                x,
                target_unit,
                x_norm,
                distance,
            } => {
                let tx = val(*x);
                if *distance == 0.0 {
                    return;
                }
                let n = tx.numel() as f64;
                let xn = *x_norm;
                let unit: Vec<f64> = tx.data().iter().map(|&v| v as f64 / xn).collect();
                let r: Vec<f64> = unit.iter().zip(target_unit).map(|(a, &b)| a - b as f64).collect();
                let proj: f64 = unit.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / distance;
                let scale = og[0] as f64 / n / xn;
                if let Some(gx) = slot!(*x) {
                    for j in 0..gx.len() {
                        gx[j] += (scale * (r[j] / distance - unit[j] * proj)) as f32;
                    }
                }
            }
        }
    }
}

fn matmul_backward(
    spec: &MatMulSpec,
    ta: &Tensor,
    tb: &Tensor,
    og: &[f32],
    nodes: &[Node],
    g: &mut [Option<Vec<f32>>],
) {
    let MatMulSpec {
        a,
        b,
        batch,
        m,
        k,
        n,
        a_batched,
        b_batched,
        b_transposed,
    } = *spec;
    if nodes[a.0].requires_grad {
        let ga = g[a.0].get_or_insert_with(|| vec![0.0; ta.numel()]);
        for bi in 0..batch {
            let a_off = if a_batched { bi * m * k } else { 0 };
            let b_off = if b_batched { bi * k * n } else { 0 };
            let bdat = &tb.data()[b_off..b_off + k * n];
            // dA = dC · Bᵀ, where B is k×n (or stored n×k when transposed)
            let bt = if b_transposed {
                Strided::row_major(bdat, k)
            } else {
                Strided::row_major(bdat, n).transposed()
            };
            gemm(
                m,
                n,
                k,
                Strided::row_major(&og[bi * m * n..(bi + 1) * m * n], n),
                bt,
                &mut ga[a_off..a_off + m * k],
                1.0,
            );
        }
    }
    if nodes[b.0].requires_grad {
        let gb = g[b.0].get_or_insert_with(|| vec![0.0; tb.numel()]);
        for bi in 0..batch {
            let a_off = if a_batched { bi * m * k } else { 0 };
            let b_off = if b_batched { bi * k * n } else { 0 };
            let adat = Strided::row_major(&ta.data()[a_off..a_off + m * k], k);
            let gdat = Strided::row_major(&og[bi * m * n..(bi + 1) * m * n], n);
            if b_transposed {
                // dS (n×k) = dCᵀ · A
                gemm(n, m, k, gdat.transposed(), adat, &mut gb[b_off..b_off + k * n], 1.0);
            } else {
                // dB (k×n) = Aᵀ · dC
                gemm(k, m, n, adat.transposed(), gdat, &mut gb[b_off..b_off + k * n], 1.0);
            }
        }
    }
}
