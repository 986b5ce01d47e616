use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::deploy::PackedModel;
use crate::model::sites::{block_prefix, site_index, QuantizerSet, SiteKind};
use crate::model::weights::ModelWeights;
use crate::model::window;
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;

/// Bound nodes of every active quantizer, registered on one tape.
pub struct BoundVars {
    vars: Vec<Option<(Var, Var, u8)>>,
}

impl BoundVars {
    /// Registers `(l, u)` leaves; they require gradients when `trainable`
    /// and the quantizer itself is trainable.
    pub fn bind(tape: &mut Tape, qset: &QuantizerSet, trainable: bool) -> Self {
        let vars = qset
            .states()
            .iter()
            .map(|s| {
                s.active.then(|| {
                    let rg = trainable && s.trainable;
                    (tape.scalar(s.lower, rg), tape.scalar(s.upper, rg), s.bits)
                })
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, site: usize) -> Option<(Var, Var, u8)> {
        self.vars[site]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// `(dL/dl, dL/du)` per site; zero for sites that received no gradient.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<(f32, f32)>> {
        self.vars
            .iter()
            .map(|v| {
                v.map(|(l, u, _)| {
                    let g = |x: Var| tape.grad(x).map_or(0.0, |g| g[0]);
                    (g(l), g(u))
                })
            })
            .collect()
    }
}

/// Arithmetic used by the quantized layers.
#[derive(Clone, Copy)]
pub enum Precision<'a> {
    Fp,
    FakeQuant(&'a BoundVars),
    PackedInt(&'a PackedModel),
}

/// Receives each activation right before its quantizer.
pub trait ActivationObserver {
    fn observe(&mut self, site: usize, values: &[f32]) -> Result<()>;
}

pub struct ForwardOutput {
    /// Reconstructed image `[3, r·H, r·W]`.
    pub output: Var,
    /// Output of each RSTB as `[H'·W', C]` tokens at the padded resolution.
    pub taps: Vec<Var>,
}

struct Ctx<'a, 'o> {
    weights: &'a ModelWeights,
    precision: Precision<'a>,
    observer: Option<&'o mut dyn ActivationObserver>,
}

impl Ctx<'_, '_> {
    fn param(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.leaf_arc(self.weights.get(name)?.clone(), false))
    }

    fn observe(&mut self, tape: &Tape, x: Var, site: usize) -> Result<()> {
        if let Some(obs) = self.observer.as_deref_mut() {
            obs.observe(site, tape.value(x).data())?;
        }
        Ok(())
    }

    fn fake_quant(&self, tape: &mut Tape, x: Var, site: usize) -> Result<Var> {
        match self.precision {
            Precision::FakeQuant(b) => match b.get(site) {
                Some((l, u, bits)) => tape.fake_quant(x, l, u, bits),
                None => Ok(x),
            },
            _ => Ok(x),
        }
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.param(tape, &format!("{name}.weight"))?;
        let b = self.param(tape, &format!("{name}.bias"))?;
        tape.conv3x3(x, w, Some(b))
    }

    fn norm(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let g = self.param(tape, &format!("{name}.weight"))?;
        let b = self.param(tape, &format!("{name}.bias"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn linear(&mut self, tape: &mut Tape, x: Var, name: &str, w_site: usize, x_site: usize) -> Result<Var> {
        self.observe(tape, x, x_site)?;
        let w_name = format!("{name}.weight");
        let b_name = format!("{name}.bias");
        if let Precision::PackedInt(pm) = self.precision {
            let out = pm.linear(
                tape.value(x),
                x_site,
                self.weights.get(&w_name)?,
                w_site,
                self.weights.get(&b_name)?,
            )?;
            return Ok(tape.constant(out));
        }
        let w = self.param(tape, &w_name)?;
        let b = self.param(tape, &b_name)?;
        let xq = self.fake_quant(tape, x, x_site)?;
        let wq = self.fake_quant(tape, w, w_site)?;
        tape.linear(xq, wq, Some(b))
    }

    fn batched_matmul(
        &mut self,
        tape: &mut Tape,
        a: Var,
        a_site: usize,
        b: Var,
        b_site: usize,
        b_transposed: bool,
    ) -> Result<Var> {
        self.observe(tape, a, a_site)?;
        self.observe(tape, b, b_site)?;
        if let Precision::PackedInt(pm) = self.precision {
            let out = pm.batched_matmul(tape.value(a), a_site, tape.value(b), b_site, b_transposed)?;
            return Ok(tape.constant(out));
        }
        let aq = self.fake_quant(tape, a, a_site)?;
        let bq = self.fake_quant(tape, b, b_site)?;
        if b_transposed {
            tape.matmul_nt(aq, bq)
        } else {
            tape.matmul(aq, bq)
        }
    }
}

/// Per-resolution index maps shared by every layer.
struct Plan {
    h: usize,
    w: usize,
    num_windows: usize,
    to_tokens: Arc<[u32]>,
    to_chw: Arc<[u32]>,
    partition: [Arc<[u32]>; 2],
    reverse: [Arc<[u32]>; 2],
    masks: [Vec<f32>; 2],
    split: [Arc<[u32]>; 3],
    merge: Arc<[u32]>,
}

impl Plan {
    fn new(weights: &ModelWeights, h: usize, w: usize) -> Result<Self> {
        let cfg = weights.config();
        let (c, m) = (cfg.embed_dim, cfg.window_size);
        let shifts = [0, m / 2];
        let num_windows = (h / m) * (w / m);
        let n = m * m;
        let (heads, d) = (cfg.num_heads, cfg.head_dim());
        Ok(Self {
            h,
            w,
            num_windows,
            to_tokens: window::chw_to_tokens_index(c, h, w).into(),
            to_chw: window::tokens_to_chw_index(c, h, w).into(),
            partition: [
                window::partition_index(h, w, c, m, shifts[0])?.into(),
                window::partition_index(h, w, c, m, shifts[1])?.into(),
            ],
            reverse: [
                window::reverse_index(h, w, c, m, shifts[0])?.into(),
                window::reverse_index(h, w, c, m, shifts[1])?.into(),
            ],
            masks: [
                window::attention_mask(h, w, m, shifts[0])?,
                window::attention_mask(h, w, m, shifts[1])?,
            ],
            split: [0, 1, 2].map(|p| window::head_split_index(num_windows, n, heads, d, p).into()),
            merge: window::head_merge_index(num_windows, n, heads, d).into(),
        })
    }
}

/// Runs the network on one `[3, H, W]` image.
///
/// Inputs whose sides are not window multiples are reflect-padded on the
/// bottom and right and the output is cropped back to `[3, r·H, r·W]`.
pub fn forward(
    tape: &mut Tape,
    weights: &ModelWeights,
    input: &Tensor,
    precision: Precision,
    observer: Option<&mut dyn ActivationObserver>,
) -> Result<ForwardOutput> {
    let cfg = weights.config().clone();
    let s = input.shape();
    if s.len() != 3 || s[0] != cfg.in_chans {
        return Err(Error::InvalidArgument(format!("expected a [3, H, W] image, got {s:?}")));
    }
    input.ensure_finite("model input")?;
    if let Precision::FakeQuant(b) = precision {
        if b.len() != cfg.num_stl() * SiteKind::PER_STL {
            return Err(Error::MissingQuantizer(format!(
                "{} bound pairs for {} sites",
                b.len(),
                cfg.num_stl() * SiteKind::PER_STL
            )));
        }
    }
    let (h, w) = (s[1], s[2]);
    let (hp, wp) = (cfg.padded_extent(h), cfg.padded_extent(w));
    let r = cfg.upscale;
    let mut ctx = Ctx {
        weights,
        precision,
        observer,
    };

    let mut x = tape.leaf(input.clone(), false);
    if (hp, wp) != (h, w) {
        let idx = window::reflect_pad_index(3, h, w, hp - h, wp - w)?;
        x = tape.gather(x, idx.into(), &[3, hp, wp])?;
    }
    let mean = |sign: f32, h: usize, w: usize| {
        Tensor::from_fn(&[3, h, w], |i| sign * cfg.img_mean[i / (h * w)])
    };
    x = tape.add_const(x, &mean(-1.0, hp, wp))?;

    let plan = Plan::new(weights, hp, wp)?;
    let c = cfg.embed_dim;
    let f0 = ctx.conv(tape, x, "conv_first")?;
    let tokens = tape.gather(f0, plan.to_tokens.clone(), &[hp * wp, c])?;
    let mut t = ctx.norm(tape, tokens, "patch_embed.norm")?;

    let mut taps = Vec::with_capacity(cfg.num_rstb);
    for i in 0..cfg.num_rstb {
        let block_in = t;
        for j in 0..cfg.stl_per_rstb {
            let mark = tape.mark();
            t = swin_layer(tape, &mut ctx, &plan, t, i, j)?;
            tape.release_since(mark, &[t]);
        }
        let img = tape.gather(t, plan.to_chw.clone(), &[c, hp, wp])?;
        let img = ctx.conv(tape, img, &format!("layers.{i}.conv"))?;
        let back = tape.gather(img, plan.to_tokens.clone(), &[hp * wp, c])?;
        t = tape.add(back, block_in)?;
        taps.push(t);
    }

    let t = ctx.norm(tape, t, "norm")?;
    let img = tape.gather(t, plan.to_chw.clone(), &[c, hp, wp])?;
    let body = ctx.conv(tape, img, "conv_after_body")?;
    let body = tape.add(body, f0)?;
    let up = ctx.conv(tape, body, "upsample.0")?;
    let mut out = tape.pixel_shuffle(up, r)?;
    out = tape.add_const(out, &mean(1.0, r * hp, r * wp))?;
    if (hp, wp) != (h, w) {
        let idx = window::crop_index(3, r * hp, r * wp, r * h, r * w);
        out = tape.gather(out, idx.into(), &[3, r * h, r * w])?;
    }
    Ok(ForwardOutput { output: out, taps })
}

fn swin_layer(tape: &mut Tape, ctx: &mut Ctx, plan: &Plan, t: Var, i: usize, j: usize) -> Result<Var> {
    let cfg = ctx.weights.config().clone();
    let p = block_prefix(i, j);
    let site = |k: SiteKind| site_index(&cfg, i, j, k);
    let shifted = usize::from(cfg.shift_for(j) != 0);
    let (c, n, heads, d) = (cfg.embed_dim, cfg.window_tokens(), cfg.num_heads, cfg.head_dim());
    let (hw, nw) = (plan.h * plan.w, plan.num_windows);

    let x = ctx.norm(tape, t, &format!("{p}.norm1"))?;
    let win = tape.gather(x, plan.partition[shifted].clone(), &[nw * n, c])?;
    let qkv = ctx.linear(
        tape,
        win,
        &format!("{p}.attn.qkv"),
        site(SiteKind::QkvWeight),
        site(SiteKind::QkvInput),
    )?;
    let q = tape.gather(qkv, plan.split[0].clone(), &[nw * heads, n, d])?;
    let k = tape.gather(qkv, plan.split[1].clone(), &[nw * heads, n, d])?;
    let v = tape.gather(qkv, plan.split[2].clone(), &[nw * heads, n, d])?;
    let q = tape.scale(q, 1.0 / (d as f32).sqrt());

    let scores = ctx.batched_matmul(tape, q, site(SiteKind::Query), k, site(SiteKind::Key), true)?;
    let table = ctx.weights.get(&format!("{p}.attn.relative_position_bias_table"))?;
    let bias = window::expand_position_bias(table.data(), cfg.window_size, heads);
    let mask = &plan.masks[shifted];
    let nn = n * n;
    let additive = Tensor::from_fn(&[nw * heads, n, n], |idx| {
        let (wh, e) = (idx / nn, idx % nn);
        bias[(wh % heads) * nn + e] + mask[(wh / heads) * nn + e]
    });
    let scores = tape.add_const(scores, &additive)?;
    let attn = tape.softmax(scores);
    let out = ctx.batched_matmul(tape, attn, site(SiteKind::AttnMap), v, site(SiteKind::Value), false)?;
    let merged = tape.gather(out, plan.merge.clone(), &[nw * n, c])?;
    let proj = ctx.linear(
        tape,
        merged,
        &format!("{p}.attn.proj"),
        site(SiteKind::ProjWeight),
        site(SiteKind::ProjInput),
    )?;
    let back = tape.gather(proj, plan.reverse[shifted].clone(), &[hw, c])?;
    let t = tape.add(t, back)?;

    let y = ctx.norm(tape, t, &format!("{p}.norm2"))?;
    let h1 = ctx.linear(
        tape,
        y,
        &format!("{p}.mlp.fc1"),
        site(SiteKind::Fc1Weight),
        site(SiteKind::Fc1Input),
    )?;
    let g = tape.gelu(h1);
    let h2 = ctx.linear(
        tape,
        g,
        &format!("{p}.mlp.fc2"),
        site(SiteKind::Fc2Weight),
        site(SiteKind::Fc2Input),
    )?;
    tape.add(t, h2)
}

/// Forward pass without gradient recording; returns the output image and
/// the RSTB taps.
pub fn run(
    weights: &ModelWeights,
    input: &Tensor,
    mode: Mode,
    observer: Option<&mut dyn ActivationObserver>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::no_grad();
    let bound;
    let precision = match mode {
        Mode::Fp => Precision::Fp,
        Mode::FakeQuant(qset) => {
            bound = BoundVars::bind(&mut tape, qset, false);
            Precision::FakeQuant(&bound)
        }
        Mode::PackedInt(pm) => Precision::PackedInt(pm),
    };
    let out = forward(&mut tape, weights, input, precision, observer)?;
    let taps = out.taps.iter().map(|&t| tape.value(t).clone()).collect();
    Ok((tape.value(out.output).clone(), taps))
}

/// Execution mode for [`run`].
#[derive(Clone, Copy)]
pub enum Mode<'a> {
    Fp,
    FakeQuant(&'a QuantizerSet),
    PackedInt(&'a PackedModel),
}

/// Output image only.
pub fn infer(weights: &ModelWeights, input: &Tensor, mode: Mode) -> Result<Tensor> {
    run(weights, input, mode, None).map(|(o, _)| o)
}
