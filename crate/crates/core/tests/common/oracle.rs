//! Double-precision reference forward pass written with plain loops. It
//! shares no index maps or kernels with the library; only the parameter
//! names and the site numbering are taken from it.

use srq::model::{site_index, ModelWeights, QuantizerSet, SiteKind};
use srq::Tensor;

/// Active quantizer bounds `(l, u, levels)` per site, in f64.
#[derive(Clone, Debug)]
pub struct Bounds(pub Vec<Option<(f64, f64, f64)>>);

impl Bounds {
    pub fn of(qset: &QuantizerSet) -> Self {
        Bounds(
            qset.states()
                .iter()
                .map(|s| s.active.then(|| (s.lower as f64, s.upper as f64, ((1u32 << s.bits) - 1) as f64)))
                .collect(),
        )
    }

    pub fn shifted(&self, site: usize, upper: bool, d: f64) -> Self {
        let mut b = self.clone();
        let e = b.0[site].as_mut().expect("active site");
        if upper {
            e.1 += d;
        } else {
            e.0 += d;
        }
        b
    }
}

/// How quantizer sites are evaluated.
pub enum Quant<'a> {
    Fp,
    /// `clip(v) + c·(u − l)/n` with residuals `c` recorded by the library's
    /// tape, consumed in call order.
    Frozen(&'a Bounds, &'a [Vec<f32>]),
}

pub struct Output {
    /// `[3, r·H, r·W]`.
    pub image: Vec<f64>,
    /// RSTB outputs, `[H'·W', C]` each.
    pub taps: Vec<Vec<f64>>,
}

struct Q<'a> {
    quant: &'a Quant<'a>,
    cursor: usize,
}

impl Q<'_> {
    fn apply(&mut self, site: usize, v: &mut [f64]) {
        let Quant::Frozen(bounds, res) = self.quant else { return };
        let Some((l, u, n)) = bounds.0[site] else { return };
        let r = &res[self.cursor];
        self.cursor += 1;
        assert_eq!(r.len(), v.len(), "residual layout for site {site}");
        for (x, &c) in v.iter_mut().zip(r) {
            *x = x.max(l).min(u) + c as f64 * (u - l) / n;
        }
    }
}

fn param(w: &ModelWeights, name: &str) -> Vec<f64> {
    w.get(name).unwrap().data().iter().map(|&v| v as f64).collect()
}

/// Zero-padded 3×3 convolution of `[cin, h, w]` with `[cout, cin, 3, 3]`.
fn conv(w: &ModelWeights, name: &str, x: &[f64], cin: usize, h: usize, wd: usize) -> Vec<f64> {
    let k = param(w, &format!("{name}.weight"));
    let b = param(w, &format!("{name}.bias"));
    let cout = b.len();
    let mut out = vec![0.0; cout * h * wd];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[o];
                for i in 0..cin {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += k[((o * cin + i) * 3 + dy) * 3 + dx] * x[(i * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

fn layer_norm(w: &ModelWeights, name: &str, x: &[f64], c: usize) -> Vec<f64> {
    let g = param(w, &format!("{name}.weight"));
    let b = param(w, &format!("{name}.bias"));
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * rs * g[j] + b[j]));
    }
    out
}

/// `x·Wᵀ + b` with both operands passed through their quantizers first.
fn linear(w: &ModelWeights, q: &mut Q, name: &str, x: &mut [f64], in_site: usize, w_site: usize) -> Vec<f64> {
    let mut wt = param(w, &format!("{name}.weight"));
    let b = param(w, &format!("{name}.bias"));
    q.apply(in_site, x);
    q.apply(w_site, &mut wt);
    let (out_dim, in_dim) = (b.len(), wt.len() / b.len());
    let rows = x.len() / in_dim;
    let mut y = vec![0.0; rows * out_dim];
    for r in 0..rows {
        for o in 0..out_dim {
            y[r * out_dim + o] = b[o] + (0..in_dim).map(|i| x[r * in_dim + i] * wt[o * in_dim + i]).sum::<f64>();
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// One Swin transformer layer over `[h·w, c]` tokens, in place.
#[allow(clippy::too_many_arguments)]
fn swin_layer(wt: &ModelWeights, q: &mut Q, t: &mut [f64], h: usize, w: usize, i: usize, j: usize) {
    let cfg = wt.config();
    let (c, m, heads) = (cfg.embed_dim, cfg.window_size, cfg.num_heads);
    let d = c / heads;
    let n = m * m;
    let s = if j % 2 == 1 { m / 2 } else { 0 };
    let (nwy, nwx) = (h / m, w / m);
    let nw = nwy * nwx;
    let p = format!("layers.{i}.blocks.{j}");
    let site = |k: SiteKind| site_index(cfg, i, j, k);

    // Token of the unshifted map shown at window `win`, slot `k`.
    let src = |win: usize, k: usize| {
        let (y, x) = ((win / nwx) * m + k / m, (win % nwx) * m + k % m);
        ((y + s) % h) * w + (x + s) % w
    };
    let region = |pos: usize, ext: usize| {
        if pos < ext - m {
            0
        } else if pos < ext - s {
            1
        } else {
            2
        }
    };
    let label = |win: usize, k: usize| {
        let (y, x) = ((win / nwx) * m + k / m, (win % nwx) * m + k % m);
        region(y, h) * 3 + region(x, w)
    };

    let xn = layer_norm(wt, &format!("{p}.norm1"), t, c);
    let mut xw = vec![0.0; nw * n * c];
    for win in 0..nw {
        for k in 0..n {
            let from = src(win, k);
            xw[(win * n + k) * c..(win * n + k + 1) * c].copy_from_slice(&xn[from * c..(from + 1) * c]);
        }
    }
    let qkv = linear(wt, q, &format!("{p}.attn.qkv"), &mut xw, site(SiteKind::QkvInput), site(SiteKind::QkvWeight));
    let part = |which: usize, scale: f64| {
        let mut out = vec![0.0; nw * heads * n * d];
        for win in 0..nw {
            for hd in 0..heads {
                for k in 0..n {
                    for e in 0..d {
                        out[((win * heads + hd) * n + k) * d + e] =
                            qkv[(win * n + k) * 3 * c + which * c + hd * d + e] * scale;
                    }
                }
            }
        }
        out
    };
    let mut qm = part(0, 1.0 / (d as f64).sqrt());
    let mut km = part(1, 1.0);
    let mut vm = part(2, 1.0);
    q.apply(site(SiteKind::Query), &mut qm);
    q.apply(site(SiteKind::Key), &mut km);

    let table = param(wt, &format!("{p}.attn.relative_position_bias_table"));
    let mut attn = vec![0.0; nw * heads * n * n];
    for win in 0..nw {
        for hd in 0..heads {
            let base = (win * heads + hd) * n;
            for a in 0..n {
                let row = &mut attn[(base + a) * n..(base + a + 1) * n];
                for (b, r) in row.iter_mut().enumerate() {
                    let dot: f64 = (0..d).map(|e| qm[(base + a) * d + e] * km[(base + b) * d + e]).sum();
                    let dy = (a / m) as isize - (b / m) as isize + m as isize - 1;
                    let dx = (a % m) as isize - (b % m) as isize + m as isize - 1;
                    let rel = dy as usize * (2 * m - 1) + dx as usize;
                    let mask = if s > 0 && label(win, a) != label(win, b) { -100.0 } else { 0.0 };
                    *r = dot + table[rel * heads + hd] + mask;
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
    }
    q.apply(site(SiteKind::AttnMap), &mut attn);
    q.apply(site(SiteKind::Value), &mut vm);

    let mut merged = vec![0.0; nw * n * c];
    for win in 0..nw {
        for hd in 0..heads {
            let base = (win * heads + hd) * n;
            for a in 0..n {
                for e in 0..d {
                    merged[(win * n + a) * c + hd * d + e] =
                        (0..n).map(|b| attn[(base + a) * n + b] * vm[(base + b) * d + e]).sum();
                }
            }
        }
    }
    let proj = linear(wt, q, &format!("{p}.attn.proj"), &mut merged, site(SiteKind::ProjInput), site(SiteKind::ProjWeight));
    for win in 0..nw {
        for k in 0..n {
            let to = src(win, k);
            for ch in 0..c {
                t[to * c + ch] += proj[(win * n + k) * c + ch];
            }
        }
    }

    let mut y = layer_norm(wt, &format!("{p}.norm2"), t, c);
    let h1 = linear(wt, q, &format!("{p}.mlp.fc1"), &mut y, site(SiteKind::Fc1Input), site(SiteKind::Fc1Weight));
    let mut g: Vec<f64> = h1.into_iter().map(gelu).collect();
    let h2 = linear(wt, q, &format!("{p}.mlp.fc2"), &mut g, site(SiteKind::Fc2Input), site(SiteKind::Fc2Weight));
    t.iter_mut().zip(&h2).for_each(|(a, b)| *a += b);
}

fn to_tokens(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..hw * c).map(|i| x[(i % c) * hw + i / c]).collect()
}

fn to_chw(t: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..hw * c).map(|i| t[(i % hw) * c + i / hw]).collect()
}

pub fn forward(wt: &ModelWeights, input: &Tensor, quant: &Quant) -> Output {
    let cfg = wt.config();
    let (c, m, r) = (cfg.embed_dim, cfg.window_size, cfg.upscale);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let hw = hp * wp;
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut x = vec![0.0; 3 * hw];
    for ch in 0..3 {
        for y in 0..hp {
            for xx in 0..wp {
                let v = input.data()[(ch * h + reflect(y, h)) * w + reflect(xx, w)] as f64;
                x[(ch * hp + y) * wp + xx] = v - cfg.img_mean[ch] as f64;
            }
        }
    }
    let mut q = Q { quant, cursor: 0 };
    let f0 = conv(wt, "conv_first", &x, 3, hp, wp);
    let mut t = layer_norm(wt, "patch_embed.norm", &to_tokens(&f0, c, hw), c);
    let mut taps = Vec::new();
    for i in 0..cfg.num_rstb {
        let block_in = t.clone();
        for j in 0..cfg.stl_per_rstb {
            swin_layer(wt, &mut q, &mut t, hp, wp, i, j);
        }
        let img = conv(wt, &format!("layers.{i}.conv"), &to_chw(&t, c, hw), c, hp, wp);
        t = to_tokens(&img, c, hw).iter().zip(&block_in).map(|(a, b)| a + b).collect();
        taps.push(t.clone());
    }
    if let Quant::Frozen(_, res) = quant {
        assert_eq!(q.cursor, res.len(), "unused rounding residuals");
    }
    let t = layer_norm(wt, "norm", &t, c);
    let mut body = conv(wt, "conv_after_body", &to_chw(&t, c, hw), c, hp, wp);
    body.iter_mut().zip(&f0).for_each(|(a, b)| *a += b);
    let up = conv(wt, "upsample.0", &body, c, hp, wp);
    let (oh, ow) = (r * h, r * w);
    let mut image = vec![0.0; 3 * oh * ow];
    for ch in 0..3 {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((ch * r * r + (y % r) * r + xx % r) * hp + y / r) * wp + xx / r;
                image[(ch * oh + y) * ow + xx] = up[src] + cfg.img_mean[ch] as f64;
            }
        }
    }
    Output { image, taps }
}
