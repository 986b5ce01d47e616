#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp, StandardNormal};
use srq::quant::{fake_quantize, QuantizerState, Role, SearchMode};
use rand_chacha::ChaCha8Rng;
use srq::calib::{collect_stats, minmax_bounds};
use srq::model::{ModelConfig, ModelWeights, QuantizerSet};
use srq::Tensor;

pub fn toy(seed: u64) -> ModelWeights {
    ModelWeights::random(&ModelConfig::toy(2), seed).unwrap()
}

/// Smooth random images: a few low-frequency sinusoids per channel plus
/// mild noise, clamped to [0, 1].
pub fn random_images(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let params: Vec<(f32, f32, f32, f32)> = (0..9)
                .map(|_| {
                    (
                        rng.random_range(0.05..0.4),
                        rng.random_range(0.05..0.4),
                        rng.random_range(0.0..6.28),
                        rng.random_range(0.05..0.2),
                    )
                })
                .collect();
            let base: [f32; 3] = [rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)];
            let noise: Vec<f32> = (0..3 * size * size).map(|_| rng.random_range(-0.02..0.02)).collect();
            Tensor::from_fn(&[3, size, size], |i| {
                let c = i / (size * size);
                let (y, x) = ((i / size) % size, i % size);
                let mut v = base[c];
                for &(fy, fx, ph, a) in &params[c * 3..c * 3 + 3] {
                    v += a * (fy * y as f32 + fx * x as f32 + ph).sin();
                }
                (v + noise[i]).clamp(0.0, 1.0)
            })
        })
        .collect()
}

pub fn minmax(weights: &ModelWeights, batches: &[Tensor], bits: u8) -> QuantizerSet {
    let stats = collect_stats(weights, batches, 256).unwrap();
    minmax_bounds(weights, &stats, bits, 0.5).unwrap()
}

use srq::autodiff::Tape;
use srq::model::{forward, run, ActivationObserver, BoundVars, Mode, Precision};

struct Collect(Vec<Vec<f32>>);

impl ActivationObserver for Collect {
    fn observe(&mut self, site: usize, values: &[f32]) -> srq::Result<()> {
        self.0[site].extend_from_slice(values);
        Ok(())
    }
}

/// Nearest point to `b` at least `margin` away from every value in `sorted`.
fn nearest_safe(b: f32, sorted: &[f32], margin: f32) -> f32 {
    let mut intervals = vec![(f32::NEG_INFINITY, sorted[0] - margin)];
    for w in sorted.windows(2) {
        if w[1] - w[0] >= 2.0 * margin {
            intervals.push((w[0] + margin, w[1] - margin));
        }
    }
    intervals.push((sorted[sorted.len() - 1] + margin, f32::INFINITY));
    intervals
        .iter()
        .map(|&(lo, hi)| b.clamp(lo, hi))
        .min_by(|x, y| (x - b).abs().total_cmp(&(y - b).abs()))
        .unwrap()
}

/// Moves every active bound into a gap of the data its quantizer sees, so
/// that small bound perturbations cross no clipping kink anywhere in the
/// network. Sites are revisited until a full pass changes nothing.
pub fn kink_free_bounds(weights: &ModelWeights, qset: &QuantizerSet, x: &Tensor, margin: f32) -> QuantizerSet {
    let mut q = qset.clone();
    for _ in 0..20 {
        let mut obs = Collect(vec![Vec::new(); q.len()]);
        run(weights, x, Mode::FakeQuant(&q), Some(&mut obs)).unwrap();
        let mut changed = false;
        let sites = q.sites().to_vec();
        for (i, site) in sites.iter().enumerate() {
            let s = &mut q.states_mut()[i];
            if !s.active {
                continue;
            }
            let mut v = match site.weight_name() {
                Some(name) => weights.get(&name).unwrap().data().to_vec(),
                None => std::mem::take(&mut obs.0[i]),
            };
            v.sort_by(f32::total_cmp);
            let l = nearest_safe(s.lower, &v, margin);
            let u = nearest_safe(s.upper, &v, margin);
            if u > l && (l, u) != (s.lower, s.upper) {
                s.lower = l;
                s.upper = u;
                changed = true;
            }
        }
        if !changed {
            return q;
        }
    }
    panic!("bounds did not settle into data gaps");
}

pub struct BoundCheck {
    pub site: String,
    pub upper: bool,
    pub analytic: f64,
    pub numeric: f64,
}

impl BoundCheck {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

/// Fixed positive projection weights, one per element of `t`.
fn projection(t: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(t.shape(), |_| rng.random_range(0.5..1.5))
}

fn project_f64(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// STE gradients of `Σ w·output + Σ w'·taps` from the library's tape for
/// the `picks` bounds, against central differences with step `h` of the
/// same objective on the f64 reference forward under frozen rounding.
pub fn model_gradient_check(
    weights: &ModelWeights,
    qset: &QuantizerSet,
    x: &Tensor,
    picks: &[(usize, bool)],
    h: f64,
    with_taps: bool,
) -> Vec<BoundCheck> {
    let mut tape = Tape::new();
    tape.record_rounding();
    let bv = BoundVars::bind(&mut tape, qset, true);
    let out = forward(&mut tape, weights, x, Precision::FakeQuant(&bv), None).unwrap();
    let targets: Vec<srq::autodiff::Var> =
        std::iter::once(out.output).chain(out.taps.iter().copied().filter(|_| with_taps)).collect();
    let proj: Vec<Tensor> = targets.iter().enumerate().map(|(k, &v)| projection(tape.value(v), k as u64)).collect();
    let mut loss: Option<srq::autodiff::Var> = None;
    for (&v, w) in targets.iter().zip(&proj) {
        let c = tape.constant(w.clone());
        let m = tape.mul(v, c).unwrap();
        let s = tape.sum(m);
        loss = Some(match loss {
            Some(acc) => tape.add(acc, s).unwrap(),
            None => s,
        });
    }
    tape.backward(loss.unwrap()).unwrap();
    let grads = bv.grads(&tape);
    let residuals = tape.take_rounding_record();

    let dot = |a: &[f64], w: &Tensor| a.iter().zip(w.data()).map(|(&a, &b)| a * b as f64).sum::<f64>();
    let eval = |b: &oracle::Bounds| -> f64 {
        let o = oracle::forward(weights, x, &oracle::Quant::Frozen(b, &residuals));
        let mut l = dot(&o.image, &proj[0]);
        if with_taps {
            l += o.taps.iter().zip(&proj[1..]).map(|(t, w)| dot(t, w)).sum::<f64>();
        }
        l
    };
    let base = oracle::Bounds::of(qset);
    picks
        .iter()
        .map(|&(i, upper)| {
            let (lp, lm) = (eval(&base.shifted(i, upper, h)), eval(&base.shifted(i, upper, -h)));
            let (gl, gu) = grads[i].unwrap();
            BoundCheck {
                site: qset.sites()[i].id.clone(),
                upper,
                analytic: if upper { gu } else { gl } as f64,
                numeric: (lp - lm) / (2.0 * h),
            }
        })
        .collect()
}

/// Damaged copies of a serialized file whose last record is a float tensor
/// of `last_numel` elements.
pub fn corrupt_variants(bytes: &[u8], last_numel: usize) -> Vec<(&'static str, Vec<u8>)> {
    let n = bytes.len();
    let mut magic = bytes.to_vec();
    magic[0] ^= 0xff;
    let mut version = bytes.to_vec();
    version[4] = version[4].wrapping_add(1);
    let mut size = bytes.to_vec();
    let at = n - last_numel * 4 - 8;
    let declared = u64::from_le_bytes(size[at..at + 8].try_into().unwrap());
    size[at..at + 8].copy_from_slice(&(declared + 4).to_le_bytes());
    let mut trailing = bytes.to_vec();
    trailing.extend_from_slice(&[0, 0, 0]);
    vec![
        ("empty file", Vec::new()),
        ("truncated header", bytes[..6].to_vec()),
        ("truncated body", bytes[..n / 2].to_vec()),
        ("truncated payload", bytes[..n - 1].to_vec()),
        ("wrong magic", magic),
        ("unknown version", version),
        ("payload size mismatch", size),
        ("trailing bytes", trailing),
    ]
}

/// Exhaustive scan of the `K` inward-narrowed candidates with the MSE
/// computed through `fake_quantize`; ties go to the narrower candidate.
pub fn brute_force(v: &[f32], bits: u8, k: usize, mode: SearchMode) -> (f32, f32, f64) {
    let min = v.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let t = Tensor::new(vec![v.len()], v.to_vec()).unwrap();
    let mut best: Option<(f32, f32, f64)> = None;
    for i in 0..k {
        let d = i as f64 * (max as f64 - min as f64) / (2.0 * k as f64);
        let u = (max as f64 - d) as f32;
        let l = if mode == SearchMode::Symmetric { (min as f64 + d) as f32 } else { min };
        let Ok(q) = QuantizerState::new(bits, l, u, Role::Activation, mode) else { continue };
        let out = fake_quantize(&t, &q).unwrap();
        let sse: f64 = v.iter().zip(out.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        let mse = sse / v.len() as f64;
        if best.is_none_or(|b| mse <= b.2) {
            best = Some((l, u, mse));
        }
    }
    best.unwrap()
}

pub fn dobi_sample(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    match rng.random_range(0..3) {
        0 => (0..len).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>().into_iter().map(|x| x as f32).collect(),
        1 => {
            let e = Exp::new(2.0).unwrap();
            (0..len).map(|_| e.sample(rng) as f32).collect()
        }
        _ => (0..len).map(|_| rng.random_range(-3.0..1.0f32)).collect(),
    }
}


/// Independent f64 rounding: half away from zero, codes clamped to `[0, n]`.
fn code(v: f64, l: f64, u: f64, n: f64) -> f64 {
    ((v.clamp(l, u) - l) * n / (u - l)).round().clamp(0.0, n)
}

/// `Σ g·(clip(v) + c·(u − l)/n)` with residuals `c` frozen at `(l0, u0)`.
fn frozen_objective(v: &[f64], g: &[f64], l0: f64, u0: f64, n: f64, l: f64, u: f64) -> f64 {
    v.iter()
        .zip(g)
        .map(|(&x, &w)| {
            let c = code(x, l0, u0, n) - (x.clamp(l0, u0) - l0) * n / (u0 - l0);
            w * (x.clamp(l, u) + c * (u - l) / n)
        })
        .sum()
}

/// One random quantizer instance: relative error between the library's
/// bound gradient and a central difference of the frozen-rounding
/// objective. Elements sit at least 0.05 grid steps from a rounding tie
/// and 0.05·(u − l) from either bound.
pub fn scalar_bound_check(rng: &mut ChaCha8Rng, upper: bool, h: f64) -> f64 {
    use srq::quant::fake_quantize_backward;
    let bits = [2u8, 3, 4, 8][rng.random_range(0..4)];
    let n = ((1u32 << bits) - 1) as f64;
    let l: f32 = rng.random_range(-2.0..0.5);
    let u: f32 = l + rng.random_range(0.2..3.0);
    let (lf, uf) = (l as f64, u as f64);
    let mut v = Vec::new();
    while v.len() < 16 {
        let x: f32 = rng.random_range(l - 1.0..u + 1.0);
        let xf = x as f64;
        let pos = (xf.clamp(lf, uf) - lf) * n / (uf - lf);
        let tie = (pos - pos.floor() - 0.5).abs();
        let edge = (xf - lf).abs().min((xf - uf).abs());
        if tie >= 0.05 && edge >= 0.05 * (uf - lf) {
            v.push(x);
        }
    }
    let g: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let q = QuantizerState::new(bits, l, u, Role::Activation, SearchMode::Symmetric).unwrap();
    let vt = Tensor::new(vec![16], v.clone()).unwrap();
    let gt = Tensor::new(vec![16], g.clone()).unwrap();
    let (_, gl, gu) = fake_quantize_backward(&vt, &q, &gt).unwrap();
    let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let g: Vec<f64> = g.iter().map(|&x| x as f64).collect();
    let f = |d: f64| {
        let (lb, ub) = if upper { (lf, uf + d) } else { (lf + d, uf) };
        frozen_objective(&v, &g, lf, uf, n, lb, ub)
    };
    let numeric = (f(h) - f(-h)) / (2.0 * h);
    let analytic = if upper { gu } else { gl } as f64;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Seeded picks of `count` distinct trainable bounds.
pub fn pick_bounds(qset: &srq::model::QuantizerSet, count: usize, seed: u64) -> Vec<(usize, bool)> {
    let mut all: Vec<(usize, bool)> = qset
        .states()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.active && s.trainable)
        .flat_map(|(i, s)| {
            let lower = (s.mode != SearchMode::FixedLower).then_some((i, false));
            lower.into_iter().chain(std::iter::once((i, true)))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..count.min(all.len()) {
        let j = rng.random_range(k..all.len());
        all.swap(k, j);
    }
    all.truncate(count);
    all
}

