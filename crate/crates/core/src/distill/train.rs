use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::distill::adam::{cosine_lr, Adam};
use crate::distill::augment::Augment;
use crate::distill::loss::record_loss;
use crate::error::{Error, Result};
use crate::metrics::psnr_y_tensor;
use crate::model::{forward, run, BoundVars, Mode, ModelWeights, Precision, QuantizerSet};
use crate::tensor::Tensor;

/// Hyper-parameters of bound distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f32,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub val_interval: usize,
    pub augment_rotate: bool,
    pub augment_flip: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-2,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            iterations: 3000,
            batch_size: 32,
            patch_size: 64,
            val_interval: 100,
            augment_rotate: true,
            augment_flip: true,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if self.batch_size == 0 || self.val_interval == 0 || self.patch_size == 0 {
            return bad("batch size, patch size and validation interval must be positive");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    #[serde(rename = "loss_O")]
    pub loss_o: f64,
    #[serde(rename = "loss_F")]
    pub loss_f: f64,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

pub struct DistillOutcome {
    /// Bounds with the best validation PSNR seen.
    pub quantizers: QuantizerSet,
    pub log: Vec<LogEntry>,
    pub initial_val_psnr: f64,
    pub best_val_psnr: f64,
    pub best_iter: usize,
}

/// Mean PSNR between the quantized model and the FP model over `patches`.
pub fn validation_psnr(weights: &ModelWeights, qset: &QuantizerSet, patches: &[Tensor]) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let crop = weights.config().upscale;
    let scores: Vec<f64> = patches
        .par_iter()
        .map(|x| {
            let fp = run(weights, x, Mode::Fp, None)?.0;
            let q = run(weights, x, Mode::FakeQuant(qset), None)?.0;
            psnr_y_tensor(&fp, &q, crop).map(|p| p.min(crate::metrics::PSNR_CAP_DB))
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

struct ItemResult {
    loss_o: f64,
    loss_f: f64,
    grads: Vec<Option<(f32, f32)>>,
}

fn item_step(weights: &ModelWeights, qset: &QuantizerSet, x: &Tensor, lambda: f32) -> Result<ItemResult> {
    let (teacher, teacher_taps) = run(weights, x, Mode::Fp, None)?;
    let mut tape = Tape::new();
    let bv = BoundVars::bind(&mut tape, qset, true);
    let out = forward(&mut tape, weights, x, Precision::FakeQuant(&bv), None)?;
    let loss = record_loss(&mut tape, out.output, &out.taps, Arc::new(teacher), &teacher_taps, lambda)?;
    tape.backward(loss.total)?;
    Ok(ItemResult {
        loss_o: tape.value(loss.output).item() as f64,
        loss_f: loss.feature.map_or(0.0, |f| tape.value(f).item() as f64),
        grads: bv.grads(&tape),
    })
}

/// Batch loss and gradient at the current bounds, averaged over items in
/// input order.
pub fn batch_gradient(
    weights: &ModelWeights,
    qset: &QuantizerSet,
    batch: &[Tensor],
    lambda: f32,
) -> Result<(f64, f64, Vec<Option<(f64, f64)>>)> {
    let items: Vec<ItemResult> = batch
        .par_iter()
        .map(|x| item_step(weights, qset, x, lambda))
        .collect::<Result<_>>()?;
    let n = items.len() as f64;
    let mut grads: Vec<Option<(f64, f64)>> = vec![None; qset.len()];
    let (mut lo, mut lf) = (0.0, 0.0);
    for it in &items {
        lo += it.loss_o;
        lf += it.loss_f;
        for (acc, g) in grads.iter_mut().zip(&it.grads) {
            if let Some((gl, gu)) = g {
                let a = acc.get_or_insert((0.0, 0.0));
                a.0 += *gl as f64 / n;
                a.1 += *gu as f64 / n;
            }
        }
    }
    Ok((lo / n, lf / n, grads))
}

/// Gradient refinement of every trainable bound against the FP model.
///
/// Each iteration draws a batch from `train` (reshuffled every pass over
/// the set), augments every item independently, and takes one Adam step on
/// the averaged gradient with a cosine-annealed learning rate. Validation
/// runs before the first step, every `val_interval` steps and after the
/// last; the best-scoring bounds are returned.
pub fn dqc_train(
    weights: &ModelWeights,
    init: &QuantizerSet,
    train: &[Tensor],
    val: &[Tensor],
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut qset = init.clone();
    let trainable: Vec<usize> = qset
        .states()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.active && s.trainable)
        .map(|(i, _)| i)
        .collect();
    let min_width: Vec<f64> = qset
        .states()
        .iter()
        .map(|s| 1e-6 * (s.upper as f64 - s.lower as f64).abs())
        .collect();
    let mut params: Vec<f64> = trainable
        .iter()
        .flat_map(|&i| {
            let s = &qset.states()[i];
            [s.lower as f64, s.upper as f64]
        })
        .collect();
    let mut adam = Adam::new(params.len(), config.betas.0, config.betas.1, config.weight_decay);

    let initial_val_psnr = validation_psnr(weights, &qset, val)?;
    let (mut best_val, mut best_iter, mut best_set) = (initial_val_psnr, 0, qset.clone());
    let mut log = Vec::with_capacity(config.iterations);
    let mut order: Vec<usize> = Vec::new();

    for iter in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            let aug = Augment::sample(&mut rng, config.augment_rotate, config.augment_flip);
            batch.push(aug.apply(&train[idx]));
        }
        let (loss_o, loss_f, grads) = batch_gradient(weights, &qset, &batch, config.lambda)?;
        let loss = loss_o + config.lambda as f64 * loss_f;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("distillation loss at iteration {iter}")));
        }
        let mut flat = Vec::with_capacity(params.len());
        for &i in &trainable {
            let (gl, gu) = grads[i].unwrap_or((0.0, 0.0));
            if !gl.is_finite() || !gu.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at iteration {iter}",
                    qset.sites()[i].id
                )));
            }
            flat.extend([gl, gu]);
        }
        let lr = cosine_lr(config.learning_rate, iter, config.iterations);
        adam.update(&mut params, &flat, lr);

        for (k, &i) in trainable.iter().enumerate() {
            let (mut l, mut u) = (params[2 * k], params[2 * k + 1]);
            let width = min_width[i];
            if u - l < width {
                warn!(
                    "bounds of `{}` collapsed at iteration {iter}; clamping width",
                    qset.sites()[i].id
                );
                let mid = 0.5 * (l + u);
                l = mid - 0.5 * width;
                u = mid + 0.5 * width;
                params[2 * k] = l;
                params[2 * k + 1] = u;
            }
            let s = &mut qset.states_mut()[i];
            s.lower = l as f32;
            s.upper = u as f32;
            if s.upper <= s.lower {
                s.upper = s.lower + f32::EPSILON * s.lower.abs().max(1.0);
            }
        }

        let step = iter + 1;
        let val_psnr = if step % config.val_interval == 0 || step == config.iterations {
            let p = validation_psnr(weights, &qset, val)?;
            if p > best_val {
                best_val = p;
                best_iter = step;
                best_set = qset.clone();
            }
            info!("iter {step}: loss {loss:.6} val PSNR {p:.4} dB");
            Some(p)
        } else {
            None
        };
        log.push(LogEntry {
            iter: step,
            loss_o,
            loss_f,
            lr,
            val_psnr,
        });
    }
    Ok(DistillOutcome {
        quantizers: best_set,
        log,
        initial_val_psnr,
        best_val_psnr: best_val,
        best_iter,
    })
}
