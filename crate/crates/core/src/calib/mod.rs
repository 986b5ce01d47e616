//! Stage one: activation statistics and per-quantizer bound search.

pub mod dobi;
pub mod stats;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dobi::{candidate_bounds, detect_symmetry, dobi_search, DobiConfig, DobiResult, SseAccumulator};
pub use stats::{Histogram, TensorStats};

use crate::error::{Error, Result};
use crate::model::{run, ActivationObserver, Mode, ModelWeights, QuantizerSet};
use crate::quant::{check_bits, QuantizerState, Role, SearchMode};
use crate::tensor::Tensor;

/// Runs an FP forward pass per batch item in parallel, each feeding a fresh
/// observer; observers come back in input order.
fn sweep<O>(weights: &ModelWeights, batches: &[Tensor], make: impl Fn() -> O + Sync) -> Result<Vec<O>>
where
    O: ActivationObserver + Send,
{
    if batches.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    batches
        .par_iter()
        .map(|x| {
            let mut obs = make();
            run(weights, x, Mode::Fp, Some(&mut obs))?;
            Ok(obs)
        })
        .collect()
}

struct MomentObserver(Vec<Option<TensorStats>>);

impl ActivationObserver for MomentObserver {
    fn observe(&mut self, site: usize, values: &[f32]) -> Result<()> {
        let s = TensorStats::from_values(values)?;
        match &mut self.0[site] {
            Some(acc) => acc.merge(&s),
            slot => *slot = Some(s),
        }
        Ok(())
    }
}

struct HistogramObserver(Vec<Option<Histogram>>);

impl ActivationObserver for HistogramObserver {
    fn observe(&mut self, site: usize, values: &[f32]) -> Result<()> {
        if let Some(h) = &mut self.0[site] {
            h.add(values);
        }
        Ok(())
    }
}

struct SseObserver(Vec<Option<SseAccumulator>>);

impl ActivationObserver for SseObserver {
    fn observe(&mut self, site: usize, values: &[f32]) -> Result<()> {
        if let Some(acc) = &mut self.0[site] {
            acc.add(values);
        }
        Ok(())
    }
}

/// Statistics for every quantizer site, in site order: weight sites from
/// the weight tensors, activation sites aggregated over all `batches`.
pub fn collect_stats(weights: &ModelWeights, batches: &[Tensor], bins: usize) -> Result<Vec<TensorStats>> {
    let sites = crate::model::quantizer_sites(weights.config());
    let n = sites.len();
    let observed = sweep(weights, batches, || MomentObserver(vec![None; n]))?;
    let mut stats: Vec<Option<TensorStats>> = vec![None; n];
    for obs in observed {
        for (acc, s) in stats.iter_mut().zip(obs.0) {
            match (acc.as_mut(), s) {
                (Some(a), Some(s)) => a.merge(&s),
                (None, Some(s)) => *acc = Some(s),
                _ => {}
            }
        }
    }
    for (slot, site) in stats.iter_mut().zip(&sites) {
        if let Some(name) = site.weight_name() {
            let w = weights.get(&name)?;
            let mut s = TensorStats::from_values(w.data())?;
            let mut h = Histogram::new(s.min, s.max, bins);
            h.add(w.data());
            s.histogram = Some(h);
            *slot = Some(s);
        }
    }

    let template: Vec<Option<Histogram>> = sites
        .iter()
        .zip(&stats)
        .map(|(site, s)| match (site.role(), s) {
            (Role::Activation, Some(s)) => Some(Histogram::new(s.min, s.max, bins)),
            _ => None,
        })
        .collect();
    let observed = sweep(weights, batches, || HistogramObserver(template.clone()))?;
    for obs in observed {
        for (s, h) in stats.iter_mut().zip(obs.0) {
            if let (Some(s), Some(h)) = (s.as_mut(), h) {
                match &mut s.histogram {
                    Some(acc) => acc.counts.iter_mut().zip(&h.counts).for_each(|(a, b)| *a += b),
                    None => s.histogram = Some(h),
                }
            }
        }
    }
    stats
        .into_iter()
        .zip(&sites)
        .map(|(s, site)| s.ok_or_else(|| Error::MissingQuantizer(site.id.clone())))
        .collect()
}

/// One row of the calibration report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub id: String,
    pub role: Role,
    pub mode: SearchMode,
    pub active: bool,
    pub lower: f32,
    pub upper: f32,
    /// Fraction of calibration data below `lower`.
    pub p_lower: Option<f64>,
    /// Fraction of calibration data below `upper`.
    pub p_upper: Option<f64>,
    pub mse: Option<f64>,
}

/// Per-site report rows for any bound set; percentiles come from the
/// stored histograms.
pub fn bound_report(qset: &QuantizerSet, stats: Option<&[TensorStats]>, mse: Option<&[Option<f64>]>) -> Vec<BoundRecord> {
    qset.iter()
        .enumerate()
        .map(|(i, (site, q))| {
            let s = stats.and_then(|s| s.get(i));
            BoundRecord {
                id: site.id.clone(),
                role: q.role,
                mode: q.mode,
                active: q.active,
                lower: q.lower,
                upper: q.upper,
                p_lower: s.and_then(|s| s.fraction_below(q.lower)).filter(|_| q.active),
                p_upper: s.and_then(|s| s.fraction_below(q.upper)).filter(|_| q.active),
                mse: mse.and_then(|m| m[i]),
            }
        })
        .collect()
}

pub struct Calibration {
    pub quantizers: QuantizerSet,
    /// Achieved per-site MSE of the selected bounds; `None` for identity sites.
    pub mse: Vec<Option<f64>>,
}

/// Bound search for every site: weights directly on their values in
/// symmetric mode, activations over the calibration batches in the mode
/// chosen by [`detect_symmetry`]. Constant data gets a pass-through
/// quantizer.
pub fn initialize_all_bounds(
    weights: &ModelWeights,
    batches: &[Tensor],
    stats: &[TensorStats],
    bits: u8,
    config: &DobiConfig,
) -> Result<Calibration> {
    check_bits(bits)?;
    config.validate()?;
    let sites = crate::model::quantizer_sites(weights.config());
    if stats.len() != sites.len() {
        return Err(Error::MissingQuantizer(format!(
            "statistics for {} of {} sites",
            stats.len(),
            sites.len()
        )));
    }
    let k = config.search_steps;
    let modes: Vec<SearchMode> = sites
        .iter()
        .zip(stats)
        .map(|(site, s)| match site.role() {
            Role::Weight => SearchMode::Symmetric,
            Role::Activation => detect_symmetry(s, config.symmetry_threshold),
        })
        .collect();

    let template: Vec<Option<SseAccumulator>> = sites
        .iter()
        .zip(stats)
        .zip(&modes)
        .map(|((site, s), &mode)| match site.role() {
            Role::Activation if !s.is_degenerate() => SseAccumulator::new(s.min, s.max, bits, k, mode).ok(),
            _ => None,
        })
        .collect();
    let needs_sweep = template.iter().any(Option::is_some);
    let mut accs = template.clone();
    if needs_sweep {
        for obs in sweep(weights, batches, || SseObserver(template.clone()))? {
            for (a, b) in accs.iter_mut().zip(&obs.0) {
                if let (Some(a), Some(b)) = (a.as_mut(), b) {
                    a.merge(b);
                }
            }
        }
    }

    let results: Vec<Result<(QuantizerState, Option<f64>)>> = sites
        .par_iter()
        .zip(stats.par_iter())
        .zip(accs.into_par_iter())
        .zip(modes.par_iter())
        .map(|(((site, s), acc), &mode)| {
            let role = site.role();
            let found = match (site.weight_name(), acc) {
                (Some(name), _) => {
                    if s.is_degenerate() {
                        None
                    } else {
                        Some(dobi_search(weights.get(&name)?.data(), bits, k, mode)?)
                    }
                }
                (None, Some(acc)) => Some(acc.best()?),
                (None, None) => None,
            };
            Ok(match found {
                Some(r) => (QuantizerState::new(bits, r.lower, r.upper, role, mode)?, Some(r.mse)),
                None => {
                    warn!("site {} sees constant data; using a pass-through quantizer", site.id);
                    (QuantizerState::identity(bits, role, mode), None)
                }
            })
        })
        .collect();
    let mut states = Vec::with_capacity(results.len());
    let mut mse = Vec::with_capacity(results.len());
    for r in results {
        let (s, m) = r?;
        states.push(s);
        mse.push(m);
    }
    Ok(Calibration {
        quantizers: QuantizerSet::new(weights.config(), states)?,
        mse,
    })
}

/// Bounds at the observed `(min, max)` of every site.
pub fn minmax_bounds(weights: &ModelWeights, stats: &[TensorStats], bits: u8, symmetry_threshold: f64) -> Result<QuantizerSet> {
    check_bits(bits)?;
    let sites = crate::model::quantizer_sites(weights.config());
    if stats.len() != sites.len() {
        return Err(Error::MissingQuantizer("statistics do not cover every site".into()));
    }
    let states = sites
        .iter()
        .zip(stats)
        .map(|(site, s)| {
            let mode = match site.role() {
                Role::Weight => SearchMode::Symmetric,
                Role::Activation => detect_symmetry(s, symmetry_threshold),
            };
            if s.is_degenerate() {
                Ok(QuantizerState::identity(bits, site.role(), mode))
            } else {
                QuantizerState::new(bits, s.min, s.max, site.role(), mode)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizerSet::new(weights.config(), states)
}
