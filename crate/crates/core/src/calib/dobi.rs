//! Distribution-oriented bound search.
//!
//! Candidates narrow inward from `(min, max)` in steps of
//! `Δ = (max − min) / 2K`: both ends move for symmetric data, only the
//! upper bound for one-sided data. The candidate with the smallest squared
//! quantization error wins; ties go to the narrower candidate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::stats::TensorStats;
use crate::error::{Error, Result};
use crate::quant::{QuantGrid, SearchMode};

/// Search and calibration-set parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DobiConfig {
    pub search_steps: usize,
    pub symmetry_threshold: f64,
    pub num_patches: usize,
    pub patch_size: usize,
    pub histogram_bins: usize,
}

impl Default for DobiConfig {
    fn default() -> Self {
        Self {
            search_steps: 100,
            symmetry_threshold: 0.5,
            num_patches: 32,
            patch_size: 64,
            histogram_bins: 1024,
        }
    }
}

impl DobiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.search_steps == 0 {
            return Err(Error::InvalidArgument("search steps must be at least 1".into()));
        }
        if self.num_patches == 0 || self.patch_size == 0 {
            return Err(Error::InvalidArgument("calibration set must be non-empty".into()));
        }
        if !(self.symmetry_threshold >= 0.0) {
            return Err(Error::InvalidArgument("symmetry threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// Symmetric search for roughly symmetric data straddling zero, fixed lower
/// bound otherwise.
pub fn detect_symmetry(stats: &TensorStats, threshold: f64) -> SearchMode {
    if stats.skewness().abs() < threshold && stats.min < 0.0 && stats.max > 0.0 {
        SearchMode::Symmetric
    } else {
        SearchMode::FixedLower
    }
}

/// Candidate `i` of the search grid.
pub fn candidate_bounds(min: f32, max: f32, steps: usize, mode: SearchMode, i: usize) -> (f32, f32) {
    let delta = (max as f64 - min as f64) / (2 * steps) as f64;
    let shift = i as f64 * delta;
    let upper = (max as f64 - shift) as f32;
    let lower = match mode {
        SearchMode::Symmetric => (min as f64 + shift) as f32,
        SearchMode::FixedLower => min,
    };
    (lower, upper)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DobiResult {
    pub lower: f32,
    pub upper: f32,
    pub mse: f64,
    pub step: usize,
}

/// Per-candidate squared-error accumulator for data seen in chunks.
#[derive(Clone, Debug)]
pub struct SseAccumulator {
    grids: Vec<Option<QuantGrid>>,
    sse: Vec<f64>,
    count: u64,
}

impl SseAccumulator {
    pub fn new(min: f32, max: f32, bits: u8, steps: usize, mode: SearchMode) -> Result<Self> {
        if !(max > min) {
            return Err(Error::DegenerateBounds { lower: min, upper: max });
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("search steps must be at least 1".into()));
        }
        let grids = (0..steps)
            .map(|i| {
                let (l, u) = candidate_bounds(min, max, steps, mode, i);
                QuantGrid::new(l, u, bits).ok()
            })
            .collect::<Vec<_>>();
        Ok(Self {
            sse: vec![0.0; grids.len()],
            grids,
            count: 0,
        })
    }

    pub fn add(&mut self, values: &[f32]) {
        let grids = &self.grids;
        self.sse
            .par_iter_mut()
            .zip(grids.par_iter())
            .for_each(|(acc, grid)| {
                if let Some(g) = grid {
                    *acc += chunk_sse(g, values);
                }
            });
        self.count += values.len() as u64;
    }

    pub fn merge(&mut self, other: &SseAccumulator) {
        self.sse.iter_mut().zip(&other.sse).for_each(|(a, b)| *a += b);
        self.count += other.count;
    }

    pub fn best(&self) -> Result<DobiResult> {
        if self.count == 0 {
            return Err(Error::EmptyCalibration);
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, (g, &sse)) in self.grids.iter().zip(&self.sse).enumerate() {
            if g.is_none() {
                continue;
            }
            if best.is_none_or(|(_, b)| sse <= b) {
                best = Some((i, sse));
            }
        }
        let (i, sse) = best.ok_or(Error::DegenerateBounds { lower: 0.0, upper: 0.0 })?;
        let g = self.grids[i].expect("selected candidate has a grid");
        Ok(DobiResult {
            lower: g.lower,
            upper: g.upper,
            mse: sse / self.count as f64,
            step: i,
        })
    }
}

fn chunk_sse(grid: &QuantGrid, values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| {
            let e = v as f64 - grid.quantize(v) as f64;
            e * e
        })
        .sum()
}

/// Bound search over one tensor.
pub fn dobi_search(values: &[f32], bits: u8, steps: usize, mode: SearchMode) -> Result<DobiResult> {
    if values.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("bound search input".into()));
        }
        min = min.min(v);
        max = max.max(v);
    }
    let mut acc = SseAccumulator::new(min, max, bits, steps, mode)?;
    acc.add(values);
    acc.best()
}
