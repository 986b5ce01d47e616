//! Streaming distribution statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Min, max and central moments of a stream of values, with an optional
/// fixed-range histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub count: u64,
    pub min: f32,
    pub max: f32,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
    /// Sum of cubed deviations from the mean.
    pub m3: f64,
    pub histogram: Option<Histogram>,
}

impl TensorStats {
    pub fn from_values(values: &[f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        let mut sum = 0.0f64;
        for &v in values {
            if !v.is_finite() {
                return Err(Error::NonFinite("calibration statistics".into()));
            }
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
        }
        let n = values.len() as f64;
        let mean = sum / n;
        let (mut m2, mut m3) = (0.0f64, 0.0f64);
        for &v in values {
            let d = v as f64 - mean;
            m2 += d * d;
            m3 += d * d * d;
        }
        Ok(Self {
            count: values.len() as u64,
            min,
            max,
            mean,
            m2,
            m3,
            histogram: None,
        })
    }

    /// Combines two disjoint streams (pairwise moment update).
    pub fn merge(&mut self, other: &TensorStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + delta * delta * na * nb / n;
        let m3 = self.m3
            + other.m3
            + delta.powi(3) * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.mean = mean;
        self.m2 = m2;
        self.m3 = m3;
        match (&mut self.histogram, &other.histogram) {
            (Some(a), Some(b)) if a.lower == b.lower && a.upper == b.upper && a.counts.len() == b.counts.len() => {
                a.counts.iter_mut().zip(&b.counts).for_each(|(x, y)| *x += y);
            }
            _ => self.histogram = None,
        }
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        (self.m2 / self.count as f64).sqrt()
    }

    /// Population skewness; zero for constant data.
    pub fn skewness(&self) -> f64 {
        if self.m2 <= 0.0 {
            return 0.0;
        }
        let n = self.count as f64;
        n.sqrt() * self.m3 / self.m2.powf(1.5)
    }

    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }

    /// Fraction of observed values below `x`, from the histogram when one
    /// has been collected.
    pub fn fraction_below(&self, x: f32) -> Option<f64> {
        self.histogram.as_ref().map(|h| h.fraction_below(x))
    }
}

/// Equal-width bin counts over `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: f32,
    pub upper: f32,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lower: f32, upper: f32, bins: usize) -> Self {
        Self {
            lower,
            upper,
            counts: vec![0; bins.max(1)],
        }
    }

    fn bin(&self, v: f32) -> usize {
        let bins = self.counts.len();
        if self.upper <= self.lower {
            return 0;
        }
        let t = (v as f64 - self.lower as f64) / (self.upper as f64 - self.lower as f64);
        ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    }

    pub fn add(&mut self, values: &[f32]) {
        for &v in values {
            let b = self.bin(v);
            self.counts[b] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of mass below `x`, interpolating linearly inside a bin.
    pub fn fraction_below(&self, x: f32) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        if x <= self.lower {
            return 0.0;
        }
        if x >= self.upper {
            return 1.0;
        }
        let bins = self.counts.len() as f64;
        let t = (x as f64 - self.lower as f64) / (self.upper as f64 - self.lower as f64) * bins;
        let full = t.floor() as usize;
        let below: u64 = self.counts[..full].iter().sum();
        let partial = self.counts.get(full).copied().unwrap_or(0) as f64 * (t - full as f64);
        (below as f64 + partial) / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn moments_of_small_sample() {
        let s = TensorStats::from_values(&[1.0, 2.0, 3.0, 10.0]).unwrap();
        assert_eq!((s.min, s.max, s.count), (1.0, 10.0, 4));
        assert!((s.mean - 4.0).abs() < 1e-12);
        // Deviations -3,-2,-1,6: m2 = 50, m3 = -27-8-1+216 = 180.
        assert!((s.m2 - 50.0).abs() < 1e-9);
        assert!((s.m3 - 180.0).abs() < 1e-9);
        assert!((s.skewness() - 2.0 * 180.0 / 50f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(matches!(TensorStats::from_values(&[]), Err(Error::EmptyCalibration)));
    }

    #[test]
    fn histogram_fraction() {
        let mut h = Histogram::new(0.0, 4.0, 4);
        h.add(&[0.5, 1.5, 2.5, 3.5, 4.0]);
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
        assert!((h.fraction_below(2.0) - 0.4).abs() < 1e-12);
        assert_eq!(h.fraction_below(-1.0), 0.0);
        assert_eq!(h.fraction_below(5.0), 1.0);
    }

    proptest! {
        #[test]
        fn merge_matches_concatenation(
            a in prop::collection::vec(-100f32..100.0, 1..50),
            b in prop::collection::vec(-100f32..100.0, 1..50),
        ) {
            let mut s = TensorStats::from_values(&a).unwrap();
            s.merge(&TensorStats::from_values(&b).unwrap());
            let all: Vec<f32> = a.iter().chain(&b).copied().collect();
            let t = TensorStats::from_values(&all).unwrap();
            prop_assert_eq!(s.count, t.count);
            prop_assert_eq!(s.min, t.min);
            prop_assert_eq!(s.max, t.max);
            prop_assert!((s.mean - t.mean).abs() < 1e-9 * (1.0 + t.mean.abs()));
            prop_assert!((s.m2 - t.m2).abs() < 1e-7 * (1.0 + t.m2));
            prop_assert!((s.m3 - t.m3).abs() < 1e-6 * (1.0 + t.m3.abs() + t.m2.powf(1.5)));
        }
    }
}
