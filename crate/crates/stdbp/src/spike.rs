//! Single-spike temporal signals: every neuron reports at most one spike time
//! inside the simulation window `[0, t_max]`, and `t_max` itself doubles as
//! the no-spike sentinel.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type of the spike-time arithmetic. The pipeline runs `f32`;
/// oracles and high-precision checks instantiate `f64`.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from(x).expect("literal representable in any float type")
    }
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// End of the default simulation window. Inputs are encoded into `[0, 1]`,
/// leaving headroom for later-layer spikes.
pub const DEFAULT_T_MAX: f64 = 4.0;

/// Default firing threshold. Only the ratio threshold/weight-scale matters,
/// so the threshold is fixed and the weights are learned.
pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// First-spike times for one layer, one entry per neuron.
///
/// A time equal to `t_max` means the neuron never fired inside the window.
/// The pattern is immutable after creation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikePattern<F = f32> {
    times: Vec<F>,
    t_max: F,
}

impl<F: Real> SpikePattern<F> {
    /// Builds a pattern, validating `0 <= t <= t_max` for every entry.
    pub fn new(times: Vec<F>, t_max: F) -> Result<Self> {
        if !(t_max > F::zero()) {
            return Err(Error::InvalidValue {
                what: "t_max",
                reason: format!("must be positive, got {t_max}"),
            });
        }
        for (i, &t) in times.iter().enumerate() {
            if !(t >= F::zero() && t <= t_max) {
                return Err(Error::InvalidValue {
                    what: "spike time",
                    reason: format!("times[{i}] = {t} outside [0, {t_max}]"),
                });
            }
        }
        Ok(Self { times, t_max })
    }

    /// Pattern in which no neuron fires (all entries at the sentinel).
    pub fn silent(len: usize, t_max: F) -> Self {
        Self {
            times: vec![t_max; len],
            t_max,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[F] {
        &self.times
    }

    pub fn t_max(&self) -> F {
        self.t_max
    }

    pub fn get(&self, i: usize) -> F {
        self.times[i]
    }

    /// True if neuron `i` stayed silent for the whole window.
    pub fn is_no_spike(&self, i: usize) -> bool {
        self.times[i] >= self.t_max
    }

    /// Number of neurons that fired a real spike before the window end.
    pub fn spiked_count(&self) -> usize {
        let t_max = self.t_max;
        self.times.iter().filter(|&&t| t < t_max).count()
    }

    /// Index of the earliest spike; ties go to the lowest index.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &t) in self.times.iter().enumerate().skip(1) {
            if t < self.times[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_times_outside_window() {
        assert!(SpikePattern::new(vec![0.0f32, 4.5], 4.0).is_err());
        assert!(SpikePattern::new(vec![-0.1f32], 4.0).is_err());
        assert!(SpikePattern::new(vec![0.0f32, 4.0], 4.0).is_ok());
    }

    #[test]
    fn sentinel_compares_late() {
        let p = SpikePattern::new(vec![0.3f32, 4.0, 1.0], 4.0).unwrap();
        assert!(p.is_no_spike(1));
        assert!(!p.is_no_spike(0));
        assert_eq!(p.spiked_count(), 2);
        assert_eq!(p.argmin(), 0);
    }

    #[test]
    fn argmin_breaks_ties_low() {
        let p = SpikePattern::new(vec![1.0f32, 0.5, 0.5], 4.0).unwrap();
        assert_eq!(p.argmin(), 1);
    }
}
