//! Intensity-to-latency encoding: stronger inputs fire earlier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spike::{Real, SpikePattern};

/// Parameters of the linear intensity-to-latency map.
///
/// An intensity of `intensity_max` spikes at `t_min`, an intensity of zero
/// spikes at `t_max_input`; the map is linear in between. Encoded spikes
/// must stay inside the simulation window, i.e. `t_max_input <= t_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub t_min: f64,
    pub t_max_input: f64,
    pub intensity_max: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            t_min: 0.0,
            t_max_input: 1.0,
            intensity_max: 255.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, t_max: f64) -> Result<()> {
        if !(0.0 <= self.t_min && self.t_min < self.t_max_input && self.t_max_input <= t_max) {
            return Err(Error::InvalidValue {
                what: "encoder window",
                reason: format!(
                    "need 0 <= t_min < t_max_input <= t_max, got t_min={}, t_max_input={}, t_max={t_max}",
                    self.t_min, self.t_max_input
                ),
            });
        }
        if !(self.intensity_max > 0.0) {
            return Err(Error::InvalidValue {
                what: "intensity_max",
                reason: format!("must be positive, got {}", self.intensity_max),
            });
        }
        Ok(())
    }

    /// Latency of a single intensity value.
    pub fn latency<F: Real>(&self, intensity: F) -> F {
        let t_min = F::lit(self.t_min);
        let span = F::lit(self.t_max_input - self.t_min);
        let inv_max = F::lit(1.0 / self.intensity_max);
        t_min + (F::one() - intensity * inv_max) * span
    }

    /// Encodes a vector of intensities into one spike per input neuron.
    /// Zero-intensity inputs still emit a (late) spike at `t_max_input`.
    pub fn encode_image<F: Real>(&self, pixels: &[F], t_max: F) -> Result<SpikePattern<F>> {
        let max = F::lit(self.intensity_max);
        let mut times = Vec::with_capacity(pixels.len());
        for (i, &x) in pixels.iter().enumerate() {
            if !(x >= F::zero() && x <= max) {
                return Err(Error::InvalidValue {
                    what: "intensity",
                    reason: format!("pixels[{i}] = {x} outside [0, {max}]"),
                });
            }
            times.push(self.latency(x));
        }
        SpikePattern::new(times, t_max)
    }

    /// Encodes 8-bit intensities.
    pub fn encode_bytes<F: Real>(&self, pixels: &[u8], t_max: F) -> Result<SpikePattern<F>> {
        let floats: Vec<F> = pixels.iter().map(|&b| F::lit(b as f64)).collect();
        self.encode_image(&floats, t_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T_MAX: f64 = 4.0;

    #[test]
    fn brightest_fires_first() {
        let enc = EncoderConfig::default();
        let p = enc.encode_image(&[255.0f64], T_MAX).unwrap();
        assert_eq!(p.get(0), 0.0);
    }

    #[test]
    fn zero_intensity_fires_last() {
        let enc = EncoderConfig::default();
        let p = enc.encode_image(&[0.0f64], T_MAX).unwrap();
        assert_eq!(p.get(0), 1.0);
    }

    #[test]
    fn midpoint_is_linear() {
        let enc = EncoderConfig {
            t_min: 0.0,
            t_max_input: 1.0,
            intensity_max: 255.0,
        };
        let p = enc.encode_image(&[127.5f64], T_MAX).unwrap();
        assert!((p.get(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_rejected() {
        let enc = EncoderConfig::default();
        assert!(enc.encode_image(&[256.0f64], T_MAX).is_err());
        assert!(enc.encode_image(&[-1.0f64], T_MAX).is_err());
    }

    #[test]
    fn window_validation() {
        let enc = EncoderConfig {
            t_min: 0.5,
            t_max_input: 0.5,
            intensity_max: 255.0,
        };
        assert!(enc.validate(T_MAX).is_err());
        let enc = EncoderConfig {
            t_min: 0.0,
            t_max_input: 5.0,
            intensity_max: 255.0,
        };
        assert!(enc.validate(T_MAX).is_err());
        assert!(EncoderConfig::default().validate(T_MAX).is_ok());
    }

    proptest! {
        #[test]
        fn order_reversal(a in 0.0f64..=255.0, b in 0.0f64..=255.0) {
            let enc = EncoderConfig::default();
            let p = enc.encode_image(&[a, b], T_MAX).unwrap();
            if a > b {
                prop_assert!(p.get(0) < p.get(1));
            } else if a < b {
                prop_assert!(p.get(0) > p.get(1));
            } else {
                prop_assert_eq!(p.get(0), p.get(1));
            }
        }

        #[test]
        fn range_containment(xs in proptest::collection::vec(0.0f64..=255.0, 1..64)) {
            let enc = EncoderConfig::default();
            let p = enc.encode_image(&xs, T_MAX).unwrap();
            for i in 0..p.len() {
                let t = p.get(i);
                prop_assert!((enc.t_min..=enc.t_max_input).contains(&t));
            }
        }
    }
}
