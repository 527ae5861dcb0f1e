//! Neuron dynamics under the rectified-linear postsynaptic kernel.
//!
//! Each input spike at `t_i` with weight `w_i` contributes
//! `w_i * max(0, t - t_i)` to the membrane potential, so the potential is
//! piecewise linear in `t` and the first threshold crossing has a closed
//! form: within the segment where exactly the inputs `C` have arrived,
//! the crossing sits at `t = (threshold + sum_{i in C} w_i t_i) / sum_{i in C} w_i`.

use crate::error::{Error, Result};
use crate::spike::{Real, SpikePattern};

/// Weights and firing threshold of one fully connected layer.
///
/// Logical shape is `[n_pre x n_post]`; storage is one contiguous row of
/// incoming weights per output neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayerParams<F = f32> {
    n_pre: usize,
    n_post: usize,
    threshold: F,
    weights: Vec<F>,
}

impl<F: Real> DenseLayerParams<F> {
    pub fn new(n_pre: usize, n_post: usize, threshold: F, weights: Vec<F>) -> Result<Self> {
        if weights.len() != n_pre * n_post {
            return Err(Error::DimensionMismatch {
                context: "dense layer weights",
                expected: n_pre * n_post,
                actual: weights.len(),
            });
        }
        if !(threshold > F::zero()) || !threshold.is_finite() {
            return Err(Error::InvalidValue {
                what: "threshold",
                reason: format!("must be a positive finite real, got {threshold}"),
            });
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::InvalidValue {
                what: "weight",
                reason: format!("non-finite entry {w}"),
            });
        }
        Ok(Self {
            n_pre,
            n_post,
            threshold,
            weights,
        })
    }

    pub fn n_pre(&self) -> usize {
        self.n_pre
    }

    pub fn n_post(&self) -> usize {
        self.n_post
    }

    pub fn threshold(&self) -> F {
        self.threshold
    }

    /// Weight of the connection from input `i` to output `j`.
    pub fn weight(&self, i: usize, j: usize) -> F {
        self.weights[j * self.n_pre + i]
    }

    /// Incoming weight vector of output neuron `j`.
    pub fn incoming(&self, j: usize) -> &[F] {
        &self.weights[j * self.n_pre..(j + 1) * self.n_pre]
    }

    /// Flat parameter storage, one row of incoming weights per output neuron.
    pub fn raw(&self) -> &[F] {
        &self.weights
    }

    pub fn raw_mut(&mut self) -> &mut [F] {
        &mut self.weights
    }
}

/// The presynaptic spikes that arrived strictly before the output spike,
/// together with the running sums the closed form is built from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CausalSet<F = f32> {
    pub indices: Vec<u32>,
    pub weight_sum: F,
    pub weighted_time_sum: F,
}

impl<F: Real> CausalSet<F> {
    pub fn contains(&self, i: usize) -> bool {
        self.indices.iter().any(|&x| x as usize == i)
    }
}

/// Forward-pass record for one output neuron: its spike time (window end if
/// it never fired) and its causal set (empty for dead neurons).
#[derive(Clone, Debug)]
pub struct NeuronTrace<F = f32> {
    pub time: F,
    pub causal: CausalSet<F>,
}

impl<F: Real> NeuronTrace<F> {
    /// A neuron with no threshold crossing inside the window is dead: no
    /// gradient flows through it.
    pub fn is_dead(&self) -> bool {
        self.causal.indices.is_empty()
    }
}

/// Complete forward record of one layer application: one entry per output
/// neuron, dead neurons included.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F = f32> {
    pub neurons: Vec<NeuronTrace<F>>,
}

/// Membrane potential at time `t` under the rectified-linear kernel.
///
/// Reference evaluation only; the fast path never integrates the potential.
pub fn membrane_potential<F: Real>(
    inputs: &SpikePattern<F>,
    weights_col: &[F],
    t: F,
) -> Result<F> {
    if weights_col.len() != inputs.len() {
        return Err(Error::DimensionMismatch {
            context: "membrane_potential weights",
            expected: inputs.len(),
            actual: weights_col.len(),
        });
    }
    let mut v = F::zero();
    for (&ti, &w) in inputs.times().iter().zip(weights_col) {
        if t > ti {
            v += w * (t - ti);
        }
    }
    Ok(v)
}

/// Input indices sorted by spike time, ties broken by ascending index.
pub(crate) fn sort_order<F: Real>(times: &[F]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..times.len() as u32).collect();
    order.sort_by(|&a, &b| {
        times[a as usize]
            .partial_cmp(&times[b as usize])
            .expect("spike times are ordered")
    });
    order
}

/// Prefix scan over the time-sorted inputs. For each prefix the candidate
/// crossing is `(threshold + S) / W`; it is accepted iff the slope is
/// positive and the candidate falls inside the prefix's time segment.
/// Returns the window end with an empty causal set when no crossing exists
/// before `t_max`.
pub(crate) fn solve_sorted<F: Real>(
    times: &[F],
    t_max: F,
    order: &[u32],
    weights: &[F],
    threshold: F,
) -> NeuronTrace<F> {
    let n = order.len();
    let mut weight_sum = F::zero();
    let mut weighted_time_sum = F::zero();
    for k in 0..n {
        let i = order[k] as usize;
        let ti = times[i];
        if ti >= t_max {
            // Window-edge inputs contribute nothing inside the window, and
            // every later prefix would place the candidate at or past t_max.
            break;
        }
        let w = weights[i];
        weight_sum += w;
        weighted_time_sum += w * ti;
        let segment_end = if k + 1 < n {
            let next = times[order[k + 1] as usize];
            if next < t_max {
                next
            } else {
                t_max
            }
        } else {
            t_max
        };
        if weight_sum > F::zero() {
            // candidate = (threshold + S) / W, compared without dividing
            let num = threshold + weighted_time_sum;
            if num >= weight_sum * ti && num < weight_sum * segment_end {
                let t = num / weight_sum;
                return NeuronTrace {
                    time: t,
                    causal: CausalSet {
                        indices: order[..=k].to_vec(),
                        weight_sum,
                        weighted_time_sum,
                    },
                };
            }
        }
    }
    NeuronTrace {
        time: t_max,
        causal: CausalSet::default(),
    }
}

/// First threshold crossing of one neuron, in closed form.
///
/// The returned time equals the first time `membrane_potential` reaches the
/// threshold, up to float round-off; absence of a crossing is reported as a
/// window-end spike with an empty causal set, not as an error.
pub fn solve_spike_time<F: Real>(
    inputs: &SpikePattern<F>,
    weights_col: &[F],
    threshold: F,
) -> Result<(F, CausalSet<F>)> {
    if weights_col.len() != inputs.len() {
        return Err(Error::DimensionMismatch {
            context: "solve_spike_time weights",
            expected: inputs.len(),
            actual: weights_col.len(),
        });
    }
    let order = sort_order(inputs.times());
    let trace = solve_sorted(
        inputs.times(),
        inputs.t_max(),
        &order,
        weights_col,
        threshold,
    );
    Ok((trace.time, trace.causal))
}

/// Applies `solve_spike_time` across all output neurons of a dense layer.
/// The input sort order is shared by every output column.
pub fn forward_layer<F: Real>(
    inputs: &SpikePattern<F>,
    params: &DenseLayerParams<F>,
) -> Result<(SpikePattern<F>, ForwardTrace<F>)> {
    if inputs.len() != params.n_pre() {
        return Err(Error::DimensionMismatch {
            context: "forward_layer input",
            expected: params.n_pre(),
            actual: inputs.len(),
        });
    }
    let order = sort_order(inputs.times());
    let t_max = inputs.t_max();
    let mut times = Vec::with_capacity(params.n_post());
    let mut neurons = Vec::with_capacity(params.n_post());
    for j in 0..params.n_post() {
        let trace = solve_sorted(
            inputs.times(),
            t_max,
            &order,
            params.incoming(j),
            params.threshold(),
        );
        times.push(trace.time);
        neurons.push(trace);
    }
    let pattern = SpikePattern::new(times, t_max)?;
    Ok((pattern, ForwardTrace { neurons }))
}
