//! Ground-truth reference implementations, deliberately independent of the
//! fast path: a dense time-stepped membrane simulator for both kernels, an
//! event-driven solver for the leaky alpha kernel, the alpha-kernel
//! linearization gradients, and central-difference helpers.
//!
//! Everything here runs in `f64`.

use crate::error::{Error, Result};
use crate::neuron::{sort_order, DenseLayerParams};
use crate::spike::SpikePattern;
use crate::topology::{Layer, Network};

/// Postsynaptic kernel selector for the reference simulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    /// `K(s) = max(0, s)`: non-leaky, piecewise linear.
    RectifiedLinear,
    /// `K(s) = (s/tau) * exp(1 - s/tau)` for `s > 0`: leaky, peaks at
    /// `s = tau` with value 1.
    Alpha { tau: f64 },
}

/// Settings of the dense simulation grid.
#[derive(Clone, Copy, Debug)]
pub struct SimConfig {
    pub threshold: f64,
    pub t_max: f64,
    pub dt: f64,
}

impl SimConfig {
    pub fn new(threshold: f64, t_max: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidValue {
                what: "dt",
                reason: format!("must be positive, got {dt}"),
            });
        }
        Ok(Self {
            threshold,
            t_max,
            dt,
        })
    }
}

/// Alpha kernel value at lag `s`.
pub fn alpha_psp(s: f64, tau: f64) -> f64 {
    if s > 0.0 {
        (s / tau) * (1.0 - s / tau).exp()
    } else {
        0.0
    }
}

/// Derivative of the alpha kernel with respect to the output time: zero at
/// the peak `s = tau`, negative beyond it.
pub fn alpha_psp_deriv(s: f64, tau: f64) -> f64 {
    if s > 0.0 {
        (1.0 - s / tau).exp() / (tau * tau) * (tau - s)
    } else {
        0.0
    }
}

fn kernel_value(kernel: Kernel, s: f64) -> f64 {
    match kernel {
        Kernel::RectifiedLinear => {
            if s > 0.0 {
                s
            } else {
                0.0
            }
        }
        Kernel::Alpha { tau } => alpha_psp(s, tau),
    }
}

/// Membrane potential at time `t` for the given kernel.
pub fn potential_at(times: &[f64], weights: &[f64], kernel: Kernel, t: f64) -> f64 {
    times
        .iter()
        .zip(weights)
        .map(|(&ti, &w)| w * kernel_value(kernel, t - ti))
        .sum()
}

/// Steps the membrane potential over a dense grid and returns the first
/// threshold crossing, linearly interpolated inside the crossing step.
/// `None` means the potential never reached the threshold in the window.
pub fn simulate_first_crossing(
    times: &[f64],
    weights: &[f64],
    kernel: Kernel,
    cfg: SimConfig,
) -> Option<f64> {
    assert_eq!(times.len(), weights.len(), "times/weights length mismatch");
    let steps = (cfg.t_max / cfg.dt).ceil() as usize;
    let mut v_prev = potential_at(times, weights, kernel, 0.0);
    if v_prev >= cfg.threshold {
        return Some(0.0);
    }
    for k in 1..=steps {
        let t = (k as f64 * cfg.dt).min(cfg.t_max);
        let v = potential_at(times, weights, kernel, t);
        if v >= cfg.threshold {
            let t_prev = (k - 1) as f64 * cfg.dt;
            let frac = if v > v_prev {
                (cfg.threshold - v_prev) / (v - v_prev)
            } else {
                1.0
            };
            return Some(t_prev + frac * (t - t_prev));
        }
        v_prev = v;
    }
    None
}

/// Forward record of one alpha-kernel neuron: crossing time, the inputs
/// that arrived before it, and the potential slope at the crossing (the
/// denominator of the linearization gradients).
#[derive(Clone, Debug)]
pub struct AlphaTrace {
    pub time: f64,
    pub causal: Vec<u32>,
    pub slope_at_crossing: f64,
}

/// Event-driven first-crossing solver for the alpha kernel.
///
/// Inside the segment between two consecutive input spikes the potential is
/// `V(t) = (e/tau) * exp(-t/tau) * (t*A - B)` with per-segment constants
/// `A = sum w_i exp(t_i/tau)` and `B = sum w_i t_i exp(t_i/tau)`, so `V` is
/// unimodal per segment (single stationary point at `t = tau + B/A`) and a
/// bracketed bisection finds the crossing to near machine precision.
/// Returns `None` if the neuron never fires inside the window.
pub fn alpha_first_crossing(
    times: &[f64],
    weights: &[f64],
    threshold: f64,
    tau: f64,
    t_max: f64,
) -> Option<AlphaTrace> {
    let order = sort_order(times);
    alpha_solve_sorted(times, &order, weights, threshold, tau, t_max)
}

pub(crate) fn alpha_solve_sorted(
    times: &[f64],
    order: &[u32],
    weights: &[f64],
    threshold: f64,
    tau: f64,
    t_max: f64,
) -> Option<AlphaTrace> {
    let n = order.len();
    let scale = std::f64::consts::E / tau;
    let mut a_sum = 0.0; // sum of w * exp(t_i/tau) over active inputs
    let mut b_sum = 0.0; // sum of w * t_i * exp(t_i/tau)
    let v = |a: f64, b: f64, t: f64| scale * (-t / tau).exp() * (t * a - b);

    for k in 0..n {
        let i = order[k] as usize;
        let ti = times[i];
        if ti >= t_max {
            break;
        }
        let e = (ti / tau).exp();
        a_sum += weights[i] * e;
        b_sum += weights[i] * ti * e;
        let seg_end = if k + 1 < n {
            times[order[k + 1] as usize].min(t_max)
        } else {
            t_max
        };
        if seg_end <= ti {
            continue; // empty segment: simultaneous arrivals
        }
        // V(ti) < threshold is maintained (otherwise an earlier segment
        // already produced the crossing); find where V - threshold first
        // turns nonnegative inside [ti, seg_end].
        let f = |t: f64| v(a_sum, b_sum, t) - threshold;
        let stationary = if a_sum != 0.0 {
            let s = tau + b_sum / a_sum;
            (s > ti && s < seg_end).then_some(s)
        } else {
            None
        };
        let mut bracket: Option<(f64, f64)> = None;
        match stationary {
            Some(s) => {
                if f(s) >= 0.0 {
                    bracket = Some((ti, s));
                } else if f(seg_end) >= 0.0 {
                    bracket = Some((s, seg_end));
                }
            }
            None => {
                if f(seg_end) >= 0.0 {
                    bracket = Some((ti, seg_end));
                }
            }
        }
        if let Some((mut lo, mut hi)) = bracket {
            // f(lo) < 0 <= f(hi), f monotone on the bracket
            for _ in 0..200 {
                if hi - lo < 1e-14 * hi.max(1.0) {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if f(mid) >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let t_cross = hi;
            if t_cross >= t_max {
                return None;
            }
            let slope = scale * (-t_cross / tau).exp() * (a_sum - (t_cross * a_sum - b_sum) / tau);
            return Some(AlphaTrace {
                time: t_cross,
                causal: order[..=k].to_vec(),
                slope_at_crossing: slope,
            });
        }
    }
    None
}

/// Linearization gradients of an alpha-kernel spike with respect to one
/// causal input: `(dt/dw_i, dt/dt_i)`.
///
/// Both share the denominator `slope_at_crossing`; when that slope
/// approaches zero the returned values blow up, which is reported as-is.
pub fn alpha_grad(
    trace: &AlphaTrace,
    times: &[f64],
    weights: &[f64],
    tau: f64,
    i: usize,
) -> (f64, f64) {
    let s = trace.time - times[i];
    if s <= 0.0 {
        return (0.0, 0.0);
    }
    let d = trace.slope_at_crossing;
    let dtdw = -alpha_psp(s, tau) / d;
    let dtdt = weights[i] * alpha_psp_deriv(s, tau) / d;
    (dtdw, dtdt)
}

/// Per-neuron forward record of an alpha-kernel network layer. A silent
/// neuron has an empty causal set and zero slope.
#[derive(Clone, Debug)]
pub struct AlphaNeuron {
    pub time: f64,
    pub causal: Vec<u32>,
    pub slope: f64,
}

/// Forward record of a dense alpha-kernel network.
#[derive(Clone, Debug)]
pub struct AlphaNetTrace {
    pub signals: Vec<SpikePattern<f32>>,
    pub layers: Vec<Vec<AlphaNeuron>>,
}

fn dense_layers<'a>(net: &'a Network<f32>) -> Result<Vec<&'a DenseLayerParams<f32>>> {
    net.layers()
        .iter()
        .map(|l| match l {
            Layer::Dense(p) => Ok(p),
            _ => Err(Error::InvalidValue {
                what: "alpha network",
                reason: "the alpha kernel supports fully connected layers only".into(),
            }),
        })
        .collect()
}

/// Forward pass of a dense network under the alpha kernel: each neuron's
/// first crossing is found event-drivenly in `f64` and quantized back to
/// the `f32` spike pattern that feeds the next layer.
pub fn alpha_forward_network(
    net: &Network<f32>,
    input: &SpikePattern<f32>,
    tau: f64,
) -> Result<(SpikePattern<f32>, AlphaNetTrace)> {
    let layers = dense_layers(net)?;
    let t_max = net.t_max();
    let t_max64 = t_max as f64;
    if input.len() != net.arch().input().units() {
        return Err(Error::DimensionMismatch {
            context: "alpha network input",
            expected: net.arch().input().units(),
            actual: input.len(),
        });
    }
    let mut signals = vec![input.clone()];
    let mut layer_traces = Vec::with_capacity(layers.len());
    for params in &layers {
        let current = signals.last().expect("nonempty");
        let times64: Vec<f64> = current.times().iter().map(|&t| t as f64).collect();
        let order = sort_order(&times64);
        let mut out_times = Vec::with_capacity(params.n_post());
        let mut neurons = Vec::with_capacity(params.n_post());
        for j in 0..params.n_post() {
            let row = params.incoming(j);
            let weights64: Vec<f64> = row.iter().map(|&w| w as f64).collect();
            match alpha_solve_sorted(
                &times64,
                &order,
                &weights64,
                params.threshold() as f64,
                tau,
                t_max64,
            ) {
                Some(trace) => {
                    out_times.push(trace.time as f32);
                    neurons.push(AlphaNeuron {
                        time: trace.time,
                        causal: trace.causal,
                        slope: trace.slope_at_crossing,
                    });
                }
                None => {
                    out_times.push(t_max);
                    neurons.push(AlphaNeuron {
                        time: t_max64,
                        causal: Vec::new(),
                        slope: 0.0,
                    });
                }
            }
        }
        signals.push(SpikePattern::new(out_times, t_max)?);
        layer_traces.push(neurons);
    }
    let output = signals.last().expect("nonempty").clone();
    Ok((
        output,
        AlphaNetTrace {
            signals,
            layers: layer_traces,
        },
    ))
}

/// Reverse accumulation through an alpha-kernel forward record, using the
/// linearization gradients: `dt/dw = -K(s)/slope` and
/// `dt/dt_i = w * K'(s)/slope` over the causal set. Exploding values near
/// zero slopes are propagated as-is.
pub fn alpha_backward_network(
    net: &Network<f32>,
    trace: &AlphaNetTrace,
    output_grad: &[f32],
    tau: f64,
) -> Result<crate::backprop::GradientSet<f32>> {
    let layers = dense_layers(net)?;
    if trace.layers.len() != layers.len() || trace.signals.len() != layers.len() + 1 {
        return Err(Error::DimensionMismatch {
            context: "alpha backward trace",
            expected: layers.len(),
            actual: trace.layers.len(),
        });
    }
    if output_grad.len() != net.arch().output_units() {
        return Err(Error::DimensionMismatch {
            context: "alpha backward output grad",
            expected: net.arch().output_units(),
            actual: output_grad.len(),
        });
    }
    let mut grad_layers_rev: Vec<Vec<f32>> = Vec::new();
    let mut down: Vec<f64> = output_grad.iter().map(|&g| g as f64).collect();
    for (idx, params) in layers.iter().enumerate().rev() {
        let input_signal = &trace.signals[idx];
        let n_pre = params.n_pre();
        let mut up = vec![0.0f64; n_pre];
        let mut gw = vec![0.0f32; n_pre * params.n_post()];
        for (j, neuron) in trace.layers[idx].iter().enumerate() {
            let gj = down[j];
            if gj == 0.0 || neuron.causal.is_empty() {
                continue;
            }
            let d = neuron.slope;
            let row = params.incoming(j);
            for &i in &neuron.causal {
                let i = i as usize;
                let s = neuron.time - input_signal.get(i) as f64;
                let eps = alpha_psp(s, tau);
                let deriv = alpha_psp_deriv(s, tau);
                gw[j * n_pre + i] += (gj * (-eps / d)) as f32;
                up[i] += gj * (row[i] as f64) * deriv / d;
            }
        }
        grad_layers_rev.push(gw);
        down = up;
    }
    grad_layers_rev.reverse();
    let grads = crate::backprop::GradientSet {
        layers: grad_layers_rev,
    };
    for (li, layer) in grads.layers.iter().enumerate() {
        if let Some(bad) = layer.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite alpha gradient {bad} in layer {li}"
            )));
        }
    }
    Ok(grads)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    assert!(h > 0.0, "step must be positive");
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference gradient estimate of a scalar function of a
/// parameter vector.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}
