//! Loss over output spike times and exact reverse-mode gradients.
//!
//! The gradients follow from the closed-form spike time: within a fixed
//! causal set `C` with weight sum `W`, a spiking neuron satisfies
//! `dt_j/dw_ij = (t_i - t_j)/W` and `dt_j/dt_i = w_ij/W` for `i in C`, and
//! both are zero for non-causal inputs and for dead neurons. Causal sets
//! are treated as locally constant: the derivative is exact everywhere
//! except on the measure-zero boundaries where a set membership flips.

use crate::error::{Error, Result};
use crate::neuron::NeuronTrace;
use crate::spike::{Real, SpikePattern};
use crate::topology::{Layer, LayerTrace, Network, NetworkTrace, SignalShape};

/// Classification readout: softmax over negated spike times.
#[derive(Clone, Debug)]
pub struct LossOutput<F = f32> {
    pub loss: F,
    pub probabilities: Vec<F>,
    pub predicted: usize,
}

/// Cross-entropy loss over negated output spike times, with its gradient.
///
/// `p_j = exp(-t_j) / sum_i exp(-t_i)` (stabilized by subtracting the
/// earliest time), `loss = -ln p_target`, and
/// `dL/dt_j = [j == target] - p_j`: making the target fire earlier and the
/// others later decreases the loss.
pub fn loss_and_grad_output<F: Real>(
    times: &SpikePattern<F>,
    target: usize,
) -> Result<(LossOutput<F>, Vec<F>)> {
    let n = times.len();
    if target >= n {
        return Err(Error::InvalidValue {
            what: "target class",
            reason: format!("index {target} out of range for {n} outputs"),
        });
    }
    let ts = times.times();
    let t_min = ts.iter().cloned().fold(F::infinity(), F::min);
    let mut exps = Vec::with_capacity(n);
    let mut sum = F::zero();
    for &t in ts {
        let e = (t_min - t).exp();
        exps.push(e);
        sum += e;
    }
    let probabilities: Vec<F> = exps.iter().map(|&e| e / sum).collect();
    let loss = (ts[target] - t_min) + sum.ln();
    let grad: Vec<F> = probabilities
        .iter()
        .enumerate()
        .map(|(j, &p)| if j == target { F::one() - p } else { -p })
        .collect();
    let predicted = times.argmin();
    Ok((
        LossOutput {
            loss,
            probabilities,
            predicted,
        },
        grad,
    ))
}

/// `dt_j/dw_ij` for one edge: `(t_i - t_j) / W` when input `i` is causal,
/// zero for non-causal inputs and dead neurons.
pub fn grad_weight<F: Real>(inputs: &SpikePattern<F>, neuron: &NeuronTrace<F>, i: usize) -> F {
    if neuron.is_dead() || !neuron.causal.contains(i) {
        return F::zero();
    }
    (inputs.get(i) - neuron.time) / neuron.causal.weight_sum
}

/// `dt_j/dt_i` for one edge: `w_ij / W` when input `i` is causal, else zero.
pub fn grad_input_time<F: Real>(weight: F, neuron: &NeuronTrace<F>, i: usize) -> F {
    if neuron.is_dead() || !neuron.causal.contains(i) {
        return F::zero();
    }
    weight / neuron.causal.weight_sum
}

/// Per-layer weight gradients, shapes mirroring the trainable parameters.
#[derive(Clone, Debug)]
pub struct GradientSet<F = f32> {
    pub layers: Vec<Vec<F>>,
}

impl<F: Real> GradientSet<F> {
    /// Zero gradients shaped like the network's trainable layers.
    pub fn zeros_like(net: &Network<F>) -> Self {
        Self {
            layers: net.trainable().iter().map(|p| vec![F::zero(); p.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet<F>) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            assert_eq!(a.len(), b.len());
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for layer in &mut self.layers {
            for x in layer.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// Reverse accumulation through the recorded forward pass: distributes
/// `dL/dt` at the output back through every layer, summing shared-kernel
/// contributions over positions and stopping at dead neurons.
pub fn backward<F: Real>(
    net: &Network<F>,
    trace: &NetworkTrace<F>,
    output_grad: &[F],
) -> Result<GradientSet<F>> {
    let n_layers = net.layers().len();
    if trace.layers.len() != n_layers || trace.signals.len() != n_layers + 1 {
        return Err(Error::DimensionMismatch {
            context: "backward trace",
            expected: n_layers,
            actual: trace.layers.len(),
        });
    }
    let out_units = net.arch().output_units();
    if output_grad.len() != out_units {
        return Err(Error::DimensionMismatch {
            context: "backward output grad",
            expected: out_units,
            actual: output_grad.len(),
        });
    }

    let mut grad_layers_rev: Vec<Vec<F>> = Vec::new();
    let mut down = output_grad.to_vec();
    for idx in (0..n_layers).rev() {
        let input_signal = &trace.signals[idx];
        let mut up = vec![F::zero(); input_signal.len()];
        match (&net.layers()[idx], &trace.layers[idx]) {
            (Layer::Dense(p), LayerTrace::Neurons(tr)) => {
                let n_pre = p.n_pre();
                let mut gw = vec![F::zero(); n_pre * p.n_post()];
                for (j, neuron) in tr.neurons.iter().enumerate() {
                    let gj = down[j];
                    if gj == F::zero() || neuron.is_dead() {
                        continue;
                    }
                    let inv_w = F::one() / neuron.causal.weight_sum;
                    let tj = neuron.time;
                    let row = p.incoming(j);
                    for &i in &neuron.causal.indices {
                        let i = i as usize;
                        gw[j * n_pre + i] += gj * (input_signal.get(i) - tj) * inv_w;
                        up[i] += gj * row[i] * inv_w;
                    }
                }
                grad_layers_rev.push(gw);
            }
            (Layer::Conv(p), LayerTrace::Neurons(tr)) => {
                let SignalShape::Grid { c: _, h, w } = net.arch().shape_before(idx) else {
                    unreachable!("conv input validated at build");
                };
                let SignalShape::Grid { c: _, h: oh, w: ow } = net.arch().shape_after(idx) else {
                    unreachable!("conv output is a grid");
                };
                let plane = oh * ow;
                let k = p.size();
                let rf_len = p.rf_len();
                let mut gk = vec![F::zero(); p.c_out() * rf_len];
                for (n_idx, neuron) in tr.neurons.iter().enumerate() {
                    let gj = down[n_idx];
                    if gj == F::zero() || neuron.is_dead() {
                        continue;
                    }
                    let o = n_idx / plane;
                    let oy = (n_idx % plane) / ow;
                    let ox = n_idx % ow;
                    let inv_w = F::one() / neuron.causal.weight_sum;
                    let tj = neuron.time;
                    let kernel = p.kernel(o);
                    for &slot in &neuron.causal.indices {
                        let slot = slot as usize;
                        let ci = slot / (k * k);
                        let rem = slot % (k * k);
                        let (ky, kx) = (rem / k, rem % k);
                        let in_idx = ci * h * w + (oy + ky) * w + (ox + kx);
                        gk[o * rf_len + slot] += gj * (input_signal.get(in_idx) - tj) * inv_w;
                        up[in_idx] += gj * kernel[slot] * inv_w;
                    }
                }
                grad_layers_rev.push(gk);
            }
            (Layer::Pool { .. }, LayerTrace::Pool(tr)) => {
                for (cell, route) in tr.routes.iter().enumerate() {
                    if let Some(i) = route {
                        up[*i as usize] += down[cell];
                    }
                }
            }
            _ => {
                return Err(Error::InvalidValue {
                    what: "trace",
                    reason: format!("layer {idx} trace does not match the layer kind"),
                });
            }
        }
        down = up;
    }

    grad_layers_rev.reverse();
    let grads = GradientSet {
        layers: grad_layers_rev,
    };
    for (li, layer) in grads.layers.iter().enumerate() {
        if let Some(bad) = layer.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {bad} in trainable layer {li}"
            )));
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::{forward_layer, solve_spike_time, DenseLayerParams};
    use crate::oracle::finite_diff_grad;
    use crate::topology::{parse_architecture, Layer, Network};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const T_MAX: f64 = 4.0;

    fn pat(times: &[f64]) -> SpikePattern<f64> {
        SpikePattern::new(times.to_vec(), T_MAX).unwrap()
    }

    #[test]
    fn uniform_softmax_loss() {
        let (out, grad) = loss_and_grad_output(&pat(&[1.0, 1.0, 1.0]), 0).unwrap();
        assert!((out.loss - 3.0f64.ln()).abs() < 1e-12);
        for p in &out.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        // target fires earlier to reduce loss: positive gradient on the
        // target time, negative on the others
        assert!((grad[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((grad[1] + 1.0 / 3.0).abs() < 1e-12);
        assert!((grad[2] + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn near_certain_correct_loss() {
        let (out, _) = loss_and_grad_output(&pat(&[0.0, 4.0]), 0).unwrap();
        let expected = (1.0 + (-4.0f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-12, "got {}", out.loss);
        assert_eq!(out.predicted, 0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let times: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..4.0)).collect();
            let target = rng.gen_range(0..10);
            let (_, grad) = loss_and_grad_output(&pat(&times), target).unwrap();
            let fd = finite_diff_grad(
                |ts| {
                    let (o, _) = loss_and_grad_output(&pat(ts), target).unwrap();
                    o.loss
                },
                &times,
                1e-4,
            );
            for (g, f) in grad.iter().zip(&fd) {
                assert!((g - f).abs() < 1e-6, "analytic {g} vs fd {f}");
            }
        }
    }

    #[test]
    fn target_out_of_range_errors() {
        assert!(loss_and_grad_output(&pat(&[1.0, 2.0]), 2).is_err());
    }

    #[test]
    fn softmax_normalizes_at_extremes() {
        for times in [
            vec![0.0, 0.0, 0.0],
            vec![4.0, 4.0, 4.0],
            vec![0.0, 4.0, 4.0],
            vec![0.0, 2.0, 4.0],
        ] {
            let (out, _) = loss_and_grad_output(&pat(&times), 0).unwrap();
            let sum: f64 = out.probabilities.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum {sum} for {times:?}");
        }
    }

    #[test]
    fn argmin_equals_argmax_probability() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let times: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..4.0)).collect();
            let (out, _) = loss_and_grad_output(&pat(&times), 0).unwrap();
            let argmax = out
                .probabilities
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(out.predicted, argmax);
        }
    }

    #[test]
    fn grad_weight_plugs_in() {
        let inputs = pat(&[0.0]);
        let (t, causal) = solve_spike_time(&inputs, &[2.0], 1.0).unwrap();
        assert_eq!(t, 0.5);
        let neuron = NeuronTrace { time: t, causal };
        // (t_i - t_j) / W = (0 - 0.5) / 2
        assert_eq!(grad_weight(&inputs, &neuron, 0), -0.25);
    }

    #[test]
    fn non_causal_edges_get_zero() {
        let inputs = pat(&[0.0, 0.9]);
        let (t, causal) = solve_spike_time(&inputs, &[2.0, 1.0], 1.0).unwrap();
        assert_eq!(t, 0.5);
        let neuron = NeuronTrace { time: t, causal };
        assert_eq!(grad_weight(&inputs, &neuron, 1), 0.0);
        assert_eq!(grad_input_time(1.0, &neuron, 1), 0.0);
        // dead neuron: all zeros
        let (t, causal) = solve_spike_time(&inputs, &[-1.0, -1.0], 1.0).unwrap();
        let dead = NeuronTrace { time: t, causal };
        assert!(dead.is_dead());
        assert_eq!(grad_weight(&inputs, &dead, 0), 0.0);
        assert_eq!(grad_input_time(-1.0, &dead, 0), 0.0);
    }

    #[test]
    fn single_causal_input_time_grad_is_one() {
        let inputs = pat(&[0.0]);
        let (t, causal) = solve_spike_time(&inputs, &[2.0], 1.0).unwrap();
        let neuron = NeuronTrace { time: t, causal };
        assert_eq!(grad_input_time(2.0, &neuron, 0), 1.0);
    }

    #[test]
    fn symmetric_pair_splits_time_grad() {
        let inputs = pat(&[0.0, 0.0]);
        let (t, causal) = solve_spike_time(&inputs, &[1.0, 1.0], 1.0).unwrap();
        let neuron = NeuronTrace { time: t, causal };
        assert_eq!(grad_input_time(1.0, &neuron, 0), 0.5);
        assert_eq!(grad_input_time(1.0, &neuron, 1), 0.5);
    }

    #[test]
    fn causal_time_grads_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(2..32);
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..1.5)).collect();
            let inputs = pat(&times);
            let (t, causal) = solve_spike_time(&inputs, &weights, 1.0).unwrap();
            if t >= T_MAX {
                continue;
            }
            let neuron = NeuronTrace { time: t, causal };
            let sum: f64 = neuron
                .causal
                .indices
                .iter()
                .map(|&i| grad_input_time(weights[i as usize], &neuron, i as usize))
                .sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        }
    }

    #[test]
    fn weight_grad_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 60 {
            let n = rng.gen_range(2..16);
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..1.2)).collect();
            let inputs = pat(&times);
            let (t, causal) = solve_spike_time(&inputs, &weights, 1.0).unwrap();
            if t >= T_MAX || causal.indices.is_empty() {
                continue;
            }
            let i = causal.indices[rng.gen_range(0..causal.indices.len())] as usize;
            let h = 1e-4;
            // exclude causal-set boundary crossings
            let probe = |delta: f64| {
                let mut ws = weights.clone();
                ws[i] += delta;
                solve_spike_time(&inputs, &ws, 1.0).unwrap()
            };
            let (tp, cp) = probe(h);
            let (tm, cm) = probe(-h);
            if cp.indices != causal.indices || cm.indices != causal.indices {
                continue;
            }
            let fd = (tp - tm) / (2.0 * h);
            let neuron = NeuronTrace { time: t, causal };
            let analytic = grad_weight(&inputs, &neuron, i);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-4, "dt/dw {analytic} vs fd {fd} (rel {rel})");
            checked += 1;
        }
    }

    fn toy_net(weights1: Vec<f64>, weights2: Vec<f64>) -> Network<f64> {
        let arch = parse_architecture("2-2-2").unwrap();
        let l1 = DenseLayerParams::new(2, 2, 1.0, weights1).unwrap();
        let l2 = DenseLayerParams::new(2, 2, 1.0, weights2).unwrap();
        Network::from_layers(arch, vec![Layer::Dense(l1), Layer::Dense(l2)], T_MAX).unwrap()
    }

    #[test]
    fn one_layer_backward_reduces_to_edge_grads() {
        let arch = parse_architecture("2-2").unwrap();
        let params = DenseLayerParams::new(2, 2, 1.0, vec![1.5, 0.5, 0.7, 1.1]).unwrap();
        let net = Network::from_layers(arch, vec![Layer::Dense(params.clone())], T_MAX).unwrap();
        let input = pat(&[0.1, 0.3]);
        let (out, trace) = net.forward(&input).unwrap();
        let (_, grad_t) = loss_and_grad_output(&out, 0).unwrap();
        let grads = backward(&net, &trace, &grad_t).unwrap();

        let (_, layer_tr) = forward_layer(&input, &params).unwrap();
        for j in 0..2 {
            for i in 0..2 {
                let expected = grad_t[j] * grad_weight(&input, &layer_tr.neurons[j], i);
                let got = grads.layers[0][j * 2 + i];
                assert!((got - expected).abs() < 1e-12, "({i},{j}): {got} vs {expected}");
            }
        }
    }

    #[test]
    fn two_layer_backward_matches_hand_chain() {
        let w1 = vec![1.6, 0.4, 0.3, 1.2];
        let w2 = vec![0.9, 0.8, 0.5, 1.4];
        let net = toy_net(w1.clone(), w2.clone());
        let input = pat(&[0.05, 0.25]);
        let (out, trace) = net.forward(&input).unwrap();
        let (_, g_out) = loss_and_grad_output(&out, 1).unwrap();
        let grads = backward(&net, &trace, &g_out).unwrap();

        // hand chain rule over all paths
        let hidden = &trace.signals[1];
        let (LayerTrace::Neurons(tr1), LayerTrace::Neurons(tr2)) =
            (&trace.layers[0], &trace.layers[1])
        else {
            panic!("dense traces expected");
        };
        // dL/dt_hidden[m] = sum_j g_out[j] * dt_j/dt_m
        let mut g_hidden = [0.0f64; 2];
        for j in 0..2 {
            for m in 0..2 {
                g_hidden[m] += g_out[j] * grad_input_time(w2[j * 2 + m], &tr2.neurons[j], m);
            }
        }
        for m in 0..2 {
            for i in 0..2 {
                let expected = g_hidden[m] * grad_weight(&input, &tr1.neurons[m], i);
                let got = grads.layers[0][m * 2 + i];
                assert!(
                    (got - expected).abs() < 1e-12,
                    "w1[{m},{i}]: {got} vs {expected}"
                );
            }
        }
        for j in 0..2 {
            for m in 0..2 {
                let expected = g_out[j] * grad_weight(hidden, &tr2.neurons[j], m);
                let got = grads.layers[1][j * 2 + m];
                assert!(
                    (got - expected).abs() < 1e-12,
                    "w2[{j},{m}]: {got} vs {expected}"
                );
            }
        }
    }

    fn causal_signature(trace: &NetworkTrace<f64>) -> Vec<Vec<Vec<u32>>> {
        trace
            .layers
            .iter()
            .map(|l| match l {
                LayerTrace::Neurons(tr) => {
                    tr.neurons.iter().map(|n| n.causal.indices.clone()).collect()
                }
                LayerTrace::Pool(tr) => tr
                    .routes
                    .iter()
                    .map(|r| r.map(|i| vec![i]).unwrap_or_default())
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn directional_derivative_agrees_over_random_directions() {
        let mut rng = StdRng::seed_from_u64(23);
        let arch = parse_architecture("6-5-3").unwrap();
        let mut build = |rng: &mut StdRng| {
            let w1: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..0.9)).collect();
            let w2: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..0.9)).collect();
            let l1 = DenseLayerParams::new(6, 5, 1.0, w1).unwrap();
            let l2 = DenseLayerParams::new(5, 3, 1.0, w2).unwrap();
            Network::from_layers(
                arch.clone(),
                vec![Layer::Dense(l1), Layer::Dense(l2)],
                T_MAX,
            )
            .unwrap()
        };
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 40 && attempts < 4000 {
            attempts += 1;
            let net = build(&mut rng);
            let input_times: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let input = pat(&input_times);
            let target = rng.gen_range(0..3);
            let (out, trace) = net.forward(&input).unwrap();
            if out.spiked_count() < 3 {
                continue;
            }
            let (_, g_out) = loss_and_grad_output(&out, target).unwrap();
            let grads = backward(&net, &trace, &g_out).unwrap();

            let flat: Vec<f64> = grads.layers.iter().flatten().cloned().collect();
            let dir: Vec<f64> = (0..flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic: f64 = flat.iter().zip(&dir).map(|(g, d)| g * d).sum();

            let h = 1e-5;
            let loss_at = |scale: f64| {
                let mut n = net.clone();
                let mut offset = 0;
                for params in n.trainable_mut() {
                    for (k, p) in params.iter_mut().enumerate() {
                        *p += scale * dir[offset + k];
                    }
                    offset += params.len();
                }
                let (o, t) = n.forward(&input).unwrap();
                let (l, _) = loss_and_grad_output(&o, target).unwrap();
                (l.loss, causal_signature(&t))
            };
            let (lp, sig_p) = loss_at(h);
            let (lm, sig_m) = loss_at(-h);
            let base_sig = causal_signature(&trace);
            if sig_p != base_sig || sig_m != base_sig {
                continue; // causal-set boundary crossed; resample
            }
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-9);
            assert!(rel < 1e-3, "directional {analytic} vs fd {fd} (rel {rel})");
            checked += 1;
        }
        assert!(checked >= 40, "only {checked} valid samples in {attempts} attempts");
    }

    #[test]
    fn dead_neurons_block_gradient_flow() {
        // second hidden neuron can never fire: all incoming weights negative
        let w1 = vec![1.6, 0.4, -0.3, -1.2];
        let w2 = vec![0.9, 0.8, 0.5, 1.4];
        let net = toy_net(w1, w2);
        let input = pat(&[0.05, 0.25]);
        let (out, trace) = net.forward(&input).unwrap();
        let (_, g_out) = loss_and_grad_output(&out, 0).unwrap();
        let grads = backward(&net, &trace, &g_out).unwrap();
        // dead hidden neuron 1: its incoming weights receive exactly zero
        assert_eq!(grads.layers[0][2], 0.0);
        assert_eq!(grads.layers[0][3], 0.0);
        // and edges from it in layer 2 are non-causal, also exactly zero
        assert_eq!(grads.layers[1][1], 0.0);
        assert_eq!(grads.layers[1][3], 0.0);
    }
}
