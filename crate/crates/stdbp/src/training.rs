//! Mini-batch training, evaluation, and the diagnostics the model is
//! studied with: dead-neuron census, spike-time histograms, and the
//! distribution of `|dt/dV|` magnitudes per spiking neuron.
//!
//! No gradient clipping or normalization anywhere: the config has no such
//! knobs. Stability has to come from the neuron model itself.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{backward, loss_and_grad_output, GradientSet};
use crate::data::{load_caltech, load_idx_dir, save_checkpoint, Checkpoint, Dataset};
use crate::encoding::EncoderConfig;
use crate::error::{Error, Result};
use crate::oracle::{alpha_backward_network, alpha_forward_network, AlphaNetTrace};
use crate::spike::{Real, SpikePattern};
use crate::topology::{
    parse_architecture, ArchitectureSpec, ConvLayerParams, Layer, LayerSpec, LayerTrace, Network,
    NetworkTrace, SignalShape,
};
use crate::neuron::DenseLayerParams;

/// Postsynaptic kernel the network runs under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rel,
    Alpha,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelKind::Rel => write!(f, "rel"),
            KernelKind::Alpha => write!(f, "alpha"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self {
            every: 30,
            factor: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub step_decay: Option<StepDecay>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            step_decay: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Directory with the conventional four IDX files.
    Idx,
    /// Directory of class subdirectories of raster images.
    Caltech,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    pub dir: PathBuf,
    /// Keep only the first N training samples (0 = all).
    pub limit_train: usize,
    /// Keep only the first N evaluation samples (0 = all).
    pub limit_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Idx,
            dir: PathBuf::from("data/mnist-10k"),
            limit_train: 0,
            limit_test: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/run"),
        }
    }
}

/// Everything a training run needs, loadable from a TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub kernel: KernelKind,
    /// Alpha-kernel time constant; ignored under the rectified-linear kernel.
    pub tau: f64,
    pub t_max: f64,
    pub threshold: f64,
    pub deterministic: bool,
    /// Worker threads for batch parallelism (0 = hardware default).
    pub threads: usize,
    /// Evaluation-set samples probed per epoch for metrics (0 = all).
    pub probe_samples: usize,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: String::new(),
            epochs: 100,
            batch_size: 128,
            seed: 1,
            kernel: KernelKind::Rel,
            tau: 1.0,
            t_max: crate::spike::DEFAULT_T_MAX,
            threshold: crate::spike::DEFAULT_THRESHOLD,
            deterministic: false,
            threads: 0,
            probe_samples: 1000,
            optimizer: OptimizerConfig::default(),
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let arch = parse_architecture(&self.arch)?;
        if self.epochs == 0 {
            return Err(Error::InvalidValue {
                what: "epochs",
                reason: "must be positive".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidValue {
                what: "batch_size",
                reason: "must be positive".into(),
            });
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::InvalidValue {
                what: "learning_rate",
                reason: "must be positive".into(),
            });
        }
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidValue {
                what: "threshold",
                reason: "must be positive".into(),
            });
        }
        self.encoder.validate(self.t_max)?;
        if self.kernel == KernelKind::Alpha {
            if !(self.tau > 0.0) {
                return Err(Error::InvalidValue {
                    what: "tau",
                    reason: "must be positive".into(),
                });
            }
            let dense_only = arch
                .layers()
                .iter()
                .all(|l| matches!(l, LayerSpec::Dense { .. }));
            if !dense_only {
                return Err(Error::InvalidValue {
                    what: "kernel",
                    reason: "the alpha kernel supports fully connected architectures only".into(),
                });
            }
        }
        Ok(())
    }
}

/// Adam with bias correction. Weight decay, when nonzero, is classic L2
/// added to the gradient before the moment updates.
#[derive(Clone, Debug)]
pub struct Adam<F = f32> {
    lr: F,
    beta1: F,
    beta2: F,
    epsilon: F,
    weight_decay: F,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: &OptimizerConfig, shapes: &[usize]) -> Self {
        Self {
            lr: F::lit(cfg.learning_rate),
            beta1: F::lit(cfg.beta1),
            beta2: F::lit(cfg.beta2),
            epsilon: F::lit(cfg.epsilon),
            weight_decay: F::lit(cfg.weight_decay),
            step: 0,
            m: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [F]], grads: &GradientSet<F>, lr_scale: F) {
        assert_eq!(params.len(), grads.layers.len());
        self.step += 1;
        let t = self.step as i32;
        let lr_t = self.lr * lr_scale * (F::one() - self.beta2.powi(t)).sqrt()
            / (F::one() - self.beta1.powi(t));
        for (li, layer) in params.iter_mut().enumerate() {
            let g_layer = &grads.layers[li];
            let m = &mut self.m[li];
            let v = &mut self.v[li];
            for (k, p) in layer.iter_mut().enumerate() {
                let mut g = g_layer[k];
                if self.weight_decay != F::zero() {
                    g += self.weight_decay * *p;
                }
                m[k] = self.beta1 * m[k] + (F::one() - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (F::one() - self.beta2) * g * g;
                *p = *p - lr_t * m[k] / (v[k].sqrt() + self.epsilon);
            }
        }
    }
}

/// Optimizer dispatch: plain SGD or Adam.
#[derive(Clone, Debug)]
pub enum Optimizer<F = f32> {
    Sgd { lr: F, weight_decay: F },
    Adam(Adam<F>),
}

impl<F: Real> Optimizer<F> {
    pub fn new(cfg: &OptimizerConfig, shapes: &[usize]) -> Self {
        match cfg.kind {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr: F::lit(cfg.learning_rate),
                weight_decay: F::lit(cfg.weight_decay),
            },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg, shapes)),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [F]], grads: &GradientSet<F>, lr_scale: F) {
        match self {
            Optimizer::Sgd { lr, weight_decay } => {
                for (layer, g_layer) in params.iter_mut().zip(&grads.layers) {
                    for (p, &g) in layer.iter_mut().zip(g_layer) {
                        *p = *p - *lr * lr_scale * (g + *weight_decay * *p);
                    }
                }
            }
            Optimizer::Adam(adam) => adam.step(params, grads, lr_scale),
        }
    }
}

/// Fresh network with positive-mean uniform weights, `U[0, 2/sqrt(fan_in))`
/// per trainable layer, so the initial weight sums are positive and nearly
/// every neuron fires.
pub fn init_network<F: Real>(
    arch: &ArchitectureSpec,
    seed: u64,
    threshold: F,
    t_max: F,
) -> Result<Network<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.layers().len());
    for (idx, spec) in arch.layers().iter().enumerate() {
        match *spec {
            LayerSpec::Dense { units } => {
                let n_pre = arch.shape_before(idx).units();
                let bound = 2.0 / (n_pre as f64).sqrt();
                let weights: Vec<F> = (0..n_pre * units)
                    .map(|_| F::lit(rng.gen_range(0.0..bound)))
                    .collect();
                layers.push(Layer::Dense(DenseLayerParams::new(
                    n_pre, units, threshold, weights,
                )?));
            }
            LayerSpec::Conv { kernels, size } => {
                let c_in = match arch.shape_before(idx) {
                    SignalShape::Grid { c, .. } => c,
                    SignalShape::Flat(_) => unreachable!("validated at parse"),
                };
                let fan_in = c_in * size * size;
                let bound = 2.0 / (fan_in as f64).sqrt();
                let weights: Vec<F> = (0..kernels * fan_in)
                    .map(|_| F::lit(rng.gen_range(0.0..bound)))
                    .collect();
                layers.push(Layer::Conv(ConvLayerParams::new(
                    kernels, c_in, size, threshold, weights,
                )?));
            }
            LayerSpec::Pool { size } => layers.push(Layer::Pool { size }),
        }
    }
    Network::from_layers(arch.clone(), layers, t_max)
}

/// Fixed-bin histogram snapshot; counts are normalized to sum to one
/// (`total` keeps the raw event count).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub log10: bool,
    pub total: u64,
    pub counts: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct HistAcc {
    lo: f64,
    hi: f64,
    log10: bool,
    bins: Vec<u64>,
}

impl HistAcc {
    fn linear(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            log10: false,
            bins: vec![0; bins],
        }
    }

    /// Bins by `log10(x)`; non-positive values land in the first bin.
    fn log(lo_exp: f64, hi_exp: f64, bins: usize) -> Self {
        Self {
            lo: lo_exp,
            hi: hi_exp,
            log10: true,
            bins: vec![0; bins],
        }
    }

    fn add(&mut self, x: f64) {
        let v = if self.log10 {
            if x <= 0.0 {
                self.lo
            } else {
                x.log10()
            }
        } else {
            x
        };
        let n = self.bins.len();
        let frac = (v - self.lo) / (self.hi - self.lo);
        let idx = ((frac * n as f64).floor() as i64).clamp(0, n as i64 - 1) as usize;
        self.bins[idx] += 1;
    }

    fn merge(&mut self, other: &HistAcc) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
    }

    fn snapshot(&self) -> Histogram {
        let total: u64 = self.bins.iter().sum();
        let norm = if total > 0 { total as f64 } else { 1.0 };
        Histogram {
            lo: self.lo,
            hi: self.hi,
            log10: self.log10,
            total,
            counts: self.bins.iter().map(|&c| c as f64 / norm).collect(),
        }
    }
}

/// Per-epoch metrics record; the training loop appends one JSON line per
/// epoch to `metrics.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_accuracy: f64,
    pub mean_loss: f64,
    pub test_accuracy: f64,
    pub test_mean_loss: f64,
    /// Fraction of neurons silent on every probe sample, per trainable layer.
    pub dead_fraction: Vec<f64>,
    /// Mean fraction of hidden neurons that fired before the decision.
    pub spiked_at_decision_fraction: f64,
    /// Mean fraction of hidden neurons that fired at all.
    pub spiked_total_fraction: f64,
    pub hidden_spike_hist: Histogram,
    pub output_spike_hist: Histogram,
    /// Distribution of |dt/dV| over spiking neurons, log10 bins.
    pub dtdv_hist: Histogram,
    pub dtdv_max: f64,
}

/// Evaluation summary plus the diagnostics collected during the pass.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub dead_fraction: Vec<f64>,
    pub spiked_at_decision_fraction: f64,
    pub spiked_total_fraction: f64,
    pub hidden_spike_hist: Histogram,
    pub output_spike_hist: Histogram,
    pub dtdv_hist: Histogram,
    pub dtdv_max: f64,
    /// Smallest |causal weight sum| seen on any spiking neuron.
    pub min_spiking_weight_sum: f64,
}

enum SampleTrace {
    Rel(NetworkTrace<f32>),
    Alpha(AlphaNetTrace),
}

fn forward_sample(
    net: &Network<f32>,
    kernel: KernelKind,
    tau: f64,
    input: &SpikePattern<f32>,
) -> Result<(SpikePattern<f32>, SampleTrace)> {
    match kernel {
        KernelKind::Rel => {
            let (out, trace) = net.forward(input)?;
            Ok((out, SampleTrace::Rel(trace)))
        }
        KernelKind::Alpha => {
            let (out, trace) = alpha_forward_network(net, input, tau)?;
            Ok((out, SampleTrace::Alpha(trace)))
        }
    }
}

fn backward_sample(
    net: &Network<f32>,
    tau: f64,
    trace: &SampleTrace,
    grad: &[f32],
) -> Result<GradientSet<f32>> {
    match trace {
        SampleTrace::Rel(t) => backward(net, t, grad),
        SampleTrace::Alpha(t) => alpha_backward_network(net, t, grad, tau),
    }
}

/// Visits every neuron of the trainable layers of a recorded trace:
/// `(trainable_layer_idx, spiked, time, |dt/dV|, |weight_sum|)`.
fn visit_neurons(trace: &SampleTrace, mut f: impl FnMut(usize, bool, f64, f64, f64)) {
    match trace {
        SampleTrace::Rel(t) => {
            let mut li = 0;
            for layer in &t.layers {
                match layer {
                    LayerTrace::Neurons(tr) => {
                        for n in &tr.neurons {
                            let spiked = !n.is_dead();
                            let w = n.causal.weight_sum as f64;
                            let dtdv = if spiked && w != 0.0 { 1.0 / w.abs() } else { 0.0 };
                            f(li, spiked, n.time as f64, dtdv, w.abs());
                        }
                        li += 1;
                    }
                    LayerTrace::Pool(_) => {}
                }
            }
        }
        SampleTrace::Alpha(t) => {
            for (li, layer) in t.layers.iter().enumerate() {
                for n in layer {
                    let spiked = !n.causal.is_empty();
                    let d = n.slope;
                    let dtdv = if spiked && d != 0.0 { 1.0 / d.abs() } else { 0.0 };
                    f(li, spiked, n.time, dtdv, d.abs());
                }
            }
        }
    }
}

struct DiagAccum {
    n: usize,
    correct: usize,
    loss_sum: f64,
    alive: Vec<Vec<bool>>,
    hidden_before_decision: u64,
    hidden_spiked: u64,
    hidden_total: u64,
    hidden_hist: HistAcc,
    output_hist: HistAcc,
    dtdv_hist: HistAcc,
    dtdv_max: f64,
    min_spiking_w: f64,
}

impl DiagAccum {
    fn new(layer_sizes: &[usize], t_max: f64) -> Self {
        Self {
            n: 0,
            correct: 0,
            loss_sum: 0.0,
            alive: layer_sizes.iter().map(|&n| vec![false; n]).collect(),
            hidden_before_decision: 0,
            hidden_spiked: 0,
            hidden_total: 0,
            hidden_hist: HistAcc::linear(0.0, t_max, 40),
            output_hist: HistAcc::linear(0.0, t_max, 40),
            dtdv_hist: HistAcc::log(-6.0, 8.0, 56),
            dtdv_max: 0.0,
            min_spiking_w: f64::INFINITY,
        }
    }

    fn merge(&mut self, other: DiagAccum) {
        self.n += other.n;
        self.correct += other.correct;
        self.loss_sum += other.loss_sum;
        for (a, b) in self.alive.iter_mut().zip(&other.alive) {
            for (x, y) in a.iter_mut().zip(b) {
                *x |= y;
            }
        }
        self.hidden_before_decision += other.hidden_before_decision;
        self.hidden_spiked += other.hidden_spiked;
        self.hidden_total += other.hidden_total;
        self.hidden_hist.merge(&other.hidden_hist);
        self.output_hist.merge(&other.output_hist);
        self.dtdv_hist.merge(&other.dtdv_hist);
        self.dtdv_max = self.dtdv_max.max(other.dtdv_max);
        self.min_spiking_w = self.min_spiking_w.min(other.min_spiking_w);
    }

    fn observe(&mut self, trace: &SampleTrace, output: &SpikePattern<f32>, n_trainable: usize) {
        let decision = output.times()[output.argmin()] as f64;
        let last = n_trainable - 1;
        visit_neurons(trace, |li, spiked, time, dtdv, w_abs| {
            if spiked {
                self.dtdv_hist.add(dtdv);
                self.dtdv_max = self.dtdv_max.max(dtdv);
                self.min_spiking_w = self.min_spiking_w.min(w_abs);
            }
            if li < last {
                self.hidden_total += 1;
                if spiked {
                    self.hidden_spiked += 1;
                    self.hidden_hist.add(time);
                    if time < decision {
                        self.hidden_before_decision += 1;
                    }
                }
            } else if spiked {
                self.output_hist.add(time);
            }
        });
    }
}

fn chunk_size(total: usize, parallel: bool) -> usize {
    #[cfg(feature = "parallel")]
    if parallel {
        let workers = rayon::current_num_threads().max(1);
        return total.div_ceil(workers).max(1);
    }
    let _ = parallel;
    total.max(1)
}

fn map_chunks<T, M>(items: &[usize], chunk: usize, parallel: bool, map: M) -> Result<Vec<T>>
where
    T: Send,
    M: Fn(&[usize]) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(map).collect();
    }
    items.chunks(chunk).map(map).collect()
}

/// Internal full diagnostics pass over (a probe subset of) a dataset.
fn diagnostics_pass(
    net: &Network<f32>,
    kernel: KernelKind,
    tau: f64,
    encoder: &EncoderConfig,
    ds: &Dataset,
    limit: usize,
    parallel: bool,
) -> Result<DiagAccum> {
    let layer_sizes: Vec<usize> = trainable_layer_units(net);
    let n_trainable = layer_sizes.len();
    let t_max = net.t_max();
    let n = if limit == 0 { ds.len() } else { limit.min(ds.len()) };
    let indices: Vec<usize> = (0..n).collect();
    let chunk = chunk_size(n, parallel);
    let accums = map_chunks(&indices, chunk, parallel, |chunk_indices| {
        let mut acc = DiagAccum::new(&layer_sizes, t_max as f64);
        let mut alive_scratch: Vec<Vec<bool>> = Vec::new();
        let _ = &mut alive_scratch;
        for &i in chunk_indices {
            let input = encoder.encode_bytes::<f32>(&ds.images[i], t_max)?;
            let (out, trace) = forward_sample(net, kernel, tau, &input)?;
            let (loss_out, _) = loss_and_grad_output(&out, ds.labels[i] as usize)?;
            acc.n += 1;
            acc.loss_sum += loss_out.loss as f64;
            if loss_out.predicted == ds.labels[i] as usize {
                acc.correct += 1;
            }
            mark_alive(&trace, &mut acc.alive);
            acc.observe(&trace, &out, n_trainable);
        }
        Ok(acc)
    })?;
    let mut total = DiagAccum::new(&layer_sizes, t_max as f64);
    for acc in accums {
        total.merge(acc);
    }
    Ok(total)
}

fn trainable_layer_units(net: &Network<f32>) -> Vec<usize> {
    let mut sizes = Vec::new();
    for (idx, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Dense(p) => sizes.push(p.n_post()),
            Layer::Conv(_) => sizes.push(net.arch().shape_after(idx).units()),
            Layer::Pool { .. } => {}
        }
    }
    sizes
}

fn mark_alive(trace: &SampleTrace, alive: &mut [Vec<bool>]) {
    match trace {
        SampleTrace::Rel(t) => {
            let mut li = 0;
            for layer in &t.layers {
                if let LayerTrace::Neurons(tr) = layer {
                    for (j, n) in tr.neurons.iter().enumerate() {
                        if !n.is_dead() {
                            alive[li][j] = true;
                        }
                    }
                    li += 1;
                }
            }
        }
        SampleTrace::Alpha(t) => {
            for (li, layer) in t.layers.iter().enumerate() {
                for (j, n) in layer.iter().enumerate() {
                    if !n.causal.is_empty() {
                        alive[li][j] = true;
                    }
                }
            }
        }
    }
}

impl DiagAccum {
    fn report(&self) -> EvalReport {
        let dead_fraction = self
            .alive
            .iter()
            .map(|layer| {
                let dead = layer.iter().filter(|&&a| !a).count();
                dead as f64 / layer.len().max(1) as f64
            })
            .collect();
        EvalReport {
            n_samples: self.n,
            accuracy: self.correct as f64 / self.n.max(1) as f64,
            mean_loss: self.loss_sum / self.n.max(1) as f64,
            dead_fraction,
            spiked_at_decision_fraction: self.hidden_before_decision as f64
                / self.hidden_total.max(1) as f64,
            spiked_total_fraction: self.hidden_spiked as f64 / self.hidden_total.max(1) as f64,
            hidden_spike_hist: self.hidden_hist.snapshot(),
            output_spike_hist: self.output_hist.snapshot(),
            dtdv_hist: self.dtdv_hist.snapshot(),
            dtdv_max: self.dtdv_max,
            min_spiking_weight_sum: self.min_spiking_w,
        }
    }
}

/// Accuracy and diagnostics of a network over (a probe subset of) a
/// dataset split.
pub fn evaluate_network(
    net: &Network<f32>,
    kernel: KernelKind,
    tau: f64,
    encoder: &EncoderConfig,
    ds: &Dataset,
    limit: usize,
) -> Result<EvalReport> {
    diagnostics_pass(net, kernel, tau, encoder, ds, limit, cfg!(feature = "parallel")).map(|a| a.report())
}

/// Fraction of neurons per trainable layer that stay silent on every probe
/// sample.
pub fn dead_neuron_census(
    net: &Network<f32>,
    kernel: KernelKind,
    tau: f64,
    encoder: &EncoderConfig,
    ds: &Dataset,
    limit: usize,
) -> Result<Vec<f64>> {
    diagnostics_pass(net, kernel, tau, encoder, ds, limit, cfg!(feature = "parallel"))
        .map(|a| a.report().dead_fraction)
}

/// Result handed back by `train`.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    /// Best probe accuracy seen during training.
    pub best_eval_accuracy: f64,
    /// Full-split accuracy of the best checkpoint after training.
    pub final_eval_accuracy: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Loads the datasets named by the config and trains.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let (train_ds, eval_ds) = match config.data.format {
        DataFormat::Idx => load_idx_dir(&config.data.dir)?,
        DataFormat::Caltech => {
            let (train, val, _test) = load_caltech(&config.data.dir, 160, 250, 200, 50, config.seed)?;
            (train, val)
        }
    };
    let train_ds = train_ds.truncated(config.data.limit_train);
    let eval_ds = eval_ds.truncated(config.data.limit_test);
    train_with_data(config, &train_ds, &eval_ds)
}

/// Trains on the given splits: per-epoch metrics stream, best-accuracy and
/// final checkpoints. A non-finite batch loss aborts with a diagnostic
/// dump of the offending batch.
pub fn train_with_data(
    config: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    let arch = parse_architecture(&config.arch)?;
    if train_ds.pixels() != arch.input().units() {
        return Err(Error::Dataset(format!(
            "dataset has {} pixels per image, architecture `{}` expects {}",
            train_ds.pixels(),
            config.arch,
            arch.input().units()
        )));
    }
    let n_classes = train_ds.n_classes().max(eval_ds.n_classes());
    if arch.output_units() < n_classes {
        return Err(Error::Dataset(format!(
            "dataset has {n_classes} classes, architecture `{}` outputs {}",
            config.arch,
            arch.output_units()
        )));
    }

    let t_max = config.t_max as f32;
    let mut net: Network<f32> =
        init_network(&arch, config.seed, config.threshold as f32, t_max)?;
    let shapes: Vec<usize> = net.trainable().iter().map(|p| p.len()).collect();
    let mut optimizer: Optimizer<f32> = Optimizer::new(&config.optimizer, &shapes);

    let parallel = cfg!(feature = "parallel") && !config.deterministic && config.threads != 1;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5u64));

    // encode once; training re-reads patterns every epoch
    let patterns: Vec<SpikePattern<f32>> = train_ds
        .images
        .iter()
        .map(|img| config.encoder.encode_bytes::<f32>(img, t_max))
        .collect::<Result<_>>()?;

    fs::create_dir_all(&config.output.dir)
        .map_err(|e| Error::io(&config.output.dir, e))?;
    let metrics_path = config.output.dir.join("metrics.jsonl");
    let mut metrics_file =
        fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let best_path = config.output.dir.join("best.ckpt");
    let last_path = config.output.dir.join("last.ckpt");

    let mut indices: Vec<usize> = (0..train_ds.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best_acc = f64::NEG_INFINITY;
    let mut steps: u64 = 0;

    for epoch in 1..=config.epochs {
        let lr_scale = match config.optimizer.step_decay {
            Some(decay) if decay.every > 0 => {
                (decay.factor as f32).powi(((epoch - 1) / decay.every) as i32)
            }
            _ => 1.0,
        };
        // Fisher-Yates with the run's own stream
        for i in (1..indices.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            indices.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        for (batch_no, batch) in indices.chunks(config.batch_size).enumerate() {
            let chunk = chunk_size(batch.len(), parallel);
            let parts = map_chunks(batch, chunk, parallel, |chunk_indices| {
                let mut grads = GradientSet::zeros_like(&net);
                let mut loss_sum = 0.0f64;
                let mut correct = 0usize;
                for &i in chunk_indices {
                    let (out, trace) = forward_sample(&net, config.kernel, config.tau, &patterns[i])?;
                    let (loss_out, grad_t) = loss_and_grad_output(&out, train_ds.labels[i] as usize)?;
                    let sample_grads = backward_sample(&net, config.tau, &trace, &grad_t)?;
                    grads.add_assign(&sample_grads);
                    loss_sum += loss_out.loss as f64;
                    if loss_out.predicted == train_ds.labels[i] as usize {
                        correct += 1;
                    }
                }
                Ok((grads, loss_sum, correct))
            })?;
            let mut grads = GradientSet::zeros_like(&net);
            let mut batch_loss = 0.0f64;
            for (g, l, c) in parts {
                grads.add_assign(&g);
                batch_loss += l;
                epoch_correct += c;
            }
            let batch_mean_loss = batch_loss / batch.len() as f64;
            if !batch_mean_loss.is_finite() {
                return Err(nan_abort(config, train_ds, batch, epoch, batch_no, &net));
            }
            epoch_loss += batch_loss;
            grads.scale(1.0 / batch.len() as f32);
            optimizer.step(&mut net.trainable_mut(), &grads, lr_scale);
            steps += 1;
        }

        let eval = evaluate_network(
            &net,
            config.kernel,
            config.tau,
            &config.encoder,
            eval_ds,
            config.probe_samples,
        )?;
        let record = MetricsRecord {
            epoch,
            learning_rate: config.optimizer.learning_rate * lr_scale as f64,
            train_accuracy: epoch_correct as f64 / train_ds.len() as f64,
            mean_loss: epoch_loss / train_ds.len() as f64,
            test_accuracy: eval.accuracy,
            test_mean_loss: eval.mean_loss,
            dead_fraction: eval.dead_fraction.clone(),
            spiked_at_decision_fraction: eval.spiked_at_decision_fraction,
            spiked_total_fraction: eval.spiked_total_fraction,
            hidden_spike_hist: eval.hidden_spike_hist.clone(),
            output_spike_hist: eval.output_spike_hist.clone(),
            dtdv_hist: eval.dtdv_hist.clone(),
            dtdv_max: eval.dtdv_max,
        };
        let line = serde_json::to_string(&record).expect("metrics serialize");
        writeln!(metrics_file, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "epoch {epoch}: train acc {:.4}, loss {:.4}, eval acc {:.4}, dead {:?}",
            record.train_accuracy,
            record.mean_loss,
            record.test_accuracy,
            record.dead_fraction
        );

        if eval.accuracy > best_acc {
            best_acc = eval.accuracy;
            let ckpt = Checkpoint::from_network(&net, config.encoder, config.kernel, config.tau, steps);
            save_checkpoint(&ckpt, &best_path)?;
        }
        metrics.push(record);
    }

    let ckpt = Checkpoint::from_network(&net, config.encoder, config.kernel, config.tau, steps);
    save_checkpoint(&ckpt, &last_path)?;

    // full-split evaluation of the best checkpoint
    let best_net = crate::data::load_checkpoint(&best_path)?.build_network()?;
    let final_eval = evaluate_network(
        &best_net,
        config.kernel,
        config.tau,
        &config.encoder,
        eval_ds,
        0,
    )?;

    Ok(TrainOutcome {
        metrics,
        best_eval_accuracy: best_acc,
        final_eval_accuracy: final_eval.accuracy,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        metrics_path,
    })
}

fn nan_abort(
    config: &TrainConfig,
    train_ds: &Dataset,
    batch: &[usize],
    epoch: usize,
    batch_no: usize,
    net: &Network<f32>,
) -> Error {
    #[derive(Serialize)]
    struct NanDump<'a> {
        epoch: usize,
        batch_no: usize,
        sample_indices: &'a [usize],
        labels: Vec<u8>,
        per_sample_loss: Vec<f64>,
    }
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let loss = config
            .encoder
            .encode_bytes::<f32>(&train_ds.images[i], net.t_max())
            .and_then(|input| forward_sample(net, config.kernel, config.tau, &input))
            .and_then(|(out, _)| loss_and_grad_output(&out, train_ds.labels[i] as usize))
            .map(|(l, _)| l.loss as f64)
            .unwrap_or(f64::NAN);
        losses.push(loss);
    }
    let dump = NanDump {
        epoch,
        batch_no,
        sample_indices: batch,
        labels: batch.iter().map(|&i| train_ds.labels[i]).collect(),
        per_sample_loss: losses,
    };
    let path = config.output.dir.join("nan_batch.json");
    if let Ok(json) = serde_json::to_string_pretty(&dump) {
        let _ = fs::write(&path, json);
    }
    log::error!(
        "non-finite loss in epoch {epoch} batch {batch_no}; diagnostics at {}",
        path.display()
    );
    Error::Numeric(format!(
        "non-finite loss in epoch {epoch} batch {batch_no}; diagnostics at {}",
        path.display()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_matches_scalar_reference() {
        // one parameter, loss = 0.5 * (w - 3)^2, gradient = w - 3
        let cfg = OptimizerConfig::default();
        let mut adam: Adam<f64> = Adam::new(&cfg, &[1]);
        let mut w = vec![0.0f64];

        // independent scalar reference
        let (mut m, mut v, mut w_ref) = (0.0f64, 0.0f64, 0.0f64);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 1e-3);
        for t in 1..=100i32 {
            let g = w[0] - 3.0;
            let grads = GradientSet {
                layers: vec![vec![g]],
            };
            let mut params = w.as_mut_slice();
            adam.step(&mut [&mut params], &grads, 1.0);

            let g_ref = w_ref - 3.0;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let lr_t = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
            w_ref -= lr_t * m / (v.sqrt() + eps);

            assert!(
                (w[0] - w_ref).abs() < 1e-12,
                "step {t}: {} vs {w_ref}",
                w[0]
            );
        }
    }

    #[test]
    fn init_is_deterministic_and_positive() {
        let arch = parse_architecture("20-10-5").unwrap();
        let a: Network<f32> = init_network(&arch, 42, 1.0, 4.0).unwrap();
        let b: Network<f32> = init_network(&arch, 42, 1.0, 4.0).unwrap();
        assert_eq!(a.trainable(), b.trainable());
        let c: Network<f32> = init_network(&arch, 43, 1.0, 4.0).unwrap();
        assert_ne!(a.trainable(), c.trainable());
        for layer in a.trainable() {
            assert!(layer.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn init_mean_matches_distribution() {
        // U[0, 2/sqrt(n)) has mean 1/sqrt(n) and std (2/sqrt(n))/sqrt(12)
        let arch = parse_architecture("400-200").unwrap();
        let net: Network<f64> = init_network(&arch, 7, 1.0, 4.0).unwrap();
        let w = net.trainable()[0];
        let n = 400.0f64;
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let expected = 1.0 / n.sqrt();
        let std = (2.0 / n.sqrt()) / 12.0f64.sqrt();
        let sem = std / (w.len() as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * sem,
            "mean {mean} vs {expected} (3 sem {})",
            3.0 * sem
        );
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let text = r#"
            arch = "784-40-10"
            epochs = 2
            batch_size = 16
            seed = 9

            [optimizer]
            kind = "adam"
            learning_rate = 0.002

            [data]
            dir = "data/mnist-10k"
            limit_train = 64

            [output]
            dir = "/tmp/run"
        "#;
        let cfg = TrainConfig::from_toml_str(text, Path::new("test.toml")).unwrap();
        assert_eq!(cfg.arch, "784-40-10");
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.optimizer.learning_rate, 0.002);
        assert_eq!(cfg.batch_size, 16);

        // malformed: unknown key
        let bad = "arch = \"784-10\"\nnot_a_key = 1\n";
        assert!(TrainConfig::from_toml_str(bad, Path::new("t")).is_err());
        // malformed: bad arch
        let bad = "arch = \"784-\"\n";
        assert!(TrainConfig::from_toml_str(bad, Path::new("t")).is_err());
        // alpha kernel rejects conv architectures
        let bad = "arch = \"28x28-4C3-P2-10\"\nkernel = \"alpha\"\n";
        assert!(TrainConfig::from_toml_str(bad, Path::new("t")).is_err());
    }

    #[test]
    fn histogram_normalizes_and_clamps() {
        let mut h = HistAcc::linear(0.0, 4.0, 4);
        for x in [0.1, 0.1, 1.5, 3.9, 17.0, -2.0] {
            h.add(x);
        }
        let snap = h.snapshot();
        assert_eq!(snap.total, 6);
        let sum: f64 = snap.counts.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(snap.counts[0], 3.0 / 6.0); // 0.1, 0.1, -2.0 clamped
        assert_eq!(snap.counts[3], 2.0 / 6.0); // 3.9 and 17.0 clamped
    }
}
