//! Network composition: architecture strings, convolution and pooling in
//! the spike-time domain, and whole-network forward passes.
//!
//! Architecture notation: dash-separated layer tokens. The first token is
//! the input shape, either flat (`784`) or a grid (`28x28`, `28x28x3`;
//! `x` and the multiplication sign are both accepted). Subsequent tokens:
//! `400` a fully connected layer, `16C5` a convolution with 16 kernels of
//! size 5 (valid padding, stride 1), `P2` earliest-spike pooling over 2x2
//! blocks. A dense token after a grid flattens implicitly.

use crate::error::{Error, Result};
use crate::neuron::{sort_order, solve_sorted, DenseLayerParams, ForwardTrace};
use crate::spike::{Real, SpikePattern};

/// Shape of the signal at a layer boundary. Grid data is stored
/// channel-major: flat index `c*h*w + y*w + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalShape {
    Flat(usize),
    Grid { c: usize, h: usize, w: usize },
}

impl SignalShape {
    pub fn units(&self) -> usize {
        match *self {
            SignalShape::Flat(n) => n,
            SignalShape::Grid { c, h, w } => c * h * w,
        }
    }
}

impl std::fmt::Display for SignalShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SignalShape::Flat(n) => write!(f, "{n}"),
            SignalShape::Grid { c, h, w } => write!(f, "{h}x{w}x{c}"),
        }
    }
}

/// One layer descriptor from an architecture string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { kernels: usize, size: usize },
    Pool { size: usize },
}

/// Parsed and shape-checked architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    text: String,
    input: SignalShape,
    layers: Vec<LayerSpec>,
    /// Output shape of every layer, same length as `layers`.
    shapes: Vec<SignalShape>,
}

fn parse_dim(text: &str, token: &str, part: &str) -> Result<usize> {
    let n: usize = part.parse().map_err(|_| Error::Architecture {
        text: text.to_string(),
        reason: format!("malformed token `{token}`"),
    })?;
    if n == 0 {
        return Err(Error::Architecture {
            text: text.to_string(),
            reason: format!("zero dimension in token `{token}`"),
        });
    }
    Ok(n)
}

/// Parses the notation described in the module docs and validates the
/// shape chain.
pub fn parse_architecture(text: &str) -> Result<ArchitectureSpec> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::Architecture {
            text: text.to_string(),
            reason: "empty architecture string".into(),
        });
    }
    let tokens: Vec<&str> = trimmed.split('-').collect();
    if tokens.iter().any(|t| t.is_empty()) {
        return Err(Error::Architecture {
            text: text.to_string(),
            reason: "empty layer token (stray `-`)".into(),
        });
    }
    if tokens.len() < 2 {
        return Err(Error::Architecture {
            text: text.to_string(),
            reason: "need an input token and at least one layer".into(),
        });
    }

    // input token: flat count or HxW[xC]
    let input_tok = tokens[0].replace('\u{d7}', "x");
    let input = if input_tok.contains('x') {
        let dims: Vec<&str> = input_tok.split('x').collect();
        match dims.len() {
            2 => SignalShape::Grid {
                c: 1,
                h: parse_dim(text, tokens[0], dims[0])?,
                w: parse_dim(text, tokens[0], dims[1])?,
            },
            3 => SignalShape::Grid {
                h: parse_dim(text, tokens[0], dims[0])?,
                w: parse_dim(text, tokens[0], dims[1])?,
                c: parse_dim(text, tokens[0], dims[2])?,
            },
            _ => {
                return Err(Error::Architecture {
                    text: text.to_string(),
                    reason: format!("malformed input token `{}`", tokens[0]),
                })
            }
        }
    } else {
        SignalShape::Flat(parse_dim(text, tokens[0], &input_tok)?)
    };

    let mut layers = Vec::new();
    let mut shapes = Vec::new();
    let mut current = input;
    for tok in &tokens[1..] {
        let spec = if let Some(rest) = tok.strip_prefix('P') {
            LayerSpec::Pool {
                size: parse_dim(text, tok, rest)?,
            }
        } else if let Some(pos) = tok.find('C') {
            let (count, size) = tok.split_at(pos);
            LayerSpec::Conv {
                kernels: parse_dim(text, tok, count)?,
                size: parse_dim(text, tok, &size[1..])?,
            }
        } else {
            LayerSpec::Dense {
                units: parse_dim(text, tok, tok)?,
            }
        };
        current = apply_shape(text, current, spec)?;
        layers.push(spec);
        shapes.push(current);
    }
    if !matches!(current, SignalShape::Flat(_)) {
        return Err(Error::Architecture {
            text: text.to_string(),
            reason: "network must end in a fully connected layer".into(),
        });
    }
    Ok(ArchitectureSpec {
        text: trimmed.to_string(),
        input,
        layers,
        shapes,
    })
}

fn apply_shape(text: &str, input: SignalShape, spec: LayerSpec) -> Result<SignalShape> {
    match spec {
        LayerSpec::Dense { units } => Ok(SignalShape::Flat(units)),
        LayerSpec::Conv { kernels, size } => match input {
            SignalShape::Grid { c: _, h, w } if h >= size && w >= size => Ok(SignalShape::Grid {
                c: kernels,
                h: h - size + 1,
                w: w - size + 1,
            }),
            SignalShape::Grid { h, w, .. } => Err(Error::Architecture {
                text: text.to_string(),
                reason: format!("{size}x{size} convolution does not fit a {h}x{w} grid"),
            }),
            SignalShape::Flat(_) => Err(Error::Architecture {
                text: text.to_string(),
                reason: "convolution requires a grid input".into(),
            }),
        },
        LayerSpec::Pool { size } => match input {
            SignalShape::Grid { c, h, w } => Ok(SignalShape::Grid {
                c,
                h: h.div_ceil(size),
                w: w.div_ceil(size),
            }),
            SignalShape::Flat(_) => Err(Error::Architecture {
                text: text.to_string(),
                reason: "pooling requires a grid input".into(),
            }),
        },
    }
}

impl ArchitectureSpec {
    pub fn parse(text: &str) -> Result<Self> {
        parse_architecture(text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn input(&self) -> SignalShape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of layer `idx`.
    pub fn shape_after(&self, idx: usize) -> SignalShape {
        self.shapes[idx]
    }

    /// Input shape of layer `idx`.
    pub fn shape_before(&self, idx: usize) -> SignalShape {
        if idx == 0 {
            self.input
        } else {
            self.shapes[idx - 1]
        }
    }

    pub fn output_units(&self) -> usize {
        self.shapes.last().map(|s| s.units()).unwrap_or(0)
    }

    /// Parameter tensor length of each trainable layer, in layer order.
    pub fn trainable_lens(&self) -> Vec<usize> {
        let mut lens = Vec::new();
        for (idx, spec) in self.layers.iter().enumerate() {
            match *spec {
                LayerSpec::Dense { units } => {
                    lens.push(self.shape_before(idx).units() * units);
                }
                LayerSpec::Conv { kernels, size } => {
                    let c_in = match self.shape_before(idx) {
                        SignalShape::Grid { c, .. } => c,
                        SignalShape::Flat(_) => unreachable!("validated at parse"),
                    };
                    lens.push(kernels * c_in * size * size);
                }
                LayerSpec::Pool { .. } => {}
            }
        }
        lens
    }
}

/// Shared kernel tensor and firing threshold of a convolution layer.
/// Storage is one contiguous row per output channel, slot order
/// `(c_in, ky, kx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerParams<F = f32> {
    c_out: usize,
    c_in: usize,
    size: usize,
    threshold: F,
    kernels: Vec<F>,
}

impl<F: Real> ConvLayerParams<F> {
    pub fn new(c_out: usize, c_in: usize, size: usize, threshold: F, kernels: Vec<F>) -> Result<Self> {
        let expected = c_out * c_in * size * size;
        if kernels.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "conv kernel tensor",
                expected,
                actual: kernels.len(),
            });
        }
        if !(threshold > F::zero()) || !threshold.is_finite() {
            return Err(Error::InvalidValue {
                what: "threshold",
                reason: format!("must be a positive finite real, got {threshold}"),
            });
        }
        if let Some(w) = kernels.iter().find(|w| !w.is_finite()) {
            return Err(Error::InvalidValue {
                what: "kernel weight",
                reason: format!("non-finite entry {w}"),
            });
        }
        Ok(Self {
            c_out,
            c_in,
            size,
            threshold,
            kernels,
        })
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn threshold(&self) -> F {
        self.threshold
    }

    /// Receptive-field length: number of weights shared by every position.
    pub fn rf_len(&self) -> usize {
        self.c_in * self.size * self.size
    }

    /// Kernel row of output channel `o`.
    pub fn kernel(&self, o: usize) -> &[F] {
        let len = self.rf_len();
        &self.kernels[o * len..(o + 1) * len]
    }

    pub fn raw(&self) -> &[F] {
        &self.kernels
    }

    pub fn raw_mut(&mut self) -> &mut [F] {
        &mut self.kernels
    }
}

/// Earliest-spike pooling routes: for every output cell, the flat input
/// index whose spike was forwarded, or `None` when the whole block stayed
/// silent.
#[derive(Clone, Debug)]
pub struct PoolTrace {
    pub routes: Vec<Option<u32>>,
}

/// Applies the shared kernels at every valid position; each output location
/// runs the closed-form spike solve over its receptive field.
pub fn forward_conv<F: Real>(
    inputs: &SpikePattern<F>,
    in_shape: SignalShape,
    params: &ConvLayerParams<F>,
) -> Result<(SpikePattern<F>, ForwardTrace<F>, SignalShape)> {
    let SignalShape::Grid { c, h, w } = in_shape else {
        return Err(Error::InvalidValue {
            what: "conv input shape",
            reason: "convolution requires a grid input".into(),
        });
    };
    if c != params.c_in {
        return Err(Error::DimensionMismatch {
            context: "conv input channels",
            expected: params.c_in,
            actual: c,
        });
    }
    if inputs.len() != c * h * w {
        return Err(Error::DimensionMismatch {
            context: "conv input units",
            expected: c * h * w,
            actual: inputs.len(),
        });
    }
    let k = params.size;
    if h < k || w < k {
        return Err(Error::InvalidValue {
            what: "conv input shape",
            reason: format!("{k}x{k} kernel does not fit a {h}x{w} grid"),
        });
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let out_shape = SignalShape::Grid {
        c: params.c_out,
        h: oh,
        w: ow,
    };
    let t_max = inputs.t_max();
    let times = inputs.times();
    let plane = oh * ow;
    let mut out_times = vec![t_max; params.c_out * plane];
    let mut neurons = Vec::with_capacity(params.c_out * plane);
    neurons.resize_with(params.c_out * plane, || crate::neuron::NeuronTrace {
        time: t_max,
        causal: Default::default(),
    });

    let rf_len = params.rf_len();
    let mut rf_times = vec![F::zero(); rf_len];
    for oy in 0..oh {
        for ox in 0..ow {
            // gather the receptive field in kernel slot order (ci, ky, kx)
            let mut s = 0;
            for ci in 0..c {
                for ky in 0..k {
                    let row = ci * h * w + (oy + ky) * w + ox;
                    for kx in 0..k {
                        rf_times[s] = times[row + kx];
                        s += 1;
                    }
                }
            }
            // one sort per position, shared by all output channels
            let order = sort_order(&rf_times);
            for o in 0..params.c_out {
                let trace = solve_sorted(&rf_times, t_max, &order, params.kernel(o), params.threshold);
                let idx = o * plane + oy * ow + ox;
                out_times[idx] = trace.time;
                neurons[idx] = trace;
            }
        }
    }
    let pattern = SpikePattern::new(out_times, t_max)?;
    Ok((pattern, ForwardTrace { neurons }, out_shape))
}

/// Earliest-spike pooling: the output time of each `p x p` block is the
/// minimum over the block (temporal analog of max pooling), ties routed to
/// the lowest flat index. Grids that do not divide evenly are padded with
/// silent cells.
pub fn forward_pool<F: Real>(
    inputs: &SpikePattern<F>,
    in_shape: SignalShape,
    p: usize,
) -> Result<(SpikePattern<F>, PoolTrace, SignalShape)> {
    let SignalShape::Grid { c, h, w } = in_shape else {
        return Err(Error::InvalidValue {
            what: "pool input shape",
            reason: "pooling requires a grid input".into(),
        });
    };
    if inputs.len() != c * h * w {
        return Err(Error::DimensionMismatch {
            context: "pool input units",
            expected: c * h * w,
            actual: inputs.len(),
        });
    }
    let (oh, ow) = (h.div_ceil(p), w.div_ceil(p));
    let t_max = inputs.t_max();
    let times = inputs.times();
    let mut out_times = Vec::with_capacity(c * oh * ow);
    let mut routes = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = t_max;
                let mut route = None;
                for ky in 0..p {
                    let y = oy * p + ky;
                    if y >= h {
                        break;
                    }
                    for kx in 0..p {
                        let x = ox * p + kx;
                        if x >= w {
                            break;
                        }
                        let idx = ci * h * w + y * w + x;
                        let t = times[idx];
                        if t < best {
                            best = t;
                            route = Some(idx as u32);
                        }
                    }
                }
                out_times.push(best);
                routes.push(route);
            }
        }
    }
    let out_shape = SignalShape::Grid { c, h: oh, w: ow };
    let pattern = SpikePattern::new(out_times, t_max)?;
    Ok((pattern, PoolTrace { routes }, out_shape))
}

/// One concrete layer of a built network.
#[derive(Clone, Debug)]
pub enum Layer<F = f32> {
    Dense(DenseLayerParams<F>),
    Conv(ConvLayerParams<F>),
    Pool { size: usize },
}

/// Per-layer forward record.
#[derive(Clone, Debug)]
pub enum LayerTrace<F = f32> {
    Neurons(ForwardTrace<F>),
    Pool(PoolTrace),
}

/// Forward record of a whole network: the spike pattern at every layer
/// boundary (`signals[0]` is the encoded input) plus each layer's trace.
#[derive(Clone, Debug)]
pub struct NetworkTrace<F = f32> {
    pub signals: Vec<SpikePattern<F>>,
    pub layers: Vec<LayerTrace<F>>,
}

/// A built network: parsed architecture plus concrete parameters.
#[derive(Clone, Debug)]
pub struct Network<F = f32> {
    arch: ArchitectureSpec,
    layers: Vec<Layer<F>>,
    t_max: F,
}

impl<F: Real> Network<F> {
    /// Assembles a network, checking every parameter block against the
    /// architecture's shape chain.
    pub fn from_layers(arch: ArchitectureSpec, layers: Vec<Layer<F>>, t_max: F) -> Result<Self> {
        if layers.len() != arch.layers().len() {
            return Err(Error::DimensionMismatch {
                context: "network layer count",
                expected: arch.layers().len(),
                actual: layers.len(),
            });
        }
        for (idx, (spec, layer)) in arch.layers().iter().zip(&layers).enumerate() {
            let before = arch.shape_before(idx).units();
            match (*spec, layer) {
                (LayerSpec::Dense { units }, Layer::Dense(p)) => {
                    if p.n_pre() != before || p.n_post() != units {
                        return Err(Error::DimensionMismatch {
                            context: "dense layer params",
                            expected: before * units,
                            actual: p.n_pre() * p.n_post(),
                        });
                    }
                }
                (LayerSpec::Conv { kernels, size }, Layer::Conv(p)) => {
                    let c_in = match arch.shape_before(idx) {
                        SignalShape::Grid { c, .. } => c,
                        SignalShape::Flat(_) => unreachable!("validated at parse"),
                    };
                    if p.c_out() != kernels || p.c_in() != c_in || p.size() != size {
                        return Err(Error::InvalidValue {
                            what: "conv layer params",
                            reason: format!(
                                "layer {idx}: expected {kernels} kernels of {size}x{size} over {c_in} channels"
                            ),
                        });
                    }
                }
                (LayerSpec::Pool { size }, Layer::Pool { size: actual }) => {
                    if size != *actual {
                        return Err(Error::InvalidValue {
                            what: "pool layer params",
                            reason: format!("layer {idx}: expected P{size}, got P{actual}"),
                        });
                    }
                }
                _ => {
                    return Err(Error::InvalidValue {
                        what: "layer kind",
                        reason: format!("layer {idx} does not match the architecture"),
                    });
                }
            }
        }
        if !(t_max > F::zero()) {
            return Err(Error::InvalidValue {
                what: "t_max",
                reason: format!("must be positive, got {t_max}"),
            });
        }
        Ok(Self {
            arch,
            layers,
            t_max,
        })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn t_max(&self) -> F {
        self.t_max
    }

    /// Flat parameter slices of the trainable layers, in layer order.
    pub fn trainable(&self) -> Vec<&[F]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(p) => Some(p.raw()),
                Layer::Conv(p) => Some(p.raw()),
                Layer::Pool { .. } => None,
            })
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [F]> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Dense(p) => Some(p.raw_mut()),
                Layer::Conv(p) => Some(p.raw_mut()),
                Layer::Pool { .. } => None,
            })
            .collect()
    }

    /// Firing threshold of each trainable layer.
    pub fn thresholds(&self) -> Vec<F> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(p) => Some(p.threshold()),
                Layer::Conv(p) => Some(p.threshold()),
                Layer::Pool { .. } => None,
            })
            .collect()
    }

    /// Runs one sample through the network, recording the full trace.
    pub fn forward(&self, input: &SpikePattern<F>) -> Result<(SpikePattern<F>, NetworkTrace<F>)> {
        if input.len() != self.arch.input().units() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.arch.input().units(),
                actual: input.len(),
            });
        }
        let mut signals = Vec::with_capacity(self.layers.len() + 1);
        let mut traces = Vec::with_capacity(self.layers.len());
        signals.push(input.clone());
        for (idx, layer) in self.layers.iter().enumerate() {
            let current = signals.last().expect("nonempty");
            let in_shape = self.arch.shape_before(idx);
            let (out, trace) = match layer {
                Layer::Dense(p) => {
                    let (out, tr) = crate::neuron::forward_layer(current, p)?;
                    (out, LayerTrace::Neurons(tr))
                }
                Layer::Conv(p) => {
                    let (out, tr, _) = forward_conv(current, in_shape, p)?;
                    (out, LayerTrace::Neurons(tr))
                }
                Layer::Pool { size } => {
                    let (out, tr, _) = forward_pool(current, in_shape, *size)?;
                    (out, LayerTrace::Pool(tr))
                }
            };
            signals.push(out);
            traces.push(trace);
        }
        let output = signals.last().expect("nonempty").clone();
        Ok((
            output,
            NetworkTrace {
                signals,
                layers: traces,
            },
        ))
    }
}
