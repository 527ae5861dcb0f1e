//! Event-driven spiking neural networks with single-spike temporal coding.
//!
//! Neurons carry information in the timing of their first (and only) spike.
//! Under the rectified-linear postsynaptic kernel the membrane potential is
//! piecewise linear, so forward propagation reduces to a closed-form
//! spike-time solve per neuron and backpropagation differentiates those
//! spike times exactly -- no surrogate gradients, no simulation time grid,
//! and no weight or gradient constraints.
//!
//! The crate provides the neuron model and exact gradients, image-to-latency
//! encoding, dense/convolutional/pooling composition, a mini-batch trainer
//! with diagnostics (dead-neuron census, spike-time and gradient-magnitude
//! histograms), IDX/image dataset ingestion, a versioned checkpoint format,
//! and a time-stepped reference simulator used to cross-check the
//! closed-form path and to compare against the leaky alpha kernel.

pub mod backprop;
pub mod data;
pub mod encoding;
pub mod error;
pub mod neuron;
pub mod oracle;
pub mod spike;
pub mod topology;
pub mod training;

pub use error::{Error, Result};
pub use spike::{Real, SpikePattern, DEFAULT_THRESHOLD, DEFAULT_T_MAX};
