//! Spike-driven neural inference and single-object tracking engine.
//!
//! The crate builds up from integer spike tensors and a normalized-integer
//! leaky integrate-and-fire neuron to a siamese tracking pipeline: a hybrid
//! CNN/transformer spiking backbone with linear-complexity spike attention,
//! a memory-retrieval module that matches search features against cached
//! template memories, a center-point box head, and a tracking protocol with
//! periodic template refresh. A theoretical energy profiler prices every
//! linear operator from its op count and measured firing rates, and a small
//! reverse-mode tape trains the whole stack at toy scale.
//!
//! Everything is deterministic: fixed seeds give bit-identical weights,
//! tracks, and reports.

pub mod attention;
pub mod backbone;
pub mod blocks;
pub mod energy;
pub mod error;
pub mod head;
pub mod loss;
pub mod mrm;
pub mod neuron;
pub mod nnops;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
