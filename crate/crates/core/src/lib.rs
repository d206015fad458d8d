//! Fuzzy population encoding and decoding for multi-modal deep spiking
//! Q-networks, plus the highway driving simulator and DQN harness used to
//! train and compare them.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod highway;
pub mod kernels;
pub mod params;
pub mod qnet;
pub mod rl;
pub mod snn;
pub mod spikes;
pub mod tensor;

pub use autodiff::{grad_check, SpikeMode, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::DenseArray;
