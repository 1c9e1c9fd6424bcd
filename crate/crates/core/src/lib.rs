//! Spiking neural networks trained with three coexisting plasticity paths:
//! surrogate-gradient weights, Hebbian weights and self-backpropagated
//! weights, fused per layer by learnable coefficients.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod neuron;
pub mod numerics;
pub mod optim;
pub mod plasticity;
pub mod reference;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
