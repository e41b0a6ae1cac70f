//! Minimal dense/conv network stack with manual backprop.
//!
//! All models in the scheme share one topology: an input linear layer that
//! expands to the hidden width, a pair of 1-D convolutions that mix the hidden
//! signal, a stack of residual blocks, and a linear output layer. Everything
//! is generic over the float type so tests can probe gradients at f64
//! precision while production runs at f32.

mod net;
mod optim;

pub use net::{Depth, Net, NetSpec, Role, Tape};
pub use optim::{AdamW, CosineSchedule};

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use rand::distr::uniform::SampleUniform;

/// Float types the network stack is instantiated at.
pub trait Scalar: NdFloat + FromPrimitive + SampleUniform + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}
