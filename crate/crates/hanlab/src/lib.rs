//! Learned aggregatable hybrid encryption for private federated averaging.
//!
//! The crate implements the full lifecycle of the scheme: per-scalar key
//! generation, learned encryption and aggregation networks, the five-stage
//! adversarial training pipeline, the privacy-preserving update that turns the
//! public original model into per-client private models, an attack suite for
//! validating the privacy claims, a federated-averaging harness measuring
//! utility cost, and a benchmark/CLI layer.

pub mod ahe;
pub mod attacks;
pub mod bench;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod dlg;
pub mod error;
pub mod fl;
pub mod losses;
pub mod nn;
pub mod ppu;
pub mod report;
pub mod rng;
pub mod training;

pub use config::{AheConfig, Config, DlgConfig, FlConfig, LossConfig, PpuConfig, TrainConfig};
pub use error::{Error, Result};
