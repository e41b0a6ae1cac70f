//! Wall-clock benchmarks for the scheme primitives and the closed-form
//! communication-overhead estimate.

use crate::ahe::{self, ModelBundle, PlaintextBatch};
use crate::error::{Error, Result};
use crate::rng::{self};
use ndarray::Array1;
use rand::Rng;
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub operation: String,
    pub batch_size: usize,
    /// Median over the measured trials.
    pub wall_seconds: f64,
    pub trials: usize,
    pub device: String,
}

pub fn device_descriptor() -> String {
    if let Ok(dev) = std::env::var("HANLAB_DEVICE") {
        if !dev.is_empty() {
            return dev;
        }
    }
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("cpu({threads} threads)")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    Keygen,
    Encrypt,
    Aggregate,
}

impl std::str::FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keygen" => Ok(BenchOp::Keygen),
            "encrypt" => Ok(BenchOp::Encrypt),
            "aggregate" => Ok(BenchOp::Aggregate),
            other => Err(Error::invalid(format!("unknown bench op {other}"))),
        }
    }
}

const WARMUP_TRIALS: usize = 3;

/// Median-of-trials timing of one primitive at the given batch sizes.
/// Weights do not affect timing, so any bundle of the right shape works.
pub fn bench(
    op: BenchOp,
    batch_sizes: &[usize],
    bundle: &ModelBundle,
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    if trials < 5 {
        return Err(Error::invalid("bench requires at least 5 measured trials"));
    }
    if batch_sizes.is_empty() {
        return Err(Error::invalid("bench requires at least one batch size"));
    }
    let cfg = &bundle.cfg;
    let device = device_descriptor();
    let mut out = Vec::new();
    for &batch in batch_sizes {
        if batch == 0 {
            return Err(Error::invalid("bench batch size must be >= 1"));
        }
        let mut data_rng = rng::derive(seed, &["bench", "data"]);
        // Inputs prepared outside the timed region where the op allows it.
        let m = PlaintextBatch::new(
            Array1::from_shape_fn(batch, |_| data_rng.random_range(-cfg.psi..=cfg.psi)),
            cfg.psi,
        );
        let (keys, _) = ahe::keygen(batch, cfg, &mut data_rng)?;
        let mut samples = Vec::with_capacity(trials);
        for trial in 0..WARMUP_TRIALS + trials {
            let mut op_rng = rng::derive_indexed(seed, &["bench", "op"], trial as u64);
            let elapsed = match op {
                BenchOp::Keygen => {
                    let t0 = Instant::now();
                    let (k, p) = ahe::keygen(batch, cfg, &mut op_rng)?;
                    let dt = t0.elapsed();
                    std::hint::black_box((k, p));
                    dt
                }
                BenchOp::Encrypt => {
                    let t0 = Instant::now();
                    let c = ahe::encrypt(&bundle.encryptors[0], &m, &keys, cfg)?;
                    let dt = t0.elapsed();
                    std::hint::black_box(c);
                    dt
                }
                BenchOp::Aggregate => {
                    // Aggregation consumes one ciphertext batch per client.
                    let mut cs = Vec::new();
                    let mut pks = Vec::new();
                    for enc in &bundle.encryptors {
                        let (k, pk) = ahe::keygen(batch, cfg, &mut op_rng)?;
                        cs.push(ahe::encrypt(enc, &m, &k, cfg)?);
                        pks.push(pk);
                    }
                    let c_refs: Vec<_> = cs.iter().collect();
                    let pk_refs: Vec<_> = pks.iter().collect();
                    let t0 = Instant::now();
                    let sum = ahe::aggregate(&bundle.aggregator, &c_refs, &pk_refs)?;
                    let dt = t0.elapsed();
                    std::hint::black_box(sum);
                    dt
                }
            };
            if trial >= WARMUP_TRIALS {
                samples.push(elapsed.as_secs_f64());
            }
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = samples[samples.len() / 2];
        out.push(BenchResult {
            operation: format!("{op:?}").to_lowercase(),
            batch_size: batch,
            wall_seconds: median,
            trials,
            device: device.clone(),
        });
    }
    Ok(out)
}

/// Closed-form one-round communication cost: every scalar uploads its
/// ciphertext vector plus one public key, in 32-bit reals.
#[derive(Debug, Clone, Serialize)]
pub struct CommEstimate {
    pub model_size: usize,
    pub bytes_hans: u64,
    pub bytes_plain: u64,
    pub ratio: f64,
}

pub fn comm_estimate(model_size: usize, ciphertext_len: usize) -> Result<CommEstimate> {
    if model_size == 0 {
        return Err(Error::invalid("model_size must be >= 1"));
    }
    let bytes_hans = model_size as u64 * (ciphertext_len as u64 + 1) * 4;
    let bytes_plain = model_size as u64 * 4;
    Ok(CommEstimate {
        model_size,
        bytes_hans,
        bytes_plain,
        ratio: bytes_hans as f64 / bytes_plain as f64,
    })
}

/// Reference constants reported alongside benchmark output; these are quoted
/// comparison-system numbers, never measured here.
pub mod reference {
    /// Comparison scheme: encryption+aggregation wall time for 3,000
    /// ciphertexts (seconds).
    pub const SECFED_ENC_AGG_3000_SECONDS: f64 = 6.5;
    /// Comparison scheme: one-round upload for a 616,420-parameter model (MB).
    pub const SECFED_BYTES_SMALL_MODEL_MB: f64 = 2.6;
    /// Comparison scheme: one-round upload for a 7,027,860-parameter model (MB).
    pub const SECFED_BYTES_LARGE_MODEL_MB: f64 = 30.2;
}
