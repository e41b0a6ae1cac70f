//! Federated-averaging harness: the plain baseline and the encrypted run,
//! sharing data order under one seed so that encryption is the only
//! difference between them.
//!
//! In the encrypted run, the server-side aggregation path receives nothing
//! but `(ciphertext, public key)` uploads; client plaintext parameters never
//! reach it. The sum is decoded, divided by the client count, and broadcast.

pub mod data;
pub mod task;

use crate::ahe::{self, CiphertextBatch, ModelBundle, PlaintextBatch, PublicKeyBatch};
use crate::config::FlConfig;
use crate::error::{Error, Result};
use crate::losses::EvalStats;
use crate::nn::Net;
use crate::rng::{self, Stream};
use data::Dataset;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::Serialize;
use task::TaskNet;

/// Metadata needed to undo the parameter flattening.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodecMeta {
    pub param_count: usize,
    pub psi: f32,
    pub clipped: usize,
}

/// Flatten task-model parameters into the plaintext domain, clipping to the
/// scheme bound and recording how many values were clipped.
pub fn param_codec_encode(model: &TaskNet, psi: f32) -> Result<(PlaintextBatch, CodecMeta)> {
    let flat = model.flatten_params();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite task parameter"));
    }
    let batch = PlaintextBatch::new(Array1::from_vec(flat), psi);
    let meta = CodecMeta { param_count: batch.len(), psi, clipped: batch.clipped };
    Ok((batch, meta))
}

/// Inverse of the codec for in-range weights.
pub fn param_codec_decode(values: &Array1<f32>, meta: &CodecMeta, model: &mut TaskNet) -> Result<()> {
    if values.len() != meta.param_count {
        return Err(Error::invalid(format!(
            "decoded length {} does not match codec metadata {}",
            values.len(),
            meta.param_count
        )));
    }
    model.load_params(values.as_slice().unwrap())
}

/// One client's upload in the encrypted run: what the channel carries.
pub struct ClientUpload {
    pub c: CiphertextBatch,
    pub pk: PublicKeyBatch,
}

/// Server-side aggregation: sees uploads only, returns the decoded sum.
pub fn server_aggregate(aggregator: &Net<f32>, uploads: &[ClientUpload]) -> Result<Array1<f32>> {
    let cs: Vec<&CiphertextBatch> = uploads.iter().map(|u| &u.c).collect();
    let pks: Vec<&PublicKeyBatch> = uploads.iter().map(|u| &u.pk).collect();
    ahe::aggregate(aggregator, &cs, &pks)
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Short digests of each client's uploaded parameter vector.
    pub client_digests: Vec<String>,
    /// Plain sum vs decoded sum; absent in the plain baseline run.
    pub sum_stats: Option<EvalStats>,
    pub clip_count: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlRunResult {
    pub accuracy: f64,
    pub traces: Vec<RoundTrace>,
    pub cfg_digest: String,
    pub encrypted: bool,
}

fn digest_of(values: &[f32]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let out = hasher.finalize();
    out[..6].iter().map(|b| format!("{b:02x}")).collect()
}

fn cfg_digest(cfg: &FlConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg).expect("fl config serializes"));
    let out = hasher.finalize();
    out[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic equal shards over the training subset.
fn partition(n: usize, clients: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let per = n / clients;
    (0..clients).map(|c| idx[c * per..(c + 1) * per].to_vec()).collect()
}

fn local_train(
    model: &mut TaskNet,
    ds: &Dataset,
    shard: &[usize],
    cfg: &FlConfig,
    rng: &mut Stream,
) -> Result<()> {
    let dim = ds.train.images.ncols();
    let mut order = shard.to_vec();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.local_batch) {
            let x = Array2::from_shape_fn((chunk.len(), dim), |(i, j)| {
                ds.train.images[[chunk[i], j]]
            });
            let labels: Vec<u8> = chunk.iter().map(|&i| ds.train.labels[i]).collect();
            model.sgd_step(&x, &labels, cfg.local_lr as f32)?;
        }
    }
    Ok(())
}

enum Mode<'a> {
    Plain,
    Hans(&'a ModelBundle),
}

fn fedavg_run(cfg: &FlConfig, ds: &Dataset, mode: Mode<'_>) -> Result<(TaskNet, FlRunResult)> {
    cfg.validate()?;
    if let Mode::Hans(bundle) = &mode {
        if bundle.num_clients() != cfg.num_clients {
            return Err(Error::invalid(format!(
                "bundle arity {} does not match fl client count {}",
                bundle.num_clients(),
                cfg.num_clients
            )));
        }
    }
    if ds.train.len() < cfg.num_clients {
        return Err(Error::invalid("training subset smaller than the client count"));
    }

    let mut setup_rng = rng::derive(cfg.seed, &["fl", "setup"]);
    let shards = partition(ds.train.len(), cfg.num_clients, &mut setup_rng);
    let mut global = TaskNet::build(cfg.arch, ds.dims, ds.classes, &mut setup_rng)?;

    let mut traces = Vec::with_capacity(cfg.rounds);
    let mut last_pk_digest: Option<String> = None;
    for round in 1..=cfg.rounds {
        let t0 = std::time::Instant::now();
        let global_params = global.flatten_params();
        let mut uploads_plain: Vec<Vec<f32>> = Vec::with_capacity(cfg.num_clients);
        for client in 0..cfg.num_clients {
            let mut local = global.clone();
            local.load_params(&global_params)?;
            let mut client_rng = rng::derive_indexed(
                cfg.seed,
                &["fl", "local"],
                (round * cfg.num_clients + client) as u64,
            );
            local_train(&mut local, ds, &shards[client], cfg, &mut client_rng)?;
            uploads_plain.push(local.flatten_params());
        }
        let client_digests: Vec<String> =
            uploads_plain.iter().map(|p| digest_of(p)).collect();

        let mut plain_sum = vec![0.0f32; global_params.len()];
        for upload in &uploads_plain {
            for (s, v) in plain_sum.iter_mut().zip(upload) {
                *s += v;
            }
        }

        let (avg, sum_stats, clip_count) = match &mode {
            Mode::Plain => {
                let avg: Vec<f32> =
                    plain_sum.iter().map(|v| v / cfg.num_clients as f32).collect();
                (avg, None, 0)
            }
            Mode::Hans(bundle) => {
                // Client side: encode, clip, encrypt with fresh per-scalar keys.
                let mut uploads = Vec::with_capacity(cfg.num_clients);
                let mut clip_count = 0usize;
                let mut meta0 = None;
                for (client, params) in uploads_plain.iter().enumerate() {
                    let mut model_like = global.clone();
                    model_like.load_params(params)?;
                    let (batch, meta) = param_codec_encode(&model_like, bundle.cfg.psi)?;
                    clip_count += meta.clipped;
                    let mut key_rng = rng::derive_indexed(
                        cfg.seed,
                        &["fl", "keys"],
                        (round * cfg.num_clients + client) as u64,
                    );
                    let (keys, pk) = ahe::keygen(batch.len(), &bundle.cfg, &mut key_rng)?;
                    let c = ahe::encrypt(&bundle.encryptors[client], &batch, &keys, &bundle.cfg)?;
                    uploads.push(ClientUpload { c, pk });
                    meta0.get_or_insert(meta);
                }
                // Fresh keys every round: the pk digest must differ between rounds.
                let pk_digest = digest_of(uploads[0].pk.pk.as_slice().unwrap());
                if let Some(prev) = &last_pk_digest {
                    if *prev == pk_digest {
                        return Err(Error::internal("public keys repeated across rounds"));
                    }
                }
                last_pk_digest = Some(pk_digest);

                // Server side: aggregate ciphertexts, decode the sum only.
                let decoded_sum = server_aggregate(&bundle.aggregator, &uploads)?;
                let stats =
                    EvalStats::from_pair(&decoded_sum, &Array1::from_vec(plain_sum.clone()))?;
                let avg: Vec<f32> =
                    decoded_sum.iter().map(|v| v / cfg.num_clients as f32).collect();
                (avg, Some(stats), clip_count)
            }
        };

        global.load_params(&avg)?;
        traces.push(RoundTrace {
            round,
            client_digests,
            sum_stats,
            clip_count,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }

    let accuracy = global.accuracy(&ds.test.images, &ds.test.labels);
    let result = FlRunResult {
        accuracy,
        traces,
        cfg_digest: cfg_digest(cfg),
        encrypted: matches!(mode, Mode::Hans(_)),
    };
    Ok((global, result))
}

/// Plain federated averaging baseline.
pub fn fedavg_plain(cfg: &FlConfig, ds: &Dataset) -> Result<(TaskNet, FlRunResult)> {
    fedavg_run(cfg, ds, Mode::Plain)
}

/// Federated averaging over the scheme: per-scalar encryption of each
/// client's parameters, network aggregation server-side, decode and divide.
pub fn fedavg_hans(
    cfg: &FlConfig,
    ds: &Dataset,
    bundle: &ModelBundle,
) -> Result<(TaskNet, FlRunResult)> {
    fedavg_run(cfg, ds, Mode::Hans(bundle))
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaReport {
    pub plain_accuracy: f64,
    pub hans_accuracy: f64,
    /// `plain - hans`, in accuracy points (positive = encrypted run worse).
    pub delta: f64,
    pub within_budget: bool,
    pub budget: f64,
    /// Across-round summary of the per-round sum differences.
    pub round_stats: Option<EvalStats>,
}

/// Accuracy-loss verdict between a plain and an encrypted run that shared a
/// config and seed.
pub fn accuracy_delta(
    plain: &FlRunResult,
    hans: &FlRunResult,
    budget: f64,
) -> Result<DeltaReport> {
    if plain.cfg_digest != hans.cfg_digest {
        return Err(Error::invalid("runs were produced under different configs"));
    }
    if plain.encrypted || !hans.encrypted {
        return Err(Error::invalid("pass (plain, hans) in that order"));
    }
    let delta = plain.accuracy - hans.accuracy;
    let chunks: Vec<EvalStats> = hans.traces.iter().filter_map(|t| t.sum_stats).collect();
    let round_stats =
        if chunks.is_empty() { None } else { Some(EvalStats::from_series(&chunks)?) };
    Ok(DeltaReport {
        plain_accuracy: plain.accuracy,
        hans_accuracy: hans.accuracy,
        delta,
        within_budget: delta < budget,
        budget,
        round_stats,
    })
}
