//! Privacy-preserving update: converts the publicly distributed original
//! encryptor into per-client private models.
//!
//! The collaborative phase (CPPU) runs round-robin: each client samples a
//! training set that mixes its own fresh private data with entries drawn with
//! replacement from the other clients' noisy public datasets, optimizes its
//! encryptor together with the shared aggregator on the aggregation loss, and
//! republishes a fresh noisy public dataset encrypted with the updated model.
//! The independent phase (IPPU) freezes the aggregator and lets every client
//! keep training its own encryptor against the final public datasets, in
//! parallel, with no further publication.

use crate::ahe::ModelBundle;
use crate::config::PpuConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamW, CosineSchedule, Net};
use crate::rng::{self, Stream};
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One published triple: noisy plaintext, public key, ciphertext. The true
/// plaintext never appears here; the publish path adds noise unconditionally.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PublicDatasetEntry {
    pub client_id: usize,
    pub round: usize,
    pub x_noisy: f32,
    pub pk: f32,
    pub c: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PublicDataset {
    pub entries: Vec<PublicDatasetEntry>,
}

impl PublicDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(
                &serde_json::to_string(e).map_err(|err| Error::internal(err.to_string()))?,
            );
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            entries.push(
                serde_json::from_str(line).map_err(|err| Error::invalid(err.to_string()))?,
            );
        }
        Ok(PublicDataset { entries })
    }
}

/// Client-side record of a publish: the shared dataset plus the privately
/// retained true plaintexts (used for calibration checks, never shared).
pub struct PublishOutcome {
    pub public: PublicDataset,
    pub retained_truth: Vec<f32>,
}

/// Encrypt `public_size` fresh random plaintexts with `enc` and publish them
/// with Gaussian noise added to every plaintext. Keys are drawn fresh here
/// and never reused for private traffic.
pub fn publish_public_dataset(
    enc: &Net<f32>,
    client_id: usize,
    round: usize,
    cfg: &crate::AheConfig,
    ppu: &PpuConfig,
    rng: &mut Stream,
) -> Result<PublishOutcome> {
    ppu.validate()?;
    let n = ppu.public_size;
    let x = crate::ahe::PlaintextBatch::new(
        Array1::from_shape_fn(n, |_| rng.random_range(-cfg.psi..=cfg.psi)),
        cfg.psi,
    );
    let (keys, pks) = crate::ahe::keygen(n, cfg, rng)?;
    let c = crate::ahe::encrypt(enc, &x, &keys, cfg)?;
    let normal = Normal::new(0.0f32, ppu.sigma)
        .map_err(|e| Error::invalid(format!("noise scale: {e}")))?;
    let entries = (0..n)
        .map(|k| PublicDatasetEntry {
            client_id,
            round,
            x_noisy: x.m[k] + normal.sample(rng),
            pk: pks.pk[k],
            c: c.c.row(k).to_vec(),
        })
        .collect();
    Ok(PublishOutcome { public: PublicDataset { entries }, retained_truth: x.m.to_vec() })
}

/// A training set assembled by sampling with replacement: the client's own
/// plaintexts and keys, the sampled `(pk, c)` pairs of every other client
/// (keyed by their aggregator slot), and the noisy targets.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub own_slot: usize,
    pub own_m: Array1<f32>,
    pub own_sk1: Array1<f32>,
    pub own_sk2: Array1<f32>,
    /// Parallel to `other_slots`: ciphertext rows and public keys per slot.
    pub other_slots: Vec<usize>,
    pub other_c: Vec<Array2<f32>>,
    pub other_pk: Vec<Array1<f32>>,
    /// Per-sample target: own plaintext plus the sampled noisy plaintexts.
    pub y: Array1<f32>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.own_m.len()
    }
}

/// Algorithm "sample with replacement": for every own scalar, draw one entry
/// uniformly (with replacement) from each other client's public dataset and
/// accumulate the noisy plaintexts into the target.
pub fn sample_with_replacement(
    own_slot: usize,
    others: &[(usize, &PublicDataset)],
    x_own: &Array1<f32>,
    sk1: &Array1<f32>,
    sk2: &Array1<f32>,
    rng: &mut Stream,
) -> Result<TrainingSet> {
    if x_own.len() != sk1.len() || x_own.len() != sk2.len() {
        return Err(Error::invalid("own data and keys must have equal length"));
    }
    for (slot, d) in others {
        if d.is_empty() {
            return Err(Error::invalid(format!("public dataset for slot {slot} is empty")));
        }
    }
    let n = x_own.len();
    let width = others
        .first()
        .map(|(_, d)| d.entries[0].c.len())
        .ok_or_else(|| Error::invalid("need at least one other client"))?;

    let mut other_c: Vec<Array2<f32>> = others.iter().map(|_| Array2::zeros((n, width))).collect();
    let mut other_pk: Vec<Array1<f32>> = others.iter().map(|_| Array1::zeros(n)).collect();
    let mut y = x_own.clone();
    for k in 0..n {
        for (j, (_, dataset)) in others.iter().enumerate() {
            let idx = rng.random_range(0..dataset.len());
            let entry = &dataset.entries[idx];
            other_c[j].row_mut(k).assign(&Array1::from_vec(entry.c.clone()));
            other_pk[j][k] = entry.pk;
            y[k] += entry.x_noisy;
        }
    }
    Ok(TrainingSet {
        own_slot,
        own_m: x_own.clone(),
        own_sk1: sk1.clone(),
        own_sk2: sk2.clone(),
        other_slots: others.iter().map(|(slot, _)| *slot).collect(),
        other_c,
        other_pk,
        y,
    })
}

/// Joint forward/backward of the update loss on a training-set slice: the
/// client's ciphertext is recomputed through its encryptor (gradients flow),
/// the sampled ciphertexts are constants.
fn update_grads(
    enc: &Net<f32>,
    agg: &Net<f32>,
    set: &TrainingSet,
    lo: usize,
    hi: usize,
) -> (f32, Net<f32>, Net<f32>) {
    let batch = hi - lo;
    let n_slots = set.other_slots.len() + 1;
    let width = enc.spec.out_width;

    let mut x = Array2::zeros((batch, 3));
    x.slice_mut(s![.., 0]).assign(&set.own_m.slice(s![lo..hi]));
    x.slice_mut(s![.., 1]).assign(&set.own_sk1.slice(s![lo..hi]));
    x.slice_mut(s![.., 2]).assign(&set.own_sk2.slice(s![lo..hi]));
    let (c_own, tape) = enc.forward_tape(&x);
    let own_pk = &set.own_sk1.slice(s![lo..hi]) + &set.own_sk2.slice(s![lo..hi]);

    let mut agg_in = Array2::zeros((batch, n_slots * (width + 1)));
    let slot = set.own_slot;
    agg_in.slice_mut(s![.., slot * width..(slot + 1) * width]).assign(&c_own);
    agg_in.slice_mut(s![.., n_slots * width + slot]).assign(&own_pk);
    for (j, other_slot) in set.other_slots.iter().enumerate() {
        agg_in
            .slice_mut(s![.., other_slot * width..(other_slot + 1) * width])
            .assign(&set.other_c[j].slice(s![lo..hi, ..]));
        agg_in
            .slice_mut(s![.., n_slots * width + other_slot])
            .assign(&set.other_pk[j].slice(s![lo..hi]));
    }

    let (out, agg_tape) = agg.forward_tape(&agg_in);
    let out1 = out.index_axis(Axis(1), 0).to_owned();
    let target = set.y.slice(s![lo..hi]).to_owned();
    let loss = crate::losses::mse_generic(&target, &out1);
    let scale = 2.0 / batch as f32;
    let dout = (&out1 - &target).mapv(|d| d * scale).insert_axis(Axis(1));
    let (dagg_in, agg_grads) = agg.backward(&agg_tape, &dout);
    let dc = dagg_in.slice(s![.., slot * width..(slot + 1) * width]).to_owned();
    let (_, enc_grads) = enc.backward(&tape, &dc);
    (loss, enc_grads, agg_grads)
}

/// Minibatch passes over a training set; returns the mean loss. `agg_opt` is
/// `None` in the independent phase, where the aggregator stays frozen.
fn optimize_on_set(
    enc: &mut Net<f32>,
    agg: &mut Net<f32>,
    enc_opt: &mut AdamW<f32>,
    agg_opt: Option<&mut AdamW<f32>>,
    set: &TrainingSet,
    ppu: &PpuConfig,
    schedule: &CosineSchedule,
    step_base: usize,
) -> Result<(f32, usize)> {
    let mut agg_opt = agg_opt;
    let mut total = 0.0f64;
    let mut steps = 0;
    for epoch in 0..ppu.epochs_per_round {
        let mut lo = 0;
        while lo < set.len() {
            let hi = (lo + ppu.batch_size).min(set.len());
            let (loss, enc_grads, agg_grads) = update_grads(enc, agg, set, lo, hi);
            if !loss.is_finite() {
                return Err(Error::StageFailure(format!(
                    "ppu optimize diverged at epoch {epoch} offset {lo}"
                )));
            }
            let lr = schedule.lr(step_base + steps);
            enc_opt.step(enc, &enc_grads, lr);
            if let Some(opt) = agg_opt.as_deref_mut() {
                opt.step(agg, &agg_grads, lr * ppu.agg_lr_mult);
            }
            total += loss as f64;
            steps += 1;
            lo = hi;
        }
    }
    Ok(((total / steps.max(1) as f64) as f32, steps))
}

/// Outcome of the collaborative phase: the mutated bundle plus the final
/// public datasets, per client.
pub struct CppuOutcome {
    pub public_datasets: Vec<PublicDataset>,
    /// Mean update loss per (round, client) in execution order.
    pub round_losses: Vec<f32>,
}

/// Collaborative privacy-preserving update. Initializes every client's noisy
/// public dataset from the current (public) encryptors, then runs
/// `max_iterations` round-robin rounds of joint encryptor+aggregator updates
/// with republication.
pub fn cppu(bundle: &mut ModelBundle, ppu: &PpuConfig, seed: u64) -> Result<CppuOutcome> {
    ppu.validate()?;
    let n = bundle.num_clients();
    if n < 2 {
        return Err(Error::invalid("cppu needs at least two clients"));
    }
    let cfg = bundle.cfg.clone();

    let mut pubs: Vec<PublicDataset> = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::derive_indexed(seed, &["cppu", "init"], i as u64);
        let outcome = publish_public_dataset(&bundle.encryptors[i], i, 0, &cfg, ppu, &mut r)?;
        pubs.push(outcome.public);
    }

    let mut enc_opts: Vec<AdamW<f32>> =
        bundle.encryptors.iter().map(|e| AdamW::new(e, 0.0)).collect();
    let mut agg_opt = AdamW::new(&bundle.aggregator, 0.0);
    let total_rounds = ppu.max_iterations * ppu.epochs_per_round * ppu.private_size.div_ceil(ppu.batch_size);
    let schedule = CosineSchedule::new(ppu.lr, 0.0, total_rounds.max(1));
    let mut round_losses = Vec::new();
    let mut steps_done = vec![0usize; n];

    for round in 1..=ppu.max_iterations {
        // Rotate the visiting order so no client always trains against the
        // stalest published data.
        for k in 0..n {
            let i = (k + round - 1) % n;
            let mut r = rng::derive_indexed(seed, &["cppu", "round"], (round * n + i) as u64);
            let x_own = Array1::from_shape_fn(ppu.private_size, |_| {
                r.random_range(-cfg.psi..=cfg.psi)
            });
            let (keys, _) = crate::ahe::keygen(ppu.private_size, &cfg, &mut r)?;
            let others: Vec<(usize, &PublicDataset)> = (0..n)
                .filter(|j| *j != i)
                .map(|j| (j, &pubs[j]))
                .collect();
            let set =
                sample_with_replacement(i, &others, &x_own, &keys.sk_a, &keys.sk_b, &mut r)?;
            let (loss, steps) = optimize_on_set(
                &mut bundle.encryptors[i],
                &mut bundle.aggregator,
                &mut enc_opts[i],
                Some(&mut agg_opt),
                &set,
                ppu,
                &schedule,
                steps_done[i],
            )?;
            steps_done[i] += steps;
            round_losses.push(loss);

            // Republish with the updated encryptor, then broadcast (the
            // shared aggregator state plays the broadcast role in-process).
            let outcome =
                publish_public_dataset(&bundle.encryptors[i], i, round, &cfg, ppu, &mut r)?;
            pubs[i] = outcome.public;
        }
    }
    Ok(CppuOutcome { public_datasets: pubs, round_losses })
}

fn ippu_client(
    mut enc: Net<f32>,
    agg: &Net<f32>,
    client: usize,
    pubs: &[PublicDataset],
    cfg: &crate::AheConfig,
    ppu: &PpuConfig,
    seed: u64,
) -> Result<Net<f32>> {
    let n = pubs.len();
    let mut agg_local = agg.clone();
    let mut enc_opt = AdamW::new(&enc, 0.0);
    let total = ppu.rounds_per_client * ppu.epochs_per_round * ppu.private_size.div_ceil(ppu.batch_size);
    let schedule = CosineSchedule::new(ppu.lr, 0.0, total.max(1));
    let mut steps_done = 0usize;
    for round in 0..ppu.rounds_per_client {
        let mut r = rng::derive_indexed(
            seed,
            &["ippu", "client"],
            (client * ppu.rounds_per_client + round) as u64,
        );
        let x_own =
            Array1::from_shape_fn(ppu.private_size, |_| r.random_range(-cfg.psi..=cfg.psi));
        let (keys, _) = crate::ahe::keygen(ppu.private_size, cfg, &mut r)?;
        let others: Vec<(usize, &PublicDataset)> =
            (0..n).filter(|j| *j != client).map(|j| (j, &pubs[j])).collect();
        let set =
            sample_with_replacement(client, &others, &x_own, &keys.sk_a, &keys.sk_b, &mut r)?;
        let (_, steps) = optimize_on_set(
            &mut enc,
            &mut agg_local,
            &mut enc_opt,
            None,
            &set,
            ppu,
            &schedule,
            steps_done,
        )?;
        steps_done += steps;
    }
    Ok(enc)
}

/// Independent privacy-preserving update: per client, `rounds_per_client`
/// rounds against the final CPPU public datasets, touching only that client's
/// encryptor. Clients run in parallel on per-client random streams.
pub fn ippu(
    bundle: &mut ModelBundle,
    final_pubs: &[PublicDataset],
    ppu: &PpuConfig,
    seed: u64,
) -> Result<()> {
    ippu_with_mode(bundle, final_pubs, ppu, seed, true)
}

pub(crate) fn ippu_with_mode(
    bundle: &mut ModelBundle,
    final_pubs: &[PublicDataset],
    ppu: &PpuConfig,
    seed: u64,
    parallel: bool,
) -> Result<()> {
    ppu.validate()?;
    if final_pubs.len() != bundle.num_clients() {
        return Err(Error::invalid("need one final public dataset per client"));
    }
    let agg_hash = bundle.aggregator.weight_hash();
    let cfg = bundle.cfg.clone();
    let agg = bundle.aggregator.clone();

    let jobs: Vec<(usize, Net<f32>)> =
        bundle.encryptors.iter().cloned().enumerate().collect();
    let run = |(i, enc): (usize, Net<f32>)| -> Result<(usize, Net<f32>)> {
        Ok((i, ippu_client(enc, &agg, i, final_pubs, &cfg, ppu, seed)?))
    };
    let results: Vec<Result<(usize, Net<f32>)>> = if parallel {
        jobs.into_par_iter().map(run).collect()
    } else {
        jobs.into_iter().map(run).collect()
    };
    for result in results {
        let (i, enc) = result?;
        bundle.encryptors[i] = enc;
    }

    if bundle.aggregator.weight_hash() != agg_hash {
        return Err(Error::internal("ippu mutated the frozen aggregator"));
    }
    Ok(())
}
