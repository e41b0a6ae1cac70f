//! The adversary suite: known-model attacker training (crack models trained
//! on the public original encryptor, evaluated against private traffic) and
//! the two pseudo collusion attacks that puppet a missing honest client with
//! either its original model (PCAOM) or its published noisy dataset (PCAPD).
//!
//! Victim traffic enters through [`TrafficProvider`], which yields only what
//! an interceptor sees (ciphertexts and public keys) plus ground truth that
//! is used exclusively for evaluation statistics. Private encryptor weights
//! never cross this boundary.

use crate::ahe::{self, CiphertextBatch, PlaintextBatch, PublicKeyBatch};
use crate::config::{AheConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{self, EvalStats};
use crate::nn::{Depth, Net};
use crate::ppu::PublicDataset;
use crate::rng::{self, Stream};
use crate::training::PlateauDetector;
use crate::nn::{AdamW, CosineSchedule};
use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Interceptable traffic from one client: ciphertext rows, public keys, and
/// the true plaintexts (evaluation only).
pub struct TrafficBatch {
    pub c: CiphertextBatch,
    pub pk: PublicKeyBatch,
    pub truth: Array1<f32>,
}

/// What an attacker can observe of a victim: fresh intercepted batches.
pub trait TrafficProvider {
    fn sample(&mut self, n: usize) -> Result<TrafficBatch>;
}

/// Standard provider wrapping a (possibly private) encryptor. The attack
/// operations never see the encryptor itself, only this provider.
pub struct EncryptorTraffic<'a> {
    enc: &'a Net<f32>,
    cfg: AheConfig,
    rng: Stream,
}

impl<'a> EncryptorTraffic<'a> {
    pub fn new(enc: &'a Net<f32>, cfg: AheConfig, rng: Stream) -> Self {
        EncryptorTraffic { enc, cfg, rng }
    }
}

impl TrafficProvider for EncryptorTraffic<'_> {
    fn sample(&mut self, n: usize) -> Result<TrafficBatch> {
        let m = PlaintextBatch::new(
            Array1::from_shape_fn(n, |_| self.rng.random_range(-self.cfg.psi..=self.cfg.psi)),
            self.cfg.psi,
        );
        let (keys, pk) = ahe::keygen(n, &self.cfg, &mut self.rng)?;
        let c = ahe::encrypt(self.enc, &m, &keys, &self.cfg)?;
        Ok(TrafficBatch { c, pk, truth: m.m })
    }
}

/// The four crack variants the adversary trains from the original model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CrackVariant {
    PkStd,
    PkDbl,
    NoPkStd,
    NoPkDbl,
}

impl CrackVariant {
    pub const ALL: [CrackVariant; 4] =
        [CrackVariant::PkStd, CrackVariant::PkDbl, CrackVariant::NoPkStd, CrackVariant::NoPkDbl];

    pub fn name(&self) -> &'static str {
        match self {
            CrackVariant::PkStd => "crack1_std",
            CrackVariant::PkDbl => "crack1_dbl",
            CrackVariant::NoPkStd => "crack2_std",
            CrackVariant::NoPkDbl => "crack2_dbl",
        }
    }

    fn with_pk(&self) -> bool {
        matches!(self, CrackVariant::PkStd | CrackVariant::PkDbl)
    }

    fn depth(&self) -> Depth {
        match self {
            CrackVariant::PkStd | CrackVariant::NoPkStd => Depth::Standard,
            CrackVariant::PkDbl | CrackVariant::NoPkDbl => Depth::Double,
        }
    }
}

pub struct KmaOutcome {
    /// Trained crack models, in `CrackVariant::ALL` order.
    pub attackers: Vec<(CrackVariant, Net<f32>)>,
    /// Guess error against the original model's own traffic.
    pub on_original: Vec<(CrackVariant, EvalStats)>,
    /// Guess error against the target (private) traffic.
    pub on_target: Vec<(CrackVariant, EvalStats)>,
}

/// Known-model attack: train all four crack variants on traffic generated
/// from the public original encryptor, then evaluate them against the target
/// provider. The target's weights are unreachable by construction.
pub fn train_kma_attackers(
    original: &Net<f32>,
    target: &mut dyn TrafficProvider,
    cfg: &AheConfig,
    tc: &TrainConfig,
) -> Result<KmaOutcome> {
    if original.spec.role != crate::nn::Role::Encryptor {
        return Err(Error::invalid("kma requires the original encryptor model"));
    }

    let jobs: Vec<(usize, CrackVariant)> =
        CrackVariant::ALL.into_iter().enumerate().collect();
    let trained: Vec<Result<(CrackVariant, Net<f32>, EvalStats)>> = jobs
        .into_par_iter()
        .map(|(idx, variant)| {
            let mut init_rng = rng::derive_indexed(tc.seed, &["kma", "init"], idx as u64);
            let spec = ahe::attacker_spec(cfg, variant.with_pk(), variant.depth());
            let mut atk = Net::<f32>::new(spec, &mut init_rng);

            let mut opt = AdamW::new(&atk, tc.weight_decay);
            let schedule = CosineSchedule::new(
                tc.lr * tc.attacker_lr_mult,
                tc.scheduler.eta_min,
                tc.plateau.max_steps,
            );
            let mut detector = PlateauDetector::new(&tc.plateau);
            let mut rng = rng::derive_indexed(tc.seed, &["kma", "train"], idx as u64);
            for step in 0..tc.plateau.max_steps {
                let m = Array1::from_shape_fn(tc.batch_size, |_| {
                    rng.random_range(-cfg.psi..=cfg.psi)
                });
                let (keys, pk) = ahe::keygen(tc.batch_size, cfg, &mut rng)?;
                let pk_opt = if variant.with_pk() { Some(&pk.pk) } else { None };
                let (loss, grads) = losses::attacker_update_grads(
                    original, &atk, &m, &keys.sk_a, &keys.sk_b, pk_opt,
                );
                if !loss.is_finite() {
                    return Err(Error::StageFailure(format!(
                        "kma {} diverged at step {step}",
                        variant.name()
                    )));
                }
                opt.step(&mut atk, &grads, schedule.lr(step));
                if detector.push(loss as f64) {
                    break;
                }
            }
            let mut eval_rng = rng::derive_indexed(tc.seed, &["kma", "eval"], idx as u64);
            let stats =
                crate::training::eval_attacker(original, &atk, cfg, tc.eval_batch, &mut eval_rng)?;
            Ok((variant, atk, stats))
        })
        .collect();

    let mut attackers = Vec::new();
    let mut on_original = Vec::new();
    for t in trained {
        let (variant, atk, stats) = t?;
        on_original.push((variant, stats));
        attackers.push((variant, atk));
    }

    // Evaluation against the target's (private) traffic.
    let mut on_target = Vec::new();
    for (variant, atk) in &attackers {
        let batch = target.sample(tc.eval_batch)?;
        let pk_opt = if variant.with_pk() { Some(&batch.pk) } else { None };
        let guess = ahe::attack_forward(atk, &batch.c, pk_opt)?;
        on_target.push((*variant, EvalStats::from_pair(&guess, &batch.truth)?));
    }

    Ok(KmaOutcome { attackers, on_original, on_target })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExampleRow {
    pub orig: f32,
    pub estimate: f32,
    pub diff: f32,
}

/// Summary of one attack run. `diff` rows satisfy `diff = |estimate - orig|`;
/// `success` marks a mean guessing difference below the reconstruction-noise
/// threshold 1e-2.
#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub attack: String,
    pub mad: f64,
    pub var: f64,
    pub examples: Vec<ExampleRow>,
    pub success: bool,
    pub config: serde_json::Value,
}

/// Threshold below which per-scalar guesses are accurate enough to feed a
/// reconstruction attack.
pub const GUESSING_DIFFERENCE_FLOOR: f64 = 1e-2;

fn report_from_guesses(
    attack: &str,
    orig: &Array1<f32>,
    estimate: &Array1<f32>,
    config: serde_json::Value,
) -> Result<AttackReport> {
    let stats = EvalStats::from_pair(estimate, orig)?;
    // Five example rows spanning the magnitude range of the true values.
    let mut order: Vec<usize> = (0..orig.len()).collect();
    order.sort_by(|&a, &b| orig[a].abs().partial_cmp(&orig[b].abs()).unwrap());
    let examples = [0.1, 0.3, 0.5, 0.7, 0.9]
        .iter()
        .map(|q| {
            let idx = order[((order.len() - 1) as f64 * q) as usize];
            ExampleRow {
                orig: orig[idx],
                estimate: estimate[idx],
                diff: (estimate[idx] - orig[idx]).abs(),
            }
        })
        .collect();
    Ok(AttackReport {
        attack: attack.to_string(),
        mad: stats.mad,
        var: stats.var,
        examples,
        success: stats.mad < GUESSING_DIFFERENCE_FLOOR,
        config,
    })
}

/// Pseudo N-1 collusion via the victim's original model: the attacker fills
/// the missing honest slot with a self-chosen plaintext encrypted under the
/// victim partner's public original model, aggregates with the latest
/// aggregator, and subtracts its known contributions.
///
/// Slot layout: Alice (the victim) slot 0, Bob (original-model stand-in)
/// slot 1, attacker slot 2; the aggregator must have arity 3.
pub fn pcaom(
    alice: &mut dyn TrafficProvider,
    bob_original: &Net<f32>,
    attacker_enc: &Net<f32>,
    latest_aggregator: &Net<f32>,
    n_samples: usize,
    cfg: &AheConfig,
    seed: u64,
) -> Result<AttackReport> {
    if latest_aggregator.spec.in_width != 3 * (cfg.ciphertext_len + 1) {
        return Err(Error::invalid("pcaom requires an aggregator over exactly 3 participants"));
    }
    let mut rng = rng::derive(seed, &["pcaom"]);
    let alice_batch = alice.sample(n_samples)?;

    let m_b = PlaintextBatch::new(
        Array1::from_shape_fn(n_samples, |_| rng.random_range(-cfg.psi..=cfg.psi)),
        cfg.psi,
    );
    let (keys_b, pk_b) = ahe::keygen(n_samples, cfg, &mut rng)?;
    let c_b = ahe::encrypt(bob_original, &m_b, &keys_b, cfg)?;

    let m_att = PlaintextBatch::new(
        Array1::from_shape_fn(n_samples, |_| rng.random_range(-cfg.psi..=cfg.psi)),
        cfg.psi,
    );
    let (keys_att, pk_att) = ahe::keygen(n_samples, cfg, &mut rng)?;
    let c_att = ahe::encrypt(attacker_enc, &m_att, &keys_att, cfg)?;

    let m_agg = ahe::aggregate(
        latest_aggregator,
        &[&alice_batch.c, &c_b, &c_att],
        &[&alice_batch.pk, &pk_b, &pk_att],
    )?;
    let guess = &m_agg - &m_b.m - &m_att.m;
    report_from_guesses(
        "pcaom",
        &alice_batch.truth,
        &guess,
        serde_json::json!({"n_samples": n_samples, "seed": seed}),
    )
}

/// Pseudo N-1 collusion via the victim partner's published dataset: the
/// missing honest slot is filled with a `(x_noisy, pk, c)` triple drawn from
/// Bob's last CPPU publication; the unknown noise bounds the attack.
pub fn pcapd(
    alice: &mut dyn TrafficProvider,
    bob_public_dataset: &PublicDataset,
    attacker_enc: &Net<f32>,
    latest_aggregator: &Net<f32>,
    n_samples: usize,
    cfg: &AheConfig,
    seed: u64,
) -> Result<AttackReport> {
    if bob_public_dataset.is_empty() {
        return Err(Error::invalid("pcapd requires a non-empty public dataset"));
    }
    if latest_aggregator.spec.in_width != 3 * (cfg.ciphertext_len + 1) {
        return Err(Error::invalid("pcapd requires an aggregator over exactly 3 participants"));
    }
    let mut rng = rng::derive(seed, &["pcapd"]);
    let alice_batch = alice.sample(n_samples)?;

    let width = cfg.ciphertext_len;
    let mut c_b = ndarray::Array2::zeros((n_samples, width));
    let mut pk_b = Array1::zeros(n_samples);
    let mut x_noisy = Array1::zeros(n_samples);
    for k in 0..n_samples {
        let entry =
            &bob_public_dataset.entries[rng.random_range(0..bob_public_dataset.len())];
        c_b.row_mut(k).assign(&Array1::from_vec(entry.c.clone()));
        pk_b[k] = entry.pk;
        x_noisy[k] = entry.x_noisy;
    }
    let c_b = CiphertextBatch { c: c_b };
    let pk_b = PublicKeyBatch { pk: pk_b };

    let m_att = PlaintextBatch::new(
        Array1::from_shape_fn(n_samples, |_| rng.random_range(-cfg.psi..=cfg.psi)),
        cfg.psi,
    );
    let (keys_att, pk_att) = ahe::keygen(n_samples, cfg, &mut rng)?;
    let c_att = ahe::encrypt(attacker_enc, &m_att, &keys_att, cfg)?;

    let m_agg = ahe::aggregate(
        latest_aggregator,
        &[&alice_batch.c, &c_b, &c_att],
        &[&alice_batch.pk, &pk_b, &pk_att],
    )?;
    let guess = &m_agg - &x_noisy - &m_att.m;
    report_from_guesses(
        "pcapd",
        &alice_batch.truth,
        &guess,
        serde_json::json!({"n_samples": n_samples, "seed": seed}),
    )
}
