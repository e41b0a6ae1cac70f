//! Training losses and evaluation statistics.
//!
//! Models train on MSE; evaluation statistics are Manhattan (L1) distances.
//! The composite objectives here are the accuracy-oriented pre-training
//! objective (aggregation error minus the attacker losses) and the hinged
//! final objective that stops pushing on an attacker once its error clears
//! the security level `gamma`.

use crate::ahe::{self, CiphertextBatch, KeyBatch, ModelBundle, PlaintextBatch, PublicKeyBatch};
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::nn::{Net, Role, Scalar};
use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

/// L1 comparison summary. `mad` is the mean absolute difference (the same
/// quantity as `mean_l1`, kept under the name attack reports use), `var` is
/// the variance of the signed difference. `std_mean`/`std_max` carry the
/// spread of per-chunk means and maxima when the stats were built from a
/// series (per-round traces); they are zero for single comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_l1: f64,
    pub max_l1: f64,
    pub std_mean: f64,
    pub std_max: f64,
    pub mad: f64,
    pub var: f64,
}

impl EvalStats {
    /// Stats over one pair of equal-length arrays.
    pub fn from_pair(a: &Array1<f32>, b: &Array1<f32>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::invalid(format!(
                "l1_stats length mismatch: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            return Err(Error::invalid("l1_stats on empty arrays"));
        }
        let n = a.len() as f64;
        let mut sum_abs = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut sum_d = 0.0f64;
        let mut sum_d2 = 0.0f64;
        for (&x, &y) in a.iter().zip(b.iter()) {
            let d = (x as f64) - (y as f64);
            sum_abs += d.abs();
            max_abs = max_abs.max(d.abs());
            sum_d += d;
            sum_d2 += d * d;
        }
        let mean_l1 = sum_abs / n;
        let mean_d = sum_d / n;
        let var = (sum_d2 / n - mean_d * mean_d).max(0.0);
        Ok(EvalStats { mean_l1, max_l1: max_abs, std_mean: 0.0, std_max: 0.0, mad: mean_l1, var })
    }

    /// Combine per-chunk stats (e.g. per federated round): overall mean/max
    /// plus the std-dev of the chunk means and maxima.
    pub fn from_series(chunks: &[EvalStats]) -> Result<Self> {
        if chunks.is_empty() {
            return Err(Error::invalid("l1_stats series is empty"));
        }
        let n = chunks.len() as f64;
        let mean_l1 = chunks.iter().map(|c| c.mean_l1).sum::<f64>() / n;
        let max_l1 = chunks.iter().map(|c| c.max_l1).fold(0.0, f64::max);
        let mean_of_max = chunks.iter().map(|c| c.max_l1).sum::<f64>() / n;
        let std_mean = (chunks.iter().map(|c| (c.mean_l1 - mean_l1).powi(2)).sum::<f64>() / n)
            .sqrt();
        let std_max = (chunks.iter().map(|c| (c.max_l1 - mean_of_max).powi(2)).sum::<f64>() / n)
            .sqrt();
        let var = chunks.iter().map(|c| c.var).sum::<f64>() / n;
        Ok(EvalStats { mean_l1, max_l1, std_mean, std_max, mad: mean_l1, var })
    }
}

/// Mean squared error between two equal-length arrays.
pub fn mse(a: &Array1<f32>, b: &Array1<f32>) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("mse length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("mse on empty arrays"));
    }
    Ok(mse_generic(a, b))
}

pub(crate) fn mse_generic<F: Scalar>(a: &Array1<F>, b: &Array1<F>) -> F {
    let n = F::from_usize(a.len()).unwrap();
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).fold(F::zero(), |s, v| s + v) / n
}

/// L1 comparison of two arrays; see [`EvalStats`].
pub fn l1_stats(a: &Array1<f32>, b: &Array1<f32>) -> Result<EvalStats> {
    EvalStats::from_pair(a, b)
}

/// Anything that produces per-row plaintext guesses from ciphertexts.
/// Implemented by attacker networks and by test stubs.
pub trait Guesser {
    fn guess(&self, c: &CiphertextBatch, pk: Option<&PublicKeyBatch>) -> Result<Array1<f32>>;
    fn wants_pk(&self) -> bool;
}

impl Guesser for Net<f32> {
    fn guess(&self, c: &CiphertextBatch, pk: Option<&PublicKeyBatch>) -> Result<Array1<f32>> {
        ahe::attack_forward(self, c, pk)
    }

    fn wants_pk(&self) -> bool {
        self.spec.role == Role::AttackerPk
    }
}

fn check_attacker_role(guesser: &dyn Guesser, with_pk: bool) -> Result<()> {
    if guesser.wants_pk() != with_pk {
        return Err(Error::invalid(if with_pk {
            "attacker_loss_pk requires a public-key attacker"
        } else {
            "attacker_loss requires a no-pk attacker"
        }));
    }
    Ok(())
}

/// MSE between the true plaintexts and a ciphertext-only attacker's guesses.
pub fn attacker_loss(
    enc: &Net<f32>,
    atk: &dyn Guesser,
    batch: &PlaintextBatch,
    keys: &KeyBatch,
    cfg: &crate::AheConfig,
) -> Result<f32> {
    check_attacker_role(atk, false)?;
    let c = ahe::encrypt(enc, batch, keys, cfg)?;
    let guess = atk.guess(&c, None)?;
    mse(&batch.m, &guess)
}

/// MSE between the true plaintexts and a public-key attacker's guesses.
pub fn attacker_loss_pk(
    enc: &Net<f32>,
    atk: &dyn Guesser,
    batch: &PlaintextBatch,
    keys: &KeyBatch,
    pk: &PublicKeyBatch,
    cfg: &crate::AheConfig,
) -> Result<f32> {
    check_attacker_role(atk, true)?;
    let c = ahe::encrypt(enc, batch, keys, cfg)?;
    let guess = atk.guess(&c, Some(pk))?;
    mse(&batch.m, &guess)
}

/// One client's data for a joint loss evaluation.
#[derive(Debug, Clone)]
pub struct ClientBatch {
    pub m: PlaintextBatch,
    pub keys: KeyBatch,
    pub pk: PublicKeyBatch,
}

/// MSE between the true element-wise plaintext sum and the aggregator output.
pub fn aggregation_loss(bundle: &ModelBundle, batches: &[ClientBatch]) -> Result<f32> {
    let n = bundle.num_clients();
    if batches.len() != n {
        return Err(Error::invalid(format!(
            "aggregation_loss needs {} client batches, got {}",
            n,
            batches.len()
        )));
    }
    let len = batches[0].m.len();
    if batches.iter().any(|b| b.m.len() != len || b.keys.len() != len) {
        return Err(Error::invalid("client batches must have equal lengths"));
    }
    let mut cs = Vec::with_capacity(n);
    for (enc, b) in bundle.encryptors.iter().zip(batches) {
        cs.push(ahe::encrypt(enc, &b.m, &b.keys, &bundle.cfg)?);
    }
    let c_refs: Vec<&CiphertextBatch> = cs.iter().collect();
    let pk_refs: Vec<&PublicKeyBatch> = batches.iter().map(|b| &b.pk).collect();
    let out = ahe::aggregate(&bundle.aggregator, &c_refs, &pk_refs)?;
    let target = target_sum(batches);
    mse(&target, &out)
}

pub fn target_sum(batches: &[ClientBatch]) -> Array1<f32> {
    let mut target = batches[0].m.m.clone();
    for b in &batches[1..] {
        target += &b.m.m;
    }
    target
}

/// Attacker losses for every client, evaluated against the bundle's current
/// co-trained standard attackers. Order: (no-pk loss, pk loss) per client.
pub fn per_client_attacker_losses(
    bundle: &ModelBundle,
    batches: &[ClientBatch],
) -> Result<Vec<(f32, f32)>> {
    let mut out = Vec::with_capacity(bundle.num_clients());
    for ((enc, atk), b) in bundle.encryptors.iter().zip(&bundle.attackers).zip(batches) {
        let plain = attacker_loss(enc, &atk.nopk_std, &b.m, &b.keys, &bundle.cfg)?;
        let with_pk = attacker_loss_pk(enc, &atk.pk_std, &b.m, &b.keys, &b.pk, &bundle.cfg)?;
        out.push((plain, with_pk));
    }
    Ok(out)
}

/// Accuracy-oriented objective used in pre-training: aggregation error minus
/// the summed attacker losses (attackers held fixed for this term).
pub fn pretrain_objective(bundle: &ModelBundle, batches: &[ClientBatch]) -> Result<f32> {
    let agg = aggregation_loss(bundle, batches)?;
    let atk: f32 = per_client_attacker_losses(bundle, batches)?
        .iter()
        .map(|(a, b)| a + b)
        .sum();
    Ok(agg - atk)
}

/// Final objective: `lambda * E + sum_i [hinge(gamma - L_i) + hinge(gamma - L^_i)]`.
/// Hinge terms vanish once an attacker's loss exceeds `gamma`.
pub fn final_objective(
    bundle: &ModelBundle,
    batches: &[ClientBatch],
    loss_cfg: &LossConfig,
) -> Result<f32> {
    let agg = aggregation_loss(bundle, batches)?;
    let mut hinges = 0.0f32;
    for (plain, with_pk) in per_client_attacker_losses(bundle, batches)? {
        hinges += (loss_cfg.gamma - plain).max(0.0);
        hinges += (loss_cfg.gamma - with_pk).max(0.0);
    }
    Ok(loss_cfg.lambda * agg + hinges)
}

// ---------------------------------------------------------------------------
// Gradient plumbing used by the training stages. All of it is generic so the
// finite-difference oracles can probe at f64.
// ---------------------------------------------------------------------------

/// Generic joint forward/backward through `mse(target, atk(enc(x)))`.
/// Returns the loss and gradients for the encryptor and the attacker.
/// Test-only dual route for the fused implementation.
#[cfg(test)]
pub(crate) fn attacker_loss_grads<F: Scalar>(
    enc: &Net<F>,
    atk: &Net<F>,
    m: &Array1<F>,
    sk_a: &Array1<F>,
    sk_b: &Array1<F>,
    pk: Option<&Array1<F>>,
) -> (F, Net<F>, Net<F>) {
    let batch = m.len();
    let mut x = Array2::zeros((batch, 3));
    x.slice_mut(s![.., 0]).assign(m);
    x.slice_mut(s![.., 1]).assign(sk_a);
    x.slice_mut(s![.., 2]).assign(sk_b);

    let (c, enc_tape) = enc.forward_tape(&x);
    let atk_in = match pk {
        Some(pk) => {
            let width = c.ncols();
            let mut xi = Array2::zeros((batch, width + 1));
            xi.slice_mut(s![.., ..width]).assign(&c);
            xi.slice_mut(s![.., width]).assign(pk);
            xi
        }
        None => c.clone(),
    };
    let (guess, atk_tape) = atk.forward_tape(&atk_in);
    let guess1 = guess.index_axis(Axis(1), 0).to_owned();
    let loss = mse_generic(m, &guess1);

    let scale = F::from_f64(2.0 / batch as f64).unwrap();
    let dguess = (&guess1 - m).mapv(|d| d * scale).insert_axis(Axis(1));
    let (datk_in, atk_grads) = atk.backward(&atk_tape, &dguess);
    let dc = match pk {
        Some(_) => datk_in.slice(s![.., ..c.ncols()]).to_owned(),
        None => datk_in,
    };
    let (_, enc_grads) = enc.backward(&enc_tape, &dc);
    (loss, enc_grads, atk_grads)
}

/// Generic joint forward/backward of the aggregation MSE. Returns the loss,
/// per-encryptor gradients and the aggregator gradient.
/// Test-only dual route for the fused implementation.
#[cfg(test)]
pub(crate) fn aggregation_loss_grads<F: Scalar>(
    encs: &[Net<F>],
    agg: &Net<F>,
    ms: &[Array1<F>],
    sk_as: &[Array1<F>],
    sk_bs: &[Array1<F>],
    pks: &[Array1<F>],
) -> (F, Vec<Net<F>>, Net<F>) {
    let n = encs.len();
    let batch = ms[0].len();
    let width = encs[0].spec.out_width;

    let mut tapes = Vec::with_capacity(n);
    let mut agg_in = Array2::zeros((batch, n * (width + 1)));
    for i in 0..n {
        let mut x = Array2::zeros((batch, 3));
        x.slice_mut(s![.., 0]).assign(&ms[i]);
        x.slice_mut(s![.., 1]).assign(&sk_as[i]);
        x.slice_mut(s![.., 2]).assign(&sk_bs[i]);
        let (c, tape) = encs[i].forward_tape(&x);
        agg_in.slice_mut(s![.., i * width..(i + 1) * width]).assign(&c);
        agg_in.slice_mut(s![.., n * width + i]).assign(&pks[i]);
        tapes.push(tape);
    }

    let (out, agg_tape) = agg.forward_tape(&agg_in);
    let out1 = out.index_axis(Axis(1), 0).to_owned();
    let mut target = ms[0].clone();
    for m in &ms[1..] {
        target = target + m;
    }
    let loss = mse_generic(&target, &out1);

    let scale = F::from_f64(2.0 / batch as f64).unwrap();
    let dout = (&out1 - &target).mapv(|d| d * scale).insert_axis(Axis(1));
    let (dagg_in, agg_grads) = agg.backward(&agg_tape, &dout);

    let mut enc_grads = Vec::with_capacity(n);
    for i in 0..n {
        let dc = dagg_in.slice(s![.., i * width..(i + 1) * width]).to_owned();
        let (_, g) = encs[i].backward(&tapes[i], &dc);
        enc_grads.push(g);
    }
    (loss, enc_grads, agg_grads)
}

/// Which composite objective a fused gradient step serves.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ObjectiveMode<F> {
    /// `E - sum_i (L_i + L^_i)`: accuracy term minus full attacker pressure.
    Pretrain,
    /// `lambda * E + sum_i [hinge(gamma - L_i) + hinge(gamma - L^_i)]`.
    Final { gamma: F, lambda: F },
}

pub(crate) struct ObjectiveGrads<F> {
    pub objective: F,
    pub agg_mse: F,
    /// (no-pk loss, pk loss) per client against the frozen attackers.
    pub attacker_mse: Vec<(F, F)>,
    pub enc_grads: Vec<Net<F>>,
    pub agg_grads: Net<F>,
}

/// Fused forward/backward of the composite objectives w.r.t. the encryptors
/// and the aggregator, with the attackers held fixed. Each encryptor runs a
/// single taped forward whose ciphertext feeds the aggregation route and both
/// attacker routes; the input gradients of all routes are summed before the
/// encryptor backward pass.
pub(crate) fn objective_grads<F: Scalar>(
    encs: &[Net<F>],
    agg: &Net<F>,
    atk_nopk: &[Net<F>],
    atk_pk: &[Net<F>],
    ms: &[Array1<F>],
    sk_as: &[Array1<F>],
    sk_bs: &[Array1<F>],
    pks: &[Array1<F>],
    mode: ObjectiveMode<F>,
) -> ObjectiveGrads<F> {
    let n = encs.len();
    let batch = ms[0].len();
    let width = encs[0].spec.out_width;
    let scale = F::from_f64(2.0 / batch as f64).unwrap();

    // Client-side taped forwards.
    let mut tapes = Vec::with_capacity(n);
    let mut ciphertexts = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = Array2::zeros((batch, 3));
        x.slice_mut(s![.., 0]).assign(&ms[i]);
        x.slice_mut(s![.., 1]).assign(&sk_as[i]);
        x.slice_mut(s![.., 2]).assign(&sk_bs[i]);
        let (c, tape) = encs[i].forward_tape(&x);
        ciphertexts.push(c);
        tapes.push(tape);
    }

    // Aggregation route.
    let mut agg_in = Array2::zeros((batch, n * (width + 1)));
    for i in 0..n {
        agg_in.slice_mut(s![.., i * width..(i + 1) * width]).assign(&ciphertexts[i]);
        agg_in.slice_mut(s![.., n * width + i]).assign(&pks[i]);
    }
    let (out, agg_tape) = agg.forward_tape(&agg_in);
    let out1 = out.index_axis(Axis(1), 0).to_owned();
    let mut target = ms[0].clone();
    for m in &ms[1..] {
        target = target + m;
    }
    let agg_mse = mse_generic(&target, &out1);
    let dout = (&out1 - &target).mapv(|d| d * scale).insert_axis(Axis(1));
    let (dagg_in, mut agg_grads) = agg.backward(&agg_tape, &dout);

    let (agg_weight, atk_weight_of): (F, Box<dyn Fn(F) -> F>) = match mode {
        ObjectiveMode::Pretrain => (F::one(), Box::new(|_| -F::one())),
        ObjectiveMode::Final { gamma, lambda } => (
            lambda,
            Box::new(move |loss| if loss < gamma { -F::one() } else { F::zero() }),
        ),
    };

    let mut attacker_mse = Vec::with_capacity(n);
    let mut enc_grads = Vec::with_capacity(n);
    let mut objective = agg_weight * agg_mse;

    for i in 0..n {
        let c = &ciphertexts[i];
        let mut dc_total = dagg_in
            .slice(s![.., i * width..(i + 1) * width])
            .mapv(|v| v * agg_weight);

        // Ciphertext-only attacker route.
        let (guess, t) = atk_nopk[i].forward_tape(c);
        let g1 = guess.index_axis(Axis(1), 0).to_owned();
        let loss_nopk = mse_generic(&ms[i], &g1);
        let w = atk_weight_of(loss_nopk);
        if w != F::zero() {
            let dguess = (&g1 - &ms[i]).mapv(|d| d * scale * w).insert_axis(Axis(1));
            let (dc, _) = atk_nopk[i].backward(&t, &dguess);
            dc_total += &dc;
        }

        // Public-key attacker route.
        let mut xi = Array2::zeros((batch, width + 1));
        xi.slice_mut(s![.., ..width]).assign(c);
        xi.slice_mut(s![.., width]).assign(&pks[i]);
        let (guess, t) = atk_pk[i].forward_tape(&xi);
        let g2 = guess.index_axis(Axis(1), 0).to_owned();
        let loss_pk = mse_generic(&ms[i], &g2);
        let w = atk_weight_of(loss_pk);
        if w != F::zero() {
            let dguess = (&g2 - &ms[i]).mapv(|d| d * scale * w).insert_axis(Axis(1));
            let (dxi, _) = atk_pk[i].backward(&t, &dguess);
            dc_total += &dxi.slice(s![.., ..width]);
        }

        match mode {
            ObjectiveMode::Pretrain => {
                objective = objective - loss_nopk - loss_pk;
            }
            ObjectiveMode::Final { gamma, .. } => {
                objective = objective + (gamma - loss_nopk).max(F::zero());
                objective = objective + (gamma - loss_pk).max(F::zero());
            }
        }
        attacker_mse.push((loss_nopk, loss_pk));

        let (_, g) = encs[i].backward(&tapes[i], &dc_total);
        enc_grads.push(g);
    }
    agg_grads.scale(agg_weight);

    ObjectiveGrads { objective, agg_mse, attacker_mse, enc_grads, agg_grads }
}

/// Loss and attacker-parameter gradients with the encryptor frozen (the
/// attacker's own optimization step).
pub(crate) fn attacker_update_grads<F: Scalar>(
    enc: &Net<F>,
    atk: &Net<F>,
    m: &Array1<F>,
    sk_a: &Array1<F>,
    sk_b: &Array1<F>,
    pk: Option<&Array1<F>>,
) -> (F, Net<F>) {
    let batch = m.len();
    let mut x = Array2::zeros((batch, 3));
    x.slice_mut(s![.., 0]).assign(m);
    x.slice_mut(s![.., 1]).assign(sk_a);
    x.slice_mut(s![.., 2]).assign(sk_b);
    let c = enc.forward(&x);
    let atk_in = match pk {
        Some(pk) => {
            let width = c.ncols();
            let mut xi = Array2::zeros((batch, width + 1));
            xi.slice_mut(s![.., ..width]).assign(&c);
            xi.slice_mut(s![.., width]).assign(pk);
            xi
        }
        None => c,
    };
    let (guess, tape) = atk.forward_tape(&atk_in);
    let g1 = guess.index_axis(Axis(1), 0).to_owned();
    let loss = mse_generic(m, &g1);
    let scale = F::from_f64(2.0 / batch as f64).unwrap();
    let dguess = (&g1 - m).mapv(|d| d * scale).insert_axis(Axis(1));
    let (_, grads) = atk.backward(&tape, &dguess);
    (loss, grads)
}

/// Aggregation loss and aggregator-only gradients with every encryptor frozen
/// (the aggregation alignment stage and the update phase freeze paths).
pub(crate) fn agg_only_grads<F: Scalar>(
    encs: &[Net<F>],
    agg: &Net<F>,
    ms: &[Array1<F>],
    sk_as: &[Array1<F>],
    sk_bs: &[Array1<F>],
    pks: &[Array1<F>],
) -> (F, Net<F>) {
    let n = encs.len();
    let batch = ms[0].len();
    let width = encs[0].spec.out_width;
    let mut agg_in = Array2::zeros((batch, n * (width + 1)));
    for i in 0..n {
        let mut x = Array2::zeros((batch, 3));
        x.slice_mut(s![.., 0]).assign(&ms[i]);
        x.slice_mut(s![.., 1]).assign(&sk_as[i]);
        x.slice_mut(s![.., 2]).assign(&sk_bs[i]);
        let c = encs[i].forward(&x);
        agg_in.slice_mut(s![.., i * width..(i + 1) * width]).assign(&c);
        agg_in.slice_mut(s![.., n * width + i]).assign(&pks[i]);
    }
    let (out, agg_tape) = agg.forward_tape(&agg_in);
    let out1 = out.index_axis(Axis(1), 0).to_owned();
    let mut target = ms[0].clone();
    for m in &ms[1..] {
        target = target + m;
    }
    let loss = mse_generic(&target, &out1);
    let scale = F::from_f64(2.0 / batch as f64).unwrap();
    let dout = (&out1 - &target).mapv(|d| d * scale).insert_axis(Axis(1));
    let (_, agg_grads) = agg.backward(&agg_tape, &dout);
    (loss, agg_grads)
}
