//! Gradient-leakage reconstruction: given a model's gradients for one private
//! example, optimize dummy inputs and labels so their gradients match, then
//! compare the reconstruction with the truth. The variant over encrypted
//! gradients first recovers the gradient vector with the crack models and
//! runs the same matcher on each recovery.
//!
//! The probe classifier is a two-layer tanh network with squared-error loss,
//! small enough that the gradient-matching objective's derivatives w.r.t. the
//! dummy data are written in closed form (verified against central
//! differences in the tests).

use crate::ahe::{self, PlaintextBatch};
use crate::config::{AheConfig, DlgConfig};
use crate::error::{Error, Result};
use crate::nn::Net;
use crate::rng::{self};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Two-layer probe classifier `F(x) = W2 tanh(W1 x + b1) + b2` with loss
/// `l = 0.5 * ||F(x) - y||^2`.
#[derive(Debug, Clone)]
pub struct ProbeNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradient of the probe loss w.r.t. every probe parameter.
#[derive(Debug, Clone)]
pub struct ProbeGrads {
    pub g_w1: Array2<f64>,
    pub g_b1: Array1<f64>,
    pub g_w2: Array2<f64>,
    pub g_b2: Array1<f64>,
}

impl ProbeGrads {
    pub fn flatten(&self) -> Array1<f64> {
        let mut out =
            Vec::with_capacity(self.g_w1.len() + self.g_b1.len() + self.g_w2.len() + self.g_b2.len());
        out.extend(self.g_w1.iter().copied());
        out.extend(self.g_b1.iter().copied());
        out.extend(self.g_w2.iter().copied());
        out.extend(self.g_b2.iter().copied());
        Array1::from_vec(out)
    }

    pub fn unflatten_like(probe: &ProbeNet, flat: &Array1<f64>) -> Result<Self> {
        let (n1, n1b, n2, n2b) =
            (probe.w1.len(), probe.b1.len(), probe.w2.len(), probe.b2.len());
        if flat.len() != n1 + n1b + n2 + n2b {
            return Err(Error::invalid(format!(
                "gradient vector has {} entries, probe expects {}",
                flat.len(),
                n1 + n1b + n2 + n2b
            )));
        }
        let v = flat.as_slice().unwrap();
        let g_w1 = Array2::from_shape_vec(probe.w1.raw_dim(), v[..n1].to_vec()).unwrap();
        let g_b1 = Array1::from_vec(v[n1..n1 + n1b].to_vec());
        let g_w2 =
            Array2::from_shape_vec(probe.w2.raw_dim(), v[n1 + n1b..n1 + n1b + n2].to_vec())
                .unwrap();
        let g_b2 = Array1::from_vec(v[n1 + n1b + n2..].to_vec());
        Ok(ProbeGrads { g_w1, g_b1, g_w2, g_b2 })
    }
}

impl ProbeNet {
    pub fn new(input: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut r = rng::derive(seed, &["probe-init"]);
        let lim1 = (6.0 / (input + hidden) as f64).sqrt();
        let lim2 = (6.0 / (hidden + classes) as f64).sqrt();
        ProbeNet {
            w1: Array2::from_shape_fn((hidden, input), |_| r.random_range(-lim1..lim1)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_fn((classes, hidden), |_| r.random_range(-lim2..lim2)),
            b2: Array1::zeros(classes),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let h = (self.w1.dot(x) + &self.b1).mapv(f64::tanh);
        self.w2.dot(&h) + &self.b2
    }

    /// Loss gradients for one example; this is what a client would transmit.
    pub fn grads(&self, x: &Array1<f64>, y: &Array1<f64>) -> ProbeGrads {
        let h = (self.w1.dot(x) + &self.b1).mapv(f64::tanh);
        let delta2 = self.w2.dot(&h) + &self.b2 - y;
        let cap_h = h.mapv(|v| 1.0 - v * v);
        let delta1 = &self.w2.t().dot(&delta2) * &cap_h;
        ProbeGrads {
            g_w1: outer(&delta1, x),
            g_b1: delta1,
            g_w2: outer(&delta2, &h),
            g_b2: delta2,
        }
    }

    /// Gradient-matching objective `D = ||grads(x', y') - target||^2` with its
    /// closed-form derivatives w.r.t. the dummy input and label.
    pub fn matching_grads(
        &self,
        x: &Array1<f64>,
        y: &Array1<f64>,
        target: &ProbeGrads,
    ) -> (f64, Array1<f64>, Array1<f64>) {
        let h = (self.w1.dot(x) + &self.b1).mapv(f64::tanh);
        let delta2 = self.w2.dot(&h) + &self.b2 - y;
        let cap_h = h.mapv(|v| 1.0 - v * v);
        let w2t_d2 = self.w2.t().dot(&delta2);
        let delta1 = &w2t_d2 * &cap_h;

        let r2 = outer(&delta2, &h) - &target.g_w2;
        let r2b = &delta2 - &target.g_b2;
        let r1 = outer(&delta1, x) - &target.g_w1;
        let r1b = &delta1 - &target.g_b1;

        let objective = r2.iter().map(|v| v * v).sum::<f64>()
            + r2b.iter().map(|v| v * v).sum::<f64>()
            + r1.iter().map(|v| v * v).sum::<f64>()
            + r1b.iter().map(|v| v * v).sum::<f64>();

        // q accumulates every path through delta1's residuals.
        let q = r1.dot(x) + &r1b;
        let r2h = r2.dot(&h) + &r2b;

        let grad_y = (&r2h + &self.w2.dot(&(&cap_h * &q))).mapv(|v| -2.0 * v);

        let inner = &(&self.w2.t().dot(&r2h) + &r2.t().dot(&delta2)
            + &self.w2.t().dot(&self.w2.dot(&(&cap_h * &q))))
            * &cap_h
            - &(&w2t_d2 * &h * &cap_h * &q).mapv(|v| 2.0 * v);
        let grad_x = self.w1.t().dot(&inner).mapv(|v| 2.0 * v) + r1.t().dot(&delta1).mapv(|v| 2.0 * v);

        (objective, grad_x, grad_y)
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, m) = (a.len(), b.len());
    Array2::from_shape_fn((n, m), |(i, j)| a[i] * b[j])
}

#[derive(Debug, Clone)]
pub struct DlgOutcome {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    /// Gradient-matching distance per iteration.
    pub curve: Vec<f64>,
}

/// Plain-gradient-descent dummy-data matching against target gradients.
pub fn dlg(probe: &ProbeNet, target: &ProbeGrads, cfg: &DlgConfig) -> Result<DlgOutcome> {
    cfg.validate()?;
    if target.g_w1.dim() != probe.w1.dim() || target.g_w2.dim() != probe.w2.dim() {
        return Err(Error::invalid("target gradient shapes do not match the probe model"));
    }
    let input = probe.w1.ncols();
    let classes = probe.w2.nrows();
    let mut r = rng::derive(cfg.seed, &["dlg-init"]);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut x = Array1::from_shape_fn(input, |_| normal.sample(&mut r));
    let mut y = Array1::from_shape_fn(classes, |_| normal.sample(&mut r));

    let mut curve = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let (d, gx, gy) = probe.matching_grads(&x, &y, target);
        if !d.is_finite() {
            return Err(Error::StageFailure("dlg objective diverged".into()));
        }
        curve.push(d);
        x.scaled_add(-cfg.eta, &gx);
        y.scaled_add(-cfg.eta, &gy);
    }
    Ok(DlgOutcome { x, y, curve })
}

/// How intercepted gradients reach the adversary: either in the clear or
/// recovered from ciphertexts by the two crack models.
pub trait GradientChannel {
    /// Returns the two recovered gradient vectors (crack1 path, crack2 path).
    fn intercept(&mut self, grads: &Array1<f64>) -> Result<(Array1<f64>, Array1<f64>)>;
}

/// Control channel: gradients pass through unchanged on both paths.
pub struct IdentityChannel;

impl GradientChannel for IdentityChannel {
    fn intercept(&mut self, grads: &Array1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        Ok((grads.clone(), grads.clone()))
    }
}

/// The scheme's channel: per-scalar encryption with fresh keys, then the
/// pk-aware crack model and the ciphertext-only crack model each reconstruct
/// the full gradient vector.
pub struct HansChannel<'a> {
    pub enc: &'a Net<f32>,
    pub crack1: &'a Net<f32>,
    pub crack2: &'a Net<f32>,
    pub cfg: AheConfig,
    pub seed: u64,
}

impl GradientChannel for HansChannel<'_> {
    fn intercept(&mut self, grads: &Array1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let mut r = rng::derive(self.seed, &["hans-channel"]);
        let m = PlaintextBatch::new(grads.mapv(|v| v as f32), self.cfg.psi);
        let (keys, pk) = ahe::keygen(m.len(), &self.cfg, &mut r)?;
        let c = ahe::encrypt(self.enc, &m, &keys, &self.cfg)?;
        let rec1 = ahe::attack_forward(self.crack1, &c, Some(&pk))?;
        let rec2 = ahe::attack_forward(self.crack2, &c, None)?;
        Ok((rec1.mapv(|v| v as f64), rec2.mapv(|v| v as f64)))
    }
}

#[derive(Debug, Clone)]
pub struct DlgPathResult {
    pub reconstruction_mse: f64,
    pub label_match: bool,
    pub outcome: DlgOutcome,
}

#[derive(Debug, Clone)]
pub struct DlgHansOutcome {
    pub success: bool,
    pub path1: DlgPathResult,
    pub path2: DlgPathResult,
}

fn run_path(
    probe: &ProbeNet,
    recovered: &Array1<f64>,
    x_true: &Array1<f64>,
    y_true: &Array1<f64>,
    cfg: &DlgConfig,
) -> Result<DlgPathResult> {
    let target = ProbeGrads::unflatten_like(probe, recovered)?;
    let outcome = dlg(probe, &target, cfg)?;
    let n = x_true.len() as f64;
    let reconstruction_mse =
        (&outcome.x - x_true).iter().map(|v| v * v).sum::<f64>() / n;
    let label_match = argmax(&outcome.y) == argmax(y_true);
    Ok(DlgPathResult { reconstruction_mse, label_match, outcome })
}

fn argmax(a: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..a.len() {
        if a[i] > a[best] {
            best = i;
        }
    }
    best
}

/// Run the leakage attack over a gradient channel: compute the true gradients
/// of `(x, y)`, let the channel deliver both recoveries, match dummies
/// against each, and call the attack successful if either path reconstructs
/// the input within the threshold with the right label.
pub fn dlg_hans(
    probe: &ProbeNet,
    x: &Array1<f64>,
    y: &Array1<f64>,
    channel: &mut dyn GradientChannel,
    cfg: &DlgConfig,
) -> Result<DlgHansOutcome> {
    let grads = probe.grads(x, y).flatten();
    let (rec1, rec2) = channel.intercept(&grads)?;
    let path1 = run_path(probe, &rec1, x, y, cfg)?;
    let path2 = run_path(probe, &rec2, x, y, cfg)?;
    let hit = |p: &DlgPathResult| p.reconstruction_mse <= cfg.success_mse && p.label_match;
    Ok(DlgHansOutcome { success: hit(&path1) || hit(&path2), path1, path2 })
}
