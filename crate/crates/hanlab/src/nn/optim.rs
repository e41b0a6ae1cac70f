use super::{Net, Scalar};

/// AdamW with decoupled weight decay; one instance per model.
pub struct AdamW<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(net: &Net<F>, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = net.visit_params().iter().map(|(_, s)| s.len()).collect();
        AdamW {
            m: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, net: &mut Net<F>, grads: &Net<F>, lr: f64) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1).unwrap();
        let b2 = F::from_f64(self.beta2).unwrap();
        let one = F::one();
        let eps = F::from_f64(self.eps).unwrap();
        let lr_f = F::from_f64(lr).unwrap();
        let wd = F::from_f64(self.weight_decay * lr).unwrap();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32)).unwrap();
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32)).unwrap();

        let gslices = grads.visit_params();
        for (slot, ((_, params), (_, gs))) in
            net.visit_params_mut().into_iter().zip(gslices).enumerate()
        {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..params.len() {
                let g = gs[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] = params[i] - lr_f * m_hat / (v_hat.sqrt() + eps) - wd * params[i];
            }
        }
    }
}

/// Cosine annealing from `base_lr` down to `eta_min` over `t_max` steps,
/// holding `eta_min` afterwards.
#[derive(Debug, Clone)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub eta_min: f64,
    pub t_max: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, eta_min: f64, t_max: usize) -> Self {
        CosineSchedule { base_lr, eta_min, t_max: t_max.max(1) }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.t_max {
            return self.eta_min;
        }
        let progress = step as f64 / self.t_max as f64;
        self.eta_min
            + 0.5 * (self.base_lr - self.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
