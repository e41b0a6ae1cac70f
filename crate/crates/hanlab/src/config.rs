//! Configuration types. Every knob is serde-capable so a single TOML document
//! mirrors the full run configuration; CLI flags override file values.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Core scheme parameters: plaintext bound, ciphertext length, client count,
/// key sampling range and network sizing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AheConfig {
    /// Plaintext bound: every scalar to encrypt lies in `[-psi, psi]`.
    pub psi: f32,
    /// Length of a single-scalar ciphertext vector.
    pub ciphertext_len: usize,
    /// Number of clients; the aggregator arity is baked in at build time.
    pub num_clients: usize,
    pub key_low: f32,
    pub key_high: f32,
    pub hidden_dim: usize,
    pub conv_channels: usize,
    pub num_res_blocks: usize,
    pub seed: u64,
}

impl Default for AheConfig {
    fn default() -> Self {
        AheConfig {
            psi: 1.0,
            ciphertext_len: 28,
            num_clients: 3,
            key_low: -1.0,
            key_high: 1.0,
            hidden_dim: 32,
            conv_channels: 4,
            num_res_blocks: 2,
            seed: 0,
        }
    }
}

impl AheConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi > 0.0) {
            return Err(Error::Config(format!("psi must be > 0, got {}", self.psi)));
        }
        if self.ciphertext_len < 2 {
            return Err(Error::Config(format!(
                "ciphertext_len must be >= 2, got {}",
                self.ciphertext_len
            )));
        }
        if self.num_clients < 2 {
            return Err(Error::Config(format!(
                "num_clients must be >= 2, got {}",
                self.num_clients
            )));
        }
        if !(self.key_low < self.key_high) {
            return Err(Error::Config(format!(
                "key range is empty: [{}, {}]",
                self.key_low, self.key_high
            )));
        }
        if self.hidden_dim == 0 || self.num_res_blocks == 0 || self.conv_channels == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Loss coefficients: `gamma` is the security hinge level on the MSE scale,
/// `lambda` weighs aggregation accuracy in the combined objective.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f32,
    pub lambda: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 0.015, lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Cosine annealing period in optimizer steps.
    pub t_max: usize,
    pub eta_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { t_max: 10_000, eta_min: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SecurityGate {
    pub min_attacker_l1: f64,
    pub max_agg_l1: f64,
}

impl Default for SecurityGate {
    fn default() -> Self {
        SecurityGate { min_attacker_l1: 0.05, max_agg_l1: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PlateauConfig {
    /// Window length in steps over which relative improvement is measured.
    pub window: usize,
    /// Convergence fires when relative improvement over a window drops below this.
    pub rel_tol: f64,
    /// Hard step budget regardless of plateau detection.
    pub max_steps: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { window: 200, rel_tol: 1e-3, max_steps: 20_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Encryptor learning rate = `lr * enc_lr_mult`; keeping the encryptors
    /// slower than the attackers is what keeps the alternating stages stable.
    pub enc_lr_mult: f64,
    /// Attacker learning rate = `lr * attacker_lr_mult`.
    pub attacker_lr_mult: f64,
    /// Encryptor rate multiplier for the security-enhancement stage, where
    /// the encryptors must outpace the tracking attackers to clear the hinge.
    pub stage2_enc_lr_mult: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerConfig,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage4_steps: usize,
    pub batch_size: usize,
    /// Attacker optimizer steps per encryptor step in the alternating stages.
    pub attacker_steps_per_enc_step: usize,
    pub security_gate: SecurityGate,
    pub gate_retries: usize,
    pub plateau: PlateauConfig,
    /// Held-out batch size used for stage-end evaluation statistics.
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            enc_lr_mult: 1.0,
            attacker_lr_mult: 1.0,
            stage2_enc_lr_mult: 1.0,
            weight_decay: 1e-6,
            scheduler: SchedulerConfig::default(),
            stage1_steps: 4000,
            stage2_steps: 4000,
            stage4_steps: 1000,
            batch_size: 256,
            attacker_steps_per_enc_step: 2,
            security_gate: SecurityGate::default(),
            gate_retries: 3,
            plateau: PlateauConfig::default(),
            eval_batch: 20_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, v) in [
            ("stage1_steps", self.stage1_steps),
            ("stage2_steps", self.stage2_steps),
            ("stage4_steps", self.stage4_steps),
            ("batch_size", self.batch_size),
            ("attacker_steps_per_enc_step", self.attacker_steps_per_enc_step),
            ("eval_batch", self.eval_batch),
            ("plateau.window", self.plateau.window),
            ("plateau.max_steps", self.plateau.max_steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PpuConfig {
    /// Std-dev of the Gaussian noise added to every published plaintext.
    pub sigma: f32,
    pub public_size: usize,
    pub private_size: usize,
    /// CPPU outer rounds.
    pub max_iterations: usize,
    /// IPPU rounds per client.
    pub rounds_per_client: usize,
    pub lr: f64,
    /// Aggregator learning rate = `lr * agg_lr_mult` in the collaborative
    /// phase; keeping the shared aggregator gentler than the encryptors
    /// limits how much published noise it memorizes.
    pub agg_lr_mult: f64,
    /// Optimizer passes over each sampled training set.
    pub epochs_per_round: usize,
    pub batch_size: usize,
}

impl Default for PpuConfig {
    fn default() -> Self {
        PpuConfig {
            sigma: 0.05,
            public_size: 128,
            private_size: 512,
            max_iterations: 5,
            rounds_per_client: 10,
            lr: 1e-3,
            agg_lr_mult: 1.0,
            epochs_per_round: 4,
            batch_size: 64,
        }
    }
}

impl PpuConfig {
    pub fn validate(&self) -> Result<()> {
        // Published noise must exceed the G(0, 1e-2) reconstruction threshold.
        if !(self.sigma > 0.01) {
            return Err(Error::invalid(format!(
                "ppu sigma must be > 0.01, got {}",
                self.sigma
            )));
        }
        for (name, v) in [
            ("public_size", self.public_size),
            ("private_size", self.private_size),
            ("max_iterations", self.max_iterations),
            ("rounds_per_client", self.rounds_per_client),
            ("epochs_per_round", self.epochs_per_round),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("ppu {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Mnist,
    FashionMnist,
    Cifar10,
    /// Bundled 8x8 handwritten-digits fixture; offline stand-in for MNIST.
    Digits,
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion_mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Digits => "digits",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskArch {
    /// Two 5x5 conv layers with 2x2 max pooling, then a linear classifier.
    SmallCnn,
    /// Conv stem plus three residual stages and a linear classifier.
    ResNet8,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FlConfig {
    pub dataset: DatasetId,
    /// Training images drawn from the dataset (total across clients).
    pub subset_size: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub num_clients: usize,
    pub arch: TaskArch,
    /// Test images used for accuracy evaluation.
    pub eval_size: usize,
    pub local_lr: f64,
    pub local_batch: usize,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            dataset: DatasetId::Mnist,
            subset_size: 2000,
            rounds: 5,
            local_epochs: 1,
            num_clients: 3,
            arch: TaskArch::SmallCnn,
            eval_size: 2000,
            local_lr: 0.1,
            local_batch: 32,
            seed: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("fl rounds must be >= 1".into()));
        }
        if self.num_clients == 0 {
            return Err(Error::Config("fl num_clients must be >= 1".into()));
        }
        if self.local_epochs == 0 || self.local_batch == 0 || self.subset_size == 0 {
            return Err(Error::Config("fl sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DlgConfig {
    pub iterations: usize,
    /// Step size for the dummy-data updates.
    pub eta: f64,
    /// Std-dev of the normal init for dummy inputs and labels.
    pub init_std: f64,
    /// Reconstruction MSE at or below this counts as a successful attack.
    pub success_mse: f64,
    pub seed: u64,
}

impl Default for DlgConfig {
    fn default() -> Self {
        DlgConfig { iterations: 3000, eta: 0.01, init_std: 1.0, success_mse: 0.1, seed: 0 }
    }
}

impl DlgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("dlg iterations must be >= 1"));
        }
        if !(self.eta > 0.0) {
            return Err(Error::invalid(format!("dlg eta must be > 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Top-level document mirrored by the TOML config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Config {
    pub ahe: AheConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub ppu: PpuConfig,
    pub fl: FlConfig,
    pub dlg: DlgConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.ahe.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.ppu.validate()?;
        self.fl.validate()?;
        self.dlg.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("toml parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Short hex digest of the serialized config, embedded in reports.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let out = hasher.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
