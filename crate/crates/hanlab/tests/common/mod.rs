//! Shared desk-scale configuration for the integration suites. Every
//! tolerance asserted by the acceptance tests is pinned here or in the
//! acceptance file itself.

use hanlab::config::{Config, PlateauConfig, SchedulerConfig, SecurityGate};

/// The desk-scale pipeline configuration: small enough to train on a couple
/// of CPU cores in minutes, large enough to hit the fidelity targets.
pub fn desk_config() -> Config {
    let mut cfg = Config::default();

    cfg.ahe.psi = 1.0;
    cfg.ahe.ciphertext_len = 28;
    cfg.ahe.num_clients = 3;
    cfg.ahe.key_low = -1.0;
    cfg.ahe.key_high = 1.0;
    cfg.ahe.hidden_dim = 32;
    cfg.ahe.conv_channels = 4;
    cfg.ahe.num_res_blocks = 2;
    cfg.ahe.seed = 4242;

    cfg.loss.gamma = 0.015;
    cfg.loss.lambda = 1.0;

    cfg.train.lr = 2e-3;
    cfg.train.enc_lr_mult = 0.1;
    cfg.train.attacker_lr_mult = 2.0;
    cfg.train.stage2_enc_lr_mult = 3.0;
    cfg.train.weight_decay = 1e-6;
    cfg.train.scheduler = SchedulerConfig { t_max: 0, eta_min: 0.0 };
    cfg.train.stage1_steps = 3000;
    cfg.train.stage2_steps = 800;
    cfg.train.stage4_steps = 6000;
    cfg.train.batch_size = 256;
    cfg.train.attacker_steps_per_enc_step = 2;
    // The pre-update system is openly decodable by a converged ciphertext
    // attacker; the gate level reflects that (privacy comes from the update).
    cfg.train.security_gate = SecurityGate { min_attacker_l1: 0.001, max_agg_l1: 0.006 };
    cfg.train.gate_retries = 2;
    cfg.train.plateau = PlateauConfig { window: 200, rel_tol: 1e-3, max_steps: 1500 };
    cfg.train.eval_batch = 20_000;
    cfg.train.seed = 4242;

    cfg.ppu.sigma = 0.15;
    cfg.ppu.public_size = 1500;
    cfg.ppu.private_size = 768;
    cfg.ppu.max_iterations = 5;
    cfg.ppu.rounds_per_client = 8;
    cfg.ppu.lr = 1e-3;
    cfg.ppu.agg_lr_mult = 1.0;
    cfg.ppu.epochs_per_round = 2;
    cfg.ppu.batch_size = 96;

    cfg.fl.dataset = hanlab::config::DatasetId::Digits;
    cfg.fl.subset_size = 900;
    cfg.fl.rounds = 6;
    cfg.fl.local_epochs = 1;
    cfg.fl.num_clients = 3;
    cfg.fl.eval_size = 299;
    cfg.fl.local_lr = 0.5;
    cfg.fl.local_batch = 32;
    cfg.fl.seed = 4242;

    cfg.dlg.iterations = 3000;
    cfg.dlg.eta = 0.01;
    cfg.dlg.init_std = 1.0;
    cfg.dlg.success_mse = 0.1;
    cfg.dlg.seed = 4242;

    cfg.validate().expect("desk config is valid");
    cfg
}
