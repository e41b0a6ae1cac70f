//! End-to-end CLI smoke tests on a throwaway configuration: every subcommand
//! named in the interface is exercised against real files, checking outputs
//! and exit codes rather than internals.

use std::path::Path;
use std::process::Command;

fn hanlab_bin() -> &'static str {
    env!("CARGO_BIN_EXE_hanlab")
}

fn tiny_toml(seed: u64) -> String {
    format!(
        r#"
[ahe]
hidden_dim = 10
ciphertext_len = 6
conv_channels = 2
num_res_blocks = 1
seed = {seed}

[train]
lr = 3e-3
enc_lr_mult = 0.1
attacker_lr_mult = 2.0
stage2_enc_lr_mult = 3.0
stage1_steps = 60
stage2_steps = 30
stage4_steps = 20
batch_size = 32
eval_batch = 400
seed = {seed}

[train.security_gate]
min_attacker_l1 = 0.0
max_agg_l1 = 1e9

[train.plateau]
window = 10
rel_tol = 1e-3
max_steps = 30

[ppu]
sigma = 0.05
public_size = 12
private_size = 24
max_iterations = 1
rounds_per_client = 1
lr = 1e-3
epochs_per_round = 1
batch_size = 12

[fl]
dataset = "digits"
subset_size = 120
rounds = 1
eval_size = 60
local_lr = 0.5
local_batch = 32
seed = {seed}

[dlg]
iterations = 40
eta = 0.01
seed = {seed}
"#
    )
}

fn run(args: &[&str], dir: &Path) -> (i32, String, String) {
    let output = Command::new(hanlab_bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    (
        output.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&output.stdout).to_string(),
        String::from_utf8_lossy(&output.stderr).to_string(),
    )
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, tiny_toml(11)).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    // Unknown subcommand: usage error, exit 1, help text on stderr.
    let (code, _, err) = run(&["transmogrify"], dir.path());
    assert_eq!(code, 1, "unknown subcommand must exit 1: {err}");

    // Train writes stage checkpoints and a summary.
    let (code, out, err) = run(&["--config", cfg, "--out", "run", "train"], dir.path());
    assert_eq!(code, 0, "train failed: {err}");
    assert!(out.contains("final aggregation"), "{out}");
    for stage in 1..=5 {
        assert!(dir.path().join(format!("run/stage{stage}.ckpt")).exists());
    }
    assert!(dir.path().join("run/stages.jsonl").exists());
    assert!(dir.path().join("run/curves.jsonl").exists());

    // Keygen summary (no checkpoint needed).
    let (code, out, _) = run(&["--config", cfg, "--out", "run", "keygen", "--batch", "64"], dir.path());
    assert_eq!(code, 0);
    assert!(out.contains("additive identity holds: true"), "{out}");

    // Encrypt and aggregate against the trained checkpoint.
    let ckpt = "run/stage5.ckpt";
    let (code, out, _) = run(
        &["--config", cfg, "--out", "run", "--checkpoint", ckpt, "encrypt", "--batch", "50"],
        dir.path(),
    );
    assert_eq!(code, 0);
    assert!(out.contains("encrypted 50 scalars"), "{out}");
    let (code, out, _) = run(
        &["--config", cfg, "--out", "run", "--checkpoint", ckpt, "aggregate", "--batch", "200"],
        dir.path(),
    );
    assert_eq!(code, 0);
    assert!(out.contains("aggregation fidelity"), "{out}");

    // Collaborative then independent update.
    let (code, _, err) = run(
        &["--config", cfg, "--out", "run", "--checkpoint", ckpt, "ppu", "cppu"],
        dir.path(),
    );
    assert_eq!(code, 0, "cppu failed: {err}");
    for i in 0..3 {
        assert!(dir.path().join(format!("run/public-client{i}.jsonl")).exists());
    }
    let (code, _, err) = run(
        &["--config", cfg, "--out", "run", "--checkpoint", "run/cppu.ckpt", "ppu", "ippu"],
        dir.path(),
    );
    assert_eq!(code, 0, "ippu failed: {err}");
    assert!(dir.path().join("run/ippu.ckpt").exists());

    // Assessment over the updated bundle.
    let (code, out, err) = run(
        &["--config", cfg, "--out", "run", "--checkpoint", "run/ippu.ckpt", "assess"],
        dir.path(),
    );
    assert_eq!(code, 0, "assess failed: {err}");
    assert!(out.contains("gate:"), "{out}");

    // Attack suite.
    let (code, out, err) = run(
        &[
            "--config", cfg, "--out", "run", "--checkpoint", "run/ippu.ckpt",
            "attack", "kma", "--original", ckpt,
        ],
        dir.path(),
    );
    assert_eq!(code, 0, "kma failed: {err}");
    assert!(out.contains("crack1_std"), "{out}");
    let (code, out, err) = run(
        &[
            "--config", cfg, "--out", "run", "--checkpoint", "run/ippu.ckpt",
            "attack", "pcaom", "--original", ckpt, "--samples", "200",
        ],
        dir.path(),
    );
    assert_eq!(code, 0, "pcaom failed: {err}");
    assert!(out.contains("pcaom: MAD"), "{out}");
    let (code, out, err) = run(
        &[
            "--config", cfg, "--out", "run", "--checkpoint", "run/ippu.ckpt",
            "attack", "pcapd", "--pubs", "run/public-client1.jsonl", "--samples", "200",
        ],
        dir.path(),
    );
    assert_eq!(code, 0, "pcapd failed: {err}");
    assert!(out.contains("pcapd: MAD"), "{out}");
    let (code, out, err) = run(
        &["--config", cfg, "--out", "run", "attack", "dlg"],
        dir.path(),
    );
    assert_eq!(code, 0, "dlg failed: {err}");
    assert!(out.contains("dlg (plaintext gradients)"), "{out}");
    assert!(dir.path().join("run/dlg.png").exists());
    let (code, out, err) = run(
        &[
            "--config", cfg, "--out", "run", "--checkpoint", "run/ippu.ckpt",
            "attack", "dlg-hans", "--original", ckpt,
        ],
        dir.path(),
    );
    assert_eq!(code, 0, "dlg-hans failed: {err}");
    assert!(out.contains("dlg-hans:"), "{out}");
    assert!(dir.path().join("run/dlg-hans.png").exists());

    // Federated runs.
    let (code, out, err) = run(
        &["--config", cfg, "--out", "run", "fl", "plain"],
        dir.path(),
    );
    assert_eq!(code, 0, "fl plain failed: {err}");
    assert!(out.contains("plain accuracy"), "{out}");
    let (code, out, err) = run(
        &[
            "--config", cfg, "--out", "run", "--checkpoint", "run/ippu.ckpt",
            "fl", "delta", "--budget", "1.0",
        ],
        dir.path(),
    );
    assert_eq!(code, 0, "fl delta failed: {err}");
    assert!(out.contains("delta"), "{out}");

    // Bench with too few trials is a usage error; a proper run emits records.
    let (code, _, err) = run(
        &["--config", cfg, "--out", "run", "bench", "--op", "encrypt", "--batch", "64", "--trials", "3"],
        dir.path(),
    );
    assert_eq!(code, 1, "expected usage error: {err}");
    let (code, out, err) = run(
        &["--config", cfg, "--out", "run", "bench", "--op", "encrypt", "--batch", "64", "--batch", "128"],
        dir.path(),
    );
    assert_eq!(code, 0, "bench failed: {err}");
    assert!(out.contains("encrypt batch 64"), "{out}");

    // Report summarizes everything written so far.
    let (code, out, _) = run(&["--config", cfg, "report", "--dir", "run"], dir.path());
    assert_eq!(code, 0);
    assert!(out.contains("stages.jsonl"), "{out}");
    assert!(out.contains("reference constants"), "{out}");

    // Gate failure path: impossible sigma in the update is invalid-argument
    // (exit 1); an impossible stage-4 gate is a stage failure (exit 2).
    let bad = cfg_path.to_str().unwrap().replace("tiny", "bad");
    std::fs::write(
        dir.path().join("bad.toml"),
        tiny_toml(12).replace("sigma = 0.05", "sigma = 0.001"),
    )
    .unwrap();
    let (code, _, err) = run(
        &["--config", &bad, "--out", "run2", "--checkpoint", ckpt, "ppu", "cppu"],
        dir.path(),
    );
    assert_eq!(code, 1, "invalid sigma should be rejected as usage: {err}");

    std::fs::write(
        dir.path().join("gate.toml"),
        tiny_toml(13)
            .replace("min_attacker_l1 = 0.0", "min_attacker_l1 = 1e9")
            .replace("max_agg_l1 = 1e9", "max_agg_l1 = 0.0"),
    )
    .unwrap();
    let gate_cfg = dir.path().join("gate.toml");
    let (code, _, err) = run(
        &["--config", gate_cfg.to_str().unwrap(), "--out", "run3", "train"],
        dir.path(),
    );
    assert_eq!(code, 2, "impossible gate must exit 2: {err}");
}

#[test]
fn seeded_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, tiny_toml(21)).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    let (code, _, err) = run(&["--config", cfg, "--out", "a", "train"], dir.path());
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = run(&["--config", cfg, "--out", "b", "train"], dir.path());
    assert_eq!(code, 0, "{err}");
    let a = std::fs::read(dir.path().join("a/stage5.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b/stage5.ckpt")).unwrap();
    assert_eq!(a, b, "same seed gives byte-identical checkpoints");

    // --seed overrides the file seed.
    let (code, _, err) =
        run(&["--config", cfg, "--seed", "99", "--out", "c", "train"], dir.path());
    assert_eq!(code, 0, "{err}");
    let c = std::fs::read(dir.path().join("c/stage5.ckpt")).unwrap();
    assert_ne!(a, c, "different seed gives a different checkpoint");
}
