//! Command-line interface: training, the privacy-preserving update, the
//! attack suite, the federated harness, benchmarks and report summaries.
//! Every subcommand is reproducible under `--seed`, and all emitted files are
//! JSON-lines records or versioned checkpoint archives.

use crate::ahe::ModelBundle;
use crate::attacks::{self, EncryptorTraffic};
use crate::bench::{self, BenchOp};
use crate::config::{Config, DatasetId};
use crate::dlg::{self, HansChannel, IdentityChannel, ProbeNet};
use crate::error::{Error, Result};
use crate::fl::{self, data};
use crate::ppu::{self, PublicDataset};
use crate::report::JsonLines;
use crate::rng;
use crate::training;
use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use rand::Rng;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "hanlab", version, about = "Learned aggregatable encryption workbench")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint archive to operate on.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the five-stage training pipeline and checkpoint each stage.
    Train,
    /// Privacy-preserving update phases.
    Ppu {
        #[command(subcommand)]
        phase: PpuPhase,
    },
    /// Freeze the bundle and converge every attacker variant against it.
    Assess,
    /// Adversary suite.
    Attack {
        #[command(subcommand)]
        kind: AttackKind,
    },
    /// Federated-averaging runs.
    Fl {
        #[command(subcommand)]
        mode: FlMode,
    },
    /// Median-of-trials primitive timings.
    Bench {
        #[arg(long)]
        op: String,
        /// Batch sizes; repeatable.
        #[arg(long = "batch", required = true)]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Draw a key batch and report summary statistics.
    Keygen {
        #[arg(long, default_value_t = 1000)]
        batch: usize,
    },
    /// Encrypt a random batch and report ciphertext statistics.
    Encrypt {
        #[arg(long, default_value_t = 1000)]
        batch: usize,
    },
    /// Aggregate random batches through the bundle and report fidelity.
    Aggregate {
        #[arg(long, default_value_t = 1000)]
        batch: usize,
    },
    /// Summarize the JSON-lines reports in an output directory.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PpuPhase {
    /// Collaborative phase: round-robin joint updates with republication.
    Cppu,
    /// Independent phase: per-client updates against the final datasets.
    Ippu {
        /// Directory holding the CPPU public datasets (defaults to --out).
        #[arg(long)]
        pubs: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AttackKind {
    /// Known-model attack: train crack models on the original encryptor.
    Kma {
        /// Checkpoint of the original (public) bundle.
        #[arg(long)]
        original: PathBuf,
    },
    /// Pseudo collusion via the victim partner's original model.
    Pcaom {
        #[arg(long)]
        original: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Pseudo collusion via the victim partner's published dataset.
    Pcapd {
        /// JSON-lines public dataset published by the stand-in client.
        #[arg(long)]
        pubs: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Gradient leakage against plaintext gradients.
    Dlg,
    /// Gradient leakage over crack-recovered encrypted gradients.
    DlgHans {
        #[arg(long)]
        original: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum FlMode {
    Plain {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    Hans {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run both and report the accuracy delta.
    Delta {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Accuracy-loss budget, in accuracy points.
        #[arg(long, default_value_t = 0.02)]
        budget: f64,
    },
}

fn parse_dataset(name: &str) -> Result<DatasetId> {
    match name {
        "mnist" => Ok(DatasetId::Mnist),
        "fashion_mnist" => Ok(DatasetId::FashionMnist),
        "cifar10" => Ok(DatasetId::Cifar10),
        "digits" => Ok(DatasetId::Digits),
        other => Err(Error::invalid(format!("unknown dataset {other}"))),
    }
}

fn load_config(global: &GlobalArgs) -> Result<Config> {
    let mut cfg = match &global.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = global.seed {
        cfg.ahe.seed = seed;
        cfg.train.seed = seed;
        cfg.fl.seed = seed;
        cfg.dlg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_checkpoint(global: &GlobalArgs) -> Result<ModelBundle> {
    let path = global
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::invalid("this command needs --checkpoint <archive>"))?;
    crate::ckpt::load_bundle(path)
}

fn load_pub_datasets(dir: &Path, n: usize) -> Result<Vec<PublicDataset>> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("public-client{i}.jsonl"));
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}; run `ppu cppu` first", path.display()),
                ))
            })?;
            PublicDataset::from_jsonl(&text)
        })
        .collect()
}

/// A deterministic probe image for the leakage attack: one bundled digit
/// upscaled to 28x28.
pub fn probe_image() -> Result<(Array1<f64>, Array1<f64>)> {
    let ds = data::load_dataset(DatasetId::Digits, None, 16, 16)?;
    let src = ds.train.images.row(0);
    let mut img = Array1::zeros(28 * 28);
    for y in 0..28 {
        for x in 0..28 {
            img[y * 28 + x] = src[(y * 8 / 28) * 8 + (x * 8 / 28)] as f64;
        }
    }
    let mut label = Array1::zeros(10);
    label[ds.train.labels[0] as usize] = 1.0;
    Ok((img, label))
}

/// Write a horizontal grid of grayscale images as one PNG.
pub fn save_image_grid(
    path: &Path,
    images: &[(&str, &Array1<f64>)],
    h: usize,
    w: usize,
) -> Result<()> {
    let pad = 2usize;
    let total_w = images.len() * (w + pad) - pad;
    let mut buf = image::GrayImage::new(total_w as u32, h as u32);
    for (k, (_, img)) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = (img[y * w + x].clamp(0.0, 1.0) * 255.0) as u8;
                buf.put_pixel((k * (w + pad) + x) as u32, y as u32, image::Luma([v]));
            }
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    buf.save(path).map_err(|e| Error::internal(format!("png save: {e}")))?;
    Ok(())
}

fn summarize_stats(label: &str, stats: &crate::losses::EvalStats) {
    println!(
        "{label}: mean L1 {:.6}  max {:.6}  var {:.6}",
        stats.mean_l1, stats.max_l1, stats.var
    );
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    std::fs::create_dir_all(out)?;
    let cfg_digest = cfg.digest();

    match cli.command {
        Command::Train => {
            let (bundle, reports) = training::train_hans(&cfg, Some(out))?;
            let mut lines = JsonLines::create(&out.join("stages.jsonl"))?;
            for report in &reports {
                lines.write(&serde_json::json!({
                    "cfg": cfg_digest,
                    "stage": report.stage,
                    "final_stats": report.final_stats,
                    "gate": report.gate,
                    "notes": report.notes,
                }))?;
            }
            let agg = reports.last().unwrap().stat("aggregation").unwrap();
            summarize_stats("final aggregation", agg);
            println!(
                "checkpoints written to {} (stage1..stage5); bundle hash {}",
                out.display(),
                crate::ckpt::hex(&crate::ckpt::bundle_hash(&bundle))[..16].to_string()
            );
        }
        Command::Ppu { phase } => match phase {
            PpuPhase::Cppu => {
                let mut bundle = require_checkpoint(&cli.global)?;
                let outcome = ppu::cppu(&mut bundle, &cfg.ppu, cfg.train.seed)?;
                for (i, d) in outcome.public_datasets.iter().enumerate() {
                    std::fs::write(out.join(format!("public-client{i}.jsonl")), d.to_jsonl()?)?;
                }
                crate::ckpt::save_bundle(&bundle, &out.join("cppu.ckpt"))?;
                let mut eval_rng = rng::derive(cfg.train.seed, &["cli", "cppu-eval"]);
                let stats =
                    training::eval_aggregation(&bundle, cfg.train.eval_batch, &mut eval_rng)?;
                summarize_stats("post-cppu aggregation", &stats);
                println!("wrote {}/cppu.ckpt and per-client public datasets", out.display());
            }
            PpuPhase::Ippu { pubs } => {
                let mut bundle = require_checkpoint(&cli.global)?;
                let dir = pubs.unwrap_or_else(|| out.clone());
                let datasets = load_pub_datasets(&dir, bundle.num_clients())?;
                ppu::ippu(&mut bundle, &datasets, &cfg.ppu, cfg.train.seed)?;
                crate::ckpt::save_bundle(&bundle, &out.join("ippu.ckpt"))?;
                let mut eval_rng = rng::derive(cfg.train.seed, &["cli", "ippu-eval"]);
                let stats =
                    training::eval_aggregation(&bundle, cfg.train.eval_batch, &mut eval_rng)?;
                summarize_stats("post-ippu aggregation", &stats);
                println!("wrote {}/ippu.ckpt", out.display());
            }
        },
        Command::Assess => {
            let mut bundle = require_checkpoint(&cli.global)?;
            let report = training::stage3_assess(&mut bundle, &cfg)?;
            let mut lines = JsonLines::create(&out.join("assess.jsonl"))?;
            for (name, stats) in &report.final_stats {
                lines.write(&serde_json::json!({"cfg": cfg_digest, "name": name, "stats": stats}))?;
                summarize_stats(name, stats);
            }
            if let Some(gate) = report.gate {
                println!(
                    "gate: min attacker L1 {:.5} (threshold {}), agg L1 {:.5} (limit {}) -> {}",
                    gate.measured_min_attacker_l1,
                    gate.min_attacker_l1,
                    gate.measured_agg_l1,
                    gate.max_agg_l1,
                    if gate.passed { "pass" } else { "fail" }
                );
            }
        }
        Command::Attack { kind } => {
            let mut lines = JsonLines::create(&out.join("attacks.jsonl"))?;
            match kind {
                AttackKind::Kma { original } => {
                    let target_bundle = require_checkpoint(&cli.global)?;
                    let original_bundle = crate::ckpt::load_bundle(&original)?;
                    let mut target = EncryptorTraffic::new(
                        &target_bundle.encryptors[0],
                        target_bundle.cfg.clone(),
                        rng::derive(cfg.train.seed, &["cli", "kma-target"]),
                    );
                    let outcome = attacks::train_kma_attackers(
                        &original_bundle.encryptors[0],
                        &mut target,
                        &target_bundle.cfg,
                        &cfg.train,
                    )?;
                    for ((variant, on_orig), (_, on_target)) in
                        outcome.on_original.iter().zip(&outcome.on_target)
                    {
                        println!(
                            "{}: vs original mean L1 {:.5}, vs target {:.5}",
                            variant.name(),
                            on_orig.mean_l1,
                            on_target.mean_l1
                        );
                        lines.write(&serde_json::json!({
                            "cfg": cfg_digest,
                            "attack": "kma",
                            "variant": variant.name(),
                            "on_original": on_orig,
                            "on_target": on_target,
                        }))?;
                    }
                }
                AttackKind::Pcaom { original, samples } => {
                    let bundle = require_checkpoint(&cli.global)?;
                    let original_bundle = crate::ckpt::load_bundle(&original)?;
                    let mut alice = EncryptorTraffic::new(
                        &bundle.encryptors[0],
                        bundle.cfg.clone(),
                        rng::derive(cfg.train.seed, &["cli", "pcaom-alice"]),
                    );
                    let report = attacks::pcaom(
                        &mut alice,
                        &original_bundle.encryptors[1],
                        &bundle.encryptors[2],
                        &bundle.aggregator,
                        samples,
                        &bundle.cfg,
                        cfg.train.seed,
                    )?;
                    println!("pcaom: MAD {:.5} var {:.5} success {}", report.mad, report.var, report.success);
                    for row in &report.examples {
                        println!("  orig {:+.5}  est {:+.5}  diff {:.5}", row.orig, row.estimate, row.diff);
                    }
                    lines.write(&report)?;
                }
                AttackKind::Pcapd { pubs, samples } => {
                    let bundle = require_checkpoint(&cli.global)?;
                    let text = std::fs::read_to_string(&pubs)?;
                    let dataset = PublicDataset::from_jsonl(&text)?;
                    let mut alice = EncryptorTraffic::new(
                        &bundle.encryptors[0],
                        bundle.cfg.clone(),
                        rng::derive(cfg.train.seed, &["cli", "pcapd-alice"]),
                    );
                    let report = attacks::pcapd(
                        &mut alice,
                        &dataset,
                        &bundle.encryptors[2],
                        &bundle.aggregator,
                        samples,
                        &bundle.cfg,
                        cfg.train.seed,
                    )?;
                    println!("pcapd: MAD {:.5} var {:.5} success {}", report.mad, report.var, report.success);
                    lines.write(&report)?;
                }
                AttackKind::Dlg => {
                    let (img, label) = probe_image()?;
                    let probe = ProbeNet::new(28 * 28, 32, 10, cfg.dlg.seed);
                    let outcome = dlg::dlg_hans(&probe, &img, &label, &mut IdentityChannel, &cfg.dlg)?;
                    println!(
                        "dlg (plaintext gradients): success {}, reconstruction mse {:.5}",
                        outcome.success, outcome.path1.reconstruction_mse
                    );
                    save_image_grid(
                        &out.join("dlg.png"),
                        &[("original", &img), ("reconstruction", &outcome.path1.outcome.x)],
                        28,
                        28,
                    )?;
                    lines.write(&serde_json::json!({
                        "cfg": cfg_digest,
                        "attack": "dlg",
                        "success": outcome.success,
                        "mse": outcome.path1.reconstruction_mse,
                    }))?;
                }
                AttackKind::DlgHans { original } => {
                    let bundle = require_checkpoint(&cli.global)?;
                    let original_bundle = crate::ckpt::load_bundle(&original)?;
                    // The adversary first trains its crack models on the
                    // original encryptor, then attacks the private traffic.
                    let mut target = EncryptorTraffic::new(
                        &bundle.encryptors[0],
                        bundle.cfg.clone(),
                        rng::derive(cfg.train.seed, &["cli", "dlg-target"]),
                    );
                    let kma = attacks::train_kma_attackers(
                        &original_bundle.encryptors[0],
                        &mut target,
                        &bundle.cfg,
                        &cfg.train,
                    )?;
                    let crack1 = &kma.attackers[0].1;
                    let crack2 = &kma.attackers[2].1;
                    let (img, label) = probe_image()?;
                    let probe = ProbeNet::new(28 * 28, 32, 10, cfg.dlg.seed);
                    let mut channel = HansChannel {
                        enc: &bundle.encryptors[0],
                        crack1,
                        crack2,
                        cfg: bundle.cfg.clone(),
                        seed: cfg.train.seed,
                    };
                    let outcome = dlg::dlg_hans(&probe, &img, &label, &mut channel, &cfg.dlg)?;
                    println!(
                        "dlg-hans: success {}, path mse {:.4} / {:.4}",
                        outcome.success,
                        outcome.path1.reconstruction_mse,
                        outcome.path2.reconstruction_mse
                    );
                    save_image_grid(
                        &out.join("dlg-hans.png"),
                        &[
                            ("original", &img),
                            ("crack1 path", &outcome.path1.outcome.x),
                            ("crack2 path", &outcome.path2.outcome.x),
                        ],
                        28,
                        28,
                    )?;
                    lines.write(&serde_json::json!({
                        "cfg": cfg_digest,
                        "attack": "dlg_hans",
                        "success": outcome.success,
                        "mse1": outcome.path1.reconstruction_mse,
                        "mse2": outcome.path2.reconstruction_mse,
                    }))?;
                }
            }
        }
        Command::Fl { mode } => {
            let mut lines = JsonLines::create(&out.join("fl.jsonl"))?;
            let run_plain = |fl_cfg: &crate::config::FlConfig, data_dir: Option<&Path>| {
                let ds = data::load_dataset(
                    fl_cfg.dataset,
                    data_dir,
                    fl_cfg.subset_size,
                    fl_cfg.eval_size,
                )?;
                fl::fedavg_plain(fl_cfg, &ds).map(|(_, r)| (ds, r))
            };
            match mode {
                FlMode::Plain { dataset, data_dir } => {
                    let mut fl_cfg = cfg.fl.clone();
                    if let Some(name) = dataset {
                        fl_cfg.dataset = parse_dataset(&name)?;
                    }
                    let (_, result) = run_plain(&fl_cfg, data_dir.as_deref())?;
                    println!("plain accuracy: {:.4}", result.accuracy);
                    lines.write(&result)?;
                }
                FlMode::Hans { dataset, data_dir } => {
                    let bundle = require_checkpoint(&cli.global)?;
                    let mut fl_cfg = cfg.fl.clone();
                    if let Some(name) = dataset {
                        fl_cfg.dataset = parse_dataset(&name)?;
                    }
                    let ds = data::load_dataset(
                        fl_cfg.dataset,
                        data_dir.as_deref(),
                        fl_cfg.subset_size,
                        fl_cfg.eval_size,
                    )?;
                    let (_, result) = fl::fedavg_hans(&fl_cfg, &ds, &bundle)?;
                    println!("encrypted accuracy: {:.4}", result.accuracy);
                    lines.write(&result)?;
                }
                FlMode::Delta { dataset, data_dir, budget } => {
                    let bundle = require_checkpoint(&cli.global)?;
                    let mut fl_cfg = cfg.fl.clone();
                    if let Some(name) = dataset {
                        fl_cfg.dataset = parse_dataset(&name)?;
                    }
                    let (ds, plain) = run_plain(&fl_cfg, data_dir.as_deref())?;
                    let (_, hans) = fl::fedavg_hans(&fl_cfg, &ds, &bundle)?;
                    let report = fl::accuracy_delta(&plain, &hans, budget)?;
                    println!(
                        "plain {:.4} vs encrypted {:.4}: delta {:+.4} ({} budget {:.4})",
                        report.plain_accuracy,
                        report.hans_accuracy,
                        report.delta,
                        if report.within_budget { "within" } else { "EXCEEDS" },
                        report.budget
                    );
                    if let Some(stats) = &report.round_stats {
                        summarize_stats("per-round sum difference", stats);
                    }
                    lines.write(&report)?;
                    if !report.within_budget {
                        return Ok(2);
                    }
                }
            }
        }
        Command::Bench { op, batches, trials } => {
            let bundle = match &cli.global.checkpoint {
                Some(path) => crate::ckpt::load_bundle(path)?,
                // Timing does not depend on the weights; a fresh bundle works.
                None => crate::ahe::build_models(
                    &cfg.ahe,
                    &mut rng::derive(cfg.ahe.seed, &["build"]),
                )?,
            };
            let op: BenchOp = op.parse()?;
            let results = bench::bench(op, &batches, &bundle, trials, cfg.train.seed)?;
            let mut lines = JsonLines::create(&out.join("bench.jsonl"))?;
            for r in &results {
                println!("{} batch {}: {:.6}s [{}]", r.operation, r.batch_size, r.wall_seconds, r.device);
                lines.write(r)?;
            }
            let comm = bench::comm_estimate(7_027_860, cfg.ahe.ciphertext_len)?;
            lines.write(&comm)?;
        }
        Command::Keygen { batch } => {
            let mut r = rng::derive(cfg.train.seed, &["cli", "keygen"]);
            let (keys, pks) = crate::ahe::keygen(batch, &cfg.ahe, &mut r)?;
            let exact = keys
                .sk_a
                .iter()
                .zip(keys.sk_b.iter())
                .zip(pks.pk.iter())
                .all(|((a, b), p)| a + b == *p);
            println!(
                "{} key pairs on [{}, {}]; pk additive identity holds: {exact}",
                keys.len(),
                cfg.ahe.key_low,
                cfg.ahe.key_high
            );
        }
        Command::Encrypt { batch } => {
            let bundle = require_checkpoint(&cli.global)?;
            let mut r = rng::derive(cfg.train.seed, &["cli", "encrypt"]);
            let m = crate::ahe::PlaintextBatch::new(
                Array1::from_shape_fn(batch, |_| r.random_range(-cfg.ahe.psi..=cfg.ahe.psi)),
                cfg.ahe.psi,
            );
            let (keys, _) = crate::ahe::keygen(batch, &bundle.cfg, &mut r)?;
            let c = crate::ahe::encrypt(&bundle.encryptors[0], &m, &keys, &bundle.cfg)?;
            let mean_abs = c.c.mapv(f32::abs).mean().unwrap();
            println!(
                "encrypted {batch} scalars to {}x{} ciphertexts; mean |c| {:.4}",
                c.len(),
                c.width(),
                mean_abs
            );
        }
        Command::Aggregate { batch } => {
            let bundle = require_checkpoint(&cli.global)?;
            let mut r = rng::derive(cfg.train.seed, &["cli", "aggregate"]);
            let stats = training::eval_aggregation(&bundle, batch, &mut r)?;
            summarize_stats("aggregation fidelity", &stats);
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(|| out.clone());
            let mut any = false;
            for name in ["stages.jsonl", "assess.jsonl", "attacks.jsonl", "fl.jsonl", "bench.jsonl"] {
                let path = dir.join(name);
                if !path.exists() {
                    continue;
                }
                any = true;
                let rows = crate::report::read_lines(&path)?;
                println!("{name}: {} records", rows.len());
                for row in rows.iter().take(8) {
                    println!("  {row}");
                }
                if rows.len() > 8 {
                    println!("  ... ({} more)", rows.len() - 8);
                }
            }
            println!(
                "reference constants: comparison scheme enc+agg(3000) {:.1}s; one-round upload {} MB / {} MB (quoted, not measured)",
                bench::reference::SECFED_ENC_AGG_3000_SECONDS,
                bench::reference::SECFED_BYTES_SMALL_MODEL_MB,
                bench::reference::SECFED_BYTES_LARGE_MODEL_MB
            );
            if !any {
                println!("no reports found in {}", dir.display());
            }
        }
    }
    Ok(0)
}
