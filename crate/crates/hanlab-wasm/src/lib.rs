//! Browser demo over a plain C ABI (no binding generator): a miniature
//! bundle is trained incrementally in-page, then the page explores
//! per-scalar encryption, aggregation and the co-trained attackers' guesses.
//!
//! All exports operate on one global demo state; wasm runs single-threaded,
//! so the mutex never contends.

use hanlab::ahe::{self, CiphertextBatch, KeyBatch, PlaintextBatch, PublicKeyBatch};
use hanlab::config::{Config, PlateauConfig};
use hanlab::training::MicroTrainer;
use ndarray::Array1;
use std::sync::Mutex;

struct DemoState {
    trainer: MicroTrainer,
    key_rng: hanlab::rng::Stream,
    last_m: f32,
    last_keys: Option<(KeyBatch, PublicKeyBatch)>,
    last_cipher: Vec<f32>,
    last_agg: [f32; 2],
}

static STATE: Mutex<Option<DemoState>> = Mutex::new(None);

fn demo_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.ahe.hidden_dim = 12;
    cfg.ahe.ciphertext_len = 16;
    cfg.ahe.conv_channels = 2;
    cfg.ahe.num_res_blocks = 1;
    cfg.ahe.seed = seed;
    cfg.train.seed = seed;
    cfg.train.lr = 3e-3;
    cfg.train.enc_lr_mult = 0.1;
    cfg.train.attacker_lr_mult = 2.0;
    cfg.train.batch_size = 48;
    cfg.train.attacker_steps_per_enc_step = 2;
    cfg.train.stage1_steps = 2000;
    cfg.train.plateau = PlateauConfig { window: 50, rel_tol: 1e-3, max_steps: 500 };
    cfg
}

/// (Re)initialize the demo bundle from a seed.
#[no_mangle]
pub extern "C" fn han_init(seed: u32) {
    let cfg = demo_config(seed as u64);
    let trainer = MicroTrainer::new(cfg).expect("demo config is valid");
    let key_rng = hanlab::rng::derive(seed as u64, &["demo-keys"]);
    *STATE.lock().unwrap() = Some(DemoState {
        trainer,
        key_rng,
        last_m: 0.0,
        last_keys: None,
        last_cipher: Vec::new(),
        last_agg: [0.0, 0.0],
    });
}

/// Run `n` training steps; returns the latest aggregation-batch MSE.
#[no_mangle]
pub extern "C" fn han_train_steps(n: u32) -> f32 {
    let mut guard = STATE.lock().unwrap();
    let state = guard.as_mut().expect("han_init first");
    let mut last = f32::NAN;
    for _ in 0..n {
        last = state.trainer.step().expect("training step");
    }
    last
}

#[no_mangle]
pub extern "C" fn han_steps_taken() -> u32 {
    let guard = STATE.lock().unwrap();
    guard.as_ref().map(|s| s.trainer.steps_taken() as u32).unwrap_or(0)
}

/// Encrypt one scalar with client 0's encryptor. `fresh_keys != 0` draws a
/// new key pair (the one-time-pad path); otherwise the previous pair is
/// reused so the page can show how the ciphertext depends on the keys.
#[no_mangle]
pub extern "C" fn han_encrypt(m: f32, fresh_keys: u32) -> u32 {
    let mut guard = STATE.lock().unwrap();
    let state = guard.as_mut().expect("han_init first");
    let cfg = state.trainer.bundle().cfg.clone();
    if fresh_keys != 0 || state.last_keys.is_none() {
        let (keys, pks) = ahe::keygen(1, &cfg, &mut state.key_rng).expect("keygen");
        state.last_keys = Some((keys, pks));
    }
    let (keys, _) = state.last_keys.as_ref().unwrap();
    let batch = PlaintextBatch::new(Array1::from_vec(vec![m]), cfg.psi);
    state.last_m = batch.m[0];
    let c = ahe::encrypt(&state.trainer.bundle().encryptors[0], &batch, keys, &cfg)
        .expect("encrypt");
    state.last_cipher = c.c.row(0).to_vec();
    state.last_cipher.len() as u32
}

#[no_mangle]
pub extern "C" fn han_cipher_ptr() -> *const f32 {
    let guard = STATE.lock().unwrap();
    guard.as_ref().map(|s| s.last_cipher.as_ptr()).unwrap_or(std::ptr::null())
}

#[no_mangle]
pub extern "C" fn han_last_pk() -> f32 {
    let guard = STATE.lock().unwrap();
    guard
        .as_ref()
        .and_then(|s| s.last_keys.as_ref())
        .map(|(_, pks)| pks.pk[0])
        .unwrap_or(f32::NAN)
}

fn guess_on_last(with_pk: bool) -> f32 {
    let guard = STATE.lock().unwrap();
    let Some(state) = guard.as_ref() else { return f32::NAN };
    if state.last_cipher.is_empty() {
        return f32::NAN;
    }
    let c = CiphertextBatch {
        c: ndarray::Array2::from_shape_vec((1, state.last_cipher.len()), state.last_cipher.clone())
            .unwrap(),
    };
    let atk = &state.trainer.bundle().attackers[0];
    let out = if with_pk {
        let (_, pks) = state.last_keys.as_ref().unwrap();
        ahe::attack_forward(&atk.pk_std, &c, Some(pks))
    } else {
        ahe::attack_forward(&atk.nopk_std, &c, None)
    };
    out.map(|g| g[0]).unwrap_or(f32::NAN)
}

/// Co-trained ciphertext-only attacker's guess for the last ciphertext.
#[no_mangle]
pub extern "C" fn han_attack_guess() -> f32 {
    guess_on_last(false)
}

/// Co-trained public-key attacker's guess for the last ciphertext.
#[no_mangle]
pub extern "C" fn han_attack_guess_pk() -> f32 {
    guess_on_last(true)
}

#[no_mangle]
pub extern "C" fn han_last_m() -> f32 {
    let guard = STATE.lock().unwrap();
    guard.as_ref().map(|s| s.last_m).unwrap_or(f32::NAN)
}

/// Encrypt three scalars under fresh keys and aggregate; returns the decoded
/// sum (the true sum is `m1 + m2 + m3`, computed page-side).
#[no_mangle]
pub extern "C" fn han_aggregate(m1: f32, m2: f32, m3: f32) -> f32 {
    let mut guard = STATE.lock().unwrap();
    let state = guard.as_mut().expect("han_init first");
    let cfg = state.trainer.bundle().cfg.clone();
    let inputs = [m1, m2, m3];
    let mut cs = Vec::new();
    let mut pks = Vec::new();
    for (i, &m) in inputs.iter().enumerate() {
        let (keys, pk) = ahe::keygen(1, &cfg, &mut state.key_rng).expect("keygen");
        let batch = PlaintextBatch::new(Array1::from_vec(vec![m]), cfg.psi);
        let c = ahe::encrypt(&state.trainer.bundle().encryptors[i], &batch, &keys, &cfg)
            .expect("encrypt");
        cs.push(c);
        pks.push(pk);
    }
    let c_refs: Vec<&CiphertextBatch> = cs.iter().collect();
    let pk_refs: Vec<&PublicKeyBatch> = pks.iter().collect();
    let out = ahe::aggregate(&state.trainer.bundle().aggregator, &c_refs, &pk_refs)
        .expect("aggregate");
    state.last_agg = [out[0], m1 + m2 + m3];
    out[0]
}

/// Scratch allocation helpers so the page can pass buffers if it needs to.
#[no_mangle]
pub extern "C" fn han_alloc(len: u32) -> *mut f32 {
    let mut v = Vec::<f32>::with_capacity(len as usize);
    let ptr = v.as_mut_ptr();
    std::mem::forget(v);
    ptr
}

#[no_mangle]
pub extern "C" fn han_free(ptr: *mut f32, len: u32) {
    if !ptr.is_null() {
        unsafe {
            drop(Vec::from_raw_parts(ptr, 0, len as usize));
        }
    }
}

// Keep a non-wasm entry alive so `cargo test --workspace` exercises the demo
// logic on the host as well.
#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_round_trip() {
        han_init(7);
        let before = han_train_steps(3);
        assert!(before.is_finite());
        let len = han_encrypt(0.4, 1);
        assert_eq!(len, 16);
        assert!(!han_cipher_ptr().is_null());
        assert!(han_last_pk().is_finite());
        let g = han_attack_guess();
        assert!(g.is_finite());
        let sum = han_aggregate(0.1, 0.2, 0.3);
        assert!(sum.is_finite());
        assert_eq!(han_last_m(), 0.4);

        // Same seed reproduces the same ciphertext stream.
        han_init(7);
        han_train_steps(3);
        han_encrypt(0.4, 1);
        let c1: Vec<f32> = unsafe {
            std::slice::from_raw_parts(han_cipher_ptr(), 16).to_vec()
        };
        han_init(7);
        han_train_steps(3);
        han_encrypt(0.4, 1);
        let c2: Vec<f32> =
            unsafe { std::slice::from_raw_parts(han_cipher_ptr(), 16).to_vec() };
        assert_eq!(c1, c2);
    }
}
