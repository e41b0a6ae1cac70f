//! Scheme primitives: keys, plaintexts, ciphertexts, the model bundle, and
//! the keygen / encrypt / aggregate / attack-forward operations.
//!
//! Keys are real numbers. Each private key is a pair `(sk_a, sk_b)` and the
//! public key is their sum; one key pair encrypts exactly one plaintext
//! scalar, so fresh keys are drawn per scalar (one-time-pad discipline).

use crate::config::AheConfig;
use crate::error::{Error, Result};
use crate::nn::{Depth, Net, NetSpec, Role};
use ndarray::{s, Array1, Array2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::Rng;

/// Per-scalar private key pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyBatch {
    pub sk_a: Array1<f32>,
    pub sk_b: Array1<f32>,
}

impl KeyBatch {
    pub fn len(&self) -> usize {
        self.sk_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sk_a.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublicKeyBatch {
    pub pk: Array1<f32>,
}

impl PublicKeyBatch {
    pub fn len(&self) -> usize {
        self.pk.len()
    }
}

/// Plaintext scalars clipped into `[-psi, psi]` at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaintextBatch {
    pub m: Array1<f32>,
    /// Number of values that had to be clipped to the bound.
    pub clipped: usize,
}

impl PlaintextBatch {
    pub fn new(values: Array1<f32>, psi: f32) -> Self {
        let mut clipped = 0;
        let m = values.mapv(|v| {
            if v > psi {
                clipped += 1;
                psi
            } else if v < -psi {
                clipped += 1;
                -psi
            } else {
                v
            }
        });
        PlaintextBatch { m, clipped }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Fixed-length real vectors, one row per plaintext scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct CiphertextBatch {
    pub c: Array2<f32>,
}

impl CiphertextBatch {
    pub fn len(&self) -> usize {
        self.c.nrows()
    }

    pub fn width(&self) -> usize {
        self.c.ncols()
    }
}

/// The four attacker variants kept per client slot.
#[derive(Debug, Clone)]
pub struct ClientAttackers {
    pub pk_std: Net<f32>,
    pub pk_dbl: Net<f32>,
    pub nopk_std: Net<f32>,
    pub nopk_dbl: Net<f32>,
}

impl ClientAttackers {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Net<f32>)> {
        [
            ("atk_pk_std", &self.pk_std),
            ("atk_pk_dbl", &self.pk_dbl),
            ("atk_nopk_std", &self.nopk_std),
            ("atk_nopk_dbl", &self.nopk_dbl),
        ]
        .into_iter()
    }
}

/// Everything trained together: per-client encryptors, the shared aggregator,
/// and per-client attacker slots used during training and assessment.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub cfg: AheConfig,
    pub encryptors: Vec<Net<f32>>,
    pub aggregator: Net<f32>,
    pub attackers: Vec<ClientAttackers>,
}

impl ModelBundle {
    pub fn num_clients(&self) -> usize {
        self.encryptors.len()
    }
}

pub fn encryptor_spec(cfg: &AheConfig) -> NetSpec {
    NetSpec::new(
        Role::Encryptor,
        Depth::Standard,
        3,
        cfg.hidden_dim,
        cfg.conv_channels,
        cfg.num_res_blocks,
        cfg.ciphertext_len,
    )
}

pub fn aggregator_spec(cfg: &AheConfig) -> NetSpec {
    NetSpec::new(
        Role::Aggregator,
        Depth::Standard,
        cfg.num_clients * (cfg.ciphertext_len + 1),
        (3 * cfg.hidden_dim) / 2,
        cfg.conv_channels,
        cfg.num_res_blocks,
        1,
    )
}

pub fn attacker_spec(cfg: &AheConfig, with_pk: bool, depth: Depth) -> NetSpec {
    let (role, in_w) = if with_pk {
        (Role::AttackerPk, cfg.ciphertext_len + 1)
    } else {
        (Role::AttackerNoPk, cfg.ciphertext_len)
    };
    NetSpec::new(role, depth, in_w, cfg.hidden_dim, cfg.conv_channels, cfg.num_res_blocks, 1)
}

/// Above this size, key batches are filled in fixed-size chunks whose
/// sub-streams are seeded from the caller's stream, so generation can run in
/// parallel while staying deterministic for a given input stream.
const KEYGEN_CHUNK: usize = 150_000;

/// Draw `batch_size` fresh key pairs, i.i.d. uniform on the configured range.
/// Public keys are the exact float sum of the two private components.
pub fn keygen(
    batch_size: usize,
    cfg: &AheConfig,
    rng: &mut impl Rng,
) -> Result<(KeyBatch, PublicKeyBatch)> {
    if batch_size == 0 {
        return Err(Error::invalid("keygen batch_size must be >= 1"));
    }
    let dist = Uniform::new_inclusive(cfg.key_low, cfg.key_high)
        .map_err(|e| Error::invalid(format!("key range: {e}")))?;
    let mut sk_a = Array1::zeros(batch_size);
    let mut sk_b = Array1::zeros(batch_size);
    let mut pk = Array1::zeros(batch_size);

    if batch_size <= KEYGEN_CHUNK {
        for i in 0..batch_size {
            let a = dist.sample(rng);
            let b = dist.sample(rng);
            sk_a[i] = a;
            sk_b[i] = b;
            pk[i] = a + b;
        }
    } else {
        use rand::SeedableRng;
        use rayon::prelude::*;
        let n_chunks = batch_size.div_ceil(KEYGEN_CHUNK);
        let seeds: Vec<u64> = (0..n_chunks).map(|_| rng.random()).collect();
        let a_chunks = sk_a.as_slice_mut().unwrap().par_chunks_mut(KEYGEN_CHUNK);
        let b_chunks = sk_b.as_slice_mut().unwrap().par_chunks_mut(KEYGEN_CHUNK);
        let p_chunks = pk.as_slice_mut().unwrap().par_chunks_mut(KEYGEN_CHUNK);
        a_chunks.zip(b_chunks).zip(p_chunks).zip(seeds).for_each(
            |(((ca, cb), cp), seed)| {
                let mut chunk_rng = rand::rngs::SmallRng::seed_from_u64(seed);
                for i in 0..ca.len() {
                    let a = dist.sample(&mut chunk_rng);
                    let b = dist.sample(&mut chunk_rng);
                    ca[i] = a;
                    cb[i] = b;
                    cp[i] = a + b;
                }
            },
        );
    }
    Ok((KeyBatch { sk_a, sk_b }, PublicKeyBatch { pk }))
}

/// Build a fresh bundle: `num_clients` encryptors that all start from the same
/// weights (the publicly distributed original model), one aggregator, and the
/// four attacker variants per client slot.
pub fn build_models(cfg: &AheConfig, rng: &mut impl Rng) -> Result<ModelBundle> {
    cfg.validate()?;
    let original = Net::new(encryptor_spec(cfg), rng);
    let encryptors = vec![original; cfg.num_clients];
    let aggregator = Net::new(aggregator_spec(cfg), rng);
    let attackers = (0..cfg.num_clients)
        .map(|_| ClientAttackers {
            pk_std: Net::new(attacker_spec(cfg, true, Depth::Standard), rng),
            pk_dbl: Net::new(attacker_spec(cfg, true, Depth::Double), rng),
            nopk_std: Net::new(attacker_spec(cfg, false, Depth::Standard), rng),
            nopk_dbl: Net::new(attacker_spec(cfg, false, Depth::Double), rng),
        })
        .collect();
    Ok(ModelBundle { cfg: cfg.clone(), encryptors, aggregator, attackers })
}

/// Assemble the `(m, sk_a, sk_b)` input rows for an encryptor.
pub fn encryptor_input(m: &Array1<f32>, keys: &KeyBatch) -> Array2<f32> {
    let batch = m.len();
    let mut x = Array2::zeros((batch, 3));
    x.slice_mut(s![.., 0]).assign(m);
    x.slice_mut(s![.., 1]).assign(&keys.sk_a);
    x.slice_mut(s![.., 2]).assign(&keys.sk_b);
    x
}

/// Encrypt a batch of plaintext scalars, one key pair per scalar.
pub fn encrypt(
    enc: &Net<f32>,
    m: &PlaintextBatch,
    keys: &KeyBatch,
    cfg: &AheConfig,
) -> Result<CiphertextBatch> {
    if enc.spec.role != Role::Encryptor {
        return Err(Error::invalid("encrypt requires an encryptor model"));
    }
    if m.len() != keys.len() {
        return Err(Error::invalid(format!(
            "plaintext/key length mismatch: {} vs {}",
            m.len(),
            keys.len()
        )));
    }
    if m.m.iter().any(|v| v.abs() > cfg.psi || !v.is_finite()) {
        return Err(Error::invalid("plaintext outside [-psi, psi]; clip before encrypting"));
    }
    let x = encryptor_input(&m.m, keys);
    Ok(CiphertextBatch { c: enc.forward(&x) })
}

/// Assemble the aggregator input `[c_1 | .. | c_N | pk_1 | .. | pk_N]`.
/// Client slots are positional; the aggregator is not permutation invariant.
pub fn aggregator_input(
    ciphertexts: &[&CiphertextBatch],
    pks: &[&PublicKeyBatch],
) -> Result<Array2<f32>> {
    let n = ciphertexts.len();
    if n == 0 || pks.len() != n {
        return Err(Error::invalid("need matching ciphertext and public-key slots"));
    }
    let batch = ciphertexts[0].len();
    let width = ciphertexts[0].width();
    for (i, c) in ciphertexts.iter().enumerate() {
        if c.len() != batch || c.width() != width {
            return Err(Error::invalid(format!("ciphertext slot {i} has mismatched shape")));
        }
        if pks[i].len() != batch {
            return Err(Error::invalid(format!("public-key slot {i} has mismatched length")));
        }
    }
    let mut x = Array2::zeros((batch, n * (width + 1)));
    for (i, c) in ciphertexts.iter().enumerate() {
        x.slice_mut(s![.., i * width..(i + 1) * width]).assign(&c.c);
    }
    for (i, pk) in pks.iter().enumerate() {
        x.slice_mut(s![.., n * width + i]).assign(&pk.pk);
    }
    Ok(x)
}

/// Aggregate N ciphertext batches into per-row plaintext sums.
pub fn aggregate(
    agg: &Net<f32>,
    ciphertexts: &[&CiphertextBatch],
    pks: &[&PublicKeyBatch],
) -> Result<Array1<f32>> {
    if agg.spec.role != Role::Aggregator {
        return Err(Error::invalid("aggregate requires an aggregator model"));
    }
    let x = aggregator_input(ciphertexts, pks)?;
    if x.ncols() != agg.spec.in_width {
        return Err(Error::invalid(format!(
            "aggregator arity mismatch: model expects input width {}, got {}",
            agg.spec.in_width,
            x.ncols()
        )));
    }
    Ok(agg.forward(&x).index_axis_move(Axis(1), 0))
}

/// Per-row plaintext guess from an attacker model. `pk` must be present
/// exactly when the model's role consumes a public key.
pub fn attack_forward(
    atk: &Net<f32>,
    c: &CiphertextBatch,
    pk: Option<&PublicKeyBatch>,
) -> Result<Array1<f32>> {
    let x = attack_input(atk, c, pk)?;
    Ok(atk.forward(&x).index_axis_move(Axis(1), 0))
}

pub fn attack_input(
    atk: &Net<f32>,
    c: &CiphertextBatch,
    pk: Option<&PublicKeyBatch>,
) -> Result<Array2<f32>> {
    match (atk.spec.role, pk) {
        (Role::AttackerPk, Some(pk)) => {
            if pk.len() != c.len() {
                return Err(Error::invalid("public-key length mismatch"));
            }
            let mut x = Array2::zeros((c.len(), c.width() + 1));
            x.slice_mut(s![.., ..c.width()]).assign(&c.c);
            x.slice_mut(s![.., c.width()]).assign(&pk.pk);
            Ok(x)
        }
        (Role::AttackerNoPk, None) => Ok(c.c.clone()),
        (Role::AttackerPk, None) => {
            Err(Error::invalid("attacker_pk requires a public key input"))
        }
        (Role::AttackerNoPk, Some(_)) => {
            Err(Error::invalid("attacker_nopk does not accept a public key"))
        }
        _ => Err(Error::invalid("attack_forward requires an attacker model")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::concatenate;

    fn test_cfg() -> AheConfig {
        AheConfig { hidden_dim: 12, ciphertext_len: 8, conv_channels: 2, ..Default::default() }
    }

    #[test]
    fn keygen_pk_is_exact_sum() {
        let cfg = test_cfg();
        let mut r = rng::derive(1, &["keygen"]);
        let (keys, pks) = keygen(1000, &cfg, &mut r).unwrap();
        for i in 0..keys.len() {
            assert_eq!(pks.pk[i], keys.sk_a[i] + keys.sk_b[i], "bit-exact additive pk");
            assert!(keys.sk_a[i] >= cfg.key_low && keys.sk_a[i] <= cfg.key_high);
            assert!(keys.sk_a[i].is_finite() && keys.sk_b[i].is_finite());
        }
        // The worked example from the definition: 0.3 + (-0.1) = 0.2.
        assert!((0.3f32 + (-0.1f32) - 0.2f32).abs() < 1e-7);
    }

    #[test]
    fn keygen_rejects_empty_and_is_seeded() {
        let cfg = test_cfg();
        assert!(matches!(
            keygen(0, &cfg, &mut rng::derive(1, &["k"])),
            Err(Error::InvalidArgument(_))
        ));
        let (a1, p1) = keygen(64, &cfg, &mut rng::derive(2, &["k"])).unwrap();
        let (a2, p2) = keygen(64, &cfg, &mut rng::derive(2, &["k"])).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(p1, p2);
        // Fresh keys on every call from an advancing stream.
        let mut stream = rng::derive(3, &["k"]);
        let (b1, _) = keygen(64, &cfg, &mut stream).unwrap();
        let (b2, _) = keygen(64, &cfg, &mut stream).unwrap();
        assert_ne!(b1, b2);
    }

    #[test]
    fn bundle_arity_and_determinism() {
        let cfg = test_cfg();
        let bundle = build_models(&cfg, &mut rng::derive(5, &["build"])).unwrap();
        assert_eq!(bundle.encryptors.len(), 3);
        assert_eq!(bundle.attackers.len(), 3);
        assert_eq!(bundle.attackers.iter().map(|a| a.iter().count()).sum::<usize>(), 12);
        // All encryptors start as the same original model.
        let h0 = bundle.encryptors[0].weight_hash();
        assert!(bundle.encryptors.iter().all(|e| e.weight_hash() == h0));
        // Double attackers have exactly twice the residual blocks.
        assert_eq!(
            bundle.attackers[0].pk_dbl.spec.res_blocks,
            2 * bundle.attackers[0].pk_std.spec.res_blocks
        );

        let again = build_models(&cfg, &mut rng::derive(5, &["build"])).unwrap();
        assert_eq!(bundle.aggregator.weight_hash(), again.aggregator.weight_hash());
        assert_eq!(
            bundle.attackers[2].nopk_dbl.weight_hash(),
            again.attackers[2].nopk_dbl.weight_hash()
        );
    }

    #[test]
    fn encrypt_contracts() {
        let cfg = test_cfg();
        let bundle = build_models(&cfg, &mut rng::derive(6, &["build"])).unwrap();
        let mut r = rng::derive(6, &["data"]);
        let (keys, _) = keygen(4, &cfg, &mut r).unwrap();
        let m = PlaintextBatch::new(ndarray::arr1(&[0.1, -0.5, 0.9, 0.0]), cfg.psi);

        let c1 = encrypt(&bundle.encryptors[0], &m, &keys, &cfg).unwrap();
        let c2 = encrypt(&bundle.encryptors[0], &m, &keys, &cfg).unwrap();
        assert_eq!(c1, c2, "deterministic forward");
        assert_eq!(c1.c.dim(), (4, cfg.ciphertext_len));

        // Length mismatch.
        let (short_keys, _) = keygen(3, &cfg, &mut r).unwrap();
        assert!(encrypt(&bundle.encryptors[0], &m, &short_keys, &cfg).is_err());

        // Out-of-bound plaintext rejected when constructed without clipping.
        let raw = PlaintextBatch { m: ndarray::arr1(&[2.0]), clipped: 0 };
        let (k1, _) = keygen(1, &cfg, &mut r).unwrap();
        assert!(matches!(
            encrypt(&bundle.encryptors[0], &raw, &k1, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn plaintext_clipping_counts() {
        let b = PlaintextBatch::new(ndarray::arr1(&[1.7, -3.0, 0.2]), 1.0);
        assert_eq!(b.clipped, 2);
        assert_eq!(b.m, ndarray::arr1(&[1.0, -1.0, 0.2]));
    }

    #[test]
    fn encrypt_rows_are_independent() {
        let cfg = test_cfg();
        let bundle = build_models(&cfg, &mut rng::derive(7, &["build"])).unwrap();
        let mut r = rng::derive(7, &["data"]);
        let (keys, _) = keygen(6, &cfg, &mut r).unwrap();
        let m = PlaintextBatch::new(
            Array1::from_shape_fn(6, |i| (i as f32 - 3.0) * 0.2),
            cfg.psi,
        );
        let full = encrypt(&bundle.encryptors[0], &m, &keys, &cfg).unwrap();

        // encrypt(m || m') == encrypt(m) || encrypt(m').
        let head = PlaintextBatch::new(m.m.slice(s![..2]).to_owned(), cfg.psi);
        let head_keys = KeyBatch {
            sk_a: keys.sk_a.slice(s![..2]).to_owned(),
            sk_b: keys.sk_b.slice(s![..2]).to_owned(),
        };
        let tail = PlaintextBatch::new(m.m.slice(s![2..]).to_owned(), cfg.psi);
        let tail_keys = KeyBatch {
            sk_a: keys.sk_a.slice(s![2..]).to_owned(),
            sk_b: keys.sk_b.slice(s![2..]).to_owned(),
        };
        let c_head = encrypt(&bundle.encryptors[0], &head, &head_keys, &cfg).unwrap();
        let c_tail = encrypt(&bundle.encryptors[0], &tail, &tail_keys, &cfg).unwrap();
        let joined = concatenate(Axis(0), &[c_head.c.view(), c_tail.c.view()]).unwrap();
        assert_eq!(full.c, joined);
    }

    /// One-time-pad distinctness: the same plaintexts under fresh keys produce
    /// ciphertext rows at least 1e-3 apart (measured over 1,000 scalars).
    #[test]
    fn otp_distinctness() {
        let cfg = test_cfg();
        let bundle = build_models(&cfg, &mut rng::derive(8, &["build"])).unwrap();
        let mut r = rng::derive(8, &["data"]);
        let n = 1000;
        let m = PlaintextBatch::new(Array1::from_shape_fn(n, |i| (i as f32 / n as f32) - 0.5), cfg.psi);
        let (k1, _) = keygen(n, &cfg, &mut r).unwrap();
        let (k2, _) = keygen(n, &cfg, &mut r).unwrap();
        let c1 = encrypt(&bundle.encryptors[0], &m, &k1, &cfg).unwrap();
        let c2 = encrypt(&bundle.encryptors[0], &m, &k2, &cfg).unwrap();
        let rowwise: Vec<f32> = (0..n)
            .map(|i| {
                (&c1.c.row(i) - &c2.c.row(i)).mapv(f32::abs).sum()
            })
            .collect();
        let mean = rowwise.iter().sum::<f32>() / n as f32;
        assert!(mean > 1e-3, "mean row-wise L1 distance {mean}");
        let close = rowwise.iter().filter(|d| **d < 1e-3).count();
        assert!((close as f64) < 0.01 * n as f64, "{close} collisions out of {n}");
    }

    #[test]
    fn aggregate_shape_and_arity_checks() {
        let cfg = test_cfg();
        let bundle = build_models(&cfg, &mut rng::derive(9, &["build"])).unwrap();
        let mut r = rng::derive(9, &["data"]);
        let batch = 5;
        let mut cs = Vec::new();
        let mut pks = Vec::new();
        for e in &bundle.encryptors {
            let (keys, pk) = keygen(batch, &cfg, &mut r).unwrap();
            let m = PlaintextBatch::new(Array1::from_elem(batch, 0.25), cfg.psi);
            cs.push(encrypt(e, &m, &keys, &cfg).unwrap());
            pks.push(pk);
        }
        let c_refs: Vec<&CiphertextBatch> = cs.iter().collect();
        let pk_refs: Vec<&PublicKeyBatch> = pks.iter().collect();
        let out = aggregate(&bundle.aggregator, &c_refs, &pk_refs).unwrap();
        assert_eq!(out.len(), batch);
        assert!(out.iter().all(|v| v.is_finite()));

        // Wrong arity is rejected.
        assert!(matches!(
            aggregate(&bundle.aggregator, &c_refs[..2], &pk_refs[..2]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn attack_forward_role_checks() {
        let cfg = test_cfg();
        let bundle = build_models(&cfg, &mut rng::derive(10, &["build"])).unwrap();
        let mut r = rng::derive(10, &["data"]);
        let (keys, pk) = keygen(7, &cfg, &mut r).unwrap();
        let m = PlaintextBatch::new(Array1::zeros(7), cfg.psi);
        let c = encrypt(&bundle.encryptors[0], &m, &keys, &cfg).unwrap();

        let atk = &bundle.attackers[0];
        let g = attack_forward(&atk.pk_std, &c, Some(&pk)).unwrap();
        assert_eq!(g.len(), 7);
        assert!(attack_forward(&atk.pk_std, &c, None).is_err());
        assert!(attack_forward(&atk.nopk_std, &c, Some(&pk)).is_err());
        assert_eq!(attack_forward(&atk.nopk_dbl, &c, None).unwrap().len(), 7);

        // Input widths: pk attacker consumes L+1 columns, plain attacker L.
        assert_eq!(atk.pk_std.spec.in_width, cfg.ciphertext_len + 1);
        assert_eq!(atk.nopk_std.spec.in_width, cfg.ciphertext_len);
    }
}
