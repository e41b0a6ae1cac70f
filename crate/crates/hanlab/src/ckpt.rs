//! Checkpoint archives, format `hans-ckpt/1`.
//!
//! A checkpoint is a single file: an 8-byte magic, a little-endian u32 format
//! version, a u32 manifest length, the JSON manifest, then the raw blobs.
//! Each blob is the little-endian f32 parameter data of one layer, addressed
//! as `<model>/<layer>.f32`, and the manifest records its byte offset, length
//! and CRC32 alongside the architecture descriptors and the scheme config.

use crate::ahe::{ClientAttackers, ModelBundle};
use crate::config::AheConfig;
use crate::error::{Error, Result};
use crate::nn::{Net, NetSpec};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HANSCKPT";
const VERSION: u32 = 1;
pub const FORMAT: &str = "hans-ckpt/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobEntry {
    /// `<model>/<layer>.f32`
    pub path: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len_bytes: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub spec: NetSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub cfg: AheConfig,
    pub models: Vec<ModelEntry>,
    pub blobs: Vec<BlobEntry>,
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Writer {
    models: Vec<ModelEntry>,
    blobs: Vec<BlobEntry>,
    data: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { models: Vec::new(), blobs: Vec::new(), data: Vec::new() }
    }

    fn add_model(&mut self, name: &str, net: &Net<f32>) {
        self.models.push(ModelEntry { name: name.to_string(), spec: net.spec.clone() });
        let shapes = net.param_shapes();
        for ((layer, slice), (_, shape)) in net.visit_params().into_iter().zip(shapes) {
            let bytes = f32_bytes(slice);
            let crc = crc32fast::hash(&bytes);
            self.blobs.push(BlobEntry {
                path: format!("{name}/{layer}.f32"),
                shape,
                offset: self.data.len() as u64,
                len_bytes: bytes.len() as u64,
                crc32: crc,
            });
            self.data.extend_from_slice(&bytes);
        }
    }

    fn finish(self, cfg: &AheConfig, path: &Path) -> Result<()> {
        let manifest = Manifest {
            format: FORMAT.to_string(),
            cfg: cfg.clone(),
            models: self.models,
            blobs: self.blobs,
        };
        let manifest_json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
        file.write_all(&manifest_json)?;
        file.write_all(&self.data)?;
        Ok(())
    }
}

fn model_names(num_clients: usize) -> (Vec<String>, Vec<[String; 4]>) {
    let encs: Vec<String> = (0..num_clients).map(|i| format!("enc{i}")).collect();
    let atks: Vec<[String; 4]> = (0..num_clients)
        .map(|i| {
            [
                format!("atk{i}_pk_std"),
                format!("atk{i}_pk_dbl"),
                format!("atk{i}_nopk_std"),
                format!("atk{i}_nopk_dbl"),
            ]
        })
        .collect();
    (encs, atks)
}

/// Persist a full bundle to a `hans-ckpt/1` archive.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    let (enc_names, atk_names) = model_names(bundle.num_clients());
    for (name, net) in enc_names.iter().zip(&bundle.encryptors) {
        w.add_model(name, net);
    }
    w.add_model("agg", &bundle.aggregator);
    for (names, atk) in atk_names.iter().zip(&bundle.attackers) {
        w.add_model(&names[0], &atk.pk_std);
        w.add_model(&names[1], &atk.pk_dbl);
        w.add_model(&names[2], &atk.nopk_std);
        w.add_model(&names[3], &atk.nopk_dbl);
    }
    w.finish(&bundle.cfg, path)
}

struct Reader {
    manifest: Manifest,
    data: Vec<u8>,
}

impl Reader {
    fn open(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a hans-ckpt archive".into()));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        file.read_exact(&mut word)?;
        let manifest_len = u32::from_le_bytes(word) as usize;
        let mut manifest_json = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_json)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_json)
            .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
        }
        let mut data = Vec::new();
        file.read_to_end(&mut data)?;
        Ok(Reader { manifest, data })
    }

    fn read_blob(&self, path: &str) -> Result<Vec<f32>> {
        let entry = self
            .manifest
            .blobs
            .iter()
            .find(|b| b.path == path)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {path}")))?;
        let start = entry.offset as usize;
        let end = start + entry.len_bytes as usize;
        let bytes = self
            .data
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("blob {path} out of bounds")))?;
        let crc = crc32fast::hash(bytes);
        if crc != entry.crc32 {
            return Err(Error::Checkpoint(format!(
                "crc mismatch for {path}: stored {:08x}, computed {crc:08x}",
                entry.crc32
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn load_model(&self, name: &str) -> Result<Net<f32>> {
        let entry = self
            .manifest
            .models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing model {name}")))?;
        // Build a correctly-shaped net, then overwrite every parameter.
        let mut throwaway = crate::rng::derive(0, &["ckpt-shape"]);
        let mut net = Net::<f32>::new(entry.spec.clone(), &mut throwaway);
        for (layer, slice) in net.visit_params_mut() {
            let blob = self.read_blob(&format!("{name}/{layer}.f32"))?;
            if blob.len() != slice.len() {
                return Err(Error::Checkpoint(format!(
                    "blob {name}/{layer}.f32 has {} values, expected {}",
                    blob.len(),
                    slice.len()
                )));
            }
            slice.copy_from_slice(&blob);
        }
        Ok(net)
    }
}

/// Load a bundle back from a `hans-ckpt/1` archive; weights are bit-identical
/// to what was saved.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let reader = Reader::open(path)?;
    let cfg = reader.manifest.cfg.clone();
    let (enc_names, atk_names) = model_names(cfg.num_clients);
    let mut encryptors = Vec::with_capacity(cfg.num_clients);
    for name in &enc_names {
        encryptors.push(reader.load_model(name)?);
    }
    let aggregator = reader.load_model("agg")?;
    let mut attackers = Vec::with_capacity(cfg.num_clients);
    for names in &atk_names {
        attackers.push(ClientAttackers {
            pk_std: reader.load_model(&names[0])?,
            pk_dbl: reader.load_model(&names[1])?,
            nopk_std: reader.load_model(&names[2])?,
            nopk_dbl: reader.load_model(&names[3])?,
        });
    }
    Ok(ModelBundle { cfg, encryptors, aggregator, attackers })
}

/// Hash of every model in the bundle, in a fixed order; used by freeze
/// contracts and the determinism checks.
pub fn bundle_hash(bundle: &ModelBundle) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for enc in &bundle.encryptors {
        hasher.update(enc.weight_hash());
    }
    hasher.update(bundle.aggregator.weight_hash());
    for atk in &bundle.attackers {
        for (_, net) in atk.iter() {
            hasher.update(net.weight_hash());
        }
    }
    hasher.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ahe::build_models;
    use crate::config::AheConfig;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = AheConfig {
            hidden_dim: 10,
            ciphertext_len: 6,
            conv_channels: 2,
            ..Default::default()
        };
        let bundle = build_models(&cfg, &mut rng::derive(31, &["b"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage.ckpt");
        save_bundle(&bundle, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(bundle_hash(&bundle), bundle_hash(&loaded));
        assert_eq!(loaded.cfg, cfg);
        assert_eq!(loaded.encryptors[1].weight_hash(), bundle.encryptors[1].weight_hash());
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = AheConfig {
            hidden_dim: 8,
            ciphertext_len: 4,
            conv_channels: 2,
            ..Default::default()
        };
        let bundle = build_models(&cfg, &mut rng::derive(32, &["b"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage.ckpt");
        save_bundle(&bundle, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x55;
        std::fs::write(&path, &bytes).unwrap();
        match load_bundle(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("crc"), "{msg}"),
            other => panic!("expected crc error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not-a-ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::Checkpoint(_))));
    }
}
