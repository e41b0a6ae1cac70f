//! Dataset ingestion: IDX image/label archives (plain or gzip) for MNIST and
//! FashionMNIST, the CIFAR-10 binary batches, and a bundled 8x8
//! handwritten-digits fixture that works offline. Files are located under
//! the directory given by `HANLAB_DATA_DIR` (or an explicit path) and their
//! SHA-256 digests are recorded; the well-known archives are checked against
//! the published digests, and a `checksums.json` manifest in the data
//! directory, when present, is enforced.

use crate::config::DatasetId;
use crate::error::{Error, Result};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const DATA_DIR_ENV: &str = "HANLAB_DATA_DIR";

/// SHA-256 digests of the canonical gzip archives.
const KNOWN_DIGESTS: &[(&str, &str)] = &[
    ("train-images-idx3-ubyte.gz", "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609"),
    ("train-labels-idx1-ubyte.gz", "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c"),
    ("t10k-images-idx3-ubyte.gz", "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6"),
    ("t10k-labels-idx1-ubyte.gz", "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6"),
];

#[derive(Debug, Clone, serde::Serialize)]
pub struct FileCheck {
    pub file: String,
    pub sha256: String,
    /// "official", "manifest" or "unverified".
    pub verification: String,
}

/// One split of a dataset: images normalized to [0, 1], flattened per row in
/// channel-major (c, h, w) order, plus labels.
#[derive(Debug, Clone)]
pub struct Split {
    pub images: Array2<f32>,
    pub labels: Vec<u8>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn take(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: DatasetId,
    /// (channels, height, width)
    pub dims: (usize, usize, usize),
    pub classes: usize,
    pub train: Split,
    pub test: Split,
    pub checks: Vec<FileCheck>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::invalid(format!("{}: gzip decode: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0000_0803 {
        return Err(Error::invalid(format!(
            "{}: not an IDX image file (magic mismatch)",
            path.display()
        )));
    }
    let n = be_u32(bytes, 4) as usize;
    let h = be_u32(bytes, 8) as usize;
    let w = be_u32(bytes, 12) as usize;
    let expect = 16 + n * h * w;
    if bytes.len() != expect {
        return Err(Error::invalid(format!(
            "{}: truncated IDX image file ({} bytes, expected {expect})",
            path.display(),
            bytes.len()
        )));
    }
    Ok((n, h, w, bytes[16..].to_vec()))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0000_0801 {
        return Err(Error::invalid(format!(
            "{}: not an IDX label file (magic mismatch)",
            path.display()
        )));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::invalid(format!("{}: truncated IDX label file", path.display())));
    }
    Ok(bytes[8..].to_vec())
}

fn resolve_dir(data_dir: Option<&Path>) -> Result<PathBuf> {
    if let Some(d) = data_dir {
        return Ok(d.to_path_buf());
    }
    match std::env::var(DATA_DIR_ENV) {
        Ok(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no data directory; set {DATA_DIR_ENV} or pass --data-dir"),
        ))),
    }
}

fn find_file(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!(
            "missing dataset file in {} (looked for {}); download the archives into that directory",
            dir.display(),
            names.join(", ")
        ),
    )))
}

fn manifest(dir: &Path) -> Result<Option<BTreeMap<String, String>>> {
    let p = dir.join("checksums.json");
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p)?;
    let map: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("checksums.json: {e}")))?;
    Ok(Some(map))
}

fn check_file(
    path: &Path,
    raw: &[u8],
    manifest: &Option<BTreeMap<String, String>>,
) -> Result<FileCheck> {
    let digest = sha256_hex(raw);
    let name = path.file_name().unwrap().to_string_lossy().to_string();
    if let Some(map) = manifest {
        if let Some(expected) = map.get(&name) {
            if expected != &digest {
                return Err(Error::invalid(format!(
                    "{name}: sha256 {digest} does not match checksums.json entry {expected}"
                )));
            }
            return Ok(FileCheck { file: name, sha256: digest, verification: "manifest".into() });
        }
    }
    let official = KNOWN_DIGESTS.iter().any(|(n, d)| *n == name && *d == digest);
    Ok(FileCheck {
        file: name,
        sha256: digest,
        verification: if official { "official".into() } else { "unverified".into() },
    })
}

fn normalize(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

fn load_idx_pair(dir: &Path, stem: &str) -> Result<(Split, usize, usize, Vec<FileCheck>)> {
    let man = manifest(dir)?;
    let img_path = find_file(dir, &[&format!("{stem}-images-idx3-ubyte.gz"), &format!("{stem}-images-idx3-ubyte"), &format!("{stem}-images.idx3-ubyte")])?;
    let lbl_path = find_file(dir, &[&format!("{stem}-labels-idx1-ubyte.gz"), &format!("{stem}-labels-idx1-ubyte"), &format!("{stem}-labels.idx1-ubyte")])?;
    let img_raw = std::fs::read(&img_path)?;
    let lbl_raw = std::fs::read(&lbl_path)?;
    let checks = vec![
        check_file(&img_path, &img_raw, &man)?,
        check_file(&lbl_path, &lbl_raw, &man)?,
    ];
    let img_bytes = read_maybe_gz(&img_path)?;
    let lbl_bytes = read_maybe_gz(&lbl_path)?;
    let (n, h, w, pixels) = parse_idx_images(&img_bytes, &img_path)?;
    let labels = parse_idx_labels(&lbl_bytes, &lbl_path)?;
    if labels.len() != n {
        return Err(Error::invalid(format!("{stem}: {n} images but {} labels", labels.len())));
    }
    let images = Array2::from_shape_vec((n, h * w), normalize(&pixels))
        .map_err(|e| Error::internal(e.to_string()))?;
    Ok((Split { images, labels }, h, w, checks))
}

fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let man = manifest(dir)?;
    let mut checks = Vec::new();
    let mut read_batch = |name: &str| -> Result<(Vec<f32>, Vec<u8>)> {
        let path = find_file(dir, &[name, &format!("cifar-10-batches-bin/{name}")])?;
        let raw = std::fs::read(&path)?;
        checks.push(check_file(&path, &raw, &man)?);
        const REC: usize = 1 + 3072;
        if raw.len() % REC != 0 {
            return Err(Error::invalid(format!("{name}: bad CIFAR-10 record length")));
        }
        let n = raw.len() / REC;
        let mut images = Vec::with_capacity(n * 3072);
        let mut labels = Vec::with_capacity(n);
        for rec in raw.chunks_exact(REC) {
            labels.push(rec[0]);
            images.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
        }
        Ok((images, labels))
    };

    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let (im, lb) = read_batch(&format!("data_batch_{i}.bin"))?;
        train_images.extend(im);
        train_labels.extend(lb);
    }
    let (test_images, test_labels) = read_batch("test_batch.bin")?;

    let train = Split {
        images: Array2::from_shape_vec((train_labels.len(), 3072), train_images)
            .map_err(|e| Error::internal(e.to_string()))?,
        labels: train_labels,
    };
    let test = Split {
        images: Array2::from_shape_vec((test_labels.len(), 3072), test_images)
            .map_err(|e| Error::internal(e.to_string()))?,
        labels: test_labels,
    };
    Ok(Dataset { id: DatasetId::Cifar10, dims: (3, 32, 32), classes: 10, train, test, checks })
}

/// The bundled 8x8 digits fixture (1,797 images); split deterministically
/// into 1,500 training and 297 test images.
fn load_digits() -> Result<Dataset> {
    static IMAGES: &[u8] = include_bytes!("assets/digits-images.bin");
    static LABELS: &[u8] = include_bytes!("assets/digits-labels.bin");
    let n = LABELS.len();
    let dim = 64;
    if IMAGES.len() != n * dim {
        return Err(Error::internal("bundled digits fixture is malformed"));
    }
    // Deterministic interleaved split keeps both splits class-balanced.
    let mut train_imgs = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_imgs = Vec::new();
    let mut test_labels = Vec::new();
    for i in 0..n {
        let row = normalize(&IMAGES[i * dim..(i + 1) * dim]);
        if i % 6 == 5 {
            test_imgs.extend(row);
            test_labels.push(LABELS[i]);
        } else {
            train_imgs.extend(row);
            train_labels.push(LABELS[i]);
        }
    }
    let checks = vec![
        FileCheck {
            file: "digits-images.bin (bundled)".into(),
            sha256: sha256_hex(IMAGES),
            verification: "bundled".into(),
        },
        FileCheck {
            file: "digits-labels.bin (bundled)".into(),
            sha256: sha256_hex(LABELS),
            verification: "bundled".into(),
        },
    ];
    Ok(Dataset {
        id: DatasetId::Digits,
        dims: (1, 8, 8),
        classes: 10,
        train: Split {
            images: Array2::from_shape_vec((train_labels.len(), dim), train_imgs).unwrap(),
            labels: train_labels,
        },
        test: Split {
            images: Array2::from_shape_vec((test_labels.len(), dim), test_imgs).unwrap(),
            labels: test_labels,
        },
        checks,
    })
}

/// Load a dataset, bounding the split sizes. `data_dir` falls back to the
/// `HANLAB_DATA_DIR` environment variable for the file-backed datasets.
pub fn load_dataset(
    id: DatasetId,
    data_dir: Option<&Path>,
    train_limit: usize,
    test_limit: usize,
) -> Result<Dataset> {
    let mut ds = match id {
        DatasetId::Digits => load_digits()?,
        DatasetId::Mnist | DatasetId::FashionMnist => {
            let dir = resolve_dir(data_dir)?;
            let (train, h, w, mut checks) = load_idx_pair(&dir, "train")?;
            let (test, th, tw, test_checks) = load_idx_pair(&dir, "t10k")?;
            if (h, w) != (th, tw) {
                return Err(Error::invalid("train/test image dimensions differ"));
            }
            checks.extend(test_checks);
            Dataset { id, dims: (1, h, w), classes: 10, train, test, checks }
        }
        DatasetId::Cifar10 => {
            let dir = resolve_dir(data_dir)?;
            load_cifar10(&dir)?
        }
    };
    ds.train = ds.train.take(train_limit);
    ds.test = ds.test.take(test_limit);
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(Error::invalid("dataset splits must be non-empty"));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_digits_load_and_split() {
        let ds = load_dataset(DatasetId::Digits, None, 10_000, 10_000).unwrap();
        assert_eq!(ds.dims, (1, 8, 8));
        assert_eq!(ds.train.len() + ds.test.len(), 1797);
        assert_eq!(ds.test.len(), 299);
        assert!(ds.train.images.iter().all(|v| (0.0..=1.0).contains(v)));
        // Both splits carry every class.
        for split in [&ds.train, &ds.test] {
            let mut seen = [false; 10];
            for &l in &split.labels {
                seen[l as usize] = true;
            }
            assert!(seen.iter().all(|s| *s));
        }
        assert_eq!(ds.checks.len(), 2);
        assert_eq!(ds.checks[0].verification, "bundled");
    }

    #[test]
    fn missing_dataset_gives_io_error_with_hint() {
        let dir = tempfile::tempdir().unwrap();
        match load_dataset(DatasetId::Mnist, Some(dir.path()), 100, 100) {
            Err(Error::Io(e)) => {
                assert!(e.to_string().contains("download"), "{e}");
            }
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn idx_round_trip_with_manifest_verification() {
        let dir = tempfile::tempdir().unwrap();
        // Synthesize a 4-image IDX pair.
        let (n, h, w) = (4usize, 5usize, 3usize);
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(h as u32).to_be_bytes());
        img.extend_from_slice(&(w as u32).to_be_bytes());
        img.extend((0..n * h * w).map(|i| (i % 251) as u8));
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&(n as u32).to_be_bytes());
        lbl.extend([3u8, 1, 4, 1]);
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), &lbl).unwrap();
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), &img).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), &lbl).unwrap();

        let manifest = serde_json::json!({
            "train-images-idx3-ubyte": sha256_hex(&img),
            "train-labels-idx1-ubyte": sha256_hex(&lbl),
        });
        std::fs::write(dir.path().join("checksums.json"), manifest.to_string()).unwrap();

        let ds = load_dataset(DatasetId::Mnist, Some(dir.path()), 100, 100).unwrap();
        assert_eq!(ds.dims, (1, 5, 3));
        assert_eq!(ds.train.labels, vec![3, 1, 4, 1]);
        assert_eq!(ds.checks[0].verification, "manifest");
        assert_eq!(ds.checks[2].verification, "unverified");

        // Corrupt one byte: manifest verification must fail the load.
        let mut bad = img.clone();
        bad[20] ^= 0xff;
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &bad).unwrap();
        assert!(matches!(
            load_dataset(DatasetId::Mnist, Some(dir.path()), 100, 100),
            Err(Error::InvalidArgument(_))
        ));
    }
}
