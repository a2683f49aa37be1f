//! Download helper for the two datasets.
//!
//! Both come from npm package tarballs with pinned checksums. MNIST ships
//! the raw IDX files; Fashion-MNIST ships one JSON array of 0..255 pixel
//! rows per class, which is converted to the same IDX layout.

use std::io::Read;
use std::path::{Path, PathBuf};

use amnesia::data::{parse_idx, serialize_idx, DatasetName, LabeledDataset, NUM_CLASSES};
use amnesia::experiment::atomic_write;
use amnesia::Error;
use serde::Deserialize;
use sha2::{Digest, Sha256};

pub struct Source {
    pub url: &'static str,
    pub sha256: &'static str,
}

pub fn source(name: DatasetName) -> Source {
    match name {
        DatasetName::Mnist => Source {
            url: "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz",
            sha256: "8f87f2d0d9133e6c9f7012d6d26bb05409e7e870a1de21d1a600b8d400cc07ed",
        },
        DatasetName::FashionMnist => Source {
            url: "https://registry.npmjs.org/fashion-mnist/-/fashion-mnist-1.1.0.tgz",
            sha256: "7fe48b6f9470efb6e15354b1b2005d60a544177bd24cf4b5da500e3e83d1f396",
        },
    }
}

// Published checksums of the official MNIST training files.
const MNIST_TRAIN_IMAGES_SHA256: &str = "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db";
const MNIST_TRAIN_LABELS_SHA256: &str = "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5";

const FASHION_IMAGES: usize = 70_000;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn verify(what: &str, bytes: &[u8], expected: &str) -> Result<(), Error> {
    let got = sha256_hex(bytes);
    if got != expected {
        return Err(Error::Corrupt {
            path: PathBuf::from(what),
            message: format!("sha256 {got} does not match the pinned {expected}"),
        });
    }
    Ok(())
}

fn download(url: &str) -> Result<Vec<u8>, Error> {
    let net = |e: ureq::Error| Error::Io {
        path: PathBuf::from(url),
        source: std::io::Error::other(e.to_string()),
    };
    // Use the system trust store so proxies with their own CA keep working.
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .tls_config(
            ureq::tls::TlsConfig::builder()
                .root_certs(ureq::tls::RootCerts::PlatformVerifier)
                .build(),
        )
        .build()
        .into();
    let mut resp = agent.get(url).call().map_err(net)?;
    resp.body_mut()
        .with_config()
        .limit(256 * 1024 * 1024)
        .read_to_vec()
        .map_err(net)
}

/// Every regular file in a gzip tarball, keyed by its path inside the archive.
fn unpack(tarball: &[u8], wanted: impl Fn(&str) -> bool) -> Result<Vec<(String, Vec<u8>)>, Error> {
    let bad = |e: std::io::Error| Error::Corrupt {
        path: PathBuf::from("tarball"),
        message: e.to_string(),
    };
    let mut archive = tar::Archive::new(flate2::read::GzDecoder::new(tarball));
    let mut out = Vec::new();
    for entry in archive.entries().map_err(bad)? {
        let mut entry = entry.map_err(bad)?;
        let name = entry.path().map_err(bad)?.to_string_lossy().into_owned();
        if wanted(&name) {
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(bad)?;
            out.push((name, buf));
        }
    }
    Ok(out)
}

fn take(files: &mut Vec<(String, Vec<u8>)>, name: &str) -> Result<Vec<u8>, Error> {
    let i = files.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Corrupt {
        path: PathBuf::from(name),
        message: "missing from the package tarball".into(),
    })?;
    Ok(files.swap_remove(i).1)
}

#[derive(Deserialize)]
struct ClassFile {
    data: Vec<Vec<u16>>,
}

/// Builds the labeled dataset from the ten per-class JSON files.
pub fn fashion_from_json(files: &[Vec<u8>]) -> Result<LabeledDataset, Error> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (c, bytes) in files.iter().enumerate() {
        let parsed: ClassFile = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            field: format!("clothes/{c}.json"),
            offset: e.column(),
            message: e.to_string(),
        })?;
        for (i, row) in parsed.data.iter().enumerate() {
            // The published files hold a couple of empty placeholder rows.
            if row.is_empty() {
                continue;
            }
            if row.len() != 784 || row.iter().any(|&v| v > 255) {
                return Err(Error::Parse {
                    field: format!("clothes/{c}.json image {i}"),
                    offset: 0,
                    message: format!("expected 784 values in 0..=255, found {}", row.len()),
                });
            }
            images.extend(row.iter().map(|&v| v as f64 / 255.0));
            labels.push(c as u8);
        }
    }
    LabeledDataset::new("fashion-mnist", 28, 28, images, labels)
}

/// Fetches (or reads from `tarball`) one dataset and writes the IDX pair
/// under `root`. Returns the number of examples written.
pub fn fetch(name: DatasetName, root: &Path, tarball: Option<&Path>) -> Result<usize, Error> {
    let src = source(name);
    let bytes = match tarball {
        Some(p) => std::fs::read(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => download(src.url)?,
    };
    verify(src.url, &bytes, src.sha256)?;
    let (img, lab) = match name {
        DatasetName::Mnist => {
            let mut files = unpack(&bytes, |n| n.starts_with("package/data/train-"))?;
            let img = take(&mut files, "package/data/train-images-idx3-ubyte")?;
            let lab = take(&mut files, "package/data/train-labels-idx1-ubyte")?;
            verify("train-images-idx3-ubyte", &img, MNIST_TRAIN_IMAGES_SHA256)?;
            verify("train-labels-idx1-ubyte", &lab, MNIST_TRAIN_LABELS_SHA256)?;
            (img, lab)
        }
        DatasetName::FashionMnist => {
            let mut files = unpack(&bytes, |n| n.starts_with("package/src/clothes/"))?;
            let per_class = (0..NUM_CLASSES)
                .map(|c| take(&mut files, &format!("package/src/clothes/{c}.json")))
                .collect::<Result<Vec<_>, _>>()?;
            let data = fashion_from_json(&per_class)?;
            if data.len() != FASHION_IMAGES {
                return Err(Error::Corrupt {
                    path: PathBuf::from(src.url),
                    message: format!("expected {FASHION_IMAGES} images, found {}", data.len()),
                });
            }
            serialize_idx(&data)
        }
    };
    let parsed = parse_idx(&img, &lab, name.as_str())?;
    atomic_write(&name.image_file(root), &img)?;
    atomic_write(&name.label_file(root), &lab)?;
    Ok(parsed.len())
}
