//! Labeled image datasets: IDX parsing, class partitioning, surrogate sets and
//! a compact on-disk cache.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{SeededRng, Tensor};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 10;
const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const CACHE_MAGIC: &[u8; 8] = b"AMNDSET\0";
const CACHE_VERSION: u32 = 1;

/// Supported datasets and their on-disk layout under the data root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
}

const FASHION_CLASSES: [&str; 10] = [
    "T-shirt/top",
    "Trouser",
    "Pullover",
    "Dress",
    "Coat",
    "Sandal",
    "Shirt",
    "Sneaker",
    "Bag",
    "Ankle boot",
];

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fashion" => Ok(DatasetName::FashionMnist),
            other => Err(Error::config(
                "dataset",
                format!("unknown dataset `{other}` (expected mnist or fashion-mnist)"),
            )),
        }
    }

    pub fn class_name(self, c: usize) -> String {
        match self {
            DatasetName::Mnist => c.to_string(),
            DatasetName::FashionMnist => FASHION_CLASSES.get(c).map_or_else(|| c.to_string(), |s| s.to_string()),
        }
    }

    /// Held-out accuracy the external classifier must reach.
    pub fn classifier_threshold(self) -> f64 {
        match self {
            DatasetName::Mnist => 0.97,
            DatasetName::FashionMnist => 0.85,
        }
    }

    pub fn dir(self, root: &Path) -> PathBuf {
        root.join(self.as_str())
    }

    pub fn image_file(self, root: &Path) -> PathBuf {
        self.dir(root).join("train-images-idx3-ubyte")
    }

    pub fn label_file(self, root: &Path) -> PathBuf {
        self.dir(root).join("train-labels-idx1-ubyte")
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which images stand in for the forgotten class during forgetting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "class")]
pub enum SurrogateKind {
    WhiteNoise,
    EmbedNew(usize),
}

impl SurrogateKind {
    pub fn tag(self) -> &'static str {
        match self {
            SurrogateKind::WhiteNoise => "white-noise",
            SurrogateKind::EmbedNew(_) => "embed-new",
        }
    }
}

/// `N` row-major images of `height × width` pixels in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    name: String,
    height: usize,
    width: usize,
    images: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(name: &str, height: usize, width: usize, images: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let dim = height * width;
        if dim == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if images.len() != labels.len() * dim {
            return Err(Error::shape("dataset images", &[labels.len(), dim], &[images.len() / dim, dim]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            name: name.to_string(),
            height,
            width,
            images,
            labels,
        })
    }

    pub fn empty(name: &str, height: usize, width: usize) -> Self {
        Self {
            name: name.to_string(),
            height,
            width,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_dim();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.image_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        Ok((Tensor::new(vec![indices.len(), d], data)?, labels))
    }

    /// The examples at `indices` as a new dataset.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_dim());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Examples whose label satisfies `keep`, in original order.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.label(i))).collect();
        self.select(&idx)
    }

    /// At most `k` examples per class: the first `k` of each class in order.
    pub fn subset_per_class(&self, k: usize) -> Self {
        let mut seen = [0usize; NUM_CLASSES];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.label(i);
                seen[c] += 1;
                seen[c] <= k
            })
            .collect();
        self.select(&idx)
    }

    /// Concatenation of `self` and `other` (same geometry).
    pub fn concat(&self, other: &LabeledDataset) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "dataset concat",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Same images with every label replaced by `c`.
    pub fn relabeled(&self, c: usize) -> Result<Self> {
        if c >= NUM_CLASSES {
            return Err(Error::invalid(format!("class id {c} out of range")));
        }
        let mut out = self.clone();
        out.labels.iter_mut().for_each(|l| *l = c as u8);
        Ok(out)
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    /// SHA-256 over geometry, labels and pixel bit patterns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update(&self.labels);
        for v in &self.images {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Ten classes of `side × side` images: a fixed random on/off template per
/// class with uniform jitter. Used for tiny end-to-end runs.
pub fn synthetic_dataset(n_per_class: usize, side: usize, seed: u64) -> Result<LabeledDataset> {
    let dim = side * side;
    let mut templates = SeededRng::new(seed, "synthetic-templates");
    let tmpl: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| (0..dim).map(|_| if templates.bernoulli(0.5) { 0.85 } else { 0.1 }).collect())
        .collect();
    let mut rng = SeededRng::new(seed, "synthetic-pixels");
    let mut images = Vec::with_capacity(NUM_CLASSES * n_per_class * dim);
    let mut labels = Vec::with_capacity(NUM_CLASSES * n_per_class);
    for _ in 0..n_per_class {
        for (c, t) in tmpl.iter().enumerate() {
            images.extend(t.iter().map(|&v| (v + rng.uniform_range(-0.1, 0.1)).clamp(0.0, 1.0)));
            labels.push(c as u8);
        }
    }
    LabeledDataset::new("synthetic", side, side, images, labels)
}

// ---- IDX ---------------------------------------------------------------------

fn maybe_gunzip<'a>(bytes: &'a [u8], field: &str) -> Result<std::borrow::Cow<'a, [u8]>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out).map_err(|e| Error::Parse {
            field: field.to_string(),
            offset: 0,
            message: format!("gzip stream: {e}"),
        })?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

fn be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse {
            field: field.to_string(),
            offset,
            message: "truncated header".into(),
        })
}

/// Parses an IDX image file (magic 0x803, `[N, H, W]` u8) and its IDX label
/// file (magic 0x801, `[N]` u8). Gzip input is detected and decompressed.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8], name: &str) -> Result<LabeledDataset> {
    let img = maybe_gunzip(image_bytes, "images")?;
    let lab = maybe_gunzip(label_bytes, "labels")?;
    let magic = be_u32(&img, 0, "images.magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            field: "images.magic".into(),
            offset: 0,
            message: format!("expected 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let n = be_u32(&img, 4, "images.count")? as usize;
    let h = be_u32(&img, 8, "images.rows")? as usize;
    let w = be_u32(&img, 12, "images.cols")? as usize;
    let magic = be_u32(&lab, 0, "labels.magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            field: "labels.magic".into(),
            offset: 0,
            message: format!("expected 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let nl = be_u32(&lab, 4, "labels.count")? as usize;
    if nl != n {
        return Err(Error::Parse {
            field: "labels.count".into(),
            offset: 4,
            message: format!("{nl} labels for {n} images"),
        });
    }
    let need = 16 + n * h * w;
    if img.len() != need {
        return Err(Error::Parse {
            field: "images.pixels".into(),
            offset: img.len().min(need),
            message: format!("payload is {} bytes, header implies {}", img.len(), need),
        });
    }
    if lab.len() != 8 + n {
        return Err(Error::Parse {
            field: "labels.values".into(),
            offset: lab.len().min(8 + n),
            message: format!("payload is {} bytes, header implies {}", lab.len(), 8 + n),
        });
    }
    let labels = lab[8..].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Parse {
            field: "labels.values".into(),
            offset: 8 + pos,
            message: format!("label {} outside 0..{NUM_CLASSES}", labels[pos]),
        });
    }
    if h == 0 || w == 0 {
        return Err(Error::Parse {
            field: "images.rows".into(),
            offset: 8,
            message: "zero image dimension".into(),
        });
    }
    let images = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    LabeledDataset::new(name, h, w, images, labels)
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Raw IDX encodings `(images, labels)`; pixels are quantized to `round(255·v)`.
pub fn serialize_idx(data: &LabeledDataset) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + data.images.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img.extend_from_slice(&(data.height as u32).to_be_bytes());
    img.extend_from_slice(&(data.width as u32).to_be_bytes());
    img.extend(data.images.iter().map(|&v| quantize(v)));
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend_from_slice(&data.labels);
    (img, lab)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a dataset from `<root>/<name>/train-{images-idx3,labels-idx1}-ubyte`
/// (optionally `.gz`).
pub fn load_dataset(root: &Path, name: DatasetName) -> Result<LabeledDataset> {
    let pick = |p: PathBuf| -> Result<PathBuf> {
        if p.exists() {
            return Ok(p);
        }
        let gz = PathBuf::from(format!("{}.gz", p.display()));
        if gz.exists() {
            return Ok(gz);
        }
        Err(Error::MissingPrerequisite {
            path: p,
            hint: format!("run `amnesia fetch-data --dataset {name}` or point AMNESIA_DATA_ROOT at the IDX files"),
        })
    };
    let images = read_file(&pick(name.image_file(root))?)?;
    let labels = read_file(&pick(name.label_file(root))?)?;
    parse_idx(&images, &labels, name.as_str())
}

// ---- partition ---------------------------------------------------------------

/// The split of a dataset into the forgotten class, the retained classes and
/// the class learned later.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPartition {
    pub d_f: LabeledDataset,
    pub d_r: LabeledDataset,
    pub d_new: LabeledDataset,
    pub c_f: usize,
    pub c_new: usize,
    pub c_r: Vec<usize>,
}

impl DataPartition {
    pub fn n_f(&self) -> usize {
        self.d_f.len()
    }

    pub fn n_r(&self) -> usize {
        self.d_r.len()
    }

    pub fn n_new(&self) -> usize {
        self.d_new.len()
    }

    /// `D_f ∪ D_r`: everything except the withheld class, in original order
    /// within each subset.
    pub fn pretrain_set(&self) -> Result<LabeledDataset> {
        self.d_f.concat(&self.d_r)
    }
}

pub fn check_pair(c_f: usize, c_new: usize) -> Result<()> {
    if c_f >= NUM_CLASSES {
        return Err(Error::config("c_f", format!("class id {c_f} outside 0..{NUM_CLASSES}")));
    }
    if c_new >= NUM_CLASSES {
        return Err(Error::config("c_new", format!("class id {c_new} outside 0..{NUM_CLASSES}")));
    }
    if c_f == c_new {
        return Err(Error::config("c_new", "forgotten and new class must differ"));
    }
    Ok(())
}

pub fn partition(dataset: &LabeledDataset, c_f: usize, c_new: usize) -> Result<DataPartition> {
    check_pair(c_f, c_new)?;
    let c_r: Vec<usize> = (0..NUM_CLASSES).filter(|&c| c != c_f && c != c_new).collect();
    Ok(DataPartition {
        d_f: dataset.filter(|c| c == c_f),
        d_r: dataset.filter(|c| c != c_f && c != c_new),
        d_new: dataset.filter(|c| c == c_new),
        c_f,
        c_new,
        c_r,
    })
}

// ---- surrogates ----------------------------------------------------------------

/// `n` images labeled `c_f`: i.i.d. uniform pixels for white noise, or draws
/// from `source` (without replacement while possible) for `EmbedNew`.
pub fn make_surrogate(
    kind: SurrogateKind,
    n: usize,
    c_f: usize,
    height: usize,
    width: usize,
    source: Option<&LabeledDataset>,
    rng: &mut SeededRng,
) -> Result<LabeledDataset> {
    if c_f >= NUM_CLASSES {
        return Err(Error::invalid(format!("class id {c_f} out of range")));
    }
    let name = format!("surrogate-{}", kind.tag());
    match kind {
        SurrogateKind::WhiteNoise => {
            let images = rng.uniform_vec(n * height * width);
            LabeledDataset::new(&name, height, width, images, vec![c_f as u8; n])
        }
        SurrogateKind::EmbedNew(c_new) => {
            if c_new == c_f {
                return Err(Error::config("surrogate", "EmbedNew must name a class other than c_f"));
            }
            let source = source
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::invalid("EmbedNew surrogate needs a non-empty source dataset"))?;
            if source.height != height || source.width != width {
                return Err(Error::shape("surrogate source", &[height, width], &[source.height, source.width]));
            }
            let mut idx = Vec::with_capacity(n);
            while idx.len() < n {
                let mut round: Vec<usize> = (0..source.len()).collect();
                rng.shuffle(&mut round);
                idx.extend(round.into_iter().take(n - idx.len()));
            }
            Ok(source.select(&idx).relabeled(c_f)?.with_name(&name))
        }
    }
}

// ---- cache ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub name: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// SHA-256 of the payload (labels then quantized pixels).
    pub checksum: String,
}

/// Compact binary form: magic, version, JSON header, then labels and
/// 8-bit pixels.
pub fn encode_cache(data: &LabeledDataset) -> Vec<u8> {
    let mut payload = Vec::with_capacity(data.len() + data.images.len());
    payload.extend_from_slice(&data.labels);
    payload.extend(data.images.iter().map(|&v| quantize(v)));
    let header = CacheHeader {
        name: data.name.clone(),
        count: data.len(),
        height: data.height,
        width: data.width,
        checksum: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<(LabeledDataset, CacheHeader)> {
    let corrupt = |offset: usize, message: &str| Error::Parse {
        field: "dataset-cache".into(),
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(corrupt(8, &format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let hend = 16 + hlen;
    let header: CacheHeader = bytes
        .get(16..hend)
        .ok_or_else(|| corrupt(16, "truncated header"))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| corrupt(16, &e.to_string())))?;
    let payload = &bytes[hend..];
    let dim = header.height * header.width;
    if payload.len() != header.count * (1 + dim) {
        return Err(corrupt(hend, "payload length does not match header"));
    }
    if hex::encode(Sha256::digest(payload)) != header.checksum {
        return Err(corrupt(hend, "checksum mismatch"));
    }
    let labels = payload[..header.count].to_vec();
    let images = payload[header.count..].iter().map(|&b| b as f64 / 255.0).collect();
    let data = LabeledDataset::new(&header.name, header.height, header.width, images, labels)?;
    Ok((data, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 255, 128, 64]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 1, 7];
        (img, lab)
    }

    #[test]
    fn parses_hand_built_file() {
        let (img, lab) = fixture();
        let d = parse_idx(&img, &lab, "t").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.image(0), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(d.label(0), 7);
    }

    #[test]
    fn gzip_is_sniffed() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let (img, lab) = fixture();
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&img).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx(&gz, &lab, "t").unwrap(), parse_idx(&img, &lab, "t").unwrap());
    }

    #[test]
    fn parse_errors_name_field_and_offset() {
        let (img, lab) = fixture();
        match parse_idx(&img, &img, "t") {
            Err(Error::Parse { field, offset, .. }) => {
                assert_eq!(field, "labels.magic");
                assert_eq!(offset, 0);
            }
            other => panic!("{other:?}"),
        }
        match parse_idx(&img[..18], &lab, "t") {
            Err(Error::Parse { field, offset, .. }) => {
                assert_eq!(field, "images.pixels");
                assert_eq!(offset, 18);
            }
            other => panic!("{other:?}"),
        }
        let mut two = lab.clone();
        two[7] = 2;
        two.push(1);
        assert!(matches!(parse_idx(&img, &two, "t"), Err(Error::Parse { ref field, .. }) if field == "labels.count"));
        let mut bad = lab.clone();
        bad[8] = 12;
        assert!(matches!(parse_idx(&img, &bad, "t"), Err(Error::Parse { offset: 8, .. })));
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let (img, lab) = fixture();
        let d = parse_idx(&img, &lab, "t").unwrap();
        let bytes = encode_cache(&d);
        let (back, header) = decode_cache(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(header.count, 1);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(decode_cache(&bad).is_err());
    }

    #[test]
    fn partition_rejects_bad_pairs() {
        let d = LabeledDataset::empty("t", 2, 2);
        assert!(partition(&d, 3, 3).is_err());
        assert!(partition(&d, 10, 3).is_err());
    }

    #[test]
    fn embed_new_without_source_fails() {
        let mut rng = SeededRng::new(0, "s");
        assert!(make_surrogate(SurrogateKind::EmbedNew(1), 3, 9, 2, 2, None, &mut rng).is_err());
        let empty = LabeledDataset::empty("t", 2, 2);
        assert!(make_surrogate(SurrogateKind::EmbedNew(1), 3, 9, 2, 2, Some(&empty), &mut rng).is_err());
        assert!(make_surrogate(SurrogateKind::EmbedNew(9), 3, 9, 2, 2, Some(&empty), &mut rng).is_err());
    }

    #[test]
    fn subset_keeps_first_k_per_class() {
        let d = LabeledDataset::new("t", 1, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4], vec![1, 2, 1, 1, 2]).unwrap();
        let s = d.subset_per_class(2);
        assert_eq!(s.labels(), &[1, 2, 1, 2]);
        assert_eq!(s.images(), &[0.0, 0.1, 0.2, 0.4]);
    }
}
