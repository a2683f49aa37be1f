//! Experiment orchestration: configuration, the on-disk layout with
//! provenance sidecars, and the staged commands the CLI exposes.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{derive_seed, streams, SeededRng, Tensor};
use crate::cvae::{ConditionalVAE, CvaeConfig, SampleMode};
use crate::data::{load_dataset, make_surrogate, partition, DataPartition, DatasetName, LabeledDataset, SurrogateKind, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{
    build_report, class_probabilities, delta_matrix, exact_mean, rows_to_csv, train_classifier, Classifier,
    ClassifierConfig, DeltaMatrix, EvalReport, ReportRow,
};
use crate::fisher::{estimate_fim, FisherDiagonal, DEFAULT_FISHER_SAMPLES};
use crate::train::{forget, learn_new, pretrain_on, Method, RetainedSource, StageRecord, TrainConfig};

pub const DATA_ROOT_ENV: &str = "AMNESIA_DATA_ROOT";

// ---- configuration -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surrogate {
    WhiteNoise,
    EmbedNew,
}

impl Surrogate {
    pub fn kind(self, c_new: usize) -> SurrogateKind {
        match self {
            Surrogate::WhiteNoise => SurrogateKind::WhiteNoise,
            Surrogate::EmbedNew => SurrogateKind::EmbedNew(c_new),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Surrogate::WhiteNoise => "white-noise",
            Surrogate::EmbedNew => "embed-new",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "white-noise" => Ok(Surrogate::WhiteNoise),
            "embed-new" => Ok(Surrogate::EmbedNew),
            _ => Err(Error::config("surrogate", format!("unknown surrogate `{s}` (white-noise, embed-new)"))),
        }
    }
}

/// Source of retained-class examples while learning the new class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetainedData {
    #[default]
    Real,
    Replay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Forget,
    Learn,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Forget => "forget",
            Stage::Learn => "learn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "forget" => Ok(Stage::Forget),
            "learn" => Ok(Stage::Learn),
            _ => Err(Error::config("stage", format!("unknown stage `{s}` (pretrain, forget, learn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub data_root: Option<PathBuf>,
    pub out: PathBuf,
    pub c_f: usize,
    pub c_new: usize,
    pub surrogate: Surrogate,
    pub method: Method,
    pub use_forgetting: bool,
    pub seeds: Vec<u64>,
    pub subset_per_class: Option<usize>,
    pub model: CvaeConfig,
    pub pretrain: TrainConfig,
    pub forget: TrainConfig,
    pub learn: TrainConfig,
    pub learn_retained: RetainedData,
    pub fisher_samples: usize,
    pub eval_samples: usize,
    pub classifier: ClassifierConfig,
    /// `(c_f, c_new)` pairs for `matrix` and `sweep`.
    pub pairs: Vec<(usize, usize)>,
    pub methods: Vec<Method>,
    pub surrogates: Vec<Surrogate>,
    pub grid_columns: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetName::Mnist,
            data_root: None,
            out: PathBuf::from("runs"),
            c_f: 9,
            c_new: 1,
            surrogate: Surrogate::EmbedNew,
            method: Method::FineTune,
            use_forgetting: true,
            seeds: vec![0],
            subset_per_class: None,
            model: CvaeConfig::default(),
            pretrain: TrainConfig::with_epochs(30),
            forget: TrainConfig::with_epochs(10),
            learn: TrainConfig::with_epochs(15),
            learn_retained: RetainedData::Real,
            fisher_samples: DEFAULT_FISHER_SAMPLES,
            eval_samples: 1000,
            classifier: ClassifierConfig::default(),
            pairs: vec![(9, 1), (9, 2), (8, 2), (8, 1)],
            methods: vec![Method::FineTune, Method::Ewc],
            surrogates: vec![Surrogate::WhiteNoise, Surrogate::EmbedNew],
            grid_columns: 8,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub subset_per_class: Option<usize>,
    pub data_root: Option<PathBuf>,
    pub dataset: Option<DatasetName>,
    pub c_f: Option<usize>,
    pub c_new: Option<usize>,
    pub surrogate: Option<Surrogate>,
    pub method: Option<Method>,
    pub use_forgetting: Option<bool>,
}

/// The four (c_f, c_new) settings reported per dataset in the reference tables.
pub fn reference_pairs(dataset: DatasetName) -> Vec<(usize, usize)> {
    match dataset {
        DatasetName::Mnist => vec![(9, 1), (9, 2), (8, 2), (8, 1)],
        DatasetName::FashionMnist => vec![(9, 0), (9, 1), (8, 1), (8, 0)],
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let offset = e.span().map(|s| s.start).unwrap_or(0);
            Error::Parse {
                field: "config".into(),
                offset,
                message: e.message().to_string(),
            }
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(k) = o.subset_per_class {
            self.subset_per_class = Some(k);
        }
        if let Some(p) = &o.data_root {
            self.data_root = Some(p.clone());
        }
        if let Some(d) = o.dataset {
            self.dataset = d;
        }
        if let Some(c) = o.c_f {
            self.c_f = c;
        }
        if let Some(c) = o.c_new {
            self.c_new = c;
        }
        if let Some(s) = o.surrogate {
            self.surrogate = s;
        }
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(u) = o.use_forgetting {
            self.use_forgetting = u;
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::data::check_pair(self.c_f, self.c_new).map_err(|e| Error::config("c_f/c_new", e.to_string()))?;
        for &(f, n) in &self.pairs {
            crate::data::check_pair(f, n).map_err(|e| Error::config("pairs", e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.subset_per_class == Some(0) {
            return Err(Error::config("subset_per_class", "must be at least 1"));
        }
        self.model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        if self.model.num_classes != NUM_CLASSES {
            return Err(Error::config("model.num_classes", format!("must be {NUM_CLASSES}")));
        }
        self.pretrain.validate("pretrain")?;
        self.forget.validate("forget")?;
        self.learn.validate("learn")?;
        self.classifier.validate()?;
        if self.fisher_samples == 0 {
            return Err(Error::config("fisher_samples", "must be at least 1"));
        }
        if self.eval_samples == 0 {
            return Err(Error::config("eval_samples", "must be at least 1"));
        }
        if self.grid_columns == 0 {
            return Err(Error::config("grid_columns", "must be at least 1"));
        }
        if self.methods.is_empty() || self.surrogates.is_empty() {
            return Err(Error::config("methods/surrogates", "must not be empty"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// `config.data_root`, then the environment variable, then `./data`.
pub fn resolve_data_root(config: &ExperimentConfig) -> PathBuf {
    config
        .data_root
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

// ---- files and provenance --------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: String,
    pub config_hash: String,
    /// Content hashes of the files and data this output was derived from.
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub output_hash: String,
    pub tool: String,
    pub spec: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<StageRecord>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".prov.json");
    PathBuf::from(s)
}

pub fn read_provenance(path: &Path) -> Result<Provenance> {
    let p = sidecar_path(path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: p,
        message: e.to_string(),
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() && sidecar_path(path).is_file() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        })
    }
}

fn load_model(path: &Path) -> Result<(ConditionalVAE, String)> {
    let bytes = read_bytes(path)?;
    let hash = sha256_hex(&bytes);
    let (m, _) = ConditionalVAE::from_bytes(&bytes).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((m, hash))
}

/// What a cached stage did.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub path: PathBuf,
    pub skipped: bool,
}

struct Pending<'a, S: Serialize> {
    kind: &'a str,
    path: PathBuf,
    spec: &'a S,
    inputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
}

impl<S: Serialize> Pending<'_, S> {
    fn config_hash(&self) -> String {
        let body = serde_json::json!({ "kind": self.kind, "spec": self.spec, "inputs": self.inputs });
        sha256_hex(body.to_string().as_bytes())
    }
}

// ---- the experiment ------------------------------------------------------------------

/// Loaded configuration plus lazily loaded data; all commands go through it.
pub struct Experiment {
    config: ExperimentConfig,
    data_root: PathBuf,
    force: bool,
    verbose: bool,
    full: OnceCell<LabeledDataset>,
    train: OnceCell<(LabeledDataset, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct DataSpec {
    dataset: DatasetName,
    subset_per_class: Option<usize>,
}

#[derive(Serialize)]
struct PretrainSpec<'a> {
    data: DataSpec,
    c_new: usize,
    model: &'a CvaeConfig,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct FisherSpec {
    classes: Vec<usize>,
    samples: usize,
}

#[derive(Serialize)]
struct ForgetSpec<'a> {
    data: DataSpec,
    c_f: usize,
    c_new: usize,
    surrogate: SurrogateKind,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct LearnSpec<'a> {
    data: DataSpec,
    c_f: usize,
    c_new: usize,
    forgetting: Option<Surrogate>,
    method: Method,
    retained: RetainedData,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct EvalSpec<'a> {
    stage: Stage,
    dataset: DatasetName,
    c_f: usize,
    c_new: usize,
    method: &'a str,
    surrogate: &'a str,
    samples: usize,
}

#[derive(Serialize)]
struct ClassifierSpec<'a> {
    dataset: DatasetName,
    threshold: f64,
    config: &'a ClassifierConfig,
}

/// Report file contents: the full per-class report plus its CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredReport {
    pub report: EvalReport,
    pub row: ReportRow,
}

/// One arm of a pipeline: which stage, and for the learn stage whether the
/// forgetting stage came first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub stage: Stage,
    pub forgetting: Option<Surrogate>,
    pub method: Option<Method>,
}

impl Arm {
    pub fn pretrained() -> Self {
        Self {
            stage: Stage::Pretrain,
            forgetting: None,
            method: None,
        }
    }

    pub fn forgotten(s: Surrogate) -> Self {
        Self {
            stage: Stage::Forget,
            forgetting: Some(s),
            method: None,
        }
    }

    pub fn learned(method: Method, forgetting: Option<Surrogate>) -> Self {
        Self {
            stage: Stage::Learn,
            forgetting,
            method: Some(method),
        }
    }

    pub fn method_tag(&self) -> &'static str {
        self.method.map(Method::tag).unwrap_or("none")
    }

    pub fn surrogate_tag(&self) -> &'static str {
        self.forgetting.map(Surrogate::tag).unwrap_or("none")
    }
}

/// Per-row statistics of a rendered sample grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub class: usize,
    /// Mean over the row's images of the per-image pixel standard deviation.
    pub pixel_std: f64,
    /// Same statistic over real dataset images of this class.
    pub reference_pixel_std: f64,
    /// Mean classifier probability of the row's class over the row's images.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub width: usize,
    pub height: usize,
    pub c_f: usize,
    pub c_new: usize,
    pub rows: Vec<GridRow>,
}

pub const GRID_MARGIN: usize = 2;

fn pixel_std(img: &[f64]) -> f64 {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    (img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::invalid(format!("png header: {e}")))?;
        w.write_image_data(rgb)
            .map_err(|e| Error::invalid(format!("png data: {e}")))?;
    }
    atomic_write(path, &out)?;
    Ok(out)
}

impl Experiment {
    pub fn new(config: ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let data_root = resolve_data_root(&config);
        Ok(Self {
            config,
            data_root,
            force,
            verbose: false,
            full: OnceCell::new(),
            train: OnceCell::new(),
        })
    }

    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn data_spec(&self) -> DataSpec {
        DataSpec {
            dataset: self.config.dataset,
            subset_per_class: self.config.subset_per_class,
        }
    }

    // ---- data

    fn full_dataset(&self) -> Result<&LabeledDataset> {
        if let Some(d) = self.full.get() {
            return Ok(d);
        }
        let d = load_dataset(&self.data_root, self.config.dataset)?;
        if d.image_dim() != self.config.model.input_dim {
            return Err(Error::config(
                "model.input_dim",
                format!("dataset images have {} pixels", d.image_dim()),
            ));
        }
        Ok(self.full.get_or_init(|| d))
    }

    /// Training data after the per-class cap, with its content hash.
    fn train_dataset(&self) -> Result<(&LabeledDataset, &str)> {
        if self.train.get().is_none() {
            let full = self.full_dataset()?;
            let d = match self.config.subset_per_class {
                Some(k) => full.subset_per_class(k),
                None => full.clone(),
            };
            let h = d.content_hash();
            let _ = self.train.set((d, h));
        }
        let (d, h) = self.train.get().expect("initialized above");
        Ok((d, h.as_str()))
    }

    fn partition(&self, c_f: usize, c_new: usize) -> Result<DataPartition> {
        partition(self.train_dataset()?.0, c_f, c_new)
    }

    // ---- layout

    fn root(&self) -> PathBuf {
        let tag = match self.config.subset_per_class {
            Some(k) => format!("{}-k{k}", self.config.dataset),
            None => self.config.dataset.to_string(),
        };
        self.config.out.join(tag)
    }

    pub fn pretrain_path(&self, c_new: usize, seed: u64) -> PathBuf {
        self.root().join("pretrain").join(format!("new{c_new}-s{seed}.ckpt"))
    }

    pub fn forget_path(&self, c_f: usize, c_new: usize, s: Surrogate, seed: u64) -> PathBuf {
        self.root()
            .join("forget")
            .join(format!("f{c_f}-new{c_new}-{}-s{seed}.ckpt", s.tag()))
    }

    pub fn learn_path(&self, c_f: usize, c_new: usize, forgetting: Option<Surrogate>, method: Method, seed: u64) -> PathBuf {
        let pm = forgetting.map(Surrogate::tag).unwrap_or("nopm");
        self.root()
            .join("learn")
            .join(format!("f{c_f}-new{c_new}-{pm}-{}-s{seed}.ckpt", method.tag()))
    }

    fn fisher_path(&self, model: &Path, c_f: usize) -> PathBuf {
        let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        let stage = model
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or("stage");
        self.root().join("fisher").join(format!("{stage}-{stem}-cr{c_f}.fim"))
    }

    pub fn arm_path(&self, c_f: usize, c_new: usize, arm: Arm, seed: u64) -> Result<PathBuf> {
        Ok(match (arm.stage, arm.forgetting, arm.method) {
            (Stage::Pretrain, _, _) => self.pretrain_path(c_new, seed),
            (Stage::Forget, Some(s), _) => self.forget_path(c_f, c_new, s, seed),
            (Stage::Learn, f, Some(m)) => self.learn_path(c_f, c_new, f, m, seed),
            _ => return Err(Error::invalid("incomplete arm description")),
        })
    }

    pub fn report_path(&self, c_f: usize, c_new: usize, arm: Arm, seed: u64) -> Result<PathBuf> {
        let ckpt = self.arm_path(c_f, c_new, arm, seed)?;
        let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
        let name = match arm.stage {
            Stage::Pretrain => format!("pretrain-f{c_f}-{stem}.json"),
            s => format!("{}-{stem}.json", s.tag()),
        };
        Ok(self.root().join("reports").join(name))
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.config
            .out
            .join("classifiers")
            .join(format!("{}.cls", self.config.dataset))
    }

    // ---- cached execution

    /// Skips when an output from the same spec and inputs exists; refuses to
    /// replace one from a different spec unless forced.
    fn cached<S: Serialize>(
        &self,
        job: Pending<'_, S>,
        produce: impl FnOnce(&Provenance) -> Result<(Vec<u8>, Option<StageRecord>)>,
    ) -> Result<StageOutcome> {
        let config_hash = job.config_hash();
        let sidecar = sidecar_path(&job.path);
        if !self.force && job.path.is_file() && sidecar.is_file() {
            let prov = read_provenance(&job.path)?;
            let actual = sha256_hex(&read_bytes(&job.path)?);
            if prov.config_hash == config_hash && prov.output_hash == actual {
                self.log(format!("up to date: {}", job.path.display()));
                return Ok(StageOutcome {
                    path: job.path,
                    skipped: true,
                });
            }
            return Err(Error::config(
                "out",
                format!(
                    "{} exists from a different configuration or was modified; pass --force to replace it",
                    job.path.display()
                ),
            ));
        }
        self.log(format!("running {}: {}", job.kind, job.path.display()));
        let mut prov = Provenance {
            kind: job.kind.to_string(),
            config_hash,
            inputs: job.inputs,
            seeds: job.seeds,
            output_hash: String::new(),
            tool: format!("amnesia {}", env!("CARGO_PKG_VERSION")),
            spec: serde_json::to_value(job.spec)?,
            record: None,
        };
        let (bytes, record) = produce(&prov)?;
        prov.output_hash = sha256_hex(&bytes);
        prov.record = record;
        atomic_write(&job.path, &bytes)?;
        atomic_write(&sidecar, serde_json::to_string_pretty(&prov)?.as_bytes())?;
        Ok(StageOutcome {
            path: job.path,
            skipped: false,
        })
    }

    fn checkpoint_meta(prov: &Provenance) -> serde_json::Value {
        serde_json::json!({
            "kind": prov.kind,
            "config_hash": prov.config_hash,
            "inputs": prov.inputs,
            "seeds": prov.seeds,
        })
    }

    fn retained_classes(c_f: usize, c_new: usize) -> Vec<usize> {
        (0..NUM_CLASSES).filter(|&c| c != c_f && c != c_new).collect()
    }

    // ---- stages

    pub fn run_pretrain(&self, c_new: usize, seed: u64) -> Result<StageOutcome> {
        let (data, data_hash) = self.train_dataset()?;
        let mut cfg = self.config.pretrain.clone();
        cfg.seed = derive_seed(seed, "pretrain");
        let spec = PretrainSpec {
            data: self.data_spec(),
            c_new,
            model: &self.config.model,
            train: &cfg,
        };
        let job = Pending {
            kind: "pretrain",
            path: self.pretrain_path(c_new, seed),
            spec: &spec,
            inputs: BTreeMap::from([("data".to_string(), data_hash.to_string())]),
            seeds: BTreeMap::from([("experiment".to_string(), seed), ("stage".to_string(), cfg.seed)]),
        };
        self.cached(job, |prov| {
            let train = data.filter(|l| l != c_new);
            let (m, rec) = pretrain_on(&train, &self.config.model, &cfg)?;
            Ok((m.to_bytes(Self::checkpoint_meta(prov)), Some(rec)))
        })
    }

    /// Fisher diagonal of the checkpoint at `model_path` over the classes
    /// retained for `(c_f, c_new)`.
    fn fisher_for(&self, model_path: &Path, model: &ConditionalVAE, model_hash: &str, c_f: usize, c_new: usize, seed: u64) -> Result<FisherDiagonal> {
        let classes = Self::retained_classes(c_f, c_new);
        let stage_seed = derive_seed(seed, &format!("fisher/{}", model_hash));
        let spec = FisherSpec {
            classes: classes.clone(),
            samples: self.config.fisher_samples,
        };
        let job = Pending {
            kind: "fisher",
            path: self.fisher_path(model_path, c_f),
            spec: &spec,
            inputs: BTreeMap::from([("model".to_string(), model_hash.to_string())]),
            seeds: BTreeMap::from([("experiment".to_string(), seed), ("stage".to_string(), stage_seed)]),
        };
        let out = self.cached(job, |_| {
            let mut rng = SeededRng::new(stage_seed, streams::FISHER);
            let f = estimate_fim(model, &classes, self.config.fisher_samples, &mut rng)?;
            Ok((f.to_bytes(), None))
        })?;
        FisherDiagonal::from_bytes(&read_bytes(&out.path)?).map_err(|e| Error::Corrupt {
            path: out.path.clone(),
            message: e.to_string(),
        })
    }

    pub fn run_forget(&self, c_f: usize, c_new: usize, surrogate: Surrogate, seed: u64) -> Result<StageOutcome> {
        let pre_path = self.pretrain_path(c_new, seed);
        require(&pre_path, "run `amnesia pretrain` with the same dataset, c_new and seed first")?;
        let (model, model_hash) = load_model(&pre_path)?;
        let p = self.partition(c_f, c_new)?;
        let (_, data_hash) = self.train_dataset()?;
        let mut cfg = self.config.forget.clone();
        cfg.seed = derive_seed(seed, "forget");
        let kind = surrogate.kind(c_new);
        let spec = ForgetSpec {
            data: self.data_spec(),
            c_f,
            c_new,
            surrogate: kind,
            train: &cfg,
        };
        let path = self.forget_path(c_f, c_new, surrogate, seed);
        let mut inputs = BTreeMap::from([
            ("data".to_string(), data_hash.to_string()),
            ("pretrain".to_string(), model_hash.clone()),
        ]);
        inputs.insert("fisher_samples".into(), self.config.fisher_samples.to_string());
        let job = Pending {
            kind: "forget",
            path,
            spec: &spec,
            inputs,
            seeds: BTreeMap::from([("experiment".to_string(), seed), ("stage".to_string(), cfg.seed)]),
        };
        self.cached(job, |prov| {
            let fisher = self.fisher_for(&pre_path, &model, &model_hash, c_f, c_new, seed)?;
            let (h, w) = (self.config.model.image_height, self.config.model.image_width);
            let mut rng = SeededRng::new(cfg.seed, streams::SURROGATE);
            let surrogate_set = make_surrogate(kind, p.n_f(), c_f, h, w, Some(&p.d_new), &mut rng)?;
            let (m, rec) = forget(&model, c_f, &p.c_r, &surrogate_set, &fisher, &cfg)?;
            Ok((m.to_bytes(Self::checkpoint_meta(prov)), Some(rec)))
        })
    }

    pub fn run_learn(&self, c_f: usize, c_new: usize, forgetting: Option<Surrogate>, method: Method, seed: u64) -> Result<StageOutcome> {
        let start_path = match forgetting {
            Some(s) => {
                let fp = self.forget_path(c_f, c_new, s, seed);
                require(&self.pretrain_path(c_new, seed), "run `amnesia pretrain` first")?;
                require(&fp, "run `amnesia forget` with the same pair, surrogate and seed first")?;
                fp
            }
            None => {
                let pp = self.pretrain_path(c_new, seed);
                require(&pp, "run `amnesia pretrain` with the same dataset, c_new and seed first")?;
                pp
            }
        };
        let (model, model_hash) = load_model(&start_path)?;
        let p = self.partition(c_f, c_new)?;
        let (_, data_hash) = self.train_dataset()?;
        let mut cfg = self.config.learn.clone();
        cfg.seed = derive_seed(seed, "learn");
        let spec = LearnSpec {
            data: self.data_spec(),
            c_f,
            c_new,
            forgetting,
            method,
            retained: self.config.learn_retained,
            train: &cfg,
        };
        let mut inputs = BTreeMap::from([
            ("data".to_string(), data_hash.to_string()),
            ("start".to_string(), model_hash.clone()),
        ]);
        if method == Method::Ewc {
            inputs.insert("fisher_samples".into(), self.config.fisher_samples.to_string());
        }
        let job = Pending {
            kind: "learn",
            path: self.learn_path(c_f, c_new, forgetting, method, seed),
            spec: &spec,
            inputs,
            seeds: BTreeMap::from([("experiment".to_string(), seed), ("stage".to_string(), cfg.seed)]),
        };
        self.cached(job, |prov| {
            let fisher = match method {
                Method::Ewc => Some(self.fisher_for(&start_path, &model, &model_hash, c_f, c_new, seed)?),
                Method::FineTune => None,
            };
            let retained = match self.config.learn_retained {
                RetainedData::Real => RetainedSource::Real(&p.d_r),
                RetainedData::Replay => RetainedSource::Replay(&p.c_r),
            };
            let (m, rec) = learn_new(&model, &p.d_new, retained, method, fisher.as_ref(), &cfg)?;
            Ok((m.to_bytes(Self::checkpoint_meta(prov)), Some(rec)))
        })
    }

    // ---- evaluation

    /// Trains the shared classifier on the full dataset once and loads it.
    pub fn classifier(&self) -> Result<Classifier> {
        let data = self.full_dataset()?;
        let threshold = self.config.dataset.classifier_threshold();
        let spec = ClassifierSpec {
            dataset: self.config.dataset,
            threshold,
            config: &self.config.classifier,
        };
        let job = Pending {
            kind: "classifier",
            path: self.classifier_path(),
            spec: &spec,
            inputs: BTreeMap::from([("data".to_string(), data.content_hash())]),
            seeds: BTreeMap::from([("classifier".to_string(), self.config.classifier.seed)]),
        };
        let out = self.cached(job, |prov| {
            let cls = train_classifier(data, threshold, &self.config.classifier)?;
            self.log(format!("classifier held-out accuracy {:.4}", cls.accuracy()));
            Ok((cls.to_bytes(Self::checkpoint_meta(prov)), None))
        })?;
        let (cls, _) = Classifier::from_bytes(&read_bytes(&out.path)?).map_err(|e| Error::Corrupt {
            path: out.path.clone(),
            message: e.to_string(),
        })?;
        Ok(cls)
    }

    pub fn run_eval(&self, c_f: usize, c_new: usize, arm: Arm, seed: u64, classifier: &Classifier) -> Result<StoredReport> {
        let ckpt = self.arm_path(c_f, c_new, arm, seed)?;
        require(&ckpt, &format!("run `amnesia {}` for this configuration first", arm.stage.tag()))?;
        let (model, model_hash) = load_model(&ckpt)?;
        let cls_hash = sha256_hex(&read_bytes(&self.classifier_path())?);
        let eval_seed = derive_seed(seed, "eval");
        let spec = EvalSpec {
            stage: arm.stage,
            dataset: self.config.dataset,
            c_f,
            c_new,
            method: arm.method_tag(),
            surrogate: arm.surrogate_tag(),
            samples: self.config.eval_samples,
        };
        let path = self.report_path(c_f, c_new, arm, seed)?;
        let job = Pending {
            kind: "eval",
            path: path.clone(),
            spec: &spec,
            inputs: BTreeMap::from([("model".to_string(), model_hash), ("classifier".to_string(), cls_hash)]),
            seeds: BTreeMap::from([("experiment".to_string(), seed), ("stage".to_string(), eval_seed)]),
        };
        let dataset = self.config.dataset.as_str();
        self.cached(job, |_| {
            let report = build_report(&model, arm.stage.tag(), c_f, c_new, classifier, self.config.eval_samples, eval_seed)?;
            let row = ReportRow::from_report(&report, dataset, arm.method_tag(), arm.surrogate_tag(), seed);
            let stored = StoredReport { report, row };
            Ok((serde_json::to_string_pretty(&stored)?.into_bytes(), None))
        })?;
        let stored: StoredReport = serde_json::from_slice(&read_bytes(&path)?)?;
        let csv_path = path.with_extension("csv");
        if self.force || !csv_path.is_file() {
            atomic_write(&csv_path, rows_to_csv(std::slice::from_ref(&stored.row))?.as_bytes())?;
        }
        Ok(stored)
    }

    /// Loads a stored report without computing anything.
    pub fn load_report(&self, c_f: usize, c_new: usize, arm: Arm, seed: u64) -> Result<Option<StoredReport>> {
        let path = self.report_path(c_f, c_new, arm, seed)?;
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&read_bytes(&path)?)?))
    }

    // ---- commands over the configured pair and seeds

    fn arm_for_config(&self, stage: Stage) -> Arm {
        match stage {
            Stage::Pretrain => Arm::pretrained(),
            Stage::Forget => Arm::forgotten(self.config.surrogate),
            Stage::Learn => Arm::learned(
                self.config.method,
                self.config.use_forgetting.then_some(self.config.surrogate),
            ),
        }
    }

    pub fn cmd_pretrain(&self) -> Result<Vec<StageOutcome>> {
        self.config.seeds.iter().map(|&s| self.run_pretrain(self.config.c_new, s)).collect()
    }

    pub fn cmd_forget(&self) -> Result<Vec<StageOutcome>> {
        let c = &self.config;
        c.seeds.iter().map(|&s| self.run_forget(c.c_f, c.c_new, c.surrogate, s)).collect()
    }

    pub fn cmd_learn(&self) -> Result<Vec<StageOutcome>> {
        let c = &self.config;
        let pm = c.use_forgetting.then_some(c.surrogate);
        c.seeds.iter().map(|&s| self.run_learn(c.c_f, c.c_new, pm, c.method, s)).collect()
    }

    pub fn cmd_eval(&self, stage: Stage) -> Result<Vec<ReportRow>> {
        let c = &self.config;
        let arm = self.arm_for_config(stage);
        for &s in &c.seeds {
            let p = self.arm_path(c.c_f, c.c_new, arm, s)?;
            require(&p, &format!("run `amnesia {}` for this configuration first", stage.tag()))?;
        }
        let cls = self.classifier()?;
        c.seeds
            .iter()
            .map(|&s| self.run_eval(c.c_f, c.c_new, arm, s, &cls).map(|r| r.row))
            .collect()
    }

    /// Improvement matrix for `method` with and without forgetting by
    /// `surrogate` over the configured pairs. Pairs lacking a report for any
    /// configured seed in either arm stay masked.
    pub fn matrix(&self, method: Method, surrogate: Surrogate) -> Result<DeltaMatrix> {
        let mut with_pm = Vec::new();
        let mut without = Vec::new();
        for &(f, n) in &self.config.pairs {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for &s in &self.config.seeds {
                let ra = self.load_report(f, n, Arm::learned(method, Some(surrogate)), s)?;
                let rb = self.load_report(f, n, Arm::learned(method, None), s)?;
                if let (Some(ra), Some(rb)) = (ra, rb) {
                    a.push(ra.row);
                    b.push(rb.row);
                }
            }
            if a.len() == self.config.seeds.len() {
                with_pm.extend(a);
                without.extend(b);
            }
        }
        if with_pm.is_empty() {
            return Err(Error::MissingPrerequisite {
                path: self.root().join("reports"),
                hint: format!(
                    "no completed pair has reports for both arms of {} / {}; run `amnesia sweep` first",
                    method.tag(),
                    surrogate.tag()
                ),
            });
        }
        delta_matrix(&with_pm, &without)
    }

    pub fn matrix_path(&self, method: Method, surrogate: Surrogate) -> PathBuf {
        self.root()
            .join("matrix")
            .join(format!("{}-{}-{}.csv", self.config.dataset, method.tag(), surrogate.tag()))
    }

    pub fn cmd_matrix(&self) -> Result<Vec<(PathBuf, DeltaMatrix)>> {
        let mut out = Vec::new();
        for &m in &self.config.methods {
            for &s in &self.config.surrogates {
                let d = match self.matrix(m, s) {
                    Ok(d) => d,
                    Err(Error::MissingPrerequisite { .. }) if self.config.methods.len() * self.config.surrogates.len() > 1 => continue,
                    Err(e) => return Err(e),
                };
                let path = self.matrix_path(m, s);
                self.write_matrix(&path, &d, m, s)?;
                out.push((path, d));
            }
        }
        if out.is_empty() {
            return Err(Error::MissingPrerequisite {
                path: self.root().join("reports"),
                hint: "no pair has reports for both arms; run `amnesia sweep` first".into(),
            });
        }
        Ok(out)
    }

    fn write_matrix(&self, path: &Path, d: &DeltaMatrix, m: Method, s: Surrogate) -> Result<()> {
        let csv = d.to_csv();
        atomic_write(path, csv.as_bytes())?;
        let (w, h, rgb) = d.heatmap_rgb(24);
        let png_path = path.with_extension("png");
        let png_bytes = write_png(&png_path, w, h, &rgb)?;
        let mut inputs = BTreeMap::new();
        for &(f, n) in &self.config.pairs {
            for &seed in &self.config.seeds {
                for arm in [Arm::learned(m, Some(s)), Arm::learned(m, None)] {
                    let rp = self.report_path(f, n, arm, seed)?;
                    if rp.is_file() {
                        inputs.insert(rp.display().to_string(), sha256_hex(&read_bytes(&rp)?));
                    }
                }
            }
        }
        for (p, bytes) in [(path.to_path_buf(), csv.into_bytes()), (png_path, png_bytes)] {
            let prov = Provenance {
                kind: "matrix".into(),
                config_hash: self.config.hash(),
                inputs: inputs.clone(),
                seeds: self.config.seeds.iter().map(|&s| (format!("seed{s}"), s)).collect(),
                output_hash: sha256_hex(&bytes),
                tool: format!("amnesia {}", env!("CARGO_PKG_VERSION")),
                spec: serde_json::json!({"method": m, "surrogate": s, "pairs": self.config.pairs}),
                record: None,
            };
            atomic_write(&sidecar_path(&p), serde_json::to_string_pretty(&prov)?.as_bytes())?;
        }
        Ok(())
    }

    /// A `10 × grid_columns` sheet of decoder-mean samples from `checkpoint`,
    /// one row per class slot, with the `c_f` row framed red and the `c_new`
    /// row framed blue.
    pub fn grid(&self, checkpoint: &Path, seed: u64, out: &Path, classifier: Option<&Classifier>) -> Result<GridSummary> {
        let (model, model_hash) = load_model(checkpoint)?;
        let cfg = model.config().clone();
        let (h, w) = (cfg.image_height, cfg.image_width);
        let cols = self.config.grid_columns;
        let m = GRID_MARGIN;
        let (c_f, c_new) = (self.config.c_f, self.config.c_new);
        let width = cols * w + (cols + 1) * m;
        let height = NUM_CLASSES * h + (NUM_CLASSES + 1) * m;
        let mut rgb = vec![0u8; width * height * 3];
        let mut paint = |x: usize, y: usize, c: [u8; 3]| {
            let o = (y * width + x) * 3;
            rgb[o..o + 3].copy_from_slice(&c);
        };
        for (row, color) in [(c_f, [255, 0, 0]), (c_new, [0, 0, 255])] {
            let top = row * (h + m);
            for y in top..top + h + 2 * m {
                for x in 0..width {
                    paint(x, y, color);
                }
            }
        }
        let base = SeededRng::new(derive_seed(seed, "grid"), streams::EVAL);
        let full = self.full_dataset().ok();
        let mut rows = Vec::with_capacity(NUM_CLASSES);
        for c in 0..NUM_CLASSES {
            let samples = model.sample_with(c, cols, &mut base.fork(&c.to_string()), SampleMode::Mean)?;
            for j in 0..cols {
                let img = samples.row(j);
                let (x0, y0) = (m + j * (w + m), m + c * (h + m));
                for y in 0..h {
                    for x in 0..w {
                        let v = (img[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                        paint(x0 + x, y0 + y, [v, v, v]);
                    }
                }
            }
            let stds: Vec<f64> = (0..cols).map(|j| pixel_std(samples.row(j))).collect();
            let reference = match full {
                Some(d) => {
                    let idx: Vec<usize> = (0..d.len()).filter(|&i| d.label(i) == c).collect();
                    let s: Vec<f64> = idx.iter().map(|&i| pixel_std(d.image(i))).collect();
                    if s.is_empty() { f64::NAN } else { exact_mean(&s) }
                }
                None => f64::NAN,
            };
            let metric = match classifier {
                Some(cls) => exact_mean(&class_probabilities(&samples, c, cls)?),
                None => f64::NAN,
            };
            rows.push(GridRow {
                class: c,
                pixel_std: exact_mean(&stds),
                reference_pixel_std: reference,
                metric,
            });
        }
        let png_bytes = write_png(out, width, height, &rgb)?;
        let summary = GridSummary {
            width,
            height,
            c_f,
            c_new,
            rows,
        };
        let prov = Provenance {
            kind: "grid".into(),
            config_hash: self.config.hash(),
            inputs: BTreeMap::from([("model".to_string(), model_hash)]),
            seeds: BTreeMap::from([("experiment".to_string(), seed)]),
            output_hash: sha256_hex(&png_bytes),
            tool: format!("amnesia {}", env!("CARGO_PKG_VERSION")),
            spec: serde_json::to_value(&summary)?,
            record: None,
        };
        atomic_write(&sidecar_path(out), serde_json::to_string_pretty(&prov)?.as_bytes())?;
        Ok(summary)
    }

    // ---- sweep

    /// Every arm for every configured pair and seed, then evaluation, the
    /// combined CSV and the improvement matrices.
    pub fn cmd_sweep(&self) -> Result<PathBuf> {
        let c = &self.config;
        let cls = self.classifier()?;
        let mut rows = Vec::new();
        for &(f, n) in &c.pairs {
            for &seed in &c.seeds {
                self.run_pretrain(n, seed)?;
                let mut arms = vec![Arm::pretrained()];
                for &s in &c.surrogates {
                    self.run_forget(f, n, s, seed)?;
                    arms.push(Arm::forgotten(s));
                }
                for &m in &c.methods {
                    self.run_learn(f, n, None, m, seed)?;
                    arms.push(Arm::learned(m, None));
                    for &s in &c.surrogates {
                        self.run_learn(f, n, Some(s), m, seed)?;
                        arms.push(Arm::learned(m, Some(s)));
                    }
                }
                for arm in arms {
                    let r = self.run_eval(f, n, arm, seed, &cls)?;
                    if arm.stage != Stage::Pretrain {
                        rows.push(r.row);
                    }
                }
            }
        }
        let path = self.root().join("reports.csv");
        let csv = rows_to_csv(&rows)?;
        atomic_write(&path, csv.as_bytes())?;
        let prov = Provenance {
            kind: "summary".into(),
            config_hash: c.hash(),
            inputs: BTreeMap::new(),
            seeds: c.seeds.iter().map(|&s| (format!("seed{s}"), s)).collect(),
            output_hash: sha256_hex(csv.as_bytes()),
            tool: format!("amnesia {}", env!("CARGO_PKG_VERSION")),
            spec: serde_json::to_value(c)?,
            record: None,
        };
        atomic_write(&sidecar_path(&path), serde_json::to_string_pretty(&prov)?.as_bytes())?;
        self.cmd_matrix()?;
        Ok(path)
    }

    /// Decoder-mean samples of class `c` from the checkpoint at `path`.
    pub fn samples(&self, path: &Path, c: usize, n: usize, seed: u64) -> Result<Tensor> {
        let (m, _) = load_model(path)?;
        m.sample_with(c, n, &mut SeededRng::new(seed, streams::EVAL), SampleMode::Mean)
    }
}
