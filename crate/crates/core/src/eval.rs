//! External classifier, the per-class probability metric, report rows and
//! improvement matrices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, streams, derive_seed, Bound, Optimizer, OptimizerConfig, ParameterSet, SeededRng, Tape, Tensor, Var};
use crate::cvae::{ConditionalVAE, SampleMode};
use crate::data::{LabeledDataset, NUM_CLASSES};
use crate::error::{Error, Result};

// ---- classifier ----------------------------------------------------------------

/// Anything that maps a batch of images to class probabilities.
pub trait ClassProbabilities {
    fn num_classes(&self) -> usize;
    /// `[batch, num_classes]`, rows summing to one.
    fn probabilities(&self, images: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub holdout_fraction: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            epochs: 8,
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            holdout_fraction: 0.1,
            max_attempts: 3,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("classifier.hidden", "need at least one layer, all widths ≥ 1"));
        }
        if self.epochs < 1 || self.batch_size < 1 || self.max_attempts < 1 {
            return Err(Error::config(
                "classifier",
                "epochs, batch_size and max_attempts must be at least 1",
            ));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config("classifier.holdout_fraction", "must lie in (0, 1)"));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::config("classifier.optimizer", e.to_string()))
    }
}

/// MLP with ReLU hidden layers and a softmax output.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    params: ParameterSet,
    input_dim: usize,
    num_classes: usize,
    hidden: Vec<usize>,
    accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    kind: String,
    input_dim: usize,
    num_classes: usize,
    hidden: Vec<usize>,
    accuracy: f64,
    #[serde(default)]
    meta: serde_json::Value,
}

impl Classifier {
    pub fn new(input_dim: usize, num_classes: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if hidden.is_empty() || input_dim == 0 || num_classes < 2 {
            return Err(Error::invalid("classifier needs inputs, ≥ 2 classes and a hidden layer"));
        }
        let mut rng = SeededRng::new(seed, streams::INIT);
        let mut params = ParameterSet::new();
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(num_classes);
        for (i, pair) in widths.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            let bound = 1.0 / (a as f64).sqrt();
            let w = (0..a * b).map(|_| rng.uniform_range(-bound, bound)).collect();
            let bias = (0..b).map(|_| rng.uniform_range(-bound, bound)).collect();
            params.insert(&format!("cls.{i}.weight"), Tensor::new(vec![a, b], w)?.with_requires_grad(true))?;
            params.insert(&format!("cls.{i}.bias"), Tensor::new(vec![b], bias)?.with_requires_grad(true))?;
        }
        Ok(Self {
            params,
            input_dim,
            num_classes,
            hidden: hidden.to_vec(),
            accuracy: 0.0,
        })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Held-out accuracy measured at training time.
    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn logits_graph(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let layers = self.hidden.len() + 1;
        let mut h = x;
        for i in 0..layers {
            let pre = tape.affine(
                h,
                bound.get(&format!("cls.{i}.weight"))?,
                Some(bound.get(&format!("cls.{i}.bias"))?),
            )?;
            h = if i + 1 < layers { tape.relu(pre) } else { pre };
        }
        Ok(h)
    }

    /// Mean softmax cross-entropy of `labels` on `images`.
    pub fn loss_graph(&self, tape: &mut Tape, bound: &Bound, images: &Tensor, labels: &[usize]) -> Result<Var> {
        let x = tape.constant(images.clone());
        let logits = self.logits_graph(tape, bound, x)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        if images.shape().len() != 2 || images.cols() != self.input_dim {
            return Err(Error::shape("classifier input", &[images.rows(), self.input_dim], images.shape()));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params)?;
        let x = tape.constant(images.clone());
        let l = self.logits_graph(&mut tape, &bound, x)?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    /// Fraction of correct argmax predictions.
    pub fn evaluate(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty set"));
        }
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(1024) {
            let (x, labels) = data.batch(chunk)?;
            correct += self.predict(&x)?.iter().zip(&labels).filter(|(a, b)| a == b).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn to_bytes(&self, meta: serde_json::Value) -> Vec<u8> {
        let header = ClassifierHeader {
            kind: "classifier".into(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            hidden: self.hidden.clone(),
            accuracy: self.accuracy,
            meta,
        };
        self.params.to_bytes(&serde_json::to_string(&header).expect("header serializes"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let (params, header) = ParameterSet::from_bytes(bytes)?;
        let h: ClassifierHeader = serde_json::from_str(&header).map_err(|e| Error::Parse {
            field: "classifier.header".into(),
            offset: 0,
            message: e.to_string(),
        })?;
        if h.kind != "classifier" {
            return Err(Error::Parse {
                field: "classifier.header.kind".into(),
                offset: 0,
                message: format!("expected classifier, found {}", h.kind),
            });
        }
        let template = Classifier::new(h.input_dim, h.num_classes, &h.hidden, 0)?;
        template.params.check_aligned(&params, "classifier parameters")?;
        Ok((
            Self {
                params,
                input_dim: h.input_dim,
                num_classes: h.num_classes,
                hidden: h.hidden,
                accuracy: h.accuracy,
            },
            h.meta,
        ))
    }
}

impl ClassProbabilities for Classifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        let logits = self.logits(images)?;
        logits.with_data(softmax_rows(&logits))
    }
}

/// Uniform probabilities regardless of input.
#[derive(Clone, Copy, Debug)]
pub struct UniformClassifier {
    pub num_classes: usize,
}

impl ClassProbabilities for UniformClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        Ok(Tensor::filled(
            &[images.rows(), self.num_classes],
            1.0 / self.num_classes as f64,
        ))
    }
}

/// `alpha · inner + (1 − alpha) · uniform`.
pub struct UniformMixture<'a> {
    pub inner: &'a dyn ClassProbabilities,
    pub alpha: f64,
}

impl ClassProbabilities for UniformMixture<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        let p = self.inner.probabilities(images)?;
        let u = 1.0 / self.num_classes() as f64;
        let a = self.alpha;
        let data = p.data().iter().map(|&v| a * v + (1.0 - a) * u).collect();
        p.with_data(data)
    }
}

fn split_indices(n: usize, holdout: f64, rng: &mut SeededRng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let n_test = ((n as f64) * holdout).round().max(1.0) as usize;
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

fn train_once(data: &LabeledDataset, config: &ClassifierConfig, seed: u64) -> Result<Classifier> {
    let (train_idx, test_idx) = split_indices(data.len(), config.holdout_fraction, &mut SeededRng::new(seed, streams::SPLIT));
    let train = data.select(&train_idx);
    let test = data.select(&test_idx);
    let mut model = Classifier::new(data.image_dim(), NUM_CLASSES, &config.hidden, seed)?;
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut shuffle = SeededRng::new(seed, streams::BATCH_SHUFFLE);
    let mut grads = model.params.zeros_like();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = train.batch(chunk)?;
            let mut tape = Tape::new();
            let bound = tape.bind(&model.params)?;
            let loss = model.loss_graph(&mut tape, &bound, &x, &labels)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite("classifier loss".into()));
            }
            grads.zero();
            tape.backward_into(loss, &mut grads)?;
            drop(tape);
            opt.step(&mut model.params, &grads)?;
        }
    }
    model.accuracy = model.evaluate(&test)?;
    Ok(model)
}

/// Trains on a 90/10 split of `data` until held-out accuracy reaches
/// `threshold`, retrying with fresh seeds up to `max_attempts` times.
pub fn train_classifier(data: &LabeledDataset, threshold: f64, config: &ClassifierConfig) -> Result<Classifier> {
    config.validate()?;
    let counts = data.class_counts();
    if let Some(c) = (0..NUM_CLASSES).find(|&c| counts[c] == 0) {
        return Err(Error::invalid(format!("classifier training data lacks class {c}")));
    }
    let mut best = 0.0f64;
    for attempt in 0..config.max_attempts {
        let seed = derive_seed(config.seed, &format!("classifier-attempt-{attempt}"));
        let model = train_once(data, config, seed)?;
        if model.accuracy >= threshold {
            return Ok(model);
        }
        best = best.max(model.accuracy);
    }
    Err(Error::WeakClassifier {
        accuracy: best,
        threshold,
        attempts: config.max_attempts,
    })
}

// ---- metric ------------------------------------------------------------------------

/// Mean and standard error of `P(y = c | x)` over a sample set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

const EVAL_CHUNK: usize = 500;

/// Per-sample `P(y = c | x)` for each row of `samples`.
pub fn class_probabilities(samples: &Tensor, c: usize, classifier: &dyn ClassProbabilities) -> Result<Vec<f64>> {
    if c >= classifier.num_classes() {
        return Err(Error::invalid(format!("class {c} outside the classifier's range")));
    }
    let p = classifier.probabilities(samples)?;
    Ok((0..p.rows()).map(|i| p.row(i)[c]).collect())
}

/// Non-overlapping partials whose exact sum equals the exact sum of `values`.
fn exact_partials(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let y = partials[j];
            let (hi, lo) = if x.abs() < y.abs() { (y, x) } else { (x, y) };
            let s = hi + lo;
            let e = lo - (s - hi);
            if e != 0.0 {
                partials[kept] = e;
                kept += 1;
            }
            x = s;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    partials
}

/// Correctly rounded sum of a partials list.
fn round_partials(mut p: Vec<f64>) -> f64 {
    let Some(mut hi) = p.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(y) = p.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Half-way case: round away from the tie in the direction of the tail.
    if let Some(&next) = p.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// The arithmetic mean of `values`, correctly rounded.
pub fn exact_mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let partials = exact_partials(values.iter().copied());
    let q = round_partials(partials.clone()) / n;
    let prod = q * n;
    let err = q.mul_add(n, -prod);
    let residual = round_partials(exact_partials(partials.into_iter().chain([-prod, -err])));
    q + residual / n
}

/// Mean and standard error of `values`.
pub fn mean_and_stderr(values: &[f64]) -> MetricEstimate {
    let n = values.len();
    let mean = exact_mean(values);
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MetricEstimate { mean, stderr, n }
}

/// Metric over a recorded sample set.
pub fn metric_from_samples(samples: &Tensor, c: usize, classifier: &dyn ClassProbabilities) -> Result<MetricEstimate> {
    Ok(mean_and_stderr(&class_probabilities(samples, c, classifier)?))
}

/// `n` decoder-mean samples of class `c` scored by `classifier`.
pub fn class_prob_stats(
    model: &ConditionalVAE,
    c: usize,
    classifier: &dyn ClassProbabilities,
    n: usize,
    rng: &mut SeededRng,
) -> Result<MetricEstimate> {
    if n < 1 {
        return Err(Error::invalid("metric needs at least one sample"));
    }
    let mut probs = Vec::with_capacity(n);
    let mut left = n;
    while left > 0 {
        let k = left.min(EVAL_CHUNK);
        let samples = model.sample_with(c, k, rng, SampleMode::Mean)?;
        probs.extend(class_probabilities(&samples, c, classifier)?);
        left -= k;
    }
    Ok(mean_and_stderr(&probs))
}

pub fn class_prob_metric(
    model: &ConditionalVAE,
    c: usize,
    classifier: &dyn ClassProbabilities,
    n: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    Ok(class_prob_stats(model, c, classifier, n, rng)?.mean)
}

// ---- reports -----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub c_f: usize,
    pub c_new: usize,
    pub c_r: Vec<usize>,
    pub per_class: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: usize,
}

impl EvalReport {
    pub fn m_cf(&self) -> f64 {
        self.per_class[self.c_f]
    }

    pub fn m_cnew(&self) -> f64 {
        self.per_class[self.c_new]
    }

    pub fn m_cr_mean(&self) -> f64 {
        self.c_r.iter().map(|&c| self.per_class[c]).sum::<f64>() / self.c_r.len() as f64
    }

    pub fn stderr_cnew(&self) -> f64 {
        self.stderr[self.c_new]
    }
}

/// Per-class metrics for every class slot. Class `c` draws from its own
/// `eval/<c>` stream of `seed`, so results do not depend on class order.
pub fn build_report(
    model: &ConditionalVAE,
    stage: &str,
    c_f: usize,
    c_new: usize,
    classifier: &dyn ClassProbabilities,
    n_per_class: usize,
    seed: u64,
) -> Result<EvalReport> {
    crate::data::check_pair(c_f, c_new)?;
    let base = SeededRng::new(seed, streams::EVAL);
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut stderr = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let est = class_prob_stats(model, c, classifier, n_per_class, &mut base.fork(&c.to_string()))?;
        per_class.push(est.mean);
        stderr.push(est.stderr);
    }
    Ok(EvalReport {
        stage: stage.to_string(),
        c_f,
        c_new,
        c_r: (0..NUM_CLASSES).filter(|&c| c != c_f && c != c_new).collect(),
        per_class,
        stderr,
        n: n_per_class,
    })
}

/// One CSV row per (experiment, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub c_f: usize,
    pub c_new: usize,
    pub method: String,
    pub surrogate: String,
    pub seed: u64,
    pub m_cf: f64,
    pub m_cr_mean: f64,
    pub m_cnew: f64,
    pub n: usize,
    pub stderr_cnew: f64,
}

impl ReportRow {
    pub fn from_report(report: &EvalReport, dataset: &str, method: &str, surrogate: &str, seed: u64) -> Self {
        Self {
            dataset: dataset.to_string(),
            c_f: report.c_f,
            c_new: report.c_new,
            method: method.to_string(),
            surrogate: surrogate.to_string(),
            seed,
            m_cf: report.m_cf(),
            m_cr_mean: report.m_cr_mean(),
            m_cnew: report.m_cnew(),
            n: report.n,
            stderr_cnew: report.stderr_cnew(),
        }
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "dataset",
            "c_f",
            "c_new",
            "method",
            "surrogate",
            "seed",
            "m_cf",
            "m_cr_mean",
            "m_cnew",
            "n",
            "stderr_cnew",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

// ---- improvement matrix ---------------------------------------------------------------

/// `Δ[c_f][c_new] = m_cnew(with forgetting) − m_cnew(without)`, averaged
/// over seeds; `None` marks cells without an experiment and the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaMatrix {
    pub cells: Vec<Vec<Option<f64>>>,
}

fn mean_by_pair(rows: &[ReportRow]) -> BTreeMap<(usize, usize), f64> {
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.c_f, r.c_new)).or_insert((0.0, 0));
        e.0 += r.m_cnew;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn delta_matrix(with_pm: &[ReportRow], without_pm: &[ReportRow]) -> Result<DeltaMatrix> {
    let a = mean_by_pair(with_pm);
    let b = mean_by_pair(without_pm);
    if a.keys().ne(b.keys()) {
        return Err(Error::invalid("the two arms cover different (c_f, c_new) pairs"));
    }
    let mut cells = vec![vec![None; NUM_CLASSES]; NUM_CLASSES];
    for (&(f, n), &va) in &a {
        if f >= NUM_CLASSES || n >= NUM_CLASSES {
            return Err(Error::invalid(format!("pair ({f}, {n}) out of range")));
        }
        if f != n {
            cells[f][n] = Some(va - b[&(f, n)]);
        }
    }
    Ok(DeltaMatrix { cells })
}

impl DeltaMatrix {
    pub fn get(&self, c_f: usize, c_new: usize) -> Option<f64> {
        self.cells[c_f][c_new]
    }

    /// `(positive, negative)` counts over unmasked cells.
    pub fn sign_counts(&self) -> (usize, usize) {
        let vals = self.cells.iter().flatten().flatten();
        let pos = vals.clone().filter(|&&v| v > 0.0).count();
        let neg = vals.filter(|&&v| v < 0.0).count();
        (pos, neg)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("c_f");
        for c in 0..NUM_CLASSES {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (f, row) in self.cells.iter().enumerate() {
            out.push_str(&f.to_string());
            for cell in row {
                match cell {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push_str(",masked"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            field: format!("delta-matrix line {line}"),
            offset: 0,
            message: msg,
        };
        let mut cells = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != NUM_CLASSES + 1 {
                return Err(parse_err(i + 1, format!("expected {} fields", NUM_CLASSES + 1)));
            }
            let row = fields[1..]
                .iter()
                .map(|f| match *f {
                    "masked" => Ok(None),
                    v => v.parse::<f64>().map(Some).map_err(|e| parse_err(i + 1, e.to_string())),
                })
                .collect::<Result<Vec<_>>>()?;
            cells.push(row);
        }
        if cells.len() != NUM_CLASSES {
            return Err(parse_err(0, format!("expected {NUM_CLASSES} rows, found {}", cells.len())));
        }
        Ok(Self { cells })
    }

    /// RGB heatmap: blue for gains, red for losses (intensity ∝ |Δ| relative
    /// to the largest magnitude), black for masked cells.
    pub fn heatmap_rgb(&self, cell: usize) -> (usize, usize, Vec<u8>) {
        let side = NUM_CLASSES * cell;
        let max = self
            .cells
            .iter()
            .flatten()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let mut px = vec![0u8; side * side * 3];
        for (f, row) in self.cells.iter().enumerate() {
            for (n, v) in row.iter().enumerate() {
                let rgb = match v {
                    None => [0, 0, 0],
                    Some(v) => {
                        let t = (v.abs() / max).min(1.0);
                        let fade = (255.0 * (1.0 - t)).round() as u8;
                        if *v >= 0.0 {
                            [fade, fade, 255]
                        } else {
                            [255, fade, fade]
                        }
                    }
                };
                for y in f * cell..(f + 1) * cell {
                    for x in n * cell..(n + 1) * cell {
                        let edge = y % cell == 0 || x % cell == 0;
                        let o = (y * side + x) * 3;
                        px[o..o + 3].copy_from_slice(if edge { &[64, 64, 64] } else { &rgb });
                    }
                }
            }
        }
        (side, side, px)
    }
}
