//! Diagonal Fisher information from squared single-sample ELBO gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParameterSet, SeededRng, Tape, Tensor, Var};
use crate::cvae::{ConditionalVAE, SampleMode};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

pub const DEFAULT_FISHER_SAMPLES: usize = 2000;

/// Where the images for the estimate come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherData {
    /// The model's own decoder-mean samples.
    #[default]
    Generated,
    /// Real training images of the requested classes.
    Real,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FisherSource {
    /// Content hash of the model snapshot the estimate was taken on.
    pub model: String,
    pub classes: Vec<usize>,
    pub data: FisherData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiagonal {
    values: ParameterSet,
    sample_count: usize,
    source: FisherSource,
}

#[derive(Serialize, Deserialize)]
struct FisherHeader {
    kind: String,
    sample_count: usize,
    source: FisherSource,
}

impl FisherDiagonal {
    pub fn new(values: ParameterSet, sample_count: usize, source: FisherSource) -> Result<Self> {
        if !values.iter().all(|(_, t)| t.data().iter().all(|&v| v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("Fisher entries must be finite and nonnegative"));
        }
        let mut values = values;
        for (_, t) in values.iter_mut() {
            *t = t.clone().with_requires_grad(false);
        }
        Ok(Self {
            values,
            sample_count,
            source,
        })
    }

    /// Every entry equal to `value`, aligned with `params`.
    pub fn constant(params: &ParameterSet, value: f64) -> Result<Self> {
        let mut values = params.zeros_like();
        for (_, t) in values.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
        Self::new(
            values,
            0,
            FisherSource {
                model: String::new(),
                classes: Vec::new(),
                data: FisherData::Generated,
            },
        )
    }

    pub fn values(&self) -> &ParameterSet {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn source(&self) -> &FisherSource {
        &self.source
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.flatten()
    }

    pub fn check_aligned(&self, params: &ParameterSet) -> Result<()> {
        params.check_aligned(&self.values, "Fisher diagonal")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FisherHeader {
            kind: "fisher-diagonal".into(),
            sample_count: self.sample_count,
            source: self.source.clone(),
        };
        self.values.to_bytes(&serde_json::to_string(&header).expect("header serializes"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (values, header) = ParameterSet::from_bytes(bytes)?;
        let header: FisherHeader = serde_json::from_str(&header).map_err(|e| Error::Parse {
            field: "fisher.header".into(),
            offset: 0,
            message: e.to_string(),
        })?;
        if header.kind != "fisher-diagonal" {
            return Err(Error::Parse {
                field: "fisher.header.kind".into(),
                offset: 0,
                message: format!("expected fisher-diagonal, found {}", header.kind),
            });
        }
        Self::new(values, header.sample_count, header.source)
    }
}

/// A frozen set of `(x, c, eps)` triples the estimate is computed over.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherSamples {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub eps: Tensor,
}

impl FisherSamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_request(model: &ConditionalVAE, classes: &[usize], n: usize) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::invalid("Fisher class set is empty"));
    }
    if n < 1 {
        return Err(Error::invalid("Fisher estimate needs at least one sample"));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= model.config().num_classes) {
        return Err(Error::invalid(format!("class {c} is not a model class")));
    }
    Ok(())
}

const SAMPLE_CHUNK: usize = 256;

/// Classes uniform over `classes`, images from the model's own sampler, one
/// fresh noise vector per sample. All draws come from `rng` in that order.
pub fn draw_generated_samples(
    model: &ConditionalVAE,
    classes: &[usize],
    n: usize,
    rng: &mut SeededRng,
) -> Result<FisherSamples> {
    check_request(model, classes, n)?;
    let labels: Vec<usize> = (0..n).map(|_| classes[rng.below(classes.len())]).collect();
    let mut images = Vec::with_capacity(n * model.config().input_dim);
    for chunk in labels.chunks(SAMPLE_CHUNK) {
        images.extend_from_slice(model.sample_labels(chunk, rng, SampleMode::Mean)?.data());
    }
    let latent = model.config().latent_dim;
    Ok(FisherSamples {
        images: Tensor::new(vec![n, model.config().input_dim], images)?,
        labels,
        eps: Tensor::new(vec![n, latent], rng.normal_vec(n * latent))?,
    })
}

/// Classes uniform over `classes`, then a uniformly chosen real image of
/// that class.
pub fn draw_real_samples(
    model: &ConditionalVAE,
    data: &LabeledDataset,
    classes: &[usize],
    n: usize,
    rng: &mut SeededRng,
) -> Result<FisherSamples> {
    check_request(model, classes, n)?;
    let by_class: Vec<Vec<usize>> = (0..model.config().num_classes)
        .map(|c| (0..data.len()).filter(|&i| data.label(i) == c).collect())
        .collect();
    if let Some(&c) = classes.iter().find(|&&c| by_class[c].is_empty()) {
        return Err(Error::invalid(format!("no real images of class {c} for the Fisher estimate")));
    }
    let mut idx = Vec::with_capacity(n);
    for _ in 0..n {
        let c = classes[rng.below(classes.len())];
        idx.push(by_class[c][rng.below(by_class[c].len())]);
    }
    let (images, labels) = data.batch(&idx)?;
    let latent = model.config().latent_dim;
    Ok(FisherSamples {
        images,
        labels,
        eps: Tensor::new(vec![n, latent], rng.normal_vec(n * latent))?,
    })
}

/// Elementwise mean of squared gradients of `loss(tape, params, i)` for
/// `i in 0..n`, each computed on its own tape and accumulated in index order.
pub fn mean_squared_gradients<F>(params: &ParameterSet, n: usize, mut loss: F) -> Result<ParameterSet>
where
    F: FnMut(&mut Tape, &Bound, usize) -> Result<Var>,
{
    if n < 1 {
        return Err(Error::invalid("Fisher estimate needs at least one sample"));
    }
    let mut acc = params.zeros_like();
    let mut grad = params.zeros_like();
    for i in 0..n {
        grad.zero();
        let mut tape = Tape::new();
        let bound = tape.bind(params)?;
        let l = loss(&mut tape, &bound, i)?;
        tape.backward_into(l, &mut grad)?;
        for ((_, a), (_, g)) in acc.iter_mut().zip(grad.iter()) {
            a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g * g);
        }
    }
    let inv = n as f64;
    for (_, a) in acc.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v /= inv);
    }
    Ok(acc)
}

/// Squared single-sample ELBO gradients over a recorded sample set, each
/// gradient multiplied by `scale` before squaring.
pub fn fim_from_samples(model: &ConditionalVAE, samples: &FisherSamples, scale: f64) -> Result<ParameterSet> {
    let latent = model.config().latent_dim;
    let dim = model.config().input_dim;
    mean_squared_gradients(model.params(), samples.len(), |tape, bound, i| {
        let x = Tensor::new(vec![1, dim], samples.images.row(i).to_vec())?;
        let eps = Tensor::new(vec![1, latent], samples.eps.row(i).to_vec())?;
        let elbo = model.elbo_graph(tape, bound, &x, &samples.labels[i..=i], &eps)?;
        let s = tape.sum(elbo);
        Ok(tape.scale(s, scale))
    })
}

/// Diagonal Fisher of `model` over `classes` from `n_samples` self-generated
/// samples.
pub fn estimate_fim(
    model: &ConditionalVAE,
    classes: &[usize],
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<FisherDiagonal> {
    let samples = draw_generated_samples(model, classes, n_samples, rng)?;
    let values = fim_from_samples(model, &samples, 1.0)?;
    FisherDiagonal::new(values, n_samples, source(model, classes, FisherData::Generated))
}

/// Same estimator over real images of `classes` drawn from `data`.
pub fn estimate_fim_real(
    model: &ConditionalVAE,
    data: &LabeledDataset,
    classes: &[usize],
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<FisherDiagonal> {
    let samples = draw_real_samples(model, data, classes, n_samples, rng)?;
    let values = fim_from_samples(model, &samples, 1.0)?;
    FisherDiagonal::new(values, n_samples, source(model, classes, FisherData::Real))
}

fn source(model: &ConditionalVAE, classes: &[usize], data: FisherData) -> FisherSource {
    FisherSource {
        model: model.content_hash(),
        classes: classes.to_vec(),
        data,
    }
}

/// Flat indices of the `ceil(q · total)` largest entries, ties broken by
/// ascending index, returned in ascending index order.
pub fn fim_top_fraction(fisher: &FisherDiagonal, q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid("fraction must lie in (0, 1]"));
    }
    let flat = fisher.flatten();
    if flat.is_empty() {
        return Err(Error::invalid("empty Fisher diagonal"));
    }
    let k = ((q * flat.len() as f64).ceil() as usize).clamp(1, flat.len());
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}
