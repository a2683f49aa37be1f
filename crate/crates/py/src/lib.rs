//! Python bindings. Images travel as lists of pixel rows; checkpoints and
//! reports use the same files as the command-line tool.

use std::path::PathBuf;

use amnesia::autodiff::{SeededRng, Tensor};
use amnesia::cvae::{kl_divergence as kl, ConditionalVAE, CvaeConfig, LatentGaussian, SampleMode};
use amnesia::data::{self, DatasetName, LabeledDataset};
use amnesia::eval::{self, ClassProbabilities, UniformClassifier};
use amnesia::experiment::{Arm, Experiment as Exp, ExperimentConfig, Stage, Surrogate};
use amnesia::fisher::{estimate_fim, FisherDiagonal};
use amnesia::train::{self, Method, RetainedSource, TrainConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: amnesia::Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn tensor(images: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&images).map_err(err)
}

fn method(name: &str) -> PyResult<Method> {
    match name {
        "finetune" => Ok(Method::FineTune),
        "ewc" => Ok(Method::Ewc),
        _ => Err(PyValueError::new_err(format!("unknown method `{name}`"))),
    }
}

#[pyclass(name = "Dataset", module = "amnesia", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(LabeledDataset);

#[pymethods]
impl PyDataset {
    /// Reads the IDX pair for `name` under `root`.
    #[staticmethod]
    fn load(root: PathBuf, name: &str) -> PyResult<Self> {
        let n = DatasetName::parse(name).map_err(err)?;
        Ok(Self(data::load_dataset(&root, n).map_err(err)?))
    }

    #[staticmethod]
    fn synthetic(n_per_class: usize, side: usize, seed: u64) -> PyResult<Self> {
        Ok(Self(data::synthetic_dataset(n_per_class, side, seed).map_err(err)?))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn labels(&self) -> Vec<u8> {
        self.0.labels().to_vec()
    }

    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.0.len() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.0.image(i).to_vec())
    }

    fn class_counts(&self) -> Vec<usize> {
        self.0.class_counts().to_vec()
    }

    fn subset_per_class(&self, k: usize) -> Self {
        Self(self.0.subset_per_class(k))
    }

    /// `(n_f, n_r, n_new)` for the partition by `(c_f, c_new)`.
    fn partition_sizes(&self, c_f: usize, c_new: usize) -> PyResult<(usize, usize, usize)> {
        let p = data::partition(&self.0, c_f, c_new).map_err(err)?;
        Ok((p.n_f(), p.n_r(), p.n_new()))
    }

    /// The examples of one class.
    fn class_subset(&self, c: usize) -> Self {
        Self(self.0.filter(|l| l == c))
    }

    /// Every example whose label is not `c`.
    fn without_class(&self, c: usize) -> Self {
        Self(self.0.filter(|l| l != c))
    }
}

#[pyclass(name = "ConditionalVAE", module = "amnesia", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCvae(ConditionalVAE);

#[pymethods]
impl PyCvae {
    /// Default architecture unless a tiny `(side, latent, hidden)` is given.
    #[new]
    #[pyo3(signature = (seed=0, tiny=None))]
    fn new(seed: u64, tiny: Option<(usize, usize, usize)>) -> PyResult<Self> {
        let cfg = match tiny {
            Some((side, latent, hidden)) => CvaeConfig::tiny(side, 10, latent, hidden),
            None => CvaeConfig::default(),
        };
        Ok(Self(ConditionalVAE::new(cfg, seed).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
        Ok(Self(ConditionalVAE::from_bytes(&bytes).map_err(err)?.0))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        amnesia::experiment::atomic_write(&path, &self.0.to_bytes(serde_json::Value::Null)).map_err(err)
    }

    fn content_hash(&self) -> String {
        self.0.content_hash()
    }

    fn parameter_count(&self) -> usize {
        self.0.params().total_count()
    }

    /// `(mu, logvar)` of the posterior for one image.
    fn encode(&self, x: Vec<f64>, c: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let q = self.0.encode(&x, c).map_err(err)?;
        Ok((q.mu, q.logvar))
    }

    fn decode(&self, z: Vec<f64>, c: usize) -> PyResult<Vec<f64>> {
        self.0.decode(&z, c).map_err(err)
    }

    fn elbo(&self, x: Vec<f64>, c: usize, eps: Vec<f64>) -> PyResult<f64> {
        self.0.elbo(&x, c, &eps).map_err(err)
    }

    /// `n` decoder-mean samples of class `c` (Bernoulli draws if `binary`).
    #[pyo3(signature = (c, n, seed=0, binary=false))]
    fn sample(&self, c: usize, n: usize, seed: u64, binary: bool) -> PyResult<Vec<Vec<f64>>> {
        let mode = if binary { SampleMode::Bernoulli } else { SampleMode::Mean };
        let t = self
            .0
            .sample_with(c, n, &mut SeededRng::new(seed, "python"), mode)
            .map_err(err)?;
        Ok(rows(&t))
    }
}

#[pyclass(name = "Classifier", module = "amnesia", frozen)]
struct PyClassifier(eval::Classifier);

#[pymethods]
impl PyClassifier {
    /// Trains until held-out accuracy reaches `threshold`.
    #[staticmethod]
    #[pyo3(signature = (dataset, threshold, epochs=8, hidden=vec![256, 128], seed=0))]
    fn train(dataset: &PyDataset, threshold: f64, epochs: usize, hidden: Vec<usize>, seed: u64) -> PyResult<Self> {
        let cfg = eval::ClassifierConfig {
            epochs,
            hidden,
            seed,
            ..Default::default()
        };
        Ok(Self(eval::train_classifier(&dataset.0, threshold, &cfg).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
        Ok(Self(eval::Classifier::from_bytes(&bytes).map_err(err)?.0))
    }

    #[getter]
    fn accuracy(&self) -> f64 {
        self.0.accuracy()
    }

    fn probabilities(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.0.probabilities(&tensor(images)?).map_err(err)?))
    }
}

#[pyclass(name = "FisherDiagonal", module = "amnesia", frozen)]
struct PyFisher(FisherDiagonal);

#[pymethods]
impl PyFisher {
    fn flatten(&self) -> Vec<f64> {
        self.0.flatten()
    }

    #[getter]
    fn sample_count(&self) -> usize {
        self.0.sample_count()
    }
}

/// Closed-form KL divergence from `N(mu, exp(logvar))` to the standard normal.
#[pyfunction]
fn kl_divergence(mu: Vec<f64>, logvar: Vec<f64>) -> f64 {
    kl(&LatentGaussian { mu, logvar })
}

/// Diagonal Fisher information of `model` over `classes` from self-generated samples.
#[pyfunction]
#[pyo3(signature = (model, classes, n=2000, seed=0))]
fn fisher_diagonal(model: &PyCvae, classes: Vec<usize>, n: usize, seed: u64) -> PyResult<PyFisher> {
    let mut rng = SeededRng::new(seed, "fisher");
    Ok(PyFisher(estimate_fim(&model.0, &classes, n, &mut rng).map_err(err)?))
}

/// `λ Σ F/2 (θ − anchor)²`.
#[pyfunction]
fn ewc_penalty(theta: &PyCvae, anchor: &PyCvae, fisher: &PyFisher, lam: f64) -> PyResult<f64> {
    train::ewc_penalty(theta.0.params(), anchor.0.params(), &fisher.0, lam).map_err(err)
}

fn train_config(epochs: usize, lam: f64, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        lambda: lam,
        batch_size,
        replay_batch_size: batch_size,
        seed,
        ..TrainConfig::default()
    }
}

/// Trains a fresh model on `dataset` with the same architecture as `like`.
#[pyfunction]
#[pyo3(signature = (dataset, like, epochs=1, batch_size=128, seed=0))]
fn pretrain(dataset: &PyDataset, like: &PyCvae, epochs: usize, batch_size: usize, seed: u64) -> PyResult<PyCvae> {
    let cfg = train_config(epochs, 0.0, batch_size, seed);
    let (m, _) = train::pretrain_on(&dataset.0, like.0.config(), &cfg).map_err(err)?;
    Ok(PyCvae(m))
}

/// Forgets `c_f` toward `surrogate` ("white-noise" or "embed-new") under
/// replay of the other classes except `c_new`.
#[pyfunction]
#[pyo3(signature = (model, dataset, c_f, c_new, surrogate, fisher, epochs=1, lam=100.0, batch_size=128, seed=0))]
#[allow(clippy::too_many_arguments)]
fn forget(
    model: &PyCvae,
    dataset: &PyDataset,
    c_f: usize,
    c_new: usize,
    surrogate: &str,
    fisher: &PyFisher,
    epochs: usize,
    lam: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<PyCvae> {
    let p = data::partition(&dataset.0, c_f, c_new).map_err(err)?;
    let kind = Surrogate::parse(surrogate).map_err(err)?.kind(c_new);
    let cfg = model.0.config();
    let s = data::make_surrogate(
        kind,
        p.n_f(),
        c_f,
        cfg.image_height,
        cfg.image_width,
        Some(&p.d_new),
        &mut SeededRng::new(seed, "surrogate"),
    )
    .map_err(err)?;
    let tc = train_config(epochs, lam, batch_size, seed);
    let (m, _) = train::forget(&model.0, c_f, &p.c_r, &s, &fisher.0, &tc).map_err(err)?;
    Ok(PyCvae(m))
}

/// Teaches `c_new` by "finetune" or "ewc", replaying real retained data.
#[pyfunction]
#[pyo3(signature = (model, dataset, c_f, c_new, method_name, fisher=None, epochs=1, lam=100.0, batch_size=128, seed=0))]
#[allow(clippy::too_many_arguments)]
fn learn_new(
    model: &PyCvae,
    dataset: &PyDataset,
    c_f: usize,
    c_new: usize,
    method_name: &str,
    fisher: Option<&PyFisher>,
    epochs: usize,
    lam: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<PyCvae> {
    let p = data::partition(&dataset.0, c_f, c_new).map_err(err)?;
    let tc = train_config(epochs, lam, batch_size, seed);
    let (m, _) = train::learn_new(
        &model.0,
        &p.d_new,
        RetainedSource::Real(&p.d_r),
        method(method_name)?,
        fisher.map(|f| &f.0),
        &tc,
    )
    .map_err(err)?;
    Ok(PyCvae(m))
}

/// Mean classifier probability of class `c` over `n` samples of `c`. With
/// no classifier the uniform stub is used.
#[pyfunction]
#[pyo3(signature = (model, c, classifier=None, n=1000, seed=0))]
fn class_prob_metric(model: &PyCvae, c: usize, classifier: Option<&PyClassifier>, n: usize, seed: u64) -> PyResult<f64> {
    let uniform = UniformClassifier { num_classes: 10 };
    let cls: &dyn ClassProbabilities = match classifier {
        Some(c) => &c.0,
        None => &uniform,
    };
    eval::class_prob_metric(&model.0, c, cls, n, &mut SeededRng::new(seed, "eval")).map_err(err)
}

/// Staged experiment driven by a TOML config, writing the same files as the CLI.
#[pyclass(name = "Experiment", module = "amnesia", unsendable)]
struct PyExperiment(Exp);

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (config_toml="", force=false))]
    fn new(config_toml: &str, force: bool) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_toml(config_toml).map_err(err)?;
        Ok(Self(Exp::new(cfg, force).map_err(err)?))
    }

    fn pretrain(&self) -> PyResult<Vec<String>> {
        Ok(self.0.cmd_pretrain().map_err(err)?.iter().map(|o| o.path.display().to_string()).collect())
    }

    fn forget(&self) -> PyResult<Vec<String>> {
        Ok(self.0.cmd_forget().map_err(err)?.iter().map(|o| o.path.display().to_string()).collect())
    }

    fn learn(&self) -> PyResult<Vec<String>> {
        Ok(self.0.cmd_learn().map_err(err)?.iter().map(|o| o.path.display().to_string()).collect())
    }

    /// CSV text of the report rows for `stage`.
    #[pyo3(signature = (stage="learn"))]
    fn eval(&self, stage: &str) -> PyResult<String> {
        let rows = self.0.cmd_eval(Stage::parse(stage).map_err(err)?).map_err(err)?;
        eval::rows_to_csv(&rows).map_err(err)
    }

    fn sweep(&self) -> PyResult<String> {
        Ok(self.0.cmd_sweep().map_err(err)?.display().to_string())
    }

    /// Checkpoint path of a pipeline arm.
    #[pyo3(signature = (stage, seed=0, method_name=None, surrogate=None))]
    fn checkpoint(&self, stage: &str, seed: u64, method_name: Option<&str>, surrogate: Option<&str>) -> PyResult<String> {
        let s = surrogate.map(Surrogate::parse).transpose().map_err(err)?;
        let arm = match Stage::parse(stage).map_err(err)? {
            Stage::Pretrain => Arm::pretrained(),
            Stage::Forget => Arm::forgotten(s.ok_or_else(|| PyValueError::new_err("forget needs a surrogate"))?),
            Stage::Learn => Arm::learned(method(method_name.unwrap_or("finetune"))?, s),
        };
        let c = self.0.config();
        Ok(self.0.arm_path(c.c_f, c.c_new, arm, seed).map_err(err)?.display().to_string())
    }
}

#[pymodule]
#[pyo3(name = "amnesia")]
fn amnesia_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCvae>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyFisher>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_diagonal, m)?)?;
    m.add_function(wrap_pyfunction!(ewc_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(forget, m)?)?;
    m.add_function(wrap_pyfunction!(learn_new, m)?)?;
    m.add_function(wrap_pyfunction!(class_prob_metric, m)?)?;
    Ok(())
}
