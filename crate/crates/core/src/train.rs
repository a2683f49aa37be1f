//! Pretraining, forgetting under generative replay, and learning a new class
//! by fine-tuning or elastic weight consolidation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{streams, Bound, Optimizer, OptimizerConfig, ParameterSet, SeededRng, Tape, Tensor, Var};
use crate::cvae::{ConditionalVAE, CvaeConfig, SampleMode};
use crate::data::{DataPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Penalty strength; ignored by stages without a penalty.
    pub lambda: f64,
    /// Retained-class examples per step; 0 disables the retained term.
    pub replay_batch_size: usize,
    /// Weight of the retained term relative to the main data term.
    pub replay_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            lambda: 100.0,
            replay_batch_size: 128,
            replay_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config(format!("{stage}.epochs"), "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config(format!("{stage}.batch_size"), "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("{stage}.lambda"), "must be finite and ≥ 0"));
        }
        if !(self.replay_weight >= 0.0 && self.replay_weight.is_finite()) {
            return Err(Error::config(format!("{stage}.replay_weight"), "must be finite and ≥ 0"));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::config(format!("{stage}.optimizer"), e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    #[serde(alias = "finetune")]
    FineTune,
    Ewc,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::FineTune => "finetune",
            Method::Ewc => "ewc",
        }
    }
}

/// Mean loss terms over one epoch's steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    /// `−ELBO` on the stage's own data (pretraining set, surrogate set or new class).
    pub data: f64,
    /// `−ELBO` on retained-class examples (replayed or real).
    pub retained: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub epochs: Vec<EpochTrace>,
    pub steps: usize,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

/// One minibatch with its reparameterization noise.
#[derive(Clone, Debug, PartialEq)]
pub struct StageBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub eps: Tensor,
}

impl StageBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, latent: usize, noise: &mut SeededRng) -> Result<Self> {
        let n = labels.len();
        Ok(Self {
            images,
            labels,
            eps: Tensor::new(vec![n, latent], noise.normal_vec(n * latent))?,
        })
    }
}

/// Anchor and Fisher weights of a quadratic penalty.
#[derive(Clone, Copy, Debug)]
pub struct Penalty<'a> {
    pub anchor: &'a ParameterSet,
    pub fisher: &'a FisherDiagonal,
    pub lambda: f64,
}

/// `λ Σ_i (F_i / 2)(θ_i − anchor_i)²`. Terms are summed in sorted order so
/// the value does not depend on how parameters are arranged.
pub fn ewc_penalty(theta: &ParameterSet, anchor: &ParameterSet, fisher: &FisherDiagonal, lambda: f64) -> Result<f64> {
    theta.check_aligned(anchor, "penalty anchor")?;
    fisher.check_aligned(theta)?;
    let mut terms: Vec<f64> = theta
        .flatten()
        .iter()
        .zip(anchor.flatten())
        .zip(fisher.flatten())
        .map(|((&t, a), f)| 0.5 * f * (t - a) * (t - a))
        .collect();
    terms.sort_by(f64::total_cmp);
    Ok(lambda * terms.iter().sum::<f64>())
}

/// The penalty as a differentiable node over the bound parameters.
pub fn ewc_penalty_graph(tape: &mut Tape, bound: &Bound, params: &ParameterSet, penalty: Penalty<'_>) -> Result<Var> {
    params.check_aligned(penalty.anchor, "penalty anchor")?;
    penalty.fisher.check_aligned(params)?;
    let mut total: Option<Var> = None;
    for (name, anchor) in penalty.anchor.iter() {
        let weight = penalty.fisher.get(name).expect("aligned");
        let term = tape.weighted_sq_dist(bound.get(name)?, anchor, weight)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("penalty over an empty parameter set"))?;
    Ok(tape.scale(total, 0.5 * penalty.lambda))
}

/// Built stage objective: the total plus its parts for logging.
pub struct Objective {
    pub total: Var,
    pub data: Var,
    pub retained: Option<Var>,
    pub penalty: Option<Var>,
}

/// `−mean ELBO(data) − w · mean ELBO(retained) + penalty`.
pub fn objective_graph(
    model: &ConditionalVAE,
    tape: &mut Tape,
    bound: &Bound,
    data: &StageBatch,
    retained: Option<(&StageBatch, f64)>,
    penalty: Option<Penalty<'_>>,
) -> Result<Objective> {
    let d = model.negative_elbo_graph(tape, bound, &data.images, &data.labels, &data.eps)?;
    let mut total = d;
    let mut r_var = None;
    if let Some((batch, weight)) = retained {
        let r = model.negative_elbo_graph(tape, bound, &batch.images, &batch.labels, &batch.eps)?;
        let rw = tape.scale(r, weight);
        total = tape.add(total, rw)?;
        r_var = Some(r);
    }
    let mut p_var = None;
    if let Some(p) = penalty {
        let pv = ewc_penalty_graph(tape, bound, model.params(), p)?;
        total = tape.add(total, pv)?;
        p_var = Some(pv);
    }
    Ok(Objective {
        total,
        data: d,
        retained: r_var,
        penalty: p_var,
    })
}

/// `n` labeled samples from a frozen model, classes uniform over `retained`.
pub fn generative_replay_batch(
    frozen: &ConditionalVAE,
    retained: &[usize],
    n: usize,
    rng: &mut SeededRng,
) -> Result<(Tensor, Vec<usize>)> {
    if retained.is_empty() {
        return Err(Error::invalid("replay needs at least one retained class"));
    }
    let labels: Vec<usize> = (0..n).map(|_| retained[rng.below(retained.len())]).collect();
    let images = frozen.sample_labels(&labels, rng, SampleMode::Mean)?;
    Ok((images, labels))
}

/// Source of retained-class examples during a stage.
#[derive(Clone, Copy, Debug)]
pub enum Retained<'a> {
    None,
    /// Samples from a frozen model over these classes.
    Replay { frozen: &'a ConditionalVAE, classes: &'a [usize] },
    /// Real images, cycled in a shuffled order.
    Real(&'a LabeledDataset),
}

struct RetainedStream<'a> {
    source: Retained<'a>,
    rng: SeededRng,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> RetainedStream<'a> {
    fn new(source: Retained<'a>, seed: u64) -> Result<Self> {
        if let Retained::Real(d) = source {
            if d.is_empty() {
                return Err(Error::invalid("real retained set is empty"));
            }
        }
        Ok(Self {
            source,
            rng: SeededRng::new(seed, streams::REPLAY),
            order: Vec::new(),
            pos: 0,
        })
    }

    fn next(&mut self, n: usize) -> Result<Option<(Tensor, Vec<usize>)>> {
        if n == 0 {
            return Ok(None);
        }
        match self.source {
            Retained::None => Ok(None),
            Retained::Replay { frozen, classes } => generative_replay_batch(frozen, classes, n, &mut self.rng).map(Some),
            Retained::Real(data) => {
                let mut idx = Vec::with_capacity(n);
                while idx.len() < n {
                    if self.pos == self.order.len() {
                        self.order = (0..data.len()).collect();
                        self.rng.shuffle(&mut self.order);
                        self.pos = 0;
                    }
                    let take = (n - idx.len()).min(self.order.len() - self.pos);
                    idx.extend_from_slice(&self.order[self.pos..self.pos + take]);
                    self.pos += take;
                }
                data.batch(&idx).map(Some)
            }
        }
    }
}

/// The shared minibatch loop. Each epoch is one shuffled pass over `data`.
fn run_stage(
    stage: &str,
    model: &mut ConditionalVAE,
    data: &LabeledDataset,
    retained: Retained<'_>,
    penalty: Option<(&ParameterSet, &FisherDiagonal)>,
    config: &TrainConfig,
) -> Result<StageRecord> {
    config.validate(stage)?;
    if data.is_empty() {
        return Err(Error::invalid(format!("{stage}: training set is empty")));
    }
    if data.image_dim() != model.config().input_dim {
        return Err(Error::shape(
            format!("{stage} images"),
            &[model.config().input_dim],
            &[data.image_dim()],
        ));
    }
    let start = Instant::now();
    let latent = model.config().latent_dim;
    let mut shuffle = SeededRng::new(config.seed, streams::BATCH_SHUFFLE);
    let mut noise = SeededRng::new(config.seed, streams::REPARAM_NOISE);
    let mut retained = RetainedStream::new(retained, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut grads = model.params().zeros_like();
    let use_penalty = penalty.filter(|_| config.lambda > 0.0);
    let mut record = StageRecord {
        stage: stage.to_string(),
        epochs: Vec::with_capacity(config.epochs),
        steps: 0,
        wall_time_secs: 0.0,
        seed: config.seed,
        config: config.clone(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        shuffle.shuffle(&mut order);
        let mut trace = EpochTrace::default();
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = data.batch(chunk)?;
            let main = StageBatch::new(images, labels, latent, &mut noise)?;
            let side = match retained.next(config.replay_batch_size)? {
                Some((images, labels)) => Some(StageBatch::new(images, labels, latent, &mut noise)?),
                None => None,
            };
            let mut tape = Tape::new();
            let bound = tape.bind(model.params())?;
            let obj = objective_graph(
                model,
                &mut tape,
                &bound,
                &main,
                side.as_ref().map(|b| (b, config.replay_weight)),
                use_penalty.map(|(anchor, fisher)| Penalty {
                    anchor,
                    fisher,
                    lambda: config.lambda,
                }),
            )?;
            let total = tape.value(obj.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("{stage}: loss became {total}")));
            }
            trace.data += tape.value(obj.data).item();
            trace.retained += obj.retained.map_or(0.0, |v| tape.value(v).item());
            trace.penalty += obj.penalty.map_or(0.0, |v| tape.value(v).item());
            grads.zero();
            tape.backward_into(obj.total, &mut grads)?;
            drop(tape);
            opt.step(model.params_mut(), &grads)?;
            steps += 1;
        }
        let s = steps as f64;
        trace.data /= s;
        trace.retained /= s;
        trace.penalty /= s;
        record.epochs.push(trace);
        record.steps += steps;
    }
    if !model.params().all_finite() {
        return Err(Error::NonFinite(format!("{stage}: parameters are not finite")));
    }
    record.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Plain ELBO training of `model` on `data` (no retained term, no penalty).
pub fn fit(model: &ConditionalVAE, data: &LabeledDataset, config: &TrainConfig) -> Result<(ConditionalVAE, StageRecord)> {
    let mut m = model.snapshot();
    let rec = run_stage("fit", &mut m, data, Retained::None, None, config)?;
    Ok((m, rec))
}

/// A fresh model trained on `D_f ∪ D_r`; the new class stays unseen.
pub fn pretrain(
    partition: &DataPartition,
    arch: &CvaeConfig,
    config: &TrainConfig,
) -> Result<(ConditionalVAE, StageRecord)> {
    let train = partition.pretrain_set()?;
    pretrain_on(&train, arch, config)
}

pub fn pretrain_on(
    train: &LabeledDataset,
    arch: &CvaeConfig,
    config: &TrainConfig,
) -> Result<(ConditionalVAE, StageRecord)> {
    if train.is_empty() {
        return Err(Error::invalid("pretrain: training set is empty"));
    }
    let mut model = ConditionalVAE::new(arch.clone(), config.seed)?;
    let rec = run_stage("pretrain", &mut model, train, Retained::None, None, config)?;
    Ok((model, rec))
}

/// Retrains the `c_f` conditioning toward `surrogate` images while replaying
/// `retained` classes from a frozen copy of `model` and holding parameters
/// near it with the Fisher penalty.
pub fn forget(
    model: &ConditionalVAE,
    c_f: usize,
    retained: &[usize],
    surrogate: &LabeledDataset,
    fisher: &FisherDiagonal,
    config: &TrainConfig,
) -> Result<(ConditionalVAE, StageRecord)> {
    if c_f >= model.config().num_classes {
        return Err(Error::config("c_f", format!("class {c_f} is not a model class")));
    }
    if retained.contains(&c_f) {
        return Err(Error::config("c_f", "forgotten class is listed as retained"));
    }
    if surrogate.labels().iter().any(|&l| l as usize != c_f) {
        return Err(Error::invalid("surrogate images must all be labeled c_f"));
    }
    fisher.check_aligned(model.params())?;
    let frozen = model.snapshot();
    let mut m = model.snapshot();
    let source = if config.replay_batch_size > 0 {
        Retained::Replay {
            frozen: &frozen,
            classes: retained,
        }
    } else {
        Retained::None
    };
    let rec = run_stage(
        "forget",
        &mut m,
        surrogate,
        source,
        Some((frozen.params(), fisher)),
        config,
    )?;
    Ok((m, rec))
}

/// Where retained-class examples come from while learning the new class.
#[derive(Clone, Copy, Debug)]
pub enum RetainedSource<'a> {
    Real(&'a LabeledDataset),
    Replay(&'a [usize]),
}

/// Teaches `d_new` to `model`. `FineTune` uses the data terms only; `Ewc`
/// adds the Fisher penalty anchored at `model`.
pub fn learn_new(
    model: &ConditionalVAE,
    d_new: &LabeledDataset,
    retained: RetainedSource<'_>,
    method: Method,
    fisher: Option<&FisherDiagonal>,
    config: &TrainConfig,
) -> Result<(ConditionalVAE, StageRecord)> {
    if d_new.is_empty() {
        return Err(Error::invalid("learn: new-class set is empty"));
    }
    let c_new = d_new.label(0);
    if d_new.labels().iter().any(|&l| l as usize != c_new) {
        return Err(Error::invalid("learn: new-class set holds more than one class"));
    }
    match retained {
        RetainedSource::Real(d) if d.labels().iter().any(|&l| l as usize == c_new) => {
            return Err(Error::config("c_new", "new class collides with a retained class"));
        }
        RetainedSource::Replay(cs) if cs.contains(&c_new) => {
            return Err(Error::config("c_new", "new class collides with a retained class"));
        }
        _ => {}
    }
    let penalty_fisher = match method {
        Method::FineTune => None,
        Method::Ewc => {
            let f = fisher.ok_or_else(|| Error::invalid("EWC needs a Fisher diagonal"))?;
            f.check_aligned(model.params())?;
            Some(f)
        }
    };
    let frozen = model.snapshot();
    let mut m = model.snapshot();
    let source = match retained {
        RetainedSource::Real(d) => Retained::Real(d),
        RetainedSource::Replay(classes) => Retained::Replay {
            frozen: &frozen,
            classes,
        },
    };
    let stage = format!("learn-{}", method.tag());
    let rec = run_stage(
        &stage,
        &mut m,
        d_new,
        source,
        penalty_fisher.map(|f| (frozen.params(), f)),
        config,
    )?;
    Ok((m, rec))
}
