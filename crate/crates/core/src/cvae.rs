//! One-hot class-conditional VAE with MLP encoder and decoder.
//!
//! The class enters as a one-hot vector concatenated to the encoder input and
//! to the latent code. The concatenation is realized with split weight blocks
//! (`weight_x`/`weight_z` for the continuous part, `weight_c` for the one-hot
//! part), which is the same linear map as one weight over the concatenated
//! vector.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{streams, Bound, ParameterSet, SeededRng, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeConfig {
    pub input_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 784,
            image_height: 28,
            image_width: 28,
            num_classes: 10,
            latent_dim: 32,
            encoder_hidden: vec![512, 256],
            decoder_hidden: vec![256, 512],
        }
    }
}

impl CvaeConfig {
    /// Small architecture for tests: `side × side` images.
    pub fn tiny(side: usize, num_classes: usize, latent_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim: side * side,
            image_height: side,
            image_width: side,
            num_classes,
            latent_dim,
            encoder_hidden: vec![hidden],
            decoder_hidden: vec![hidden],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim != self.image_height * self.image_width || self.input_dim == 0 {
            return Err(Error::config(
                "cvae.input_dim",
                format!(
                    "must equal image_height × image_width ({} × {})",
                    self.image_height, self.image_width
                ),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("cvae.num_classes", "need at least two classes"));
        }
        if self.latent_dim < 1 {
            return Err(Error::config("cvae.latent_dim", "must be at least 1"));
        }
        for (field, widths) in [
            ("cvae.encoder_hidden", &self.encoder_hidden),
            ("cvae.decoder_hidden", &self.decoder_hidden),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::config(field, "need at least one layer, all widths ≥ 1"));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in architectural order, with fan-in used
    /// for initialization.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let c = self.num_classes;
        let mut out = Vec::new();
        let h0 = self.encoder_hidden[0];
        let fan0 = self.input_dim + c;
        out.push(("enc.0.weight_x".into(), vec![self.input_dim, h0], fan0));
        out.push(("enc.0.weight_c".into(), vec![c, h0], fan0));
        out.push(("enc.0.bias".into(), vec![h0], fan0));
        for i in 1..self.encoder_hidden.len() {
            let (a, b) = (self.encoder_hidden[i - 1], self.encoder_hidden[i]);
            out.push((format!("enc.{i}.weight"), vec![a, b], a));
            out.push((format!("enc.{i}.bias"), vec![b], a));
        }
        let last = *self.encoder_hidden.last().expect("validated");
        for head in ["mu", "logvar"] {
            out.push((format!("enc.{head}.weight"), vec![last, self.latent_dim], last));
            out.push((format!("enc.{head}.bias"), vec![self.latent_dim], last));
        }
        let d0 = self.decoder_hidden[0];
        let dfan0 = self.latent_dim + c;
        out.push(("dec.0.weight_z".into(), vec![self.latent_dim, d0], dfan0));
        out.push(("dec.0.weight_c".into(), vec![c, d0], dfan0));
        out.push(("dec.0.bias".into(), vec![d0], dfan0));
        for i in 1..self.decoder_hidden.len() {
            let (a, b) = (self.decoder_hidden[i - 1], self.decoder_hidden[i]);
            out.push((format!("dec.{i}.weight"), vec![a, b], a));
            out.push((format!("dec.{i}.bias"), vec![b], a));
        }
        let dlast = *self.decoder_hidden.last().expect("validated");
        out.push(("dec.out.weight".into(), vec![dlast, self.input_dim], dlast));
        out.push(("dec.out.bias".into(), vec![self.input_dim], dlast));
        out
    }
}

/// Posterior parameters with `logvar` already clamped to
/// `[LOGVAR_MIN, LOGVAR_MAX]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }
}

/// How generated images are produced from decoder outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Per-pixel Bernoulli means.
    #[default]
    Mean,
    /// Stochastic binarization of the means.
    Bernoulli,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: CvaeConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalVAE {
    config: CvaeConfig,
    params: ParameterSet,
}

pub(crate) fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::invalid(format!(
                "class id {c} out of range for {num_classes} classes"
            )));
        }
        data[i * num_classes + c] = 1.0;
    }
    Tensor::new(vec![labels.len().max(1), num_classes], data)
}

impl ConditionalVAE {
    /// Fresh model with weights and biases drawn uniformly from
    /// `±1/sqrt(fan_in)` on the `init` stream of `seed`.
    pub fn new(config: CvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed, streams::INIT);
        let mut params = ParameterSet::new();
        for (name, shape, fan_in) in config.layout() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
            params.insert(&name, Tensor::new(shape, data)?.with_requires_grad(true))?;
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: CvaeConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let names: Vec<&str> = params.names().collect();
        if names.len() != layout.len() {
            return Err(Error::Misaligned(format!(
                "cvae parameters: expected {} tensors, found {}",
                layout.len(),
                names.len()
            )));
        }
        for ((name, shape, _), found) in layout.iter().zip(names) {
            let t = params.get(found).expect("own name");
            if name != found || t.shape() != shape.as_slice() {
                return Err(Error::Misaligned(format!(
                    "cvae parameters: expected `{name}` {shape:?}, found `{found}` {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        self.params.check_aligned(&params, "cvae parameters")?;
        self.params = params;
        Ok(())
    }

    /// Independent deep copy (no shared buffers).
    pub fn snapshot(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.deep_copy(),
        }
    }

    /// SHA-256 of the architecture and every parameter bit pattern.
    pub fn content_hash(&self) -> String {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        hex::encode(Sha256::digest(self.params.to_bytes(&cfg)))
    }

    /// Checkpoint bytes: the parameter container with a JSON header holding
    /// the architecture and caller metadata.
    pub fn to_bytes(&self, meta: serde_json::Value) -> Vec<u8> {
        let header = CheckpointHeader {
            kind: "cvae".into(),
            config: self.config.clone(),
            meta,
        };
        self.params.to_bytes(&serde_json::to_string(&header).expect("header serializes"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let (params, header) = ParameterSet::from_bytes(bytes)?;
        let header: CheckpointHeader = serde_json::from_str(&header).map_err(|e| Error::Parse {
            field: "checkpoint.header".into(),
            offset: 0,
            message: e.to_string(),
        })?;
        if header.kind != "cvae" {
            return Err(Error::Parse {
                field: "checkpoint.header.kind".into(),
                offset: 0,
                message: format!("expected cvae, found {}", header.kind),
            });
        }
        Ok((Self::from_parts(header.config, params)?, header.meta))
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.config.num_classes {
            return Err(Error::invalid(format!(
                "class id {c} out of range for {} classes",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::shape("cvae images", &[x.rows(), self.config.input_dim], x.shape()));
        }
        Ok(())
    }

    // ---- graph builders ---------------------------------------------------

    /// Encoder on the tape: returns `(mu, clamped logvar)` nodes.
    pub fn encode_graph(&self, tape: &mut Tape, bound: &Bound, x: Var, onehot: Var) -> Result<(Var, Var)> {
        let a = tape.affine(x, bound.get("enc.0.weight_x")?, Some(bound.get("enc.0.bias")?))?;
        let c = tape.affine(onehot, bound.get("enc.0.weight_c")?, None)?;
        let pre = tape.add(a, c)?;
        let mut h = tape.relu(pre);
        for i in 1..self.config.encoder_hidden.len() {
            let pre = tape.affine(
                h,
                bound.get(&format!("enc.{i}.weight"))?,
                Some(bound.get(&format!("enc.{i}.bias"))?),
            )?;
            h = tape.relu(pre);
        }
        let mu = tape.affine(h, bound.get("enc.mu.weight")?, Some(bound.get("enc.mu.bias")?))?;
        let raw = tape.affine(h, bound.get("enc.logvar.weight")?, Some(bound.get("enc.logvar.bias")?))?;
        let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, logvar))
    }

    /// Decoder on the tape: returns pre-sigmoid logits.
    pub fn decode_graph(&self, tape: &mut Tape, bound: &Bound, z: Var, onehot: Var) -> Result<Var> {
        let a = tape.affine(z, bound.get("dec.0.weight_z")?, Some(bound.get("dec.0.bias")?))?;
        let c = tape.affine(onehot, bound.get("dec.0.weight_c")?, None)?;
        let pre = tape.add(a, c)?;
        let mut h = tape.relu(pre);
        for i in 1..self.config.decoder_hidden.len() {
            let pre = tape.affine(
                h,
                bound.get(&format!("dec.{i}.weight"))?,
                Some(bound.get(&format!("dec.{i}.bias"))?),
            )?;
            h = tape.relu(pre);
        }
        tape.affine(h, bound.get("dec.out.weight")?, Some(bound.get("dec.out.bias")?))
    }

    /// Per-row KL divergence to the standard normal prior,
    /// `½ Σ (exp(logvar) + mu² − 1 − logvar)`.
    pub fn kl_graph(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
        let var = tape.exp(logvar);
        let mu2 = tape.mul(mu, mu)?;
        let a = tape.add(var, mu2)?;
        let b = tape.sub(a, logvar)?;
        let c = tape.shift(b, -1.0);
        let rows = tape.sum_rows(c);
        Ok(tape.scale(rows, 0.5))
    }

    /// Per-row single-sample ELBO `[batch]` for images `x` conditioned on
    /// `labels`, with reparameterization noise `eps: [batch, latent]`.
    pub fn elbo_graph(&self, tape: &mut Tape, bound: &Bound, x: &Tensor, labels: &[usize], eps: &Tensor) -> Result<Var> {
        self.check_images(x)?;
        if labels.len() != x.rows() {
            return Err(Error::shape("elbo labels", &[x.rows()], &[labels.len()]));
        }
        let xv = tape.constant(x.clone());
        let oh = tape.constant(one_hot(labels, self.config.num_classes)?);
        let (mu, logvar) = self.encode_graph(tape, bound, xv, oh)?;
        let z = tape.reparameterize(mu, logvar, eps.clone())?;
        let logits = self.decode_graph(tape, bound, z, oh)?;
        let recon = tape.bernoulli_log_likelihood(logits, xv)?;
        let kl = Self::kl_graph(tape, mu, logvar)?;
        tape.sub(recon, kl)
    }

    /// `−mean ELBO` over the batch as a scalar node.
    pub fn negative_elbo_graph(&self, tape: &mut Tape, bound: &Bound, x: &Tensor, labels: &[usize], eps: &Tensor) -> Result<Var> {
        let rows = self.elbo_graph(tape, bound, x, labels, eps)?;
        let m = tape.mean(rows);
        Ok(tape.scale(m, -1.0))
    }

    // ---- value-level API ----------------------------------------------------

    pub fn encode_batch(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<LatentGaussian>> {
        self.check_images(x)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params)?;
        let xv = tape.constant(x.clone());
        let oh = tape.constant(one_hot(labels, self.config.num_classes)?);
        let (mu, logvar) = self.encode_graph(&mut tape, &bound, xv, oh)?;
        let (mu, logvar) = (tape.value(mu), tape.value(logvar));
        Ok((0..x.rows())
            .map(|i| LatentGaussian {
                mu: mu.row(i).to_vec(),
                logvar: logvar.row(i).to_vec(),
            })
            .collect())
    }

    /// Posterior parameters for one image `x` (flattened, values in `[0, 1]`).
    pub fn encode(&self, x: &[f64], c: usize) -> Result<LatentGaussian> {
        self.check_class(c)?;
        if x.len() != self.config.input_dim {
            return Err(Error::shape("encode image", &[self.config.input_dim], &[x.len()]));
        }
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.encode_batch(&t, &[c])?.remove(0))
    }

    /// Bernoulli means `[batch, input_dim]` for latent codes `z: [batch, latent]`.
    pub fn decode_batch(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.config.latent_dim || z.rows() != labels.len() {
            return Err(Error::shape("decode latent", &[labels.len(), self.config.latent_dim], z.shape()));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params)?;
        let zv = tape.constant(z.clone());
        let oh = tape.constant(one_hot(labels, self.config.num_classes)?);
        let logits = self.decode_graph(&mut tape, &bound, zv, oh)?;
        let probs = tape.sigmoid(logits);
        Ok(tape.value(probs).clone())
    }

    pub fn decode(&self, z: &[f64], c: usize) -> Result<Vec<f64>> {
        self.check_class(c)?;
        if z.len() != self.config.latent_dim {
            return Err(Error::shape("decode latent", &[self.config.latent_dim], &[z.len()]));
        }
        let t = Tensor::new(vec![1, z.len()], z.to_vec())?;
        Ok(self.decode_batch(&t, &[c])?.into_data())
    }

    /// Single-sample ELBO of one image with given noise.
    pub fn elbo(&self, x: &[f64], c: usize, eps: &[f64]) -> Result<f64> {
        self.check_class(c)?;
        if eps.len() != self.config.latent_dim {
            return Err(Error::shape("elbo noise", &[self.config.latent_dim], &[eps.len()]));
        }
        let xt = Tensor::new(vec![1, self.config.input_dim], x.to_vec())
            .map_err(|_| Error::shape("elbo image", &[self.config.input_dim], &[x.len()]))?;
        let et = Tensor::new(vec![1, eps.len()], eps.to_vec())?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params)?;
        let rows = self.elbo_graph(&mut tape, &bound, &xt, &[c], &et)?;
        Ok(tape.value(rows).data()[0])
    }

    /// `n` generated images of class `c`: `z ~ N(0, I)` then decoder means.
    pub fn sample(&self, c: usize, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        self.sample_with(c, n, rng, SampleMode::Mean)
    }

    pub fn sample_with(&self, c: usize, n: usize, rng: &mut SeededRng, mode: SampleMode) -> Result<Tensor> {
        self.check_class(c)?;
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        self.sample_labels(&vec![c; n], rng, mode)
    }

    /// One generated image per label, drawn in label order.
    pub fn sample_labels(&self, labels: &[usize], rng: &mut SeededRng, mode: SampleMode) -> Result<Tensor> {
        let z = Tensor::new(
            vec![labels.len(), self.config.latent_dim],
            rng.normal_vec(labels.len() * self.config.latent_dim),
        )?;
        let means = self.decode_batch(&z, labels)?;
        match mode {
            SampleMode::Mean => Ok(means),
            SampleMode::Bernoulli => {
                let data = means
                    .data()
                    .iter()
                    .map(|&p| if rng.bernoulli(p) { 1.0 } else { 0.0 })
                    .collect();
                means.with_data(data)
            }
        }
    }
}

/// `z = mu + exp(logvar / 2) ⊙ eps`.
pub fn reparameterize(q: &LatentGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != q.mu.len() || q.logvar.len() != q.mu.len() {
        return Err(Error::shape("reparameterize", &[q.mu.len()], &[eps.len()]));
    }
    Ok(q.mu
        .iter()
        .zip(&q.logvar)
        .zip(eps)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect())
}

/// Closed-form `KL(q ‖ N(0, I)) = −½ Σ (1 + logvar − mu² − exp(logvar))`.
pub fn kl_divergence(q: &LatentGaussian) -> f64 {
    -0.5 * q
        .mu
        .iter()
        .zip(&q.logvar)
        .map(|(m, l)| 1.0 + l - m * m - l.exp())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ConditionalVAE {
        ConditionalVAE::new(CvaeConfig::tiny(3, 4, 2, 5), 11).unwrap()
    }

    fn set_all(model: &mut ConditionalVAE, prefix: &str, value: f64) {
        let names: Vec<String> = model.params().names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
        for n in names {
            let t = model.params_mut().get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    #[test]
    fn default_architecture_matches_documented_sizes() {
        let cfg = CvaeConfig::default();
        let m = ConditionalVAE::new(cfg, 0).unwrap();
        assert_eq!(m.params().get("enc.0.weight_x").unwrap().shape(), &[784, 512]);
        assert_eq!(m.params().get("enc.mu.weight").unwrap().shape(), &[256, 32]);
        assert_eq!(m.params().get("dec.0.weight_z").unwrap().shape(), &[32, 256]);
        assert_eq!(m.params().get("dec.out.weight").unwrap().shape(), &[512, 784]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = CvaeConfig::tiny(3, 4, 2, 5);
        c.latent_dim = 0;
        assert!(c.validate().is_err());
        let mut c = CvaeConfig::tiny(3, 4, 2, 5);
        c.input_dim = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_expose_bias_slices() {
        let mut m = tiny();
        for n in ["enc.mu.weight", "enc.logvar.weight"] {
            m.params_mut().get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m.params_mut().get_mut("enc.mu.bias").unwrap().data_mut().copy_from_slice(&[0.3, -0.2]);
        m.params_mut().get_mut("enc.logvar.bias").unwrap().data_mut().copy_from_slice(&[1.5, -0.5]);
        let q = m.encode(&[0.5; 9], 1).unwrap();
        assert_eq!(q.mu, vec![0.3, -0.2]);
        assert_eq!(q.logvar, vec![1.5, -0.5]);
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let m = tiny();
        let x = [0.1, 0.9, 0.0, 1.0, 0.5, 0.5, 0.2, 0.3, 0.4];
        let a = m.encode(&x, 2).unwrap();
        assert_eq!(a.mu.len(), 2);
        assert_eq!(a, m.encode(&x, 2).unwrap());
    }

    #[test]
    fn encode_errors() {
        let m = tiny();
        assert!(m.encode(&[0.5; 9], 4).is_err());
        assert!(m.encode(&[0.5; 8], 0).is_err());
        assert!(m.encode(&[1.5; 9], 0).is_err());
    }

    #[test]
    fn logvar_is_clamped() {
        let mut m = tiny();
        set_all(&mut m, "enc.logvar.bias", 50.0);
        let q = m.encode(&[0.0; 9], 0).unwrap();
        assert!(q.logvar.iter().all(|&l| l <= LOGVAR_MAX));
    }

    #[test]
    fn reparameterize_examples() {
        let q = LatentGaussian {
            mu: vec![0.5, -1.0],
            logvar: vec![0.0, 0.0],
        };
        assert_eq!(reparameterize(&q, &[0.0, 0.0]).unwrap(), q.mu);
        assert_eq!(reparameterize(&q, &[1.0, 1.0]).unwrap(), vec![1.5, 0.0]);
        assert!(reparameterize(&q, &[1.0]).is_err());
    }

    #[test]
    fn decode_with_zero_output_layer_is_half() {
        let mut m = tiny();
        set_all(&mut m, "dec.out", 0.0);
        let out = m.decode(&[0.3, -2.0], 3).unwrap();
        assert_eq!(out.len(), 9);
        assert!(out.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn decode_outputs_in_open_unit_interval() {
        let m = tiny();
        let out = m.decode(&[3.0, -3.0], 0).unwrap();
        assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(m.decode(&[0.0], 0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&LatentGaussian::standard(4)), 0.0);
        let q = LatentGaussian {
            mu: vec![1.0],
            logvar: vec![0.0],
        };
        assert!((kl_divergence(&q) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_decoder_at_prior_gives_log_half_per_pixel() {
        let mut m = ConditionalVAE::new(CvaeConfig::default(), 5).unwrap();
        set_all(&mut m, "dec.out", 0.0);
        for n in ["enc.mu", "enc.logvar"] {
            set_all(&mut m, n, 0.0);
        }
        let x: Vec<f64> = (0..784).map(|i| (i % 7) as f64 / 6.0).collect();
        let elbo = m.elbo(&x, 3, &[0.7; 32]).unwrap();
        let want = -784.0 * std::f64::consts::LN_2;
        assert!((elbo - want).abs() < 1e-9, "{elbo} vs {want}");
        assert!((want + 543.43).abs() < 0.01);
    }

    #[test]
    fn sample_shape_determinism_and_range() {
        let m = tiny();
        let a = m.sample(1, 3, &mut SeededRng::new(4, streams::EVAL)).unwrap();
        let b = m.sample(1, 3, &mut SeededRng::new(4, streams::EVAL)).unwrap();
        assert_eq!(a.shape(), &[3, 9]);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(m.sample(9, 1, &mut SeededRng::new(4, streams::EVAL)).is_err());
        let bin = m.sample_with(1, 3, &mut SeededRng::new(4, streams::EVAL), SampleMode::Bernoulli).unwrap();
        assert!(bin.data().iter().all(|&p| p == 0.0 || p == 1.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = tiny();
        let bytes = m.to_bytes(serde_json::json!({"stage": "pretrain"}));
        let (back, meta) = ConditionalVAE::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
        assert_eq!(meta["stage"], "pretrain");
        assert!(ConditionalVAE::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn snapshot_is_independent_of_training() {
        let mut m = tiny();
        let snap = m.snapshot();
        let before = snap.params().flatten();
        m.params_mut().get_mut("dec.out.bias").unwrap().data_mut()[0] += 1.0;
        assert_eq!(snap.params().flatten(), before);
    }
}
