//! Acceptance run: prints one PASS/FAIL line per check and exits nonzero if
//! any check fails.
//!
//! The first seven checks are fast property checks on tiny models. The rest
//! train real models on MNIST and Fashion-MNIST with the profile in
//! `configs/acceptance.toml` and need both datasets under the data root
//! (`amnesia fetch-data`). Finished stages are cached in
//! `target/acceptance` (override with `AMNESIA_ACCEPTANCE_OUT`), so only the
//! first run is slow.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use amnesia::autodiff::{gradient_check, streams, SeededRng, Tape, Tensor};
use amnesia::cvae::{kl_divergence, reparameterize, ConditionalVAE, CvaeConfig, LatentGaussian};
use amnesia::data::{
    parse_idx, partition, serialize_idx, synthetic_dataset, DatasetName, LabeledDataset, NUM_CLASSES,
};
use amnesia::eval::{class_probabilities, class_prob_stats, metric_from_samples, Classifier, UniformClassifier};
use amnesia::experiment::{resolve_data_root, Arm, Experiment, ExperimentConfig, Surrogate, DATA_ROOT_ENV};
use amnesia::fisher::{draw_generated_samples, estimate_fim, fim_from_samples, FisherDiagonal, FisherSamples};
use amnesia::train::{ewc_penalty, learn_new, objective_graph, pretrain, Method, Penalty, RetainedSource, StageBatch, TrainConfig};

type Outcome = Result<String, String>;

const PROFILE: &str = include_str!("../../../configs/acceptance.toml");

/// `c_f ∈ {7, 8, 9}` against `c_new ∈ {0, 1, 2}`; holds every reference pair
/// used below for both datasets.
const SUB_GRID: [(usize, usize); 9] = [(7, 0), (7, 1), (7, 2), (8, 0), (8, 1), (8, 2), (9, 0), (9, 1), (9, 2)];

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- fast checks -----------------------------------------------------------

fn tiny_batch(seed: u64, n: usize, dim: usize, latent: usize, classes: &[usize]) -> StageBatch {
    let mut rng = SeededRng::new(seed, "batch");
    let x = Tensor::new(vec![n, dim], rng.uniform_vec(n * dim)).unwrap();
    let labels = (0..n).map(|i| classes[i % classes.len()]).collect();
    StageBatch::new(x, labels, latent, &mut rng).unwrap()
}

fn random_fisher(model: &ConditionalVAE, seed: u64) -> FisherDiagonal {
    let mut rng = SeededRng::new(seed, "fisher-values");
    let flat: Vec<f64> = (0..model.params().total_count()).map(|_| rng.uniform()).collect();
    let values = model.params().unflatten(&flat).unwrap();
    let src = FisherDiagonal::constant(model.params(), 0.0).unwrap().source().clone();
    FisherDiagonal::new(values, 1, src).unwrap()
}

fn gradients() -> Outcome {
    let model = ConditionalVAE::new(CvaeConfig::tiny(3, 10, 2, 8), 11).map_err(s)?;
    let mut anchor = model.params().deep_copy();
    let mut rng = SeededRng::new(12, "anchor");
    for (_, t) in anchor.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
    }
    let fisher = random_fisher(&model, 13);
    let penalty = Penalty {
        anchor: &anchor,
        fisher: &fisher,
        lambda: 5.0,
    };
    let main = tiny_batch(1, 6, 9, 2, &[0, 3, 7]);
    let surrogate = tiny_batch(2, 6, 9, 2, &[9]);
    let replay = tiny_batch(3, 6, 9, 2, &[0, 2, 3, 4, 5, 6, 7, 8]);
    let new = tiny_batch(4, 6, 9, 2, &[1]);
    let mut errs = Vec::new();
    errs.push((
        "elbo",
        gradient_check(|t, b| Ok(objective_graph(&model, t, b, &main, None, None)?.total), model.params(), 1e-6)
            .map_err(s)?,
    ));
    errs.push((
        "forget",
        gradient_check(
            |t, b| Ok(objective_graph(&model, t, b, &surrogate, Some((&replay, 1.0)), Some(penalty))?.total),
            model.params(),
            1e-6,
        )
        .map_err(s)?,
    ));
    errs.push((
        "ewc",
        gradient_check(
            |t, b| Ok(objective_graph(&model, t, b, &new, Some((&replay, 1.0)), Some(penalty))?.total),
            model.params(),
            1e-6,
        )
        .map_err(s)?,
    ));
    let cls = Classifier::new(9, 10, &[7], 14).map_err(s)?;
    let labels: Vec<usize> = (0..6).map(|i| (i * 3) % 10).collect();
    errs.push((
        "cross-entropy",
        gradient_check(|t, b| cls.loss_graph(t, b, &main.images, &labels), cls.params(), 1e-6).map_err(s)?,
    ));
    let text = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(errs.iter().all(|(_, e)| *e < 1e-4), format!("relative error above 1e-4: {text}"))?;
    Ok(format!("max relative error: {text}"))
}

fn kl() -> Outcome {
    ensure(kl_divergence(&LatentGaussian::standard(4)) == 0.0, "KL(0, 0) is not exactly 0")?;
    let q = LatentGaussian {
        mu: vec![0.8, -1.3, 0.1],
        logvar: vec![-0.7, 0.4, 1.1],
    };
    let exact = kl_divergence(&q);
    let mut rng = SeededRng::new(21, "kl-mc");
    let draws = 1_000_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let eps = rng.normal_vec(3);
        let z = reparameterize(&q, &eps).map_err(s)?;
        for j in 0..3 {
            total += -0.5 * (q.logvar[j] + eps[j] * eps[j]) + 0.5 * z[j] * z[j];
        }
    }
    let mc = total / draws as f64;
    let rel = (mc - exact).abs() / exact;
    ensure(rel < 0.01, format!("Monte Carlo {mc:.5} vs closed form {exact:.5}"))?;
    Ok(format!("closed form {exact:.5}, 1e6 draws {mc:.5} (rel {rel:.1e}); KL(0,0) = 0"))
}

fn ewc() -> Outcome {
    let arch = CvaeConfig::tiny(3, 10, 2, 8);
    let anchor = ConditionalVAE::new(arch.clone(), 31).map_err(s)?;
    let f = random_fisher(&anchor, 32);
    ensure(ewc_penalty(anchor.params(), anchor.params(), &f, 100.0).map_err(s)? == 0.0, "nonzero at the anchor")?;
    // Offsets from a zero anchor scaled by powers of two are exact, so the
    // quadratic scaling must hold exactly as well.
    let zero = anchor.params().zeros_like();
    let mut rng = SeededRng::new(33, "offset");
    let d: Vec<f64> = (0..anchor.params().total_count()).map(|_| rng.normal()).collect();
    let at = |k: f64| anchor.params().unflatten(&d.iter().map(|v| k * v).collect::<Vec<_>>()).unwrap();
    let p1 = ewc_penalty(&at(0.25), &zero, &f, 3.0).map_err(s)?;
    let p2 = ewc_penalty(&at(0.5), &zero, &f, 3.0).map_err(s)?;
    let p4 = ewc_penalty(&at(1.0), &zero, &f, 3.0).map_err(s)?;
    ensure(p2 == 4.0 * p1 && p4 == 16.0 * p1, format!("penalties {p1} {p2} {p4} not quadratic"))?;
    let double = ewc_penalty(&at(0.5), &zero, &f, 6.0).map_err(s)?;
    ensure(double == 2.0 * p2, "not linear in lambda")?;

    let data = synthetic_dataset(20, 3, 34).map_err(s)?;
    let p = partition(&data, 9, 1).map_err(s)?;
    let cfg = |lambda: f64| TrainConfig {
        epochs: 3,
        batch_size: 16,
        replay_batch_size: 16,
        lambda,
        seed: 35,
        ..TrainConfig::default()
    };
    let (m, _) = pretrain(&p, &arch, &cfg(0.0)).map_err(s)?;
    let fisher = estimate_fim(&m, &p.c_r, 20, &mut SeededRng::new(36, streams::FISHER)).map_err(s)?;
    let real = RetainedSource::Real(&p.d_r);
    let (ft, _) = learn_new(&m, &p.d_new, real, Method::FineTune, None, &cfg(0.0)).map_err(s)?;
    let (e0, _) = learn_new(&m, &p.d_new, real, Method::Ewc, Some(&fisher), &cfg(0.0)).map_err(s)?;
    ensure(ft == e0, "lambda = 0 EWC diverged from fine-tuning")?;
    Ok("zero at anchor, exact quadratic scaling, lambda = 0 EWC equals fine-tuning bit for bit".into())
}

fn brute_force_fisher(model: &ConditionalVAE, smp: &FisherSamples) -> Vec<f64> {
    let mut acc = vec![0.0; model.params().total_count()];
    for i in 0..smp.len() {
        let mut tape = Tape::new();
        let b = tape.bind(model.params()).unwrap();
        let x = Tensor::from_rows(&[smp.images.row(i).to_vec()]).unwrap();
        let e = Tensor::from_rows(&[smp.eps.row(i).to_vec()]).unwrap();
        let elbo = model.elbo_graph(&mut tape, &b, &x, &[smp.labels[i]], &e).unwrap();
        let l = tape.sum(elbo);
        for (a, g) in acc.iter_mut().zip(tape.backward(l).unwrap().flatten()) {
            *a += g * g;
        }
    }
    acc.iter().map(|a| a / smp.len() as f64).collect()
}

fn fisher() -> Outcome {
    let m = ConditionalVAE::new(CvaeConfig::tiny(3, 10, 2, 6), 41).map_err(s)?;
    let smp = draw_generated_samples(&m, &[0, 2, 5, 8], 23, &mut SeededRng::new(42, "fisher")).map_err(s)?;
    let f = fim_from_samples(&m, &smp, 1.0).map_err(s)?.flatten();
    ensure(f.iter().all(|&v| v >= 0.0), "negative entry")?;
    let want = brute_force_fisher(&m, &smp);
    ensure(
        f.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()),
        "batched estimate differs from the one-at-a-time oracle",
    )?;
    let mut worst: f64 = 0.0;
    for k in [2.0, -3.0, 0.5] {
        let scaled = fim_from_samples(&m, &smp, k).map_err(s)?.flatten();
        for (a, b) in scaled.iter().zip(&f) {
            if *b > 0.0 {
                worst = worst.max((a - k * k * b).abs() / (k * k * b));
            }
        }
    }
    ensure(worst <= 1e-12, format!("k^2 scaling off by {worst:.1e}"))?;
    Ok(format!("{} entries nonnegative, equal to the oracle bit for bit, k^2 scaling within {worst:.1e}", f.len()))
}

/// Correctly rounded mean in 2^-116 fixed point, for values in [2^-40, 1].
fn fixed_point_mean(values: &[f64]) -> f64 {
    const FRAC: i32 = 116;
    let mut total: u128 = 0;
    for &v in values {
        assert!((2f64.powi(-40)..=1.0).contains(&v));
        let bits = v.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i32 - 1075;
        let mant = (bits & ((1 << 52) - 1)) | (1 << 52);
        total += (mant as u128) << (FRAC + exp);
    }
    let n = values.len() as u128;
    let (q, rem) = (total / n, total % n);
    let drop = 128 - q.leading_zeros() as i32 - 53;
    let kept = q >> drop;
    let dropped = q & ((1u128 << drop) - 1);
    let half = 1u128 << (drop - 1);
    let up = dropped > half || (dropped == half && (rem != 0 || kept & 1 == 1));
    (kept + up as u128) as f64 * 2f64.powi(drop - FRAC)
}

fn metric() -> Outcome {
    let m = ConditionalVAE::new(CvaeConfig::tiny(3, 10, 2, 6), 51).map_err(s)?;
    let data = synthetic_dataset(20, 3, 52).map_err(s)?;
    let cls = amnesia::eval::train_classifier(
        &data,
        0.0,
        &amnesia::eval::ClassifierConfig {
            hidden: vec![16],
            epochs: 5,
            batch_size: 16,
            ..Default::default()
        },
    )
    .map_err(s)?;
    let samples = m.sample(4, 500, &mut SeededRng::new(53, "eval")).map_err(s)?;
    let got = metric_from_samples(&samples, 4, &cls).map_err(s)?.mean;
    let each: Vec<f64> = (0..samples.rows())
        .map(|i| {
            let one = Tensor::from_rows(&[samples.row(i).to_vec()]).unwrap();
            class_probabilities(&one, 4, &cls).unwrap()[0]
        })
        .collect();
    let want = fixed_point_mean(&each);
    ensure(got.to_bits() == want.to_bits(), format!("metric {got:e} vs oracle {want:e}"))?;
    let stub = UniformClassifier { num_classes: 10 };
    for c in 0..NUM_CLASSES {
        let u = class_prob_stats(&m, c, &stub, 1000, &mut SeededRng::new(c as u64, "eval")).map_err(s)?;
        ensure(u.mean == 0.1, format!("uniform stub gives {} on class {c}", u.mean))?;
    }
    Ok(format!("recorded set mean {got:.6} equals the exact oracle; uniform stub exactly 0.1"))
}

fn partition_checks(data: &LabeledDataset) -> Result<(), String> {
    let counts = data.class_counts();
    for c_f in 0..NUM_CLASSES {
        for c_new in (0..NUM_CLASSES).filter(|&n| n != c_f) {
            let p = partition(data, c_f, c_new).map_err(s)?;
            let c_r: Vec<usize> = (0..NUM_CLASSES).filter(|&c| c != c_f && c != c_new).collect();
            let tag = format!("{} ({c_f},{c_new})", data.name());
            ensure(p.c_r == c_r, format!("{tag}: c_r {:?}", p.c_r))?;
            ensure(p.n_f() + p.n_r() + p.n_new() == data.len(), format!("{tag}: sizes do not add up"))?;
            ensure(p.n_f() == counts[c_f] && p.n_new() == counts[c_new], format!("{tag}: class sizes"))?;
            ensure(p.d_f.labels().iter().all(|&l| l as usize == c_f), format!("{tag}: D_f labels"))?;
            ensure(p.d_new.labels().iter().all(|&l| l as usize == c_new), format!("{tag}: D_new labels"))?;
            ensure(
                p.d_r.labels().iter().all(|&l| l as usize != c_f && l as usize != c_new),
                format!("{tag}: D_r labels"),
            )?;
            let keep_order = |d: &LabeledDataset, pred: &dyn Fn(usize) -> bool| {
                let idx: Vec<usize> = (0..data.len()).filter(|&i| pred(data.label(i))).collect();
                idx.len() == d.len() && idx.iter().enumerate().all(|(j, &i)| d.image(j) == data.image(i))
            };
            ensure(keep_order(&p.d_f, &|l| l == c_f), format!("{tag}: D_f images"))?;
            ensure(keep_order(&p.d_new, &|l| l == c_new), format!("{tag}: D_new images"))?;
            ensure(keep_order(&p.d_r, &|l| l != c_f && l != c_new), format!("{tag}: D_r images"))?;
        }
    }
    Ok(())
}

fn partitions(root: &Path) -> Outcome {
    let mut done = Vec::new();
    for name in [DatasetName::Mnist, DatasetName::FashionMnist] {
        let img = std::fs::read(name.image_file(root)).map_err(|e| format!("{name}: {e} (run `amnesia fetch-data`)"))?;
        let lab = std::fs::read(name.label_file(root)).map_err(|e| format!("{name}: {e}"))?;
        let data = parse_idx(&img, &lab, name.as_str()).map_err(s)?;
        let (img2, lab2) = serialize_idx(&data);
        ensure(img2 == img && lab2 == lab, format!("{name}: IDX round trip changed the bytes"))?;
        partition_checks(&data)?;
        done.push(format!("{name} {}", data.len()));
    }
    let syn = synthetic_dataset(7, 4, 61).map_err(s)?;
    let (img, lab) = serialize_idx(&syn);
    let (img2, lab2) = serialize_idx(&parse_idx(&img, &lab, "synthetic").map_err(s)?);
    ensure(img2 == img && lab2 == lab, "synthetic IDX round trip changed the bytes")?;
    partition_checks(&syn)?;
    Ok(format!("90 pairs on {}; IDX bytes round-trip exactly", done.join(" and ")))
}

const TINY: &str = r#"
c_f = 9
c_new = 1
seeds = [0]
fisher_samples = 10
eval_samples = 20
pairs = [[9, 1]]

[model]
input_dim = 16
image_height = 4
image_width = 4
num_classes = 10
latent_dim = 2
encoder_hidden = [8]
decoder_hidden = [8]

[pretrain]
epochs = 2
batch_size = 16

[forget]
epochs = 1
batch_size = 16
replay_batch_size = 16

[learn]
epochs = 1
batch_size = 16
replay_batch_size = 16

[classifier]
hidden = [16]
epochs = 20
batch_size = 16
"#;

fn tiny_pipeline(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let data_root = dir.join("data");
    let (img, lab) = serialize_idx(&synthetic_dataset(20, 4, 71).map_err(s)?);
    std::fs::create_dir_all(DatasetName::Mnist.dir(&data_root)).map_err(s)?;
    std::fs::write(DatasetName::Mnist.image_file(&data_root), img).map_err(s)?;
    std::fs::write(DatasetName::Mnist.label_file(&data_root), lab).map_err(s)?;
    let mut cfg = ExperimentConfig::from_toml(TINY).map_err(s)?;
    cfg.out = dir.join("out");
    cfg.data_root = Some(data_root);
    Experiment::new(cfg, false).map_err(s)?.cmd_sweep().map_err(s)?;
    let mut files = BTreeMap::new();
    let out = dir.join("out");
    let mut stack = vec![out.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(s)? {
            let p = e.map_err(s)?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".prov.json") {
                let rel = p.strip_prefix(&out).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).map_err(s)?);
            }
        }
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(s)?, tempfile::tempdir().map_err(s)?);
    let fa = tiny_pipeline(a.path())?;
    let fb = tiny_pipeline(b.path())?;
    let ckpts = fa.keys().filter(|k| k.ends_with(".ckpt")).count();
    let reports = fa.keys().filter(|k| k.starts_with("mnist/reports/")).count();
    ensure(ckpts >= 9 && reports >= 9, format!("only {ckpts} checkpoints and {reports} reports"))?;
    ensure(fa.keys().eq(fb.keys()), "the two runs wrote different file sets")?;
    for (k, v) in &fa {
        ensure(fb[k] == *v, format!("{k} differs between runs"))?;
    }
    Ok(format!("{} files ({ckpts} checkpoints, {reports} reports) bit-identical across two runs", fa.len()))
}

// ---- trained runs ------------------------------------------------------------

struct Runs {
    mnist: Experiment,
    fashion: Experiment,
    mnist_cls: Classifier,
    fashion_cls: Classifier,
}

const FULL_MNIST: [(usize, usize); 4] = [(9, 1), (9, 2), (8, 2), (8, 1)];
const FULL_FASHION: [(usize, usize); 1] = [(9, 0)];

fn profile(dataset: DatasetName, out: &Path, root: &Path) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::from_toml(PROFILE).map_err(s)?;
    cfg.dataset = dataset;
    cfg.out = out.to_path_buf();
    cfg.data_root = Some(root.to_path_buf());
    cfg.pairs = SUB_GRID.to_vec();
    cfg.c_f = 9;
    cfg.c_new = if dataset == DatasetName::Mnist { 1 } else { 0 };
    Ok(cfg)
}

/// Trains and scores what the checks below read. Reference pairs get every
/// arm; the other sub-grid pairs only the white-noise EWC pair of arms.
fn train_all(exp: &Experiment, cls: &Classifier, full: &[(usize, usize)]) -> Result<(), String> {
    let seeds = exp.config().seeds.clone();
    for &seed in &seeds {
        for &(f, n) in &SUB_GRID {
            let t = Instant::now();
            exp.run_pretrain(n, seed).map_err(s)?;
            let mut arms = Vec::new();
            if full.contains(&(f, n)) {
                for sur in [Surrogate::EmbedNew, Surrogate::WhiteNoise] {
                    exp.run_forget(f, n, sur, seed).map_err(s)?;
                    arms.push(Arm::forgotten(sur));
                }
                for m in [Method::FineTune, Method::Ewc] {
                    for pm in [None, Some(Surrogate::EmbedNew), Some(Surrogate::WhiteNoise)] {
                        exp.run_learn(f, n, pm, m, seed).map_err(s)?;
                        arms.push(Arm::learned(m, pm));
                    }
                }
            } else {
                exp.run_forget(f, n, Surrogate::WhiteNoise, seed).map_err(s)?;
                for pm in [None, Some(Surrogate::WhiteNoise)] {
                    exp.run_learn(f, n, pm, Method::Ewc, seed).map_err(s)?;
                    arms.push(Arm::learned(Method::Ewc, pm));
                }
            }
            for arm in arms {
                exp.run_eval(f, n, arm, seed, cls).map_err(s)?;
            }
            eprintln!("  {} ({f},{n}) seed {seed}: {:.0?}", exp.config().dataset, t.elapsed());
        }
    }
    Ok(())
}

fn prepare(out: &Path, root: &Path) -> Result<Runs, String> {
    let mnist = Experiment::new(profile(DatasetName::Mnist, out, root)?, false).map_err(s)?;
    let fashion = Experiment::new(profile(DatasetName::FashionMnist, out, root)?, false).map_err(s)?;
    let mnist_cls = mnist.classifier().map_err(s)?;
    let fashion_cls = fashion.classifier().map_err(s)?;
    train_all(&mnist, &mnist_cls, &FULL_MNIST)?;
    train_all(&fashion, &fashion_cls, &FULL_FASHION)?;
    Ok(Runs {
        mnist,
        fashion,
        mnist_cls,
        fashion_cls,
    })
}

#[derive(Clone, Copy, Default)]
struct Mean {
    m_cf: f64,
    m_cr: f64,
    m_cnew: f64,
}

/// Seed-averaged scores of one arm.
fn mean(exp: &Experiment, cls: &Classifier, pair: (usize, usize), arm: Arm) -> Result<Mean, String> {
    let seeds = &exp.config().seeds;
    let mut acc = Mean::default();
    for &seed in seeds {
        let r = exp.run_eval(pair.0, pair.1, arm, seed, cls).map_err(s)?.row;
        acc.m_cf += r.m_cf;
        acc.m_cr += r.m_cr_mean;
        acc.m_cnew += r.m_cnew;
    }
    let k = seeds.len() as f64;
    Ok(Mean {
        m_cf: acc.m_cf / k,
        m_cr: acc.m_cr / k,
        m_cnew: acc.m_cnew / k,
    })
}

fn forgetting(r: &Runs) -> Outcome {
    let m = mean(&r.mnist, &r.mnist_cls, (9, 1), Arm::forgotten(Surrogate::EmbedNew))?;
    let text = format!("MNIST (9,1) embed-new: c_f {:.3} (<= 0.15), c_r {:.3} (>= 0.85)", m.m_cf, m.m_cr);
    ensure(m.m_cf <= 0.15 && m.m_cr >= 0.85, text.clone())?;
    Ok(text)
}

fn embed_gain(r: &Runs) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for method in [Method::FineTune, Method::Ewc] {
        let base = mean(&r.mnist, &r.mnist_cls, (9, 1), Arm::learned(method, None))?.m_cnew;
        let pm = mean(&r.mnist, &r.mnist_cls, (9, 1), Arm::learned(method, Some(Surrogate::EmbedNew)))?.m_cnew;
        ok &= pm - base >= 0.05;
        parts.push(format!("{} {base:.3} -> {pm:.3} ({:+.3})", method.tag(), pm - base));
    }
    let text = format!("MNIST (9,1) c_new with embed-new forgetting, gain >= 0.05: {}", parts.join("; "));
    ensure(ok, text.clone())?;
    Ok(text)
}

fn table_wins(r: &Runs) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for method in [Method::FineTune, Method::Ewc] {
        for sur in [Surrogate::EmbedNew, Surrogate::WhiteNoise] {
            let mut wins = 0;
            for pair in FULL_MNIST {
                let base = mean(&r.mnist, &r.mnist_cls, pair, Arm::learned(method, None))?.m_cnew;
                let pm = mean(&r.mnist, &r.mnist_cls, pair, Arm::learned(method, Some(sur)))?.m_cnew;
                wins += (pm > base) as usize;
            }
            ok &= wins >= 3;
            parts.push(format!("{}+{} {wins}/4", method.tag(), sur.tag()));
        }
    }
    let text = format!("MNIST reference pairs where forgetting first raises c_new (need 3/4 each): {}", parts.join(", "));
    ensure(ok, text.clone())?;
    Ok(text)
}

fn fashion_table(r: &Runs) -> Outcome {
    let pm = mean(&r.fashion, &r.fashion_cls, (9, 0), Arm::learned(Method::FineTune, Some(Surrogate::EmbedNew)))?;
    let base = mean(&r.fashion, &r.fashion_cls, (9, 0), Arm::learned(Method::FineTune, None))?;
    let text = format!(
        "Fashion (ankle boot, T-shirt) finetune+embed-new: c_f {:.3} (<= 0.10), c_new {:.3} vs finetune {:.3}",
        pm.m_cf, pm.m_cnew, base.m_cnew
    );
    ensure(pm.m_cf <= 0.10 && pm.m_cnew > base.m_cnew, text.clone())?;
    Ok(text)
}

fn sub_grids(r: &Runs) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for exp in [&r.mnist, &r.fashion] {
        let m = exp.matrix(Method::Ewc, Surrogate::WhiteNoise).map_err(s)?;
        let cells = SUB_GRID.iter().filter(|&&(f, n)| m.get(f, n).is_some()).count();
        ensure(cells == SUB_GRID.len(), format!("{}: only {cells} of 9 cells", exp.config().dataset))?;
        let (pos, neg) = m.sign_counts();
        ok &= pos > neg;
        parts.push(format!("{} +{pos}/-{neg}", exp.config().dataset));
    }
    let text = format!("3x3 delta sub-grids, ewc+white-noise: {}", parts.join(", "));
    ensure(ok, text.clone())?;
    Ok(text)
}

fn grid_artifact(r: &Runs, out: &Path) -> Outcome {
    let exp = &r.fashion;
    let seed = exp.config().seeds[0];
    let ckpt = exp
        .arm_path(9, 0, Arm::learned(Method::Ewc, Some(Surrogate::WhiteNoise)), seed)
        .map_err(s)?;
    let png = out.join("fashion-grid-ewc-white-noise.png");
    let g = exp.grid(&ckpt, seed, &png, Some(&r.fashion_cls)).map_err(s)?;
    let f = &g.rows[9];
    let weakest = g
        .rows
        .iter()
        .filter(|row| row.class != 9 && row.class != 0)
        .min_by(|a, b| a.metric.total_cmp(&b.metric))
        .unwrap();
    let text = format!(
        "{}: c_f pixel std {:.3} vs data {:.3}; weakest c_r row class {} metric {:.3} (> 0.5)",
        png.display(),
        f.pixel_std,
        f.reference_pixel_std,
        weakest.class,
        weakest.metric
    );
    ensure(f.pixel_std > f.reference_pixel_std && weakest.metric > 0.5, text.clone())?;
    Ok(text)
}

// ---- driver -------------------------------------------------------------------

fn run(id: usize, name: &str, failures: &mut usize, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => {
            *failures += 1;
            ("FAIL", d)
        }
    };
    println!("{tag} {id:>2} {name}: {detail} [{:.1?}]", t.elapsed());
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn main() {
    let mut failures = 0;
    run(1, "gradients", &mut failures, gradients);
    run(2, "kl", &mut failures, kl);
    run(3, "ewc penalty", &mut failures, ewc);
    run(4, "fisher", &mut failures, fisher);
    run(5, "metric", &mut failures, metric);

    let ws = workspace();
    let mut probe = ExperimentConfig::default();
    if std::env::var_os(DATA_ROOT_ENV).is_none() {
        probe.data_root = Some(ws.join("data"));
    }
    let root = resolve_data_root(&probe);
    run(6, "partitions and idx", &mut failures, || partitions(&root));
    run(7, "determinism", &mut failures, determinism);

    let out = std::env::var_os("AMNESIA_ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| ws.join("target/acceptance"));
    let t = Instant::now();
    let runs = catch_unwind(AssertUnwindSafe(|| prepare(&out, &root)))
        .unwrap_or_else(|_| Err("training panicked".to_string()));
    eprintln!("trained runs ready in {:.0?}", t.elapsed());
    let checks: [(usize, &str, fn(&Runs) -> Outcome); 5] = [
        (8, "forgetting", forgetting),
        (9, "embed-new gain", embed_gain),
        (10, "mnist reference pairs", table_wins),
        (11, "fashion reference pair", fashion_table),
        (12, "delta sub-grids", sub_grids),
    ];
    match &runs {
        Ok(r) => {
            for (id, name, f) in checks {
                run(id, name, &mut failures, || f(r));
            }
            run(13, "sample grid", &mut failures, || grid_artifact(r, &out));
        }
        Err(e) => {
            for (id, name, _) in checks {
                run(id, name, &mut failures, || Err(format!("no trained runs: {e}")));
            }
            run(13, "sample grid", &mut failures, || Err(format!("no trained runs: {e}")));
        }
    }
    if failures > 0 {
        println!("{failures} check(s) failed");
        std::process::exit(1);
    }
    println!("all checks passed");
}
