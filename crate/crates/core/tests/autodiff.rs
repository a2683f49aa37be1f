use amnesia::autodiff::{
    gradient_check, gradient_check_report, optimizer_step, Bound, OptimizerConfig, ParameterSet, SeededRng, Tape,
    Tensor, Var,
};
use amnesia::Result;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn random_params(seed: u64, specs: &[(&str, &[usize])], lo: f64, hi: f64) -> ParameterSet {
    let mut rng = SeededRng::new(seed, "test-params");
    let mut p = ParameterSet::new();
    for (name, shape) in specs {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        p.insert(name, Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true))
            .unwrap();
    }
    p
}

fn check(params: &ParameterSet, f: impl Fn(&mut Tape, &Bound) -> Result<Var>) {
    let report = gradient_check_report(f, params, 1e-6).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{} [{}]: analytic {} numeric {} rel {}",
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric,
        report.max_rel_error
    );
}

fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    // A fixed random projection so every output entry gets a distinct upstream gradient.
    let t = tape.value(v).clone();
    let mut rng = SeededRng::new(seed, "projection");
    let w = tape.constant(t.with_data(rng.uniform_vec(t.len()).iter().map(|u| u - 0.3).collect())?);
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

#[test]
fn unary_primitives_pass_finite_differences() {
    let p = random_params(1, &[("a", &[3, 4])], -2.0, 2.0);
    let ops: Vec<(&str, fn(&mut Tape, Var) -> Var)> = vec![
        ("relu", |t, a| t.relu(a)),
        ("sigmoid", |t, a| t.sigmoid(a)),
        ("tanh", |t, a| t.tanh(a)),
        ("exp", |t, a| t.exp(a)),
        ("scale", |t, a| t.scale(a, -1.7)),
        ("shift", |t, a| t.shift(a, 0.4)),
        ("clamp", |t, a| t.clamp(a, -1.0, 1.0)),
        ("softmax", |t, a| t.softmax(a)),
        ("sum_rows", |t, a| t.sum_rows(a)),
    ];
    for (name, op) in ops {
        eprintln!("checking {name}");
        check(&p, |tape, b| {
            let y = op(tape, b.get("a")?);
            weighted_sum(tape, y, 9)
        });
    }
}

#[test]
fn log_and_reductions_pass_finite_differences() {
    let p = random_params(2, &[("a", &[2, 5])], 0.5, 3.0);
    check(&p, |tape, b| {
        let y = tape.log(b.get("a")?);
        weighted_sum(tape, y, 3)
    });
    check(&p, |tape, b| {
        let a = b.get("a")?;
        let s = tape.mean(a);
        let t = tape.sum(a);
        let q = tape.mul(s, t)?;
        Ok(q)
    });
}

#[test]
fn binary_primitives_pass_finite_differences() {
    let p = random_params(3, &[("a", &[3, 2]), ("b", &[3, 2])], -1.5, 1.5);
    for op in 0..3 {
        check(&p, |tape, b| {
            let (x, y) = (b.get("a")?, b.get("b")?);
            let z = match op {
                0 => tape.add(x, y)?,
                1 => tape.sub(x, y)?,
                _ => tape.mul(x, y)?,
            };
            weighted_sum(tape, z, 4)
        });
    }
}

#[test]
fn affine_passes_finite_differences() {
    let p = random_params(4, &[("x", &[4, 3]), ("w", &[3, 5]), ("b", &[5])], -1.0, 1.0);
    check(&p, |tape, b| {
        let y = tape.affine(b.get("x")?, b.get("w")?, Some(b.get("b")?))?;
        weighted_sum(tape, y, 5)
    });
    check(&p, |tape, b| {
        let y = tape.affine(b.get("x")?, b.get("w")?, None)?;
        weighted_sum(tape, y, 6)
    });
}

#[test]
fn fused_losses_pass_finite_differences() {
    let p = random_params(5, &[("l", &[4, 6]), ("mu", &[4, 6]), ("lv", &[4, 6])], -2.0, 2.0);
    let mut rng = SeededRng::new(5, "targets");
    let target = Tensor::new(vec![4, 6], rng.uniform_vec(24)).unwrap();
    let eps = Tensor::new(vec![4, 6], rng.normal_vec(24)).unwrap();
    check(&p, |tape, b| tape.softmax_cross_entropy(b.get("l")?, &[0, 5, 2, 2]));
    check(&p, |tape, b| {
        let t = tape.constant(target.clone());
        let ll = tape.bernoulli_log_likelihood(b.get("l")?, t)?;
        weighted_sum(tape, ll, 7)
    });
    check(&p, |tape, b| {
        let z = tape.reparameterize(b.get("mu")?, b.get("lv")?, eps.clone())?;
        weighted_sum(tape, z, 8)
    });
}

fn mlp_loss(tape: &mut Tape, b: &Bound, x: &Tensor, labels: &[usize]) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let h = tape.affine(xv, b.get("w1")?, Some(b.get("b1")?))?;
    let h = tape.tanh(h);
    let o = tape.affine(h, b.get("w2")?, Some(b.get("b2")?))?;
    tape.softmax_cross_entropy(o, labels)
}

#[test]
fn weighted_sq_dist_passes_finite_differences() {
    let p = random_params(9, &[("a", &[3, 3])], -1.0, 1.0);
    let mut rng = SeededRng::new(9, "anchor");
    let anchor = Tensor::new(vec![3, 3], rng.normal_vec(9)).unwrap();
    let weight = Tensor::new(vec![3, 3], rng.uniform_vec(9)).unwrap();
    check(&p, |tape, b| tape.weighted_sq_dist(b.get("a")?, &anchor, &weight));
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    let p = random_params(6, &[("w1", &[5, 7]), ("b1", &[7]), ("w2", &[7, 3]), ("b2", &[3])], -0.8, 0.8);
    let mut rng = SeededRng::new(6, "inputs");
    let x = Tensor::new(vec![8, 5], rng.normal_vec(40)).unwrap();
    let labels = [0, 1, 2, 1, 0, 2, 2, 1];
    let err = gradient_check(|t, b| mlp_loss(t, b, &x, &labels), &p, 1e-6).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let run = || {
        let mut p = random_params(7, &[("w1", &[5, 7]), ("b1", &[7]), ("w2", &[7, 3]), ("b2", &[3])], -0.8, 0.8);
        let mut rng = SeededRng::new(7, "inputs");
        let mut opt = amnesia::autodiff::Optimizer::new(OptimizerConfig::adam(1e-2)).unwrap();
        for _ in 0..20 {
            let x = Tensor::new(vec![4, 5], rng.normal_vec(20)).unwrap();
            let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
            let mut tape = Tape::new();
            let b = tape.bind(&p).unwrap();
            let loss = mlp_loss(&mut tape, &b, &x, &labels).unwrap();
            let g = tape.backward(loss).unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        p.flatten()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn loss_with_no_trainable_parameters_is_rejected() {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::scalar(1.0)).unwrap();
    let mut tape = Tape::new();
    let b = tape.bind(&p).unwrap();
    let s = tape.sum(b.get("w").unwrap());
    assert!(tape.backward(s).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_the_loss(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let p = random_params(seed, &[("w", &[2, 3])], -1.0, 1.0);
        let grad = |f: &dyn Fn(&mut Tape, Var) -> Var| {
            let mut tape = Tape::new();
            let bound = tape.bind(&p).unwrap();
            let w = bound.get("w").unwrap();
            let l = f(&mut tape, w);
            tape.backward(l).unwrap().flatten()
        };
        let f1 = |t: &mut Tape, w: Var| { let s = t.sigmoid(w); t.sum(s) };
        let f2 = |t: &mut Tape, w: Var| { let s = t.mul(w, w).unwrap(); t.mean(s) };
        let comb = |t: &mut Tape, w: Var| {
            let x = f1(t, w);
            let y = f2(t, w);
            let xa = t.scale(x, a);
            let yb = t.scale(y, b);
            t.add(xa, yb).unwrap()
        };
        let (g1, g2, gc) = (grad(&f1), grad(&f2), grad(&comb));
        for i in 0..gc.len() {
            let want = a * g1[i] + b * g2[i];
            prop_assert!((gc[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn sgd_with_zero_gradient_is_identity(v in -10.0f64..10.0) {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(v).with_requires_grad(true)).unwrap();
        let out = optimizer_step(&p, &p.zeros_like(), &OptimizerConfig::sgd(0.5)).unwrap();
        prop_assert_eq!(out.flatten(), vec![v]);
    }
}
