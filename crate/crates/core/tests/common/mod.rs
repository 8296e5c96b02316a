//! Finite-difference oracles shared by the gradient suite and the
//! acceptance run.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use triamese::model::TriameseModel;
use triamese::numerics::{Tape, Tensor, Var};
use triamese::rng::stream;
use triamese::vit::ForwardMode;
use triamese::volume::Volume;

pub const H: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

pub type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, &[]);
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(&mut rng))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, absolute when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) < 1e-12 {
        diff
    } else {
        diff / na.max(nb)
    }
}

/// `loss = Σ f(inputs) ∘ R` with a fixed random `R`.
fn loss_value(inputs: &[Tensor<f64>], f: &Op) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars);
    let r = tape.constant(randn(tape.shape(y), 99));
    let weighted = tape.mul(y, r).unwrap();
    let loss = tape.sum(weighted);
    (tape, vars, loss)
}

/// Worst relative error over every input of `f`.
pub fn check_op(inputs: &[Tensor<f64>], f: &Op) -> f64 {
    let (tape, vars, loss) = loss_value(inputs, f);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                perturbed[i].data_mut()[e] += delta;
                let (t, _, l) = loss_value(&perturbed, f);
                t.value(l).data()[0]
            };
            *slot = (eval(H) - eval(-H)) / (2.0 * H);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Every differentiable primitive with fixed random inputs.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Op)> {
    // keep relu inputs away from the kink at zero
    let away = randn(&[10], 5).map(|x| if x.abs() < 0.1 { x + 0.5 } else { x });
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Op)> = vec![
        ("matmul", vec![randn(&[3, 4], 1), randn(&[4, 5], 2)], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("add", vec![randn(&[2, 3], 1), randn(&[2, 3], 2)], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![randn(&[2, 3], 1), randn(&[2, 3], 2)], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![randn(&[2, 3], 1), randn(&[2, 3], 2)], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("mul fan-out", vec![randn(&[4], 1)], Box::new(|t, v| t.mul(v[0], v[0]).unwrap())),
        ("add_row", vec![randn(&[3, 4], 1), randn(&[4], 2)], Box::new(|t, v| t.add_row(v[0], v[1]).unwrap())),
        ("scale", vec![randn(&[5], 1)], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("add_scalar", vec![randn(&[5], 1)], Box::new(|t, v| t.add_scalar(v[0], 0.3))),
        (
            "linear",
            vec![randn(&[2, 3], 1), randn(&[3, 4], 2), randn(&[4], 3)],
            Box::new(|t, v| t.linear(v[0], v[1], v[2]).unwrap()),
        ),
        (
            "layer_norm",
            vec![randn(&[3, 6], 1), randn(&[6], 2), randn(&[6], 3)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        ("gelu", vec![randn(&[10], 4)], Box::new(|t, v| t.gelu(v[0]))),
        ("relu", vec![away], Box::new(|t, v| t.relu(v[0]))),
        (
            "dropout",
            vec![randn(&[20], 6)],
            Box::new(|t, v| t.dropout(v[0], 0.3, &mut stream(7, &[]), true).unwrap()),
        ),
        ("concat0", vec![randn(&[2, 3], 1), randn(&[1, 3], 2)], Box::new(|t, v| t.concat(&[v[0], v[1]], 0).unwrap())),
        ("concat1", vec![randn(&[2, 3], 1), randn(&[2, 2], 2)], Box::new(|t, v| t.concat(&[v[0], v[1]], 1).unwrap())),
        ("slice", vec![randn(&[4, 5], 1)], Box::new(|t, v| t.slice(v[0], 1, 1, 3).unwrap())),
        (
            "split",
            vec![randn(&[4, 5], 1)],
            Box::new(|t, v| {
                let parts = t.split(v[0], 0, &[1, 3]).unwrap();
                let a = t.scale(parts[0], 2.0);
                let a = t.concat(&[a, parts[1]], 0).unwrap();
                t.mul(a, v[0]).unwrap()
            }),
        ),
        ("permute", vec![randn(&[2, 3, 4], 1)], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]).unwrap())),
        ("transpose", vec![randn(&[3, 2], 1)], Box::new(|t, v| t.transpose(v[0]).unwrap())),
        ("sum", vec![randn(&[2, 3], 1)], Box::new(|t, v| t.sum(v[0]))),
    ];
    for axis in 0..2 {
        cases.push(("softmax", vec![randn(&[3, 4], 1)], Box::new(move |t, v| t.softmax(v[0], axis).unwrap())));
    }
    for axis in 0..3 {
        cases.push(("mean", vec![randn(&[2, 3, 4], 1)], Box::new(move |t, v| t.mean(v[0], axis).unwrap())));
    }
    cases
}

/// Squared error of the fused (or view-mean) prediction, forward in train
/// mode with a fixed dropout stream.
fn model_loss(model: &TriameseModel<f64>, volume: &Volume, age: f64) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model
        .forward(&mut tape, &bound, volume, ForwardMode::TRAIN, &mut stream(11, &[]))
        .unwrap();
    let pred = match out.fused {
        Some(f) => f,
        None => {
            let s = tape.concat(&out.views, 1).unwrap();
            tape.mean(s, 1).unwrap()
        }
    };
    let target = tape.constant(Tensor::full(tape.shape(pred).to_vec(), age));
    let d = tape.sub(pred, target).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.sum(sq);
    let leaves = bound.leaves().into_iter().copied().collect();
    (tape, leaves, loss)
}

pub fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = stream(seed, &[]);
    Volume::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Fills zero-initialized tensors with small noise so no gradient is
/// trivially zero.
pub fn perturbed(model: &TriameseModel<f64>) -> TriameseModel<f64> {
    let mut m = model.clone();
    let mut rng = stream(17, &[]);
    for leaf in m.params.leaves_mut() {
        if leaf.data().iter().all(|&v| v == 0.0) {
            for v in leaf.data_mut() {
                *v = 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
    }
    m
}

/// Sampled finite differences over every parameter tensor. Returns the
/// norm-wise relative error over all sampled entries and the worst entry.
pub fn check_model(model: &TriameseModel<f64>, samples_per_tensor: usize) -> (f64, String) {
    let model = &perturbed(model);
    let volume = random_volume(model.config.volume_dims, 21);
    let age = 47.0;
    let (tape, vars, loss) = model_loss(model, &volume, age);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get(*v)).collect();

    let names = model.params.names();
    let mut pick = stream(5, &[]);
    let (mut a_all, mut n_all) = (Vec::new(), Vec::new());
    let mut worst = (0.0, String::new());
    for (t, name) in names.iter().enumerate() {
        let numel = analytic[t].numel();
        for _ in 0..samples_per_tensor.min(numel) {
            let e = pick.random_range(0..numel);
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.leaves_mut()[t].data_mut()[e] += delta;
                let (tp, _, l) = model_loss(&m, &volume, age);
                tp.value(l).data()[0]
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let a = analytic[t].data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if err > worst.0 {
                worst = (err, format!("{name}[{e}]: analytic {a:e} vs numeric {numeric:e}"));
            }
            a_all.push(a);
            n_all.push(numeric);
        }
    }
    (relative_error(&a_all, &n_all), worst.1)
}
