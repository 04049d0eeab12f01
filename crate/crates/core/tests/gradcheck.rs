//! Central finite-difference checks of every tape operation, in f64.

mod common;

use common::{check_op, op_cases, random_tensor, rel_err, rng, FD_EPS};
use jackpot::autograd::Tape;
use jackpot::nn::{ForwardCtx, LayerSpec, Model, ParamKey};
use jackpot::Tensor;
use rand::Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

#[test]
fn every_tape_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_cases() {
        let worst = check_op(&case, INSTANCES);
        if !(worst < TOL) {
            failures.push(format!("{}: {:e}", case.name, worst));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

/// Small conv net with batch norm, pooling and linear head on 8×8 inputs.
fn composite() -> Model<f64> {
    use LayerSpec::*;
    let specs = [
        Conv { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
        BatchNorm,
        Relu,
        MaxPool { kernel: 2, stride: 2 },
        Conv { out_channels: 4, kernel: 3, stride: 1, padding: 0 },
        Relu,
        Flatten,
        Linear { out_features: 5 },
        Relu,
        Linear { out_features: 3 },
    ];
    Model::from_specs(jackpot::nn::Arch::Conv4, &specs, &[2, 8, 8], 3, 11).unwrap()
}

fn model_loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> (f64, Vec<(ParamKey, Vec<f64>)>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, xv, &ForwardCtx::train_dense(model)).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, labels).unwrap();
    let value = tape.value(loss).data()[0];
    let params = out.params.clone();
    let mut grads = tape.backward(loss).unwrap();
    (value, params.into_iter().map(|(k, v)| (k, grads.take(v).unwrap())).collect())
}

#[test]
fn composite_cnn_parameters() {
    let model = composite();
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[4, 2, 8, 8]);
    let labels = [0, 2, 1, 2];
    let (_, grads) = model_loss(&model, &x, &labels);
    assert!(grads.len() >= 10);
    for (key, analytic) in &grads {
        let n = analytic.len();
        // up to 20 sampled coordinates per parameter tensor
        let picks: Vec<usize> = if n <= 20 { (0..n).collect() } else { (0..20).map(|_| r.gen_range(0..n)).collect() };
        let mut a = Vec::new();
        let mut num = Vec::new();
        for &j in &picks {
            let mut plus = model.clone();
            plus.param_mut(*key).unwrap().data_mut()[j] += FD_EPS;
            let mut minus = model.clone();
            minus.param_mut(*key).unwrap().data_mut()[j] -= FD_EPS;
            num.push((model_loss(&plus, &x, &labels).0 - model_loss(&minus, &x, &labels).0) / (2.0 * FD_EPS));
            a.push(analytic[j]);
        }
        let e = rel_err(&a, &num);
        assert!(e < TOL, "{:?}: {e:e}", key);
    }
}

#[test]
fn backward_is_bitwise_repeatable() {
    let model = composite();
    let x = random_tensor(&mut rng(5), &[3, 2, 8, 8]);
    let (la, ga) = model_loss(&model, &x, &[1, 0, 2]);
    let (lb, gb) = model_loss(&model, &x, &[1, 0, 2]);
    assert_eq!(la.to_bits(), lb.to_bits());
    for ((ka, a), (kb, b)) in ga.iter().zip(&gb) {
        assert_eq!(ka, kb);
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
