#![allow(dead_code)]

use std::path::PathBuf;

use jackpot::autograd::{SteRule, Tape, Var};
use jackpot::criteria::{grasp_hvp, ModelObjective, Objective};
use jackpot::data::{synth_gaussian_classes, Batch};
use jackpot::masking::{threshold_h, BinaryMask};
use jackpot::metrics::mask_overlap;
use jackpot::nn::{build_model, Arch, BnMode, ForwardCtx, LayerSpec, Model, ParamKind, SlotMode};
use jackpot::search::{search_from, SearchConfig};
use jackpot::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar loss `Σ R ⊙ op(inputs)` with a fixed random projection `R`, so every
/// output entry contributes a distinct weight to the checked gradient.
fn projected_loss(tape: &mut Tape<f64>, out: Var, proj: &Tensor<f64>) -> Var {
    let r = tape.constant(proj.clone());
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

/// Largest relative error between the tape's gradient and central finite
/// differences, over all inputs. Relative error is measured per input tensor
/// as `max|a − n| / max(max|a|, max|n|, 1e-8)`.
pub fn gradcheck(inputs: &[Tensor<f64>], proj_seed: u64, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let out_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars);
        t.shape(out).to_vec()
    };
    let proj = random_tensor(&mut rng(proj_seed), &out_shape);
    let loss_at = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars);
        let l = projected_loss(&mut t, out, &proj);
        t.value(l).data()[0]
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let out = build(&mut t, &vars);
    let l = projected_loss(&mut t, out, &proj);
    let grads = t.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            *n = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_EPS);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-8, f64::max);
    diff / scale
}

pub type ShapeFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>>;
pub type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

pub struct OpCase {
    pub name: String,
    pub shapes: ShapeFn,
    pub build: BuildFn,
}

fn case(name: impl Into<String>, shapes: impl Fn(&mut ChaCha8Rng) -> Vec<Vec<usize>> + 'static, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static) -> OpCase {
    OpCase { name: name.into(), shapes: Box::new(shapes), build: Box::new(build) }
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

/// Every tape operation with random-shape generators.
pub fn op_cases() -> Vec<OpCase> {
    let pair = |r: &mut ChaCha8Rng| {
        let s = vec![dim(r, 1, 4), dim(r, 1, 4)];
        vec![s.clone(), s]
    };
    let one = |r: &mut ChaCha8Rng| vec![vec![dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4)]];
    let mut cases = vec![
        case("matmul", |r| {
            let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            vec![vec![m, k], vec![k, n]]
        }, |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("linear", |r| {
            let (b, i, o) = (dim(r, 1, 4), dim(r, 1, 6), dim(r, 1, 5));
            vec![vec![b, i], vec![o, i]]
        }, |t, v| t.linear(v[0], v[1]).unwrap()),
        case("add_bias", |r| {
            let (b, c, s) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3));
            vec![vec![b, c, s, s], vec![c]]
        }, |t, v| t.add_bias(v[0], v[1]).unwrap()),
        case("add", pair, |t, v| t.add(v[0], v[1]).unwrap()),
        case("mul", pair, |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", one, |t, v| t.scale(v[0], -1.7)),
        case("relu", one, |t, v| t.relu(v[0])),
        case("sum", one, |t, v| t.sum(v[0])),
        case("flatten", one, |t, v| t.flatten(v[0]).unwrap()),
        case("reshape", one, |t, v| {
            let n = t.shape(v[0]).iter().product::<usize>();
            t.reshape(v[0], &[n]).unwrap()
        }),
        case("masked_weight", |r| vec![vec![dim(r, 1, 4), dim(r, 1, 5)]], |t, v| {
            let mask: Vec<bool> = (0..t.value(v[0]).len()).map(|i| i % 3 != 1).collect();
            t.masked_weight(v[0], None, &mask, jackpot::autograd::SteRule::WeightScaled).unwrap()
        }),
        case("batch_norm_4d", |r| {
            let (b, c) = (dim(r, 2, 4), dim(r, 1, 3));
            vec![vec![b, c, 2, 2], vec![c], vec![c]]
        }, |t, v| t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap().0),
        case("batch_norm_2d", |r| {
            let c = dim(r, 1, 4);
            vec![vec![dim(r, 3, 6), c], vec![c], vec![c]]
        }, |t, v| t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap().0),
        case("channel_affine", |r| vec![vec![dim(r, 1, 3), 3, dim(r, 1, 3), 2]], |t, v| {
            t.channel_affine(v[0], &[0.5, -2.0, 1.3], &[0.1, 0.0, -0.7]).unwrap()
        }),
    ];
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        cases.push(case(format!("conv2d_s{stride}_p{padding}"), |r| {
            let (b, cin, cout, k) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let hw = dim(r, k, k + 3);
            vec![vec![b, cin, hw, hw + 1], vec![cout, cin, k, k]]
        }, move |t, v| t.conv2d(v[0], v[1], stride, padding).unwrap()));
    }
    for (kernel, stride) in [(2, 2), (3, 1)] {
        cases.push(case(format!("maxpool2d_k{kernel}_s{stride}"), |r| vec![vec![dim(r, 1, 2), dim(r, 1, 3), dim(r, 3, 6), dim(r, 3, 6)]], move |t, v| {
            t.maxpool2d(v[0], kernel, stride).unwrap()
        }));
    }
    for classes in [2usize, 5] {
        cases.push(case(format!("softmax_cross_entropy_c{classes}"), move |r| vec![vec![dim(r, 1, 6), classes]], move |t, v| {
            let b = t.shape(v[0])[0];
            let labels: Vec<usize> = (0..b).map(|i| (i * 7 + 3) % classes).collect();
            t.softmax_cross_entropy(v[0], &labels).unwrap()
        }));
    }
    cases
}

/// Worst relative error of one op over `instances` random instances.
pub fn check_op(case: &OpCase, instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = rng(1000 + i);
        let inputs: Vec<Tensor<f64>> = (case.shapes)(&mut r).iter().map(|s| random_tensor(&mut r, s)).collect();
        worst = worst.max(gradcheck(&inputs, 7 + i, &*case.build));
    }
    worst
}

// ---------------------------------------------------------------- STE rule

fn ste_model() -> Model<f64> {
    use LayerSpec::*;
    let specs = [
        Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
        BatchNorm,
        Relu,
        MaxPool { kernel: 2, stride: 2 },
        Flatten,
        Linear { out_features: 6 },
        Relu,
        Linear { out_features: 3 },
    ];
    Model::from_specs(Arch::Conv4, &specs, &[2, 6, 6], 3, 4).unwrap()
}

/// Weight gradient of the same loss with `mask ⊙ w` substituted as ordinary
/// dense weights: the effective-weight gradient `dL/dE`.
fn effective_weight_grads(model: &Model<f64>, masks: &[BinaryMask], x: &Tensor<f64>, labels: &[usize]) -> Vec<Vec<f64>> {
    let mut effective = model.clone();
    for (w, m) in effective.prunable_weights_mut().into_iter().zip(masks) {
        let applied = m.apply(w).unwrap();
        *w = applied;
    }
    let ctx = ForwardCtx { slots: vec![SlotMode::Dense { train: true }; model.num_prunable()], train_aux: false, bn: BnMode::Eval };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = effective.forward(&mut tape, xv, &ctx).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, labels).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    out.params.iter().filter(|(k, _)| k.kind == ParamKind::Weight).map(|(_, v)| grads.take(*v).unwrap()).collect()
}

fn score_grads(model: &Model<f64>, scores: &[Tensor<f64>], masks: &[BinaryMask], rule: SteRule, x: &Tensor<f64>, labels: &[usize]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, xv, &ForwardCtx::search(scores, masks, rule)).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, labels).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    out.scores.iter().map(|v| grads.take(*v).unwrap()).collect()
}

pub struct SteReport {
    /// max |grad_scores − dL/dE ⊙ w| under the weight-scaled rule
    pub weighted_err: f64,
    /// max |grad_scores − dL/dE| under the identity rule
    pub identity_err: f64,
    /// pruned entries that received a nonzero score gradient
    pub pruned_with_gradient: usize,
}

pub fn ste_check(trials: u64) -> SteReport {
    let model = ste_model();
    let mut rep = SteReport { weighted_err: 0.0, identity_err: 0.0, pruned_with_gradient: 0 };
    for trial in 0..trials {
        let mut r = rng(50 + trial);
        let scores: Vec<Tensor<f64>> = model.prunable_weights().iter().map(|w| random_tensor(&mut r, w.shape()).map(|v| (v + 1.0) / 2.0)).collect();
        let p = [0.3, 0.5, 0.8][trial as usize % 3];
        let masks: Vec<BinaryMask> = scores.iter().map(|s| threshold_h(s, p)).collect();
        let x = random_tensor(&mut r, &[5, 2, 6, 6]);
        let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();
        let de = effective_weight_grads(&model, &masks, &x, &labels);
        let weighted = score_grads(&model, &scores, &masks, SteRule::WeightScaled, &x, &labels);
        let identity = score_grads(&model, &scores, &masks, SteRule::Identity, &x, &labels);
        for (slot, w) in model.prunable_weights().iter().enumerate() {
            for j in 0..w.len() {
                let expect = de[slot][j] * w.data()[j];
                rep.weighted_err = rep.weighted_err.max((weighted[slot][j] - expect).abs());
                rep.identity_err = rep.identity_err.max((identity[slot][j] - de[slot][j]).abs());
                if !masks[slot].bits()[j] && weighted[slot][j] != 0.0 {
                    rep.pruned_with_gradient += 1;
                }
            }
        }
    }
    rep
}

// ------------------------------------------------------- hard sparsity

pub const SPARSITY_PERMILLE: [u64; 4] = [0, 500, 900, 990];
pub const LAYER_SIZES: [usize; 4] = [1, 7, 100, 4096];

/// `floor(p·k)` in integer arithmetic.
pub fn expected_zeros(permille: u64, k: usize) -> usize {
    (permille as usize * k) / 1000
}

/// Runs short searches on MLPs whose first layer has each size in
/// [`LAYER_SIZES`], at every sparsity in [`SPARSITY_PERMILLE`]. Returns the
/// number of (layer, epoch) records whose zero count disagreed with the
/// counting formula; the search itself also fails on any mismatched step.
pub fn sparsity_violations() -> usize {
    let mut bad = 0;
    for (input, hidden) in [(1usize, 1usize), (7, 1), (10, 10), (64, 64)] {
        let k1 = input * hidden;
        let k2 = 3 * hidden;
        let data = synth_gaussian_classes(3, input, 12, 2.0, 0).unwrap();
        let model = build_model::<f64>(Arch::Mlp { hidden }, &[input], 3, 1).unwrap();
        for pm in SPARSITY_PERMILLE {
            let p = pm as f64 / 1000.0;
            let mut cfg = SearchConfig { sparsity: p, epochs: 3, seed: pm, ..SearchConfig::default() };
            cfg.optimizer.lr0 = 0.5;
            cfg.optimizer.batch_size = 8;
            let scores: Vec<Tensor<f64>> = model.prunable_weights().iter().map(|w| random_tensor(&mut rng(pm), w.shape()).map(f64::abs)).collect();
            let out = search_from(&model, &data, &data, &cfg, scores).unwrap();
            bad += usize::from(out.masks[0].pruned_count() != expected_zeros(pm, k1));
            bad += usize::from(out.masks[1].pruned_count() != expected_zeros(pm, k2));
            let global = 1.0 - (k1 + k2 - expected_zeros(pm, k1) - expected_zeros(pm, k2)) as f64 / (k1 + k2) as f64;
            bad += out.history.iter().filter(|h| (h.sparsity - global).abs() > 1e-12).count();
        }
    }
    bad
}

// ------------------------------------------------------- overlap laws

pub fn mask4(bits: u8) -> Vec<BinaryMask> {
    vec![BinaryMask::from_bits(&[4], (0..4).map(|i| bits >> i & 1 == 1).collect()).unwrap()]
}

/// Checks every law on all 256 pairs of 4-bit masks; returns the failures.
pub fn overlap_law_failures() -> Vec<String> {
    let mut fails = Vec::new();
    for a in 0u8..16 {
        for b in 0u8..16 {
            let (ma, mb) = (mask4(a), mask4(b));
            let o = mask_overlap(&ma, &mb).unwrap();
            // brute-force oracle: count agreeing positions
            let agree = (0..4).filter(|i| (a >> i & 1) == (b >> i & 1)).count();
            let mut ok = o == agree as f64 / 4.0 && o == mask_overlap(&mb, &ma).unwrap() && (0.0..=1.0).contains(&o) && (o == 1.0) == (a == b);
            if a == !b & 0xf {
                ok &= o == 0.0;
            }
            let (za, zb) = (4 - a.count_ones(), 4 - b.count_ones());
            if za == zb {
                let p = za as f64 / 4.0;
                ok &= o >= 1.0 - 2.0 * p.min(1.0 - p) - 1e-12;
            }
            if !ok {
                fails.push(format!("{a:04b} vs {b:04b}: {o}"));
            }
        }
    }
    fails
}

// ---------------------------------------------------- Hessian-vector product

/// Explicit Hessian from loss values alone, by second central differences
/// `H_ij ≈ (L(++) − L(+−) − L(−+) + L(−−)) / 4h²`.
fn explicit_hessian(obj: &dyn Objective, w: &[f64], split: usize, h: f64) -> Vec<Vec<f64>> {
    let loss = |v: &[f64]| obj.loss_grad(&[v[..split].to_vec(), v[split..].to_vec()]).unwrap().0;
    let n = w.len();
    let mut hess = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let at = |si: f64, sj: f64| {
                let mut v = w.to_vec();
                v[i] += si * h;
                v[j] += sj * h;
                loss(&v)
            };
            let hij = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h);
            hess[i][j] = hij;
            hess[j][i] = hij;
        }
    }
    hess
}

pub struct HvpReport {
    pub params: usize,
    pub rel_err: f64,
}

/// Finite-difference `Hg` against explicit `H·g` on a 4-5-3 MLP.
pub fn hvp_oracle() -> HvpReport {
    let model = build_model::<f64>(Arch::Mlp { hidden: 5 }, &[4], 3, 9).unwrap();
    let data = synth_gaussian_classes(3, 4, 8, 1.5, 2).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let batches: Vec<Batch<f64>> = idx.chunks(8).map(|c| data.batch::<f64>(c, None)).collect();
    let obj = ModelObjective { model: &model, batches: &batches };
    let blocks: Vec<Vec<f64>> = model.prunable_weights().iter().map(|w| w.to_f64_vec()).collect();
    let split = blocks[0].len();
    let flat: Vec<f64> = blocks.concat();
    let (g, hg) = grasp_hvp(&obj, &blocks, 1e-3).unwrap();
    let (g, hg) = (g.concat(), hg.concat());
    let hess = explicit_hessian(&obj, &flat, split, 1e-4);
    let oracle: Vec<f64> = hess.iter().map(|row| row.iter().zip(&g).map(|(h, g)| h * g).sum()).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = hg.iter().zip(&oracle).map(|(a, b)| a - b).collect();
    assert!(norm(&oracle) > 1e-6, "degenerate oracle");
    HvpReport { params: model.param_count(), rel_err: norm(&diff) / norm(&oracle) }
}
